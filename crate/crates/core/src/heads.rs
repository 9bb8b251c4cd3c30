//! Prediction heads on the dense features: per-point splat properties, the
//! colour/semantic projectors applied to rendered feature maps, and the
//! point reconstruction head.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamStore, Real, Tape, Tensor, Var};
use crate::error::{contract, Result};
use crate::nn::{Init, Mlp};

pub const SCALE_MIN: f64 = 1e-4;
pub const SCALE_MAX: f64 = 0.5;
/// Fixed splat properties used when geometry is not predicted.
pub const CONSTANT_OPACITY: f64 = 1.0;
pub const CONSTANT_SCALE: f64 = 0.001;
pub const CONSTANT_ROTATION: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplatMode {
    /// Opacity, scale and rotation come from the network.
    Learned,
    /// Opacity 1, scale 0.001, identity rotation; only features are predicted.
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadsConfig {
    pub d_dense: usize,
    pub hidden: usize,
    /// Splat feature width K.
    pub k_feat: usize,
    /// Semantic embedding width S.
    pub s_sem: usize,
    pub proj_hidden: usize,
    pub recon_hidden: usize,
    /// Predict a per-splat offset from the point coordinates.
    pub offset_head: bool,
    /// Initial splat scale in scene units.
    pub scale_init: f64,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self {
            d_dense: 64,
            hidden: 64,
            k_feat: 32,
            s_sem: 16,
            proj_hidden: 32,
            recon_hidden: 32,
            offset_head: false,
            scale_init: 0.01,
        }
    }
}

impl HeadsConfig {
    fn splat_width(&self, mode: SplatMode) -> usize {
        let offset = if self.offset_head { 3 } else { 0 };
        match mode {
            SplatMode::Learned => 1 + 3 + 4 + self.k_feat + offset,
            SplatMode::Constant => self.k_feat + offset,
        }
    }

    fn splat(&self, mode: SplatMode) -> Mlp {
        Mlp::new("heads.splat", &[self.d_dense, self.hidden, self.splat_width(mode)], false)
    }

    fn color(&self) -> Mlp {
        Mlp::new("heads.color", &[self.k_feat, self.proj_hidden, 3], false)
    }

    fn semantic(&self) -> Mlp {
        Mlp::new("heads.semantic", &[self.k_feat, self.proj_hidden, self.s_sem], false)
    }

    fn recon(&self) -> Mlp {
        Mlp::new("heads.recon", &[self.d_dense, self.recon_hidden, 6], false)
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, mode: SplatMode) -> Result<()> {
        let mut bias = Vec::new();
        if mode == SplatMode::Learned {
            bias.push(0.0);
            bias.extend([self.scale_init.ln(); 3]);
            bias.extend(CONSTANT_ROTATION);
        }
        bias.resize(self.splat_width(mode), 0.0);
        self.splat(mode).init(store, rng, &Init::Scaled { gain: 0.1, bias })?;
        self.color().init(store, rng, &Init::Zero)?;
        self.semantic().init(store, rng, &Init::Zero)?;
        self.recon().init(store, rng, &Init::Zero)
    }
}

/// One splat per dense point.
#[derive(Clone, Copy, Debug)]
pub struct SplatVars {
    pub means: Var,
    pub rotation: Var,
    pub scale: Var,
    pub opacity: Var,
    pub features: Var,
}

/// `P_dense → G`. `coords` are the dense point positions `[N,3]`.
pub fn predict_gaussians<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &HeadsConfig,
    dense: Var,
    coords: Var,
    mode: SplatMode,
) -> Result<SplatVars> {
    let n = tape.value(dense).rows();
    if tape.value(dense).shape() != [n, cfg.d_dense] || tape.value(coords).shape() != [n, 3] {
        return Err(contract("predict_gaussians: dense features and coordinates disagree"));
    }
    let out = cfg.splat(mode).forward(tape, store, dense)?;
    let (opacity, scale, rotation, feat_at) = match mode {
        SplatMode::Learned => {
            let logit = tape.slice_cols(out, 0, 1)?;
            let opacity = tape.sigmoid(logit)?;
            let raw = tape.slice_cols(out, 1, 3)?;
            let raw = tape.clamp(raw, SCALE_MIN.ln(), SCALE_MAX.ln())?;
            let scale = tape.exp(raw)?;
            let q = tape.slice_cols(out, 4, 4)?;
            let rotation = tape.normalize_rows(q)?;
            (opacity, scale, rotation, 8)
        }
        SplatMode::Constant => {
            let opacity = tape.constant(Tensor::full(&[n, 1], T::of(CONSTANT_OPACITY)));
            let scale = tape.constant(Tensor::full(&[n, 3], T::of(CONSTANT_SCALE)));
            let rotation = tape.constant(Tensor::from_fn(&[n, 4], |i| T::of(CONSTANT_ROTATION[i % 4])));
            (opacity, scale, rotation, 0)
        }
    };
    let features = tape.slice_cols(out, feat_at, cfg.k_feat)?;
    let means = if cfg.offset_head {
        let off = tape.slice_cols(out, feat_at + cfg.k_feat, 3)?;
        let off = tape.scale(off, 0.01)?;
        tape.add(coords, off)?
    } else {
        coords
    };
    Ok(SplatVars {
        means,
        rotation,
        scale,
        opacity,
        features,
    })
}

/// Rendered features `[P,K]` → (colour in `[0,1]` `[P,3]`, semantics `[P,S]`).
pub fn project_feature_map<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &HeadsConfig,
    features: Var,
) -> Result<(Var, Var)> {
    if tape.value(features).cols() != cfg.k_feat {
        return Err(contract("project_feature_map: feature width differs from K"));
    }
    let c = cfg.color().forward(tape, store, features)?;
    let rgb = tape.sigmoid(c)?;
    let sem = cfg.semantic().forward(tape, store, features)?;
    Ok((rgb, sem))
}

/// Dense features → (coordinates as offsets from `coords`, colours in `[0,1]`).
pub fn reconstruct_points<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &HeadsConfig,
    dense: Var,
    coords: Var,
) -> Result<(Var, Var)> {
    let out = cfg.recon().forward(tape, store, dense)?;
    let off = tape.slice_cols(out, 0, 3)?;
    let points = tape.add(coords, off)?;
    let c = tape.slice_cols(out, 3, 3)?;
    let colors = tape.sigmoid(c)?;
    Ok((points, colors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{gradcheck_with, Coverage, DEFAULT_STEP};
    use rand::{Rng, SeedableRng};

    fn small_cfg() -> HeadsConfig {
        HeadsConfig {
            d_dense: 5,
            hidden: 6,
            k_feat: 4,
            s_sem: 3,
            proj_hidden: 5,
            recon_hidden: 4,
            offset_head: false,
            scale_init: 0.02,
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn set_splat_bias(store: &mut ParamStore<f64>, bias: &[f64]) {
        let w = store.get_mut("heads.splat.1.weight").unwrap();
        w.value.data_mut().iter_mut().for_each(|x| *x = 0.0);
        store.get_mut("heads.splat.1.bias").unwrap().value.data_mut().copy_from_slice(bias);
    }

    #[test]
    fn constant_mode_uses_fixed_properties() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        cfg.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0), SplatMode::Constant).unwrap();
        let mut tape = Tape::<f64>::new();
        let dense = tape.input(random(&[7, 5], 1));
        let coords = tape.constant(random(&[7, 3], 2));
        let g = predict_gaussians(&mut tape, &store, &cfg, dense, coords, SplatMode::Constant).unwrap();
        for i in 0..7 {
            assert_eq!(tape.value(g.opacity).row(i), &[1.0]);
            assert_eq!(tape.value(g.scale).row(i), &[0.001; 3]);
            assert_eq!(tape.value(g.rotation).row(i), &[1.0, 0.0, 0.0, 0.0]);
        }
        assert!(!tape.requires_grad(g.opacity) && !tape.requires_grad(g.scale) && !tape.requires_grad(g.rotation));
        assert!(tape.requires_grad(g.features));
        // no opacity/scale/rotation outputs exist in constant mode
        assert_eq!(store.value("heads.splat.1.weight").unwrap().shape(), &[6, 4]);
    }

    #[test]
    fn activations_normalize_and_clamp() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        cfg.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0), SplatMode::Learned).unwrap();
        let mut bias = vec![0.0, 0.7f64.ln(), 1e-6f64.ln(), 0.1f64.ln(), 2.0, 0.0, 0.0, 0.0];
        bias.extend([0.0; 4]);
        set_splat_bias(&mut store, &bias);
        let mut tape = Tape::<f64>::new();
        let dense = tape.input(random(&[3, 5], 3));
        let coords = tape.constant(random(&[3, 3], 4));
        let g = predict_gaussians(&mut tape, &store, &cfg, dense, coords, SplatMode::Learned).unwrap();
        let s = tape.value(g.scale).row(0);
        assert!((s[0] - 0.5).abs() < 1e-12);
        assert!((s[1] - 1e-4).abs() < 1e-16);
        assert!((s[2] - 0.1).abs() < 1e-12);
        assert_eq!(tape.value(g.rotation).row(0), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(tape.value(g.opacity).row(0), &[0.5]);
        assert_eq!(tape.value(g.means).data(), tape.value(coords).data());
    }

    #[test]
    fn outputs_stay_in_range_for_extreme_raw_values() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        cfg.init(&mut store, &mut ChaCha8Rng::seed_from_u64(5), SplatMode::Learned).unwrap();
        store
            .get_mut("heads.splat.1.weight")
            .unwrap()
            .value
            .data_mut()
            .iter_mut()
            .for_each(|w| *w *= 1e3);
        let mut tape = Tape::<f64>::new();
        let dense = tape.input(random(&[20, 5], 6).map(|x| x * 10.0));
        let coords = tape.constant(Tensor::zeros(&[20, 3]));
        let g = predict_gaussians(&mut tape, &store, &cfg, dense, coords, SplatMode::Learned).unwrap();
        assert!(tape.value(g.opacity).data().iter().all(|&o| (0.0..=1.0).contains(&o)));
        assert!(tape.value(g.scale).data().iter().all(|&s| (SCALE_MIN * 0.999..=SCALE_MAX * 1.001).contains(&s)));
        for q in tape.value(g.rotation).data().chunks(4) {
            let n: f64 = q.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_initialised_projectors_and_recon() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        cfg.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0), SplatMode::Learned).unwrap();
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::zeros(&[9, 4]));
        let (rgb, sem) = project_feature_map(&mut tape, &store, &cfg, f).unwrap();
        assert!(tape.value(rgb).data().iter().all(|&c| c == 0.5));
        assert!(tape.value(sem).data().iter().all(|&c| c == 0.0));
        let dense = tape.constant(random(&[9, 5], 1));
        let coords = tape.constant(random(&[9, 3], 2));
        let (p, c) = reconstruct_points(&mut tape, &store, &cfg, dense, coords).unwrap();
        assert_eq!(tape.value(p).data(), tape.value(coords).data());
        assert!(tape.value(c).data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn projectors_act_per_pixel() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        cfg.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0), SplatMode::Learned).unwrap();
        for (_, e) in store.iter_mut() {
            let mut rng = ChaCha8Rng::seed_from_u64(e.value.numel() as u64);
            e.value.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        }
        let x = random(&[6, 4], 9);
        let perm = [3, 0, 5, 1, 4, 2];
        let xp = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(x);
        let b = tape.constant(xp);
        let (ra, sa) = project_feature_map(&mut tape, &store, &cfg, a).unwrap();
        let (rb, sb) = project_feature_map(&mut tape, &store, &cfg, b).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(tape.value(ra).row(i), tape.value(rb).row(k));
            assert_eq!(tape.value(sa).row(i), tape.value(sb).row(k));
        }
    }

    #[test]
    fn heads_gradcheck() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        cfg.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0), SplatMode::Learned).unwrap();
        // move the zero-initialised layers off zero so every path is exercised
        for (_, e) in store.iter_mut() {
            let mut rng = ChaCha8Rng::seed_from_u64(e.value.numel() as u64 + 17);
            e.value.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.5..0.5));
        }
        let dense = random(&[5, 5], 11);
        let w = random(&[5, 20], 12);
        let errs = gradcheck_with(
            |t, v| {
                let coords = t.constant(Tensor::zeros(&[5, 3]));
                let g = predict_gaussians(t, &store, &cfg, v[0], coords, SplatMode::Learned)?;
                let (rgb, sem) = project_feature_map(t, &store, &cfg, g.features)?;
                let (p, c) = reconstruct_points(t, &store, &cfg, v[0], coords)?;
                let all = t.concat_cols(&[g.opacity, g.scale, g.rotation, rgb, sem, p, c])?;
                let wv = t.constant(w.clone());
                let m = t.mul(all, wv)?;
                t.sum_all(m)
            },
            &[dense],
            DEFAULT_STEP,
            Coverage::All,
        )
        .unwrap();
        assert!(errs[0] < 1e-4, "{errs:?}");
    }
}

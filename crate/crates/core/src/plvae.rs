//! Point-wise latent VAE over the sparse latent points.
//!
//! A shared per-point backbone feeds an attention-pooled global descriptor
//! and a per-point local descriptor; their concatenation drives two heads
//! that emit Gaussian posteriors over latent features `z_f` and latent
//! coordinates `z_p`. Samples are decoded back to sparse coordinates and
//! features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamStore, Real, Tape, Tensor, Var};
use crate::error::{contract, Result};
use crate::nn::{linear, init_linear, Init, Mlp};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlvaeConfig {
    /// Width of the incoming sparse features.
    pub d_sparse: usize,
    pub hidden: usize,
    /// Latent feature dimensions per point.
    pub z_f: usize,
    /// Predict `μp` as an offset from the input coordinates.
    pub residual_mu_p: bool,
    /// Initial bias of every log-variance output.
    pub logvar_init: f64,
    /// Gain applied to the Glorot init of the posterior heads.
    pub head_gain: f64,
}

impl Default for PlvaeConfig {
    fn default() -> Self {
        Self {
            d_sparse: 64,
            hidden: 64,
            z_f: 32,
            residual_mu_p: true,
            logvar_init: -4.0,
            head_gain: 0.1,
        }
    }
}

impl PlvaeConfig {
    fn backbone(&self) -> Mlp {
        Mlp::new("plvae.psi", &[3 + self.d_sparse, self.hidden, self.hidden], true)
    }

    fn local(&self) -> Mlp {
        Mlp::new("plvae.local", &[self.hidden, self.hidden], true)
    }

    fn phi_f(&self) -> Mlp {
        Mlp::new("plvae.phi_f", &[2 * self.hidden, self.hidden, 2 * self.z_f], false)
    }

    fn phi_p(&self) -> Mlp {
        Mlp::new("plvae.phi_p", &[2 * self.hidden, self.hidden, 6], false)
    }

    fn dec_embed(&self) -> Mlp {
        Mlp::new("plvae.dec_embed", &[self.z_f + 3, self.hidden, self.hidden], true)
    }

    fn dec_out(&self) -> Mlp {
        Mlp::new("plvae.dec_out", &[2 * self.hidden, self.hidden, 3 + self.d_sparse], false)
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.backbone().init(store, rng, &Init::Glorot)?;
        // zero scores make the first pooling a plain mean
        init_linear(store, rng, "plvae.score", self.hidden, 1, &Init::Zero)?;
        self.local().init(store, rng, &Init::Glorot)?;
        let head = |means: usize| {
            let mut bias = vec![0.0; means];
            bias.extend(std::iter::repeat_n(self.logvar_init, means));
            Init::Scaled {
                gain: self.head_gain,
                bias,
            }
        };
        self.phi_f().init(store, rng, &head(self.z_f))?;
        self.phi_p().init(store, rng, &head(3))?;
        self.dec_embed().init(store, rng, &Init::Glorot)?;
        self.dec_out().init(
            store,
            rng,
            &Init::Scaled {
                gain: self.head_gain,
                bias: vec![0.0; 3 + self.d_sparse],
            },
        )
    }
}

/// Posterior parameters per sparse point.
#[derive(Clone, Copy, Debug)]
pub struct Posterior {
    pub mu_f: Var,
    pub logvar_f: Var,
    pub mu_p: Var,
    pub logvar_p: Var,
    /// Attention-pooled descriptor `[1, hidden]`.
    pub global: Var,
}

/// `P_sparse → (μf, log σf², μp, log σp²)`.
pub fn encode<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &PlvaeConfig,
    coords: Var,
    features: Var,
) -> Result<Posterior> {
    let (cs, fs) = (tape.value(coords).shape().to_vec(), tape.value(features).shape().to_vec());
    if cs.len() != 2 || cs[1] != 3 || fs != [cs[0], cfg.d_sparse] {
        return Err(contract(format!(
            "plvae encode: expected coords [M,3] and features [M,{}], got {cs:?} and {fs:?}",
            cfg.d_sparse
        )));
    }
    let m = cs[0];
    let x = tape.concat_cols(&[coords, features])?;
    let psi = cfg.backbone().forward(tape, store, x)?;
    let scores = linear(tape, store, "plvae.score", psi)?;
    let global = tape.attention_pool(scores, psi)?;
    let local = cfg.local().forward(tape, store, psi)?;
    let g = tape.broadcast_rows(global, m)?;
    let h = tape.concat_cols(&[g, local])?;

    let f = cfg.phi_f().forward(tape, store, h)?;
    let mu_f = tape.slice_cols(f, 0, cfg.z_f)?;
    let lv_f = tape.slice_cols(f, cfg.z_f, cfg.z_f)?;
    let logvar_f = tape.clamp(lv_f, LOGVAR_MIN, LOGVAR_MAX)?;

    let p = cfg.phi_p().forward(tape, store, h)?;
    let delta = tape.slice_cols(p, 0, 3)?;
    let mu_p = if cfg.residual_mu_p {
        tape.add(coords, delta)?
    } else {
        delta
    };
    let lv_p = tape.slice_cols(p, 3, 3)?;
    let logvar_p = tape.clamp(lv_p, LOGVAR_MIN, LOGVAR_MAX)?;
    Ok(Posterior {
        mu_f,
        logvar_f,
        mu_p,
        logvar_p,
        global,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleMode {
    /// `ε ~ N(0, I)` from a generator seeded with `seed`.
    Stochastic { seed: u64 },
    /// `ε = 0`, so `z = μ`.
    Deterministic,
}

#[derive(Clone, Debug)]
pub struct LatentSample<T> {
    pub z_f: Var,
    pub z_p: Var,
    pub eps_f: Tensor<T>,
    pub eps_p: Tensor<T>,
}

fn draw<T: Real>(rng: &mut Option<ChaCha8Rng>, shape: &[usize]) -> Tensor<T> {
    match rng {
        Some(rng) => Tensor::from_fn(shape, |_| {
            let e: f64 = StandardNormal.sample(rng);
            T::of(e)
        }),
        None => Tensor::zeros(shape),
    }
}

fn sample_one<T: Real>(tape: &mut Tape<T>, mu: Var, logvar: Var, eps: &Tensor<T>) -> Result<Var> {
    let half = tape.scale(logvar, 0.5)?;
    let sigma = tape.exp(half)?;
    let e = tape.constant(eps.clone());
    let noise = tape.mul(sigma, e)?;
    tape.add(mu, noise)
}

/// `z = μ + exp(½ log σ²) ⊙ ε`, feature noise drawn before coordinate noise.
pub fn reparameterize<T: Real>(tape: &mut Tape<T>, post: &Posterior, mode: SampleMode) -> Result<LatentSample<T>> {
    let mut rng = match mode {
        SampleMode::Stochastic { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        SampleMode::Deterministic => None,
    };
    let eps_f = draw(&mut rng, tape.value(post.mu_f).shape());
    let eps_p = draw(&mut rng, tape.value(post.mu_p).shape());
    if rng.is_none() {
        return Ok(LatentSample {
            z_f: post.mu_f,
            z_p: post.mu_p,
            eps_f,
            eps_p,
        });
    }
    let z_f = sample_one(tape, post.mu_f, post.logvar_f, &eps_f)?;
    let z_p = sample_one(tape, post.mu_p, post.logvar_p, &eps_p)?;
    Ok(LatentSample { z_f, z_p, eps_f, eps_p })
}

/// Decoded sparse points `P̂_sparse`.
#[derive(Clone, Copy, Debug)]
pub struct SparseReconstruction {
    pub coords: Var,
    pub features: Var,
    /// Mean-pooled summary of the latent embedding `[1, hidden]`.
    pub global: Var,
}

/// `(z_f, z_p) → P̂_sparse`; coordinates are predicted as offsets from `z_p`.
pub fn decode<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &PlvaeConfig,
    z_f: Var,
    z_p: Var,
) -> Result<SparseReconstruction> {
    let (fs, ps) = (tape.value(z_f).shape().to_vec(), tape.value(z_p).shape().to_vec());
    if fs.len() != 2 || fs[1] != cfg.z_f || ps != [fs[0], 3] {
        return Err(contract(format!(
            "plvae decode: expected z_f [M,{}] and z_p [M,3], got {fs:?} and {ps:?}",
            cfg.z_f
        )));
    }
    let m = fs[0];
    let x = tape.concat_cols(&[z_f, z_p])?;
    let e = cfg.dec_embed().forward(tape, store, x)?;
    let global = tape.mean_rows(e)?;
    let g = tape.broadcast_rows(global, m)?;
    let h = tape.concat_cols(&[e, g])?;
    let out = cfg.dec_out().forward(tape, store, h)?;
    let offset = tape.slice_cols(out, 0, 3)?;
    let coords = tape.add(z_p, offset)?;
    let features = tape.slice_cols(out, 3, cfg.d_sparse)?;
    Ok(SparseReconstruction {
        coords,
        features,
        global,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{gradcheck_with, Coverage, DEFAULT_STEP};
    use rand::Rng;

    fn small_cfg() -> PlvaeConfig {
        PlvaeConfig {
            d_sparse: 5,
            hidden: 6,
            z_f: 4,
            residual_mu_p: true,
            logvar_init: -1.0,
            head_gain: 1.0,
        }
    }

    fn store(cfg: &PlvaeConfig, seed: u64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        cfg.init(&mut s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        s
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_scores_pool_to_the_mean() {
        let cfg = small_cfg();
        let st = store(&cfg, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let c = tape.constant(random(&[7, 3], &mut rng));
        let f = tape.constant(random(&[7, 5], &mut rng));
        let post = encode(&mut tape, &st, &cfg, c, f).unwrap();
        let x = tape.concat_cols(&[c, f]).unwrap();
        let psi = cfg.backbone().forward(&mut tape, &st, x).unwrap();
        let mean = tape.mean_rows(psi).unwrap();
        assert!(tape.value(post.global).max_abs_diff(tape.value(mean)) < 1e-12);
    }

    #[test]
    fn deterministic_mode_returns_the_mean() {
        let cfg = small_cfg();
        let st = store(&cfg, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let c = tape.constant(random(&[6, 3], &mut rng));
        let f = tape.constant(random(&[6, 5], &mut rng));
        let post = encode(&mut tape, &st, &cfg, c, f).unwrap();
        let z = reparameterize(&mut tape, &post, SampleMode::Deterministic).unwrap();
        assert_eq!(tape.value(z.z_f).data(), tape.value(post.mu_f).data());
        assert_eq!(tape.value(z.z_p).data(), tape.value(post.mu_p).data());
    }

    #[test]
    fn floor_variance_bounds_the_noise() {
        let mut tape = Tape::<f64>::new();
        let mu = Tensor::from_fn(&[50, 4], |i| i as f64 * 0.01);
        let post = Posterior {
            mu_f: tape.constant(mu.clone()),
            logvar_f: tape.constant(Tensor::full(&[50, 4], LOGVAR_MIN)),
            mu_p: tape.constant(Tensor::zeros(&[50, 3])),
            logvar_p: tape.constant(Tensor::full(&[50, 3], LOGVAR_MIN)),
            global: tape.constant(Tensor::zeros(&[1, 1])),
        };
        let z = reparameterize(&mut tape, &post, SampleMode::Stochastic { seed: 3 }).unwrap();
        let sigma = (-5.0f64).exp();
        for ((&zv, &m), &e) in tape.value(z.z_f).data().iter().zip(mu.data()).zip(z.eps_f.data()) {
            assert!(((zv - m) - sigma * e).abs() < 1e-15);
            assert!((zv - m).abs() <= 6.8e-3 * e.abs() + 1e-15);
        }
    }

    #[test]
    fn stochastic_mode_uses_the_stored_noise() {
        let mut tape = Tape::<f64>::new();
        let post = Posterior {
            mu_f: tape.constant(Tensor::full(&[3, 2], 1.0)),
            logvar_f: tape.constant(Tensor::full(&[3, 2], 0.7)),
            mu_p: tape.constant(Tensor::full(&[3, 3], -1.0)),
            logvar_p: tape.constant(Tensor::full(&[3, 3], -0.3)),
            global: tape.constant(Tensor::zeros(&[1, 1])),
        };
        let a = reparameterize(&mut tape, &post, SampleMode::Stochastic { seed: 9 }).unwrap();
        let b = reparameterize(&mut tape, &post, SampleMode::Stochastic { seed: 9 }).unwrap();
        assert_eq!(a.eps_f, b.eps_f);
        for (&z, &e) in tape.value(a.z_p).data().iter().zip(a.eps_p.data()) {
            assert!((z - (-1.0 + (-0.15f64).exp() * e)).abs() < 1e-14);
        }
    }

    #[test]
    fn shapes_at_default_size() {
        let cfg = PlvaeConfig::default();
        let mut st = ParamStore::<f32>::new();
        cfg.init(&mut st, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::zeros(&[256, 3]));
        let f = tape.constant(Tensor::zeros(&[256, 64]));
        let post = encode(&mut tape, &st, &cfg, c, f).unwrap();
        assert_eq!(tape.value(post.mu_f).shape(), &[256, 32]);
        assert_eq!(tape.value(post.logvar_p).shape(), &[256, 3]);
        let z = reparameterize(&mut tape, &post, SampleMode::Stochastic { seed: 1 }).unwrap();
        let rec = decode(&mut tape, &st, &cfg, z.z_f, z.z_p).unwrap();
        assert_eq!(tape.value(rec.coords).shape(), &[256, 3]);
        assert_eq!(tape.value(rec.features).shape(), &[256, 64]);
    }

    #[test]
    fn log_variances_stay_clamped() {
        let mut cfg = small_cfg();
        cfg.logvar_init = 50.0;
        let st = store(&cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let c = tape.constant(random(&[5, 3], &mut rng));
        let f = tape.constant(random(&[5, 5], &mut rng));
        let post = encode(&mut tape, &st, &cfg, c, f).unwrap();
        for v in [post.logvar_f, post.logvar_p] {
            assert!(tape.value(v).data().iter().all(|&x| (LOGVAR_MIN..=LOGVAR_MAX).contains(&x)));
        }
    }

    #[test]
    fn encode_and_decode_gradcheck() {
        let cfg = small_cfg();
        let st = store(&cfg, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let coords = random(&[6, 3], &mut rng);
        let feats = random(&[6, 5], &mut rng);
        let w = random(&[6, 8], &mut rng);
        let errs = gradcheck_with(
            |t, v| {
                let post = encode(t, &st, &cfg, v[0], v[1])?;
                let z = reparameterize(t, &post, SampleMode::Stochastic { seed: 1 })?;
                let rec = decode(t, &st, &cfg, z.z_f, z.z_p)?;
                let kl_f = t.kl_std_normal(post.mu_f, post.logvar_f)?;
                let kl_p = t.kl_std_normal(post.mu_p, post.logvar_p)?;
                let both = t.concat_cols(&[rec.coords, rec.features])?;
                let wv = t.constant(w.clone());
                let m = t.mul(both, wv)?;
                let s = t.sum_all(m)?;
                let k = t.add(kl_f, kl_p)?;
                t.add(s, k)
            },
            &[coords, feats],
            DEFAULT_STEP,
            Coverage::All,
        )
        .unwrap();
        assert!(errs.iter().all(|&e| e < 1e-4), "{errs:?}");
    }
}

//! Registry of finite-difference gradient checks covering every
//! differentiable op and the assembled pipeline.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{CodecConfig, PointCloud};
use crate::diffcore::{gradcheck_with, Coverage, ParamStore, Tape, Tensor, Var, DEFAULT_STEP};
use crate::error::Result;
use crate::geometry::Camera;
use crate::heads::HeadsConfig;
use crate::losses::ViewTarget;
use crate::model::{self, ModelConfig, SceneInput, View};
use crate::plvae::{PlvaeConfig, SampleMode};
use crate::rasterizer::RasterSettings;

/// Relative-error bound every check must stay under.
pub const TOLERANCE: f64 = 1e-4;

pub struct GradCheck {
    pub name: &'static str,
    pub run: fn() -> Result<f64>,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// `Σ w ⊙ y` with fixed random weights, turning any output into a scalar.
fn weighted_sum(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed);
    let w = uniform(t.value(y).shape(), -1.0, 1.0, &mut r);
    let w = t.constant(w);
    let m = t.mul(y, w)?;
    t.sum_all(m)
}

fn check(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Result<f64> {
    let errs = gradcheck_with(f, inputs, DEFAULT_STEP, Coverage::All)?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

fn unary(f: fn(&mut Tape<f64>, Var) -> Result<Var>, lo: f64, hi: f64) -> Result<f64> {
    let x = uniform(&[4, 5], lo, hi, &mut rng(1));
    check(&[x], |t, v| {
        let y = f(t, v[0])?;
        weighted_sum(t, y, 2)
    })
}

fn binary(f: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut r = rng(3);
    let a = uniform(&[3, 4], -1.0, 1.0, &mut r);
    let b = uniform(&[3, 4], -1.0, 1.0, &mut r);
    check(&[a, b], |t, v| {
        let y = f(t, v[0], v[1])?;
        weighted_sum(t, y, 4)
    })
}

fn matmul() -> Result<f64> {
    let mut r = rng(5);
    check(&[uniform(&[4, 3], -1.0, 1.0, &mut r), uniform(&[3, 5], -1.0, 1.0, &mut r)], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, 6)
    })
}

fn add_bias() -> Result<f64> {
    let mut r = rng(7);
    check(&[uniform(&[4, 3], -1.0, 1.0, &mut r), uniform(&[3], -1.0, 1.0, &mut r)], |t, v| {
        let y = t.add_bias(v[0], v[1])?;
        weighted_sum(t, y, 8)
    })
}

fn concat_slice() -> Result<f64> {
    let mut r = rng(9);
    check(&[uniform(&[3, 2], -1.0, 1.0, &mut r), uniform(&[3, 4], -1.0, 1.0, &mut r)], |t, v| {
        let c = t.concat_cols(&[v[0], v[1]])?;
        let s = t.slice_cols(c, 1, 4)?;
        weighted_sum(t, s, 10)
    })
}

fn gather_rows() -> Result<f64> {
    let idx = Arc::new(vec![2, 0, 2, 1, 3, 3]);
    check(&[uniform(&[4, 3], -1.0, 1.0, &mut rng(11))], move |t, v| {
        let y = t.gather_rows(v[0], idx.clone())?;
        weighted_sum(t, y, 12)
    })
}

fn group_max() -> Result<f64> {
    check(&[uniform(&[12, 3], -1.0, 1.0, &mut rng(13))], |t, v| {
        let y = t.group_max(v[0], 4)?;
        weighted_sum(t, y, 14)
    })
}

fn mix_rows() -> Result<f64> {
    let idx = Arc::new(vec![0, 1, 2, 3, 0, 1, 2, 2, 3]);
    let w = Arc::new(vec![0.2, 0.3, 0.5, 0.6, 0.1, 0.3, 0.5, 0.25, 0.25]);
    check(&[uniform(&[4, 3], -1.0, 1.0, &mut rng(15))], move |t, v| {
        let y = t.mix_rows(v[0], 3, idx.clone(), w.clone())?;
        weighted_sum(t, y, 16)
    })
}

fn attention_pool() -> Result<f64> {
    let mut r = rng(17);
    check(&[uniform(&[6, 1], -2.0, 2.0, &mut r), uniform(&[6, 4], -1.0, 1.0, &mut r)], |t, v| {
        let y = t.attention_pool(v[0], v[1])?;
        weighted_sum(t, y, 18)
    })
}

fn mean_broadcast() -> Result<f64> {
    check(&[uniform(&[5, 3], -1.0, 1.0, &mut rng(19))], |t, v| {
        let m = t.mean_rows(v[0])?;
        let b = t.broadcast_rows(m, 4)?;
        weighted_sum(t, b, 20)
    })
}

fn normalize_rows() -> Result<f64> {
    check(&[uniform(&[5, 4], 0.2, 1.0, &mut rng(21))], |t, v| {
        let y = t.normalize_rows(v[0])?;
        weighted_sum(t, y, 22)
    })
}

fn linear_combination() -> Result<f64> {
    let mut r = rng(23);
    check(&[uniform(&[1], -1.0, 1.0, &mut r), uniform(&[1], -1.0, 1.0, &mut r)], |t, v| {
        let y = t.linear_combination(&[v[0], v[1]], &[0.7, -1.3])?;
        let sq = t.mul(y, y)?;
        t.sum_all(sq)
    })
}

fn l1() -> Result<f64> {
    let mut r = rng(25);
    let mask: Vec<f64> = (0..12).map(|i| (i % 3 != 0) as u8 as f64).collect();
    let mask = Arc::new(mask);
    check(&[uniform(&[4, 3], -1.0, 1.0, &mut r), uniform(&[4, 3], -1.0, 1.0, &mut r)], move |t, v| {
        t.l1(v[0], v[1], Some(mask.clone()), 8.0)
    })
}

fn kl() -> Result<f64> {
    let mut r = rng(27);
    check(&[uniform(&[4, 3], -1.0, 1.0, &mut r), uniform(&[4, 3], -2.0, 1.0, &mut r)], |t, v| {
        t.kl_std_normal(v[0], v[1])
    })
}

fn quaternions(n: usize, r: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut q = uniform(&[n, 4], -1.0, 1.0, r);
    for i in 0..n {
        let row = q.row_mut(i);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    q
}

fn covariance() -> Result<f64> {
    let mut r = rng(29);
    let q = quaternions(4, &mut r);
    check(&[q, uniform(&[4, 3], 0.05, 0.5, &mut r)], |t, v| {
        let y = t.build_covariance(v[0], v[1])?;
        weighted_sum(t, y, 30)
    })
}

fn test_camera(size: usize) -> Camera {
    Camera::look_at([1.2, -1.0, 0.8], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], 1.1 * size as f64, 1.1 * size as f64, (size as f64 - 1.0) / 2.0, (size as f64 - 1.0) / 2.0, size, size)
        .expect("valid camera")
}

fn projection() -> Result<f64> {
    let mut r = rng(31);
    let cam = test_camera(32);
    let means = uniform(&[5, 3], -0.3, 0.3, &mut r);
    let q = quaternions(5, &mut r);
    let s = uniform(&[5, 3], 0.02, 0.2, &mut r);
    let cov = {
        let mut t = Tape::new();
        let (a, b) = (t.constant(q), t.constant(s));
        let c = t.build_covariance(a, b)?;
        t.value(c).clone()
    };
    check(&[means, cov], move |t, v| {
        let y = t.project_gaussians(v[0], v[1], &cam)?;
        weighted_sum(t, y, 32)
    })
}

fn rasterize() -> Result<f64> {
    let mut r = rng(33);
    let n = 4;
    let proj = Tensor::from_fn(&[n, 6], |k| match k % 6 {
        0 | 1 => r.random_range(2.0..14.0),
        2 | 4 => r.random_range(1.5..6.0),
        3 => r.random_range(-0.8..0.8),
        _ => r.random_range(1.0..4.0),
    });
    let opacity = uniform(&[n, 1], 0.2, 0.9, &mut r);
    let payload = uniform(&[n, 4], -1.0, 1.0, &mut r);
    let settings = RasterSettings {
        width: 16,
        height: 16,
        z_near: 0.05,
        background: vec![0.1, 0.0, -0.2, 0.3],
    };
    check(&[proj, opacity, payload], move |t, v| {
        let out = t.rasterize(v[0], v[1], v[2], &settings)?;
        let a = weighted_sum(t, out.features, 34)?;
        let b = weighted_sum(t, out.depth, 35)?;
        let c = weighted_sum(t, out.alpha, 36)?;
        t.linear_combination(&[a, b, c], &[1.0, 1.0, 1.0])
    })
}

/// Small configuration used by the pipeline check.
pub fn tiny_config() -> ModelConfig {
    let codec = CodecConfig {
        m_sparse: 8,
        k_group: 6,
        d_sparse: 6,
        d_dense: 6,
        d_mid: 5,
        hidden: 6,
        rel_scale: 4.0,
    };
    ModelConfig {
        plvae: PlvaeConfig {
            d_sparse: 6,
            hidden: 6,
            z_f: 3,
            residual_mu_p: true,
            logvar_init: -2.0,
            head_gain: 0.5,
        },
        heads: HeadsConfig {
            d_dense: 6,
            hidden: 6,
            k_feat: 4,
            s_sem: 3,
            proj_hidden: 5,
            recon_hidden: 4,
            offset_head: false,
            scale_init: 0.08,
        },
        codec,
        ..ModelConfig::default()
    }
}

/// 64 points on a sphere of radius 0.3 with two 16×16 views.
pub fn tiny_scene(seed: u64) -> Result<(SceneInput<f64>, Vec<View<f64>>)> {
    let mut r = rng(seed);
    let n = 64;
    let mut coords = Vec::with_capacity(3 * n);
    let mut colors = Vec::with_capacity(3 * n);
    for i in 0..n {
        // Fibonacci sphere
        let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let rad = (1.0 - y * y).sqrt();
        let phi = i as f64 * 2.399_963_229_728_653;
        coords.extend([0.3 * rad * phi.cos(), 0.3 * y, 0.3 * rad * phi.sin()]);
        colors.extend((0..3).map(|_| r.random_range(0.1..0.9)));
    }
    let cloud = PointCloud::new(coords, colors)?;
    let input = SceneInput::new(&cloud, &tiny_config().codec)?;
    let views = [[1.2, -1.0, 0.8], [-1.0, -1.1, 0.5]]
        .into_iter()
        .map(|eye| {
            let camera = Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], 14.0, 14.0, 7.5, 7.5, 16, 16)?;
            let target = ViewTarget {
                rgb: uniform(&[256, 3], 0.0, 1.0, &mut r),
                depth: uniform(&[256, 1], 1.0, 2.0, &mut r),
                sem: uniform(&[256, 3], -1.0, 1.0, &mut r),
            };
            Ok(View { camera, target })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((input, views))
}

/// Gradient of the full training loss with respect to every parameter.
fn pipeline() -> Result<f64> {
    let cfg = tiny_config();
    let store: ParamStore<f64> = perturbed_params(&cfg, 41)?;
    let (input, views) = tiny_scene(42)?;
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let values: Vec<Tensor<f64>> = names.iter().map(|n| store.value(n).expect("listed").clone()).collect();
    let errs = gradcheck_with(
        |t, v| {
            for (name, &var) in names.iter().zip(v) {
                t.bind_param(name, var);
            }
            let refs: Vec<&View<f64>> = views.iter().collect();
            let loss = model::training_loss(t, &store, &cfg, &input, &refs, 100, 1000, SampleMode::Stochastic { seed: 3 })?;
            Ok(loss.total)
        },
        &values,
        DEFAULT_STEP,
        Coverage::Sampled { per_input: 6, seed: 43 },
    )?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

/// Initial parameters with the zero-initialised layers nudged off zero so
/// every path carries gradient.
pub fn perturbed_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<f64>> {
    let mut store = cfg.init_params::<f64>(seed)?;
    let mut r = rng(seed ^ 0x5eed);
    for (_, e) in store.iter_mut() {
        e.value.data_mut().iter_mut().for_each(|x| *x += r.random_range(-0.1..0.1));
    }
    Ok(store)
}

pub fn registry() -> Vec<GradCheck> {
    vec![
        GradCheck { name: "silu", run: || unary(|t, x| t.silu(x), -2.0, 2.0) },
        GradCheck { name: "sigmoid", run: || unary(|t, x| t.sigmoid(x), -2.0, 2.0) },
        GradCheck { name: "exp", run: || unary(|t, x| t.exp(x), -2.0, 1.0) },
        GradCheck { name: "tanh", run: || unary(|t, x| t.unary(crate::diffcore::ops::Unary::Tanh, x), -2.0, 2.0) },
        GradCheck { name: "scale", run: || unary(|t, x| t.scale(x, -1.7), -2.0, 2.0) },
        GradCheck { name: "clamp", run: || unary(|t, x| t.clamp(x, -1.0, 1.0), -2.0, 2.0) },
        GradCheck { name: "add", run: || binary(|t, a, b| t.add(a, b)) },
        GradCheck { name: "sub", run: || binary(|t, a, b| t.sub(a, b)) },
        GradCheck { name: "mul", run: || binary(|t, a, b| t.mul(a, b)) },
        GradCheck { name: "matmul", run: matmul },
        GradCheck { name: "add_bias", run: add_bias },
        GradCheck { name: "concat_cols+slice_cols", run: concat_slice },
        GradCheck { name: "gather_rows", run: gather_rows },
        GradCheck { name: "group_max", run: group_max },
        GradCheck { name: "mix_rows", run: mix_rows },
        GradCheck { name: "attention_pool", run: attention_pool },
        GradCheck { name: "mean_rows+broadcast_rows", run: mean_broadcast },
        GradCheck { name: "normalize_rows", run: normalize_rows },
        GradCheck { name: "linear_combination", run: linear_combination },
        GradCheck { name: "l1", run: l1 },
        GradCheck { name: "kl_std_normal", run: kl },
        GradCheck { name: "build_covariance", run: covariance },
        GradCheck { name: "project_gaussians", run: projection },
        GradCheck { name: "rasterize", run: rasterize },
        GradCheck { name: "pipeline", run: pipeline },
    ]
}

/// Runs every check, returning `(name, max error)` pairs in registry order.
pub fn run_all() -> Vec<(&'static str, Result<f64>)> {
    registry().into_iter().map(|c| (c.name, (c.run)())).collect()
}

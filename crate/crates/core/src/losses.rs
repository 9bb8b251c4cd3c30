//! Training objective: render alignment, point reconstruction, latent
//! reconstruction, KL, and the annealed total.
//!
//! Render terms are mean absolute errors over every unmasked element. The
//! point-set terms use the vector L1 norm (sum over components) and divide
//! by the point count only.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Real, Tape, Tensor, Var};
use crate::error::{contract, Result};
use crate::plvae::Posterior;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// RGB, depth and semantic render weights.
    pub beta: [f64; 3],
    /// Coordinate and feature weights of the latent reconstruction.
    pub omega: [f64; 2],
    pub kl_weight: f64,
    /// Value the anneal weight decays to.
    pub anneal_floor: f64,
    /// Rendered alpha a pixel needs before its depth is supervised.
    pub depth_alpha_min: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: [1.0, 0.2, 0.1],
            omega: [1.0, 0.1],
            kl_weight: 1.0,
            anneal_floor: 0.1,
            depth_alpha_min: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = self.beta.iter().chain(&self.omega).chain([&self.kl_weight, &self.anneal_floor]);
        if all.into_iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(crate::Error::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Scalar values of every term for one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_render: f64,
    pub l_render_rgb: f64,
    pub l_render_depth: f64,
    pub l_render_sem: f64,
    pub l_recon: f64,
    pub l_vae: f64,
    pub l_kl: f64,
    pub w_t: f64,
    pub l_total: f64,
    /// No view had a single supervisable depth pixel.
    pub depth_empty: bool,
}

impl LossBreakdown {
    pub const FIELDS: [&'static str; 9] = [
        "l_render",
        "l_render_rgb",
        "l_render_depth",
        "l_render_sem",
        "l_recon",
        "l_vae",
        "l_kl",
        "w_t",
        "l_total",
    ];

    pub fn values(&self) -> [f64; 9] {
        [
            self.l_render,
            self.l_render_rgb,
            self.l_render_depth,
            self.l_render_sem,
            self.l_recon,
            self.l_vae,
            self.l_kl,
            self.w_t,
            self.l_total,
        ]
    }

    /// Total rebuilt from the parts.
    pub fn recompute_total(&self, kl_weight: f64) -> f64 {
        (1.0 - self.w_t) * self.l_render + self.w_t * self.l_recon + self.l_vae + kl_weight * self.l_kl
    }
}

/// Linear decay from 1 at step 0 to `floor` at `total/2`, then flat.
pub fn anneal(step: usize, total: usize, floor: f64) -> f64 {
    if total == 0 {
        return floor;
    }
    let knee = total as f64 / 2.0;
    let frac = step as f64 / knee;
    if frac >= 1.0 {
        return floor;
    }
    1.0 - (1.0 - floor) * frac
}

/// Rendered and projected maps of one view, `[H·W, ·]`.
#[derive(Clone, Copy, Debug)]
pub struct ViewPrediction {
    pub rgb: Var,
    pub depth: Var,
    pub sem: Var,
    pub alpha: Var,
}

/// Ground-truth maps of one view; depth `0` marks pixels without geometry.
#[derive(Clone, Debug)]
pub struct ViewTarget<T> {
    pub rgb: Tensor<T>,
    pub depth: Tensor<T>,
    pub sem: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct RenderLoss {
    pub total: Var,
    pub rgb: Var,
    pub depth: Var,
    pub sem: Var,
    pub depth_empty: bool,
}

/// Pixels with ground-truth depth and enough rendered coverage.
pub fn depth_mask<T: Real>(gt_depth: &Tensor<T>, alpha: &Tensor<T>, alpha_min: f64) -> Vec<T> {
    gt_depth
        .data()
        .iter()
        .zip(alpha.data())
        .map(|(&d, &a)| if d > T::zero() && a > T::of(alpha_min) { T::one() } else { T::zero() })
        .collect()
}

fn mean_l1<T: Real>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    let t = tape.constant(target.clone());
    let n = target.numel().max(1);
    tape.l1(pred, t, None, T::of(n as f64))
}

pub fn render_loss<T: Real>(
    tape: &mut Tape<T>,
    views: &[(ViewPrediction, &ViewTarget<T>)],
    weights: &LossWeights,
) -> Result<RenderLoss> {
    if views.is_empty() {
        return Err(contract("render_loss needs at least one view"));
    }
    let inv_v = 1.0 / views.len() as f64;
    let (mut rgb, mut depth, mut sem) = (Vec::new(), Vec::new(), Vec::new());
    let mut any_depth = false;
    for (pred, target) in views {
        rgb.push(mean_l1(tape, pred.rgb, &target.rgb)?);
        sem.push(mean_l1(tape, pred.sem, &target.sem)?);
        let mask = depth_mask(&target.depth, tape.value(pred.alpha), weights.depth_alpha_min);
        let count: T = mask.iter().copied().sum();
        if count > T::zero() {
            any_depth = true;
            let t = tape.constant(target.depth.clone());
            depth.push(tape.l1(pred.depth, t, Some(Arc::new(mask)), count)?);
        }
    }
    let avg = |tape: &mut Tape<T>, xs: &[Var]| -> Result<Var> {
        if xs.is_empty() {
            return Ok(tape.constant(Tensor::scalar(T::zero())));
        }
        tape.linear_combination(xs, &vec![inv_v; xs.len()])
    };
    let rgb = avg(tape, &rgb)?;
    let depth = avg(tape, &depth)?;
    let sem = avg(tape, &sem)?;
    let total = tape.linear_combination(&[rgb, depth, sem], &weights.beta)?;
    Ok(RenderLoss {
        total,
        rgb,
        depth,
        sem,
        depth_empty: !any_depth,
    })
}

/// `(1/N) Σ (‖p − p̂‖₁ + ‖c − ĉ‖₁)`.
pub fn recon_loss<T: Real>(
    tape: &mut Tape<T>,
    points: Var,
    colors: Var,
    target_points: &Tensor<T>,
    target_colors: &Tensor<T>,
) -> Result<Var> {
    let n = T::of(target_points.rows().max(1) as f64);
    let tp = tape.constant(target_points.clone());
    let tc = tape.constant(target_colors.clone());
    let a = tape.l1(points, tp, None, n)?;
    let b = tape.l1(colors, tc, None, n)?;
    tape.add(a, b)
}

/// `(1/M) Σ (ω₁‖p − p̂‖₁ + ω₂‖f − f̂‖₁)`, index-aligned. Both sides stay
/// differentiable.
pub fn vae_loss<T: Real>(
    tape: &mut Tape<T>,
    coords: Var,
    features: Var,
    target_coords: Var,
    target_features: Var,
    omega: [f64; 2],
) -> Result<Var> {
    let m = T::of(tape.value(target_coords).rows().max(1) as f64);
    let a = tape.l1(coords, target_coords, None, m)?;
    let b = tape.l1(features, target_features, None, m)?;
    tape.linear_combination(&[a, b], &omega)
}

/// KL of both posteriors against the standard normal, mean over points.
pub fn kl_loss<T: Real>(tape: &mut Tape<T>, post: &Posterior) -> Result<Var> {
    let f = tape.kl_std_normal(post.mu_f, post.logvar_f)?;
    let p = tape.kl_std_normal(post.mu_p, post.logvar_p)?;
    tape.add(f, p)
}

/// `(1 − w)·render + w·recon + vae + kl_weight·kl`.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    render: Var,
    recon: Var,
    vae: Var,
    kl: Var,
    w_t: f64,
    kl_weight: f64,
) -> Result<Var> {
    tape.linear_combination(&[render, recon, vae, kl], &[1.0 - w_t, w_t, 1.0, kl_weight])
}

//! Tile-based front-to-back compositor for projected Gaussian splats.
//!
//! Every splat carries an arbitrary payload row (learned features, or RGB and
//! semantics for ground-truth rendering) plus its view depth. Per pixel
//!
//! ```text
//! α_i = min(0.99, o_i · exp(−½ dᵀ Σ′⁻¹ d)),  skipped when α_i < 1/255
//! C   = Σ_i f_i α_i T_i + T_final · background,  T_i = ∏_{j<i} (1 − α_j)
//! D   = Σ_i d_i α_i T_i
//! ```
//!
//! Splats are visited in ascending depth, ties by index, and the walk stops
//! before a splat that would drive transmittance below `1e-4`. Backward
//! re-walks each pixel back-to-front from the saved final transmittance.

use rayon::prelude::*;

use crate::diffcore::{BackwardCtx, Op, Real, Tape, Tensor, Var};
use crate::error::{contract, Error, Result};
use crate::geometry::{conic, proj_col, Camera, Gaussian3D, ProjectOp};

pub const TILE: usize = 16;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const T_MIN: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct RasterSettings {
    pub width: usize,
    pub height: usize,
    pub z_near: f64,
    /// Per-channel background; empty means zeros.
    pub background: Vec<f64>,
}

impl RasterSettings {
    pub fn for_camera(cam: &Camera) -> Self {
        Self {
            width: cam.width,
            height: cam.height,
            z_near: cam.z_near,
            background: Vec::new(),
        }
    }

    fn background<T: Real>(&self, channels: usize) -> Result<Vec<T>> {
        if self.background.is_empty() {
            return Ok(vec![T::zero(); channels]);
        }
        if self.background.len() != channels {
            return Err(contract(format!(
                "background has {} channels, payload has {channels}",
                self.background.len()
            )));
        }
        Ok(self.background.iter().map(|&b| T::of(b)).collect())
    }

    fn pixels(&self) -> usize {
        self.width * self.height
    }
}

/// Rendered payload, depth and accumulated alpha, row-major `[H·W, ·]`.
#[derive(Clone, Debug)]
pub struct RenderedMaps<T> {
    pub width: usize,
    pub height: usize,
    pub features: Tensor<T>,
    pub depth: Tensor<T>,
    pub alpha: Tensor<T>,
}

impl<T: Real> RenderedMaps<T> {
    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[T] {
        self.features.row(y * self.width + x)
    }
}

#[derive(Clone, Copy, Debug)]
struct Splat<T> {
    mean: [T; 2],
    conic: [T; 3],
    opacity: T,
    depth: T,
}

/// Per-pixel opacity of one splat: `(α, gaussian, clamped)`.
#[inline]
fn alpha_at<T: Real>(s: &Splat<T>, px: T, py: T) -> Option<(T, T, bool)> {
    let dx = px - s.mean[0];
    let dy = py - s.mean[1];
    let power = T::of(-0.5) * (s.conic[0] * dx * dx + s.conic[2] * dy * dy)
        - s.conic[1] * dx * dy;
    if power > T::zero() {
        return None;
    }
    let g = power.exp();
    let raw = s.opacity * g;
    let max = T::of(ALPHA_MAX);
    let (alpha, clamped) = if raw > max { (max, true) } else { (raw, false) };
    if alpha < T::of(ALPHA_MIN) {
        return None;
    }
    Some((alpha, g, clamped))
}

fn check_inputs<T: Real>(proj: &Tensor<T>, opacity: &Tensor<T>, payload: &Tensor<T>) -> Result<usize> {
    let n = proj.rows();
    if proj.rank() != 2 || proj.cols() != proj_col::WIDTH {
        return Err(contract(format!("rasterize: projected splats must be [N, 6], got {:?}", proj.shape())));
    }
    if opacity.shape() != [n, 1] {
        return Err(contract(format!("rasterize: opacity must be [{n}, 1], got {:?}", opacity.shape())));
    }
    if payload.rank() != 2 || payload.rows() != n {
        return Err(contract(format!("rasterize: payload must be [{n}, C], got {:?}", payload.shape())));
    }
    Ok(n)
}

/// Screen-space splats; `None` for those behind the near plane.
fn prepare<T: Real>(proj: &Tensor<T>, opacity: &Tensor<T>, z_near: f64) -> Result<Vec<Option<Splat<T>>>> {
    (0..proj.rows())
        .map(|i| {
            let r = proj.row(i);
            if r[proj_col::DEPTH] < T::of(z_near) {
                return Ok(None);
            }
            let q = conic([r[proj_col::COV_XX], r[proj_col::COV_XY], r[proj_col::COV_YY]]).ok_or_else(|| {
                Error::Numerical {
                    op: "rasterize".into(),
                    detail: format!("splat {i} has a non-positive-definite screen covariance"),
                }
            })?;
            Ok(Some(Splat {
                mean: [r[proj_col::MEAN_X], r[proj_col::MEAN_Y]],
                conic: q,
                opacity: opacity.row(i)[0],
                depth: r[proj_col::DEPTH],
            }))
        })
        .collect()
}

fn depth_order<T: Real>(splats: &[Option<Splat<T>>], a: u32, b: u32) -> std::cmp::Ordering {
    let da = splats[a as usize].as_ref().map_or(T::zero(), |s| s.depth);
    let db = splats[b as usize].as_ref().map_or(T::zero(), |s| s.depth);
    da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
}

/// Per-tile splat lists, each sorted by depth then index.
#[derive(Clone, Debug, PartialEq)]
pub struct TileBinning {
    pub tiles_x: usize,
    pub tiles_y: usize,
    lists: Vec<Vec<u32>>,
}

impl TileBinning {
    /// A splat is listed in every tile its extent box touches. The box covers
    /// the larger of the 3σ ellipse and the region where `α ≥ 1/255`, so no
    /// visible contribution is ever dropped.
    fn build<T: Real>(proj: &Tensor<T>, splats: &[Option<Splat<T>>], settings: &RasterSettings) -> Self {
        let tiles_x = settings.width.div_ceil(TILE);
        let tiles_y = settings.height.div_ceil(TILE);
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        if settings.width == 0 || settings.height == 0 {
            return Self { tiles_x, tiles_y, lists };
        }
        for (i, s) in splats.iter().enumerate() {
            let Some(s) = s else { continue };
            let o = s.opacity.to_f64();
            if !(o >= ALPHA_MIN) {
                continue;
            }
            let r = proj.row(i);
            let t = 9.0f64.max(2.0 * (o / ALPHA_MIN).ln());
            let ex = (t * r[proj_col::COV_XX].to_f64()).sqrt() + 0.5;
            let ey = (t * r[proj_col::COV_YY].to_f64()).sqrt() + 0.5;
            let (mx, my) = (s.mean[0].to_f64(), s.mean[1].to_f64());
            let x0 = (mx - ex).ceil().max(0.0);
            let x1 = (mx + ex).floor().min((settings.width - 1) as f64);
            let y0 = (my - ey).ceil().max(0.0);
            let y1 = (my + ey).floor().min((settings.height - 1) as f64);
            if x0 > x1 || y0 > y1 {
                continue;
            }
            for ty in (y0 as usize / TILE)..=(y1 as usize / TILE) {
                for tx in (x0 as usize / TILE)..=(x1 as usize / TILE) {
                    lists[ty * tiles_x + tx].push(i as u32);
                }
            }
        }
        for list in &mut lists {
            list.sort_by(|&a, &b| depth_order(splats, a, b));
        }
        Self { tiles_x, tiles_y, lists }
    }

    pub fn tile_count(&self) -> usize {
        self.lists.len()
    }

    pub fn list(&self, tile: usize) -> &[u32] {
        &self.lists[tile]
    }

    fn pixels(&self, tile: usize, settings: &RasterSettings) -> impl Iterator<Item = (usize, usize)> {
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        let xs = tx * TILE..((tx + 1) * TILE).min(settings.width);
        let ys = ty * TILE..((ty + 1) * TILE).min(settings.height);
        ys.flat_map(move |y| xs.clone().map(move |x| (x, y)))
    }
}

/// Result of compositing one pixel's sorted list.
struct PixelOut<T> {
    t_final: T,
    /// Number of list entries visited before stopping.
    last: u32,
}

#[inline]
fn composite_pixel<T: Real>(
    list: &[u32],
    splats: &[Option<Splat<T>>],
    payload: &Tensor<T>,
    px: T,
    py: T,
    feat: &mut [T],
    depth: &mut T,
) -> PixelOut<T> {
    let mut t = T::one();
    let mut last = 0;
    for (k, &i) in list.iter().enumerate() {
        let Some(s) = &splats[i as usize] else { continue };
        let Some((alpha, _, _)) = alpha_at(s, px, py) else { continue };
        let next = t * (T::one() - alpha);
        if next < T::of(T_MIN) {
            break;
        }
        let w = alpha * t;
        for (c, &f) in feat.iter_mut().zip(payload.row(i as usize)) {
            *c = *c + w * f;
        }
        *depth = *depth + w * s.depth;
        t = next;
        last = k as u32 + 1;
    }
    PixelOut { t_final: t, last }
}

struct TileImage<T> {
    features: Vec<T>,
    depth: Vec<T>,
    t_final: Vec<T>,
    last: Vec<u32>,
}

struct Forward<T> {
    maps: RenderedMaps<T>,
    bins: TileBinning,
    t_final: Vec<T>,
    last: Vec<u32>,
}

fn forward_tiled<T: Real>(
    proj: &Tensor<T>,
    opacity: &Tensor<T>,
    payload: &Tensor<T>,
    settings: &RasterSettings,
) -> Result<Forward<T>> {
    check_inputs(proj, opacity, payload)?;
    let channels = payload.cols();
    let bg = settings.background::<T>(channels)?;
    let splats = prepare(proj, opacity, settings.z_near)?;
    let bins = TileBinning::build(proj, &splats, settings);

    let tiles: Vec<TileImage<T>> = (0..bins.tile_count())
        .into_par_iter()
        .map(|tile| {
            let list = bins.list(tile);
            let mut img = TileImage {
                features: Vec::new(),
                depth: Vec::new(),
                t_final: Vec::new(),
                last: Vec::new(),
            };
            let mut feat = vec![T::zero(); channels];
            for (x, y) in bins.pixels(tile, settings) {
                feat.iter_mut().for_each(|f| *f = T::zero());
                let mut d = T::zero();
                let out = composite_pixel(list, &splats, payload, T::of(x as f64), T::of(y as f64), &mut feat, &mut d);
                img.features.extend(feat.iter().zip(&bg).map(|(&f, &b)| f + out.t_final * b));
                img.depth.push(d);
                img.t_final.push(out.t_final);
                img.last.push(out.last);
            }
            img
        })
        .collect();

    let hw = settings.pixels();
    let mut features = vec![T::zero(); hw * channels];
    let mut depth = vec![T::zero(); hw];
    let mut alpha = vec![T::zero(); hw];
    let mut t_final = vec![T::one(); hw];
    let mut last = vec![0u32; hw];
    for (tile, img) in tiles.iter().enumerate() {
        for (k, (x, y)) in bins.pixels(tile, settings).enumerate() {
            let p = y * settings.width + x;
            features[p * channels..(p + 1) * channels]
                .copy_from_slice(&img.features[k * channels..(k + 1) * channels]);
            depth[p] = img.depth[k];
            alpha[p] = T::one() - img.t_final[k];
            t_final[p] = img.t_final[k];
            last[p] = img.last[k];
        }
    }
    Ok(Forward {
        maps: RenderedMaps {
            width: settings.width,
            height: settings.height,
            features: Tensor::new(vec![hw, channels], features)?,
            depth: Tensor::new(vec![hw, 1], depth)?,
            alpha: Tensor::new(vec![hw, 1], alpha)?,
        },
        bins,
        t_final,
        last,
    })
}

/// Tiled forward pass without recording anything.
pub fn rasterize<T: Real>(
    proj: &Tensor<T>,
    opacity: &Tensor<T>,
    payload: &Tensor<T>,
    settings: &RasterSettings,
) -> Result<RenderedMaps<T>> {
    Ok(forward_tiled(proj, opacity, payload, settings)?.maps)
}

/// Reference renderer: every pixel walks the globally sorted list of all
/// splats, with no tiling or binning.
pub fn rasterize_oracle<T: Real>(
    proj: &Tensor<T>,
    opacity: &Tensor<T>,
    payload: &Tensor<T>,
    settings: &RasterSettings,
) -> Result<RenderedMaps<T>> {
    check_inputs(proj, opacity, payload)?;
    let channels = payload.cols();
    let bg = settings.background::<T>(channels)?;
    let splats = prepare(proj, opacity, settings.z_near)?;
    let mut order: Vec<u32> = (0..splats.len() as u32)
        .filter(|&i| splats[i as usize].is_some())
        .collect();
    order.sort_by(|&a, &b| depth_order(&splats, a, b));

    let hw = settings.pixels();
    let mut features = vec![T::zero(); hw * channels];
    let mut depth = vec![T::zero(); hw];
    let mut alpha = vec![T::zero(); hw];
    for y in 0..settings.height {
        for x in 0..settings.width {
            let p = y * settings.width + x;
            let feat = &mut features[p * channels..(p + 1) * channels];
            let out = composite_pixel(&order, &splats, payload, T::of(x as f64), T::of(y as f64), feat, &mut depth[p]);
            for (f, &b) in feat.iter_mut().zip(&bg) {
                *f = *f + out.t_final * b;
            }
            alpha[p] = T::one() - out.t_final;
        }
    }
    Ok(RenderedMaps {
        width: settings.width,
        height: settings.height,
        features: Tensor::new(vec![hw, channels], features)?,
        depth: Tensor::new(vec![hw, 1], depth)?,
        alpha: Tensor::new(vec![hw, 1], alpha)?,
    })
}

/// Projects world-space splats for a camera: `(proj[N,6], opacity[N,1])`.
pub fn project_splats(gaussians: &[Gaussian3D], cam: &Camera) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let n = gaussians.len();
    let mut tape = Tape::<f64>::new();
    let means = tape.constant(Tensor::new(vec![n, 3], gaussians.iter().flat_map(|g| g.mean).collect())?);
    let q = tape.constant(Tensor::new(vec![n, 4], gaussians.iter().flat_map(|g| g.rotation).collect())?);
    let s = tape.constant(Tensor::new(vec![n, 3], gaussians.iter().flat_map(|g| g.scale).collect())?);
    let cov = tape.build_covariance(q, s)?;
    let proj = tape.apply1(ProjectOp::new(cam.clone()), &[means, cov])?;
    let opacity = Tensor::new(vec![n, 1], gaussians.iter().map(|g| g.opacity).collect())?;
    Ok((tape.value(proj).clone(), opacity))
}

// ---------------------------------------------------------------------------
// Differentiable op

/// Number of gradient slots per list entry ahead of the payload channels:
/// mean x/y, conic xx/xy/yy, opacity, depth.
const FIXED_SLOTS: usize = 7;

struct Saved<T> {
    bins: TileBinning,
    t_final: Vec<T>,
    last: Vec<u32>,
    splats: usize,
    channels: usize,
}

/// `(proj[N,6], opacity[N,1], payload[N,C]) -> (features[HW,C], depth[HW,1], alpha[HW,1])`.
pub struct RasterizeOp<T> {
    settings: RasterSettings,
    saved: Option<Saved<T>>,
}

impl<T> RasterizeOp<T> {
    pub fn new(settings: RasterSettings) -> Self {
        Self { settings, saved: None }
    }
}

/// Back-to-front walk of one pixel, writing per-entry gradients into `acc`.
#[allow(clippy::too_many_arguments)]
fn backward_pixel<T: Real>(
    list: &[u32],
    last: u32,
    t_final: T,
    splats: &[Option<Splat<T>>],
    payload: &Tensor<T>,
    bg: &[T],
    (px, py): (T, T),
    (g_feat, g_depth, g_alpha): (&[T], T, T),
    acc: &mut [T],
    scratch: &mut [T],
) {
    let channels = bg.len();
    let stride = FIXED_SLOTS + channels;
    let one = T::one();
    // composite of everything behind the current splat, per unit transmittance
    let back_f = scratch;
    back_f.copy_from_slice(bg);
    let mut back_d = T::zero();
    let mut t = t_final;
    for k in (0..last as usize).rev() {
        let i = list[k] as usize;
        let Some(s) = &splats[i] else { continue };
        let Some((alpha, g, clamped)) = alpha_at(s, px, py) else { continue };
        let t_before = t / (one - alpha);
        let w = alpha * t_before;
        let f = payload.row(i);
        let slot = &mut acc[k * stride..(k + 1) * stride];

        let mut d_alpha = T::zero();
        for c in 0..channels {
            slot[FIXED_SLOTS + c] = slot[FIXED_SLOTS + c] + w * g_feat[c];
            d_alpha = d_alpha + g_feat[c] * (f[c] - back_f[c]);
        }
        slot[6] = slot[6] + w * g_depth;
        d_alpha = t_before * (d_alpha + g_depth * (s.depth - back_d)) + g_alpha * t_final / (one - alpha);

        if !clamped {
            // α = o·exp(power)
            slot[5] = slot[5] + d_alpha * g;
            let d_power = d_alpha * alpha;
            let dx = px - s.mean[0];
            let dy = py - s.mean[1];
            slot[0] = slot[0] + d_power * (s.conic[0] * dx + s.conic[1] * dy);
            slot[1] = slot[1] + d_power * (s.conic[1] * dx + s.conic[2] * dy);
            let half = T::of(0.5);
            slot[2] = slot[2] - d_power * half * dx * dx;
            slot[3] = slot[3] - d_power * dx * dy;
            slot[4] = slot[4] - d_power * half * dy * dy;
        }

        for c in 0..channels {
            back_f[c] = alpha * f[c] + (one - alpha) * back_f[c];
        }
        back_d = alpha * s.depth + (one - alpha) * back_d;
        t = t_before;
    }
}

/// Chain rule from packed conic gradients to packed covariance gradients.
/// Off-diagonal gradients are totals over both symmetric entries.
fn conic_to_cov_grad<T: Real>(q: [T; 3], g: [T; 3]) -> [T; 3] {
    let half = T::of(0.5);
    let qm = [[q[0], q[1]], [q[1], q[2]]];
    let gm = [[g[0], g[1] * half], [g[1] * half, g[2]]];
    let mut out = [[T::zero(); 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            let mut s = T::zero();
            for c in 0..2 {
                for d in 0..2 {
                    s = s + qm[a][c] * gm[c][d] * qm[d][b];
                }
            }
            out[a][b] = -s;
        }
    }
    [out[0][0], out[0][1] + out[1][0], out[1][1]]
}

impl<T: Real> Op<T> for RasterizeOp<T> {
    fn name(&self) -> &'static str {
        "rasterize"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let fwd = forward_tiled(inputs[0], inputs[1], inputs[2], &self.settings)?;
        self.saved = Some(Saved {
            bins: fwd.bins,
            t_final: fwd.t_final,
            last: fwd.last,
            splats: inputs[0].rows(),
            channels: inputs[2].cols(),
        });
        Ok(vec![fwd.maps.features, fwd.maps.depth, fwd.maps.alpha])
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let saved = self
            .saved
            .as_ref()
            .ok_or_else(|| contract("rasterize backward called without a forward pass"))?;
        let (proj, opacity, payload) = (ctx.inputs[0], ctx.inputs[1], ctx.inputs[2]);
        let n = check_inputs(proj, opacity, payload)?;
        let channels = payload.cols();
        let hw = self.settings.pixels();
        if n != saved.splats || channels != saved.channels || saved.t_final.len() != hw {
            return Err(contract("rasterize backward: inputs do not match the saved forward context"));
        }
        let bg = self.settings.background::<T>(channels)?;
        let splats = prepare(proj, opacity, self.settings.z_near)?;
        let g_feat = ctx.grad_or_zeros(0);
        let g_depth = ctx.grad_or_zeros(1);
        let g_alpha = ctx.grad_or_zeros(2);
        let stride = FIXED_SLOTS + channels;
        let bins = &saved.bins;
        let width = self.settings.width;

        let per_tile: Vec<Vec<T>> = (0..bins.tile_count())
            .into_par_iter()
            .map(|tile| {
                let list = bins.list(tile);
                let mut acc = vec![T::zero(); list.len() * stride];
                if list.is_empty() {
                    return acc;
                }
                let mut scratch = vec![T::zero(); channels];
                for (x, y) in bins.pixels(tile, &self.settings) {
                    let p = y * width + x;
                    backward_pixel(
                        list,
                        saved.last[p],
                        saved.t_final[p],
                        &splats,
                        payload,
                        &bg,
                        (T::of(x as f64), T::of(y as f64)),
                        (g_feat.row(p), g_depth.row(p)[0], g_alpha.row(p)[0]),
                        &mut acc,
                        &mut scratch,
                    );
                }
                acc
            })
            .collect();

        // ordered reduction: tile index, then list position
        let mut g_splat = vec![T::zero(); n * stride];
        for (tile, acc) in per_tile.iter().enumerate() {
            for (k, &i) in bins.list(tile).iter().enumerate() {
                let dst = &mut g_splat[i as usize * stride..(i as usize + 1) * stride];
                for (d, &s) in dst.iter_mut().zip(&acc[k * stride..(k + 1) * stride]) {
                    *d = *d + s;
                }
            }
        }

        let mut g_proj = Tensor::zeros(proj.shape());
        let mut g_opacity = Tensor::zeros(opacity.shape());
        let mut g_payload = Tensor::zeros(payload.shape());
        for (i, s) in splats.iter().enumerate() {
            let Some(s) = s else { continue };
            let g = &g_splat[i * stride..(i + 1) * stride];
            let gc = conic_to_cov_grad(s.conic, [g[2], g[3], g[4]]);
            let row = g_proj.row_mut(i);
            row[proj_col::MEAN_X] = g[0];
            row[proj_col::MEAN_Y] = g[1];
            row[proj_col::COV_XX] = gc[0];
            row[proj_col::COV_XY] = gc[1];
            row[proj_col::COV_YY] = gc[2];
            row[proj_col::DEPTH] = g[6];
            g_opacity.row_mut(i)[0] = g[5];
            g_payload.row_mut(i).copy_from_slice(&g[FIXED_SLOTS..]);
        }
        Ok(vec![Some(g_proj), Some(g_opacity), Some(g_payload)])
    }
}

/// Vars produced by [`Tape::rasterize`].
#[derive(Clone, Copy, Debug)]
pub struct RenderVars {
    pub features: Var,
    pub depth: Var,
    pub alpha: Var,
}

impl<T: Real> Tape<T> {
    pub fn rasterize(&mut self, proj: Var, opacity: Var, payload: Var, settings: &RasterSettings) -> Result<RenderVars> {
        let out = self.apply(RasterizeOp::new(settings.clone()), &[proj, opacity, payload])?;
        Ok(RenderVars {
            features: out[0],
            depth: out[1],
            alpha: out[2],
        })
    }
}

//! Two-stage set-abstraction encoder and feature-propagation decoder.
//!
//! The encoder samples centres by farthest-point sampling, groups k nearest
//! neighbours, runs a shared MLP on (relative offset, neighbour feature) and
//! max-pools each group: `N → N/4 → M`. The decoder interpolates features back
//! up with inverse-distance weights over 3 neighbours and merges the cached
//! skip features at each level.
//!
//! Sampling and neighbour tables depend only on coordinates, so they live in a
//! [`Hierarchy`] that can be built once per cloud and reused across steps.

use std::cmp::Ordering;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamStore, Real, Tape, Tensor, Var};
use crate::error::{contract, Error, Result};
use crate::nn::{Init, Mlp};

/// Interpolation weight regulariser: `w = 1 / (d² + ε)`.
pub const IDW_EPS: f64 = 1e-8;
const INTERP_K: usize = 3;

/// Coordinates, colours in `[0,1]` and optional per-point features.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    coords: Vec<f64>,
    colors: Vec<f64>,
    features: Option<(usize, Vec<f64>)>,
}

impl PointCloud {
    pub fn new(coords: Vec<f64>, colors: Vec<f64>) -> Result<Self> {
        if coords.len() % 3 != 0 || coords.len() != colors.len() {
            return Err(Error::Input(format!(
                "point cloud needs N×3 coords and colours, got {} and {}",
                coords.len(),
                colors.len()
            )));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::Input("non-finite coordinate".into()));
        }
        if colors.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Input("colour outside [0, 1]".into()));
        }
        Ok(Self {
            coords,
            colors,
            features: None,
        })
    }

    pub fn with_features(mut self, dim: usize, features: Vec<f64>) -> Result<Self> {
        if features.len() != dim * self.len() {
            return Err(Error::Input("feature block does not match point count".into()));
        }
        self.features = Some((dim, features));
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.coords.len() / 3
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn colors(&self) -> &[f64] {
        &self.colors
    }

    pub fn features(&self) -> Option<(usize, &[f64])> {
        self.features.as_ref().map(|(d, f)| (*d, f.as_slice()))
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        [self.coords[3 * i], self.coords[3 * i + 1], self.coords[3 * i + 2]]
    }

    pub fn color(&self, i: usize) -> [f64; 3] {
        [self.colors[3 * i], self.colors[3 * i + 1], self.colors[3 * i + 2]]
    }

    /// Reorders points so that new point `i` is old point `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let pick = |v: &[f64], d: usize| -> Vec<f64> {
            perm.iter().flat_map(|&i| v[i * d..(i + 1) * d].iter().copied()).collect()
        };
        Self {
            coords: pick(&self.coords, 3),
            colors: pick(&self.colors, 3),
            features: self.features.as_ref().map(|(d, f)| (*d, pick(f, *d))),
        }
    }

    pub fn translated(&self, t: [f64; 3]) -> Self {
        let mut out = self.clone();
        for p in out.coords.chunks_mut(3) {
            for k in 0..3 {
                p[k] += t[k];
            }
        }
        out
    }

    /// Bounding box `(min, max)`.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in self.coords.chunks(3) {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    /// Sparse latent point count M.
    pub m_sparse: usize,
    /// Neighbours per set-abstraction group.
    pub k_group: usize,
    /// Sparse feature width D_s.
    pub d_sparse: usize,
    /// Dense feature width D_d.
    pub d_dense: usize,
    /// Feature width after the first abstraction stage.
    pub d_mid: usize,
    /// Hidden width of the per-point maps.
    pub hidden: usize,
    /// Multiplier applied to relative neighbour offsets before the MLP.
    pub rel_scale: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            m_sparse: 256,
            k_group: 16,
            d_sparse: 64,
            d_dense: 64,
            d_mid: 32,
            hidden: 64,
            rel_scale: 10.0,
        }
    }
}

impl CodecConfig {
    pub fn mid_count(&self, n: usize) -> usize {
        (n / 4).max(self.m_sparse)
    }

    fn stage1(&self) -> Mlp {
        Mlp::new("codec.enc1", &[6, self.hidden / 2, self.d_mid], true)
    }

    fn stage2(&self) -> Mlp {
        Mlp::new("codec.enc2", &[3 + self.d_mid, self.hidden, self.d_sparse], true)
    }

    fn up1(&self) -> Mlp {
        Mlp::new("codec.dec1", &[self.d_sparse + self.d_mid, self.hidden, self.hidden], true)
    }

    fn up0(&self) -> Mlp {
        Mlp::new("codec.dec0", &[self.hidden + 3, self.hidden, self.d_dense], false)
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        for mlp in [self.stage1(), self.stage2(), self.up1(), self.up0()] {
            mlp.init(store, rng, &Init::Glorot)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Sampling and neighbour search

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Farthest-point sampling of `m` indices. Starts at the lexicographically
/// smallest point; ties prefer the lexicographically smaller point, then the
/// lower index, so the selection is invariant to input order.
pub fn farthest_point_sample(coords: &[f64], m: usize) -> Vec<usize> {
    let n = coords.len() / 3;
    let p = |i: usize| &coords[3 * i..3 * i + 3];
    let better = |a: usize, b: usize| lex_cmp(p(a), p(b)).then(a.cmp(&b)) == Ordering::Less;
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let mut start = 0;
    for i in 1..n {
        if better(i, start) {
            start = i;
        }
    }
    let mut selected = Vec::with_capacity(m);
    let mut dist = vec![f64::INFINITY; n];
    let mut cur = start;
    for _ in 0..m {
        selected.push(cur);
        let pc = p(cur);
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            let d = dist2(p(i), pc);
            if d < dist[i] {
                dist[i] = d;
            }
            let di = dist[i];
            if best == usize::MAX || di > best_d || (di == best_d && better(i, best)) {
                best = i;
                best_d = di;
            }
        }
        cur = best;
    }
    selected
}

/// The `k` nearest source points of each query, nearest first. Distance ties
/// break on lexicographic coordinates, then index.
pub fn knn(queries: &[f64], sources: &[f64], k: usize) -> Vec<usize> {
    let ns = sources.len() / 3;
    let k = k.min(ns);
    let src = |i: usize| &sources[3 * i..3 * i + 3];
    let mut out = Vec::with_capacity(queries.len() / 3 * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(ns);
    for q in queries.chunks(3) {
        cand.clear();
        cand.extend((0..ns).map(|i| (dist2(q, src(i)), i)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            a.0.total_cmp(&b.0)
                .then_with(|| lex_cmp(src(a.1), src(b.1)))
                .then(a.1.cmp(&b.1))
        };
        if k < ns {
            cand.select_nth_unstable_by(k - 1, cmp);
        }
        cand[..k].sort_unstable_by(cmp);
        out.extend(cand[..k].iter().map(|&(_, i)| i));
    }
    out
}

fn gather_coords(coords: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().flat_map(|&i| coords[3 * i..3 * i + 3].iter().copied()).collect()
}

/// One set-abstraction stage: centres and grouping table.
#[derive(Clone, Debug)]
pub struct Stage {
    pub centers: Vec<f64>,
    pub k: usize,
    pub groups: Arc<Vec<usize>>,
    /// Scaled offsets `rel_scale · (neighbour − centre)`, `[centres·k, 3]`.
    pub offsets: Vec<f64>,
}

impl Stage {
    fn build(source: &[f64], count: usize, k: usize, rel_scale: f64) -> Self {
        let picked = farthest_point_sample(source, count);
        let centers = gather_coords(source, &picked);
        let k = k.min(source.len() / 3);
        let groups = knn(&centers, source, k);
        let mut offsets = Vec::with_capacity(groups.len() * 3);
        for (g, &j) in groups.iter().enumerate() {
            let c = &centers[3 * (g / k)..3 * (g / k) + 3];
            for a in 0..3 {
                offsets.push(rel_scale * (source[3 * j + a] - c[a]));
            }
        }
        Self {
            centers,
            k,
            groups: Arc::new(groups),
            offsets,
        }
    }

    pub fn count(&self) -> usize {
        self.centers.len() / 3
    }
}

/// Inverse-distance interpolation table from a coarse to a fine level.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub idx: Arc<Vec<usize>>,
    pub weights: Vec<f64>,
}

impl Upsample {
    fn build(fine: &[f64], coarse: &[f64]) -> Self {
        let k = INTERP_K.min(coarse.len() / 3);
        let idx = knn(fine, coarse, k);
        let mut weights = Vec::with_capacity(idx.len());
        for (q, nb) in fine.chunks(3).zip(idx.chunks(k)) {
            let w: Vec<f64> = nb
                .iter()
                .map(|&j| 1.0 / (dist2(q, &coarse[3 * j..3 * j + 3]) + IDW_EPS))
                .collect();
            let total: f64 = w.iter().sum();
            weights.extend(w.into_iter().map(|x| x / total));
        }
        // pad to INTERP_K neighbours so MixRows sees a fixed fan-in
        if k < INTERP_K {
            let mut pi = Vec::new();
            let mut pw = Vec::new();
            for (nb, w) in idx.chunks(k).zip(weights.chunks(k)) {
                for s in 0..INTERP_K {
                    pi.push(nb[s.min(k - 1)]);
                    pw.push(if s < k { w[s] } else { 0.0 });
                }
            }
            return Self {
                idx: Arc::new(pi),
                weights: pw,
            };
        }
        Self {
            idx: Arc::new(idx),
            weights,
        }
    }

    pub fn weights_as<T: Real>(&self) -> Arc<Vec<T>> {
        Arc::new(self.weights.iter().map(|&w| T::of(w)).collect())
    }
}

/// Coordinate-only structure of a cloud: sampled levels, groups and
/// interpolation tables.
#[derive(Clone, Debug)]
pub struct Hierarchy {
    pub dense: Vec<f64>,
    pub stage1: Stage,
    pub stage2: Stage,
    /// sparse → mid
    pub up_mid: Upsample,
    /// mid → dense
    pub up_dense: Upsample,
}

impl Hierarchy {
    pub fn build(coords: &[f64], cfg: &CodecConfig) -> Result<Self> {
        let n = coords.len() / 3;
        if n == 0 {
            return Err(Error::Input("encode needs at least one point".into()));
        }
        if n < cfg.m_sparse {
            return Err(Error::Input(format!(
                "cloud has {n} points, fewer than M = {}",
                cfg.m_sparse
            )));
        }
        let mid = cfg.mid_count(n).min(n);
        let stage1 = Stage::build(coords, mid, cfg.k_group, cfg.rel_scale);
        let stage2 = Stage::build(&stage1.centers, cfg.m_sparse, cfg.k_group, cfg.rel_scale);
        let up_mid = Upsample::build(&stage1.centers, &stage2.centers);
        let up_dense = Upsample::build(coords, &stage1.centers);
        Ok(Self {
            dense: coords.to_vec(),
            stage1,
            stage2,
            up_mid,
            up_dense,
        })
    }

    pub fn dense_count(&self) -> usize {
        self.dense.len() / 3
    }

    pub fn sparse_coords(&self) -> &[f64] {
        &self.stage2.centers
    }
}

// ---------------------------------------------------------------------------
// Differentiable encode / decode

/// Encoder output: `P_sparse` plus the per-level skip features.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub sparse_features: Var,
    pub skip_mid: Var,
    pub skip_dense: Var,
}

fn abstraction<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    stage: &Stage,
    mlp: &Mlp,
    features: Var,
) -> Result<Var> {
    let grouped = tape.gather_rows(features, stage.groups.clone())?;
    let offsets = tape.constant(Tensor::new(
        vec![stage.groups.len(), 3],
        stage.offsets.iter().map(|&v| T::of(v)).collect(),
    )?);
    let x = tape.concat_cols(&[offsets, grouped])?;
    let h = mlp.forward(tape, store, x)?;
    tape.group_max(h, stage.k)
}

/// `P_raw → P_sparse`. `colors` is an `[N,3]` var aligned with `hier.dense`.
pub fn encode<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &CodecConfig,
    hier: &Hierarchy,
    colors: Var,
) -> Result<Encoded> {
    let shape = tape.value(colors).shape();
    if shape != [hier.dense_count(), 3] {
        return Err(contract(format!(
            "encode: colours {:?} do not match {} points",
            shape,
            hier.dense_count()
        )));
    }
    let mid = abstraction(tape, store, &hier.stage1, &cfg.stage1(), colors)?;
    let sparse = abstraction(tape, store, &hier.stage2, &cfg.stage2(), mid)?;
    Ok(Encoded {
        sparse_features: sparse,
        skip_mid: mid,
        skip_dense: colors,
    })
}

/// Inverse-distance interpolation of `[coarse, d]` features onto a finer level.
pub fn interpolate<T: Real>(tape: &mut Tape<T>, up: &Upsample, x: Var) -> Result<Var> {
    tape.mix_rows(x, INTERP_K, up.idx.clone(), up.weights_as())
}

/// `P̂_sparse → P_dense` features `[N, D_d]`, aligned with `hier.dense`.
pub fn decode<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &CodecConfig,
    hier: &Hierarchy,
    sparse_features: Var,
    enc: &Encoded,
) -> Result<Var> {
    let check = |v: Var, rows: usize, cols: usize, what: &str| -> Result<()> {
        let s = tape.value(v).shape();
        if s != [rows, cols] {
            return Err(contract(format!("decode: {what} has shape {s:?}, expected [{rows}, {cols}]")));
        }
        Ok(())
    };
    check(sparse_features, hier.stage2.count(), cfg.d_sparse, "sparse features")?;
    check(enc.skip_mid, hier.stage1.count(), cfg.d_mid, "mid skip")?;
    check(enc.skip_dense, hier.dense_count(), 3, "dense skip")?;

    let up = interpolate(tape, &hier.up_mid, sparse_features)?;
    let x = tape.concat_cols(&[up, enc.skip_mid])?;
    let mid = cfg.up1().forward(tape, store, x)?;
    let up = interpolate(tape, &hier.up_dense, mid)?;
    let x = tape.concat_cols(&[up, enc.skip_dense])?;
    cfg.up0().forward(tape, store, x)
}

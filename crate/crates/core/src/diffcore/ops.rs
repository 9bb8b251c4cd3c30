//! The registered differentiable primitives.
//!
//! Every op here is a plain struct implementing [`Op`]; the `Tape` methods at
//! the bottom are thin recorders around them.

use std::sync::Arc;

use crate::diffcore::tensor::gemm;
use crate::diffcore::{BackwardCtx, Op, Real, Tape, Tensor, Var};
use crate::error::{contract, Result};

type Grads<T> = Result<Vec<Option<Tensor<T>>>>;

fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(contract(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("same shape")
}

// ---------------------------------------------------------------------------
// Elementwise

/// Pointwise unary functions with closed-form derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Silu,
    Sigmoid,
    Exp,
    Tanh,
    Scale(f64),
    /// Identity inside `[lo, hi]`, constant outside (zero gradient there).
    Clamp(f64, f64),
}

impl Unary {
    fn eval<T: Real>(self, x: T) -> T {
        match self {
            Unary::Silu => x * sigmoid(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Tanh => x.tanh(),
            Unary::Scale(c) => x * T::of(c),
            Unary::Clamp(lo, hi) => x.max(T::of(lo)).min(T::of(hi)),
        }
    }

    fn deriv<T: Real>(self, x: T, y: T) -> T {
        match self {
            Unary::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Exp => y,
            Unary::Tanh => T::one() - y * y,
            Unary::Scale(c) => T::of(c),
            Unary::Clamp(lo, hi) => {
                if x >= T::of(lo) && x <= T::of(hi) {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub struct UnaryOp(pub Unary);

impl<T: Real> Op<T> for UnaryOp {
    fn name(&self) -> &'static str {
        match self.0 {
            Unary::Silu => "silu",
            Unary::Sigmoid => "sigmoid",
            Unary::Exp => "exp",
            Unary::Tanh => "tanh",
            Unary::Scale(_) => "scale",
            Unary::Clamp(..) => "clamp",
        }
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let f = self.0;
        Ok(vec![inputs[0].map(|x| f.eval(x))])
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let f = self.0;
        let g = ctx.grad_or_zeros(0);
        let x = ctx.inputs[0].data();
        let y = ctx.outputs[0].data();
        let data = g
            .data()
            .iter()
            .enumerate()
            .map(|(i, &gi)| gi * f.deriv(x[i], y[i]))
            .collect();
        Ok(vec![Some(Tensor::new(g.shape().to_vec(), data)?)])
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

pub struct BinaryOp(pub Binary);

impl<T: Real> Op<T> for BinaryOp {
    fn name(&self) -> &'static str {
        match self.0 {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let (a, b) = (inputs[0], inputs[1]);
        same_shape(<Self as Op<T>>::name(self), a, b)?;
        Ok(vec![match self.0 {
            Binary::Add => zip_map(a, b, |x, y| x + y),
            Binary::Sub => zip_map(a, b, |x, y| x - y),
            Binary::Mul => zip_map(a, b, |x, y| x * y),
        }])
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let g = ctx.grad_or_zeros(0);
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        Ok(match self.0 {
            Binary::Add => vec![Some(g.clone().into_owned()), Some(g.into_owned())],
            Binary::Sub => vec![Some(g.clone().into_owned()), Some(g.map(|x| -x))],
            Binary::Mul => vec![
                ctx.needs[0].then(|| zip_map(&g, b, |x, y| x * y)),
                ctx.needs[1].then(|| zip_map(&g, a, |x, y| x * y)),
            ],
        })
    }
}

// ---------------------------------------------------------------------------
// Linear algebra and row plumbing

/// `a[n,k] · b[k,m]`.
pub struct MatMul;

impl<T: Real> Op<T> for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let (a, b) = (inputs[0], inputs[1]);
        if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
            return Err(contract(format!(
                "matmul: incompatible shapes {:?} · {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (n, k, m) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(&[n, m]);
        gemm(n, k, m, a.data(), false, b.data(), false, out.data_mut(), false);
        Ok(vec![out])
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let g = ctx.grad_or_zeros(0);
        let (n, k, m) = (a.rows(), a.cols(), b.cols());
        let ga = ctx.needs[0].then(|| {
            let mut ga = Tensor::zeros(a.shape());
            gemm(n, m, k, g.data(), false, b.data(), true, ga.data_mut(), false);
            ga
        });
        let gb = ctx.needs[1].then(|| {
            let mut gb = Tensor::zeros(b.shape());
            gemm(k, n, m, a.data(), true, g.data(), false, gb.data_mut(), false);
            gb
        });
        Ok(vec![ga, gb])
    }
}

/// `x[n,m] + b[m]` broadcast over rows.
pub struct AddBias;

impl<T: Real> Op<T> for AddBias {
    fn name(&self) -> &'static str {
        "add_bias"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let (x, b) = (inputs[0], inputs[1]);
        let m = x.cols();
        if b.numel() != m {
            return Err(contract(format!(
                "add_bias: bias of {} entries for rows of width {m}",
                b.numel()
            )));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(m.max(1)) {
            for (o, &bi) in row.iter_mut().zip(b.data()) {
                *o = *o + bi;
            }
        }
        Ok(vec![out])
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let g = ctx.grad_or_zeros(0);
        let b = ctx.inputs[1];
        let gb = ctx.needs[1].then(|| {
            let m = b.numel();
            let mut acc = vec![T::zero(); m];
            for row in g.data().chunks(m.max(1)) {
                for (a, &x) in acc.iter_mut().zip(row) {
                    *a = *a + x;
                }
            }
            Tensor::new(b.shape().to_vec(), acc).expect("bias shape")
        });
        Ok(vec![ctx.needs[0].then(|| g.into_owned()), gb])
    }
}

/// Column-wise concatenation of 2-D tensors with equal row counts.
pub struct ConcatCols;

impl<T: Real> Op<T> for ConcatCols {
    fn name(&self) -> &'static str {
        "concat_cols"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let n = inputs[0].rows();
        if inputs.iter().any(|t| t.rows() != n) {
            return Err(contract("concat_cols: row counts differ"));
        }
        let widths: Vec<usize> = inputs.iter().map(|t| t.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for t in inputs {
                data.extend_from_slice(t.row(i));
            }
        }
        Ok(vec![Tensor::new(vec![n, total], data)?])
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let g = ctx.grad_or_zeros(0);
        let n = g.rows();
        let mut offset = 0;
        let mut out = Vec::with_capacity(ctx.inputs.len());
        for (t, &need) in ctx.inputs.iter().zip(ctx.needs) {
            let w = t.cols();
            if need {
                let mut data = Vec::with_capacity(n * w);
                for i in 0..n {
                    data.extend_from_slice(&g.row(i)[offset..offset + w]);
                }
                out.push(Some(Tensor::new(t.shape().to_vec(), data)?));
            } else {
                out.push(None);
            }
            offset += w;
        }
        Ok(out)
    }
}

/// Columns `[start, start+len)` of a 2-D tensor.
pub struct SliceCols {
    pub start: usize,
    pub len: usize,
}

impl<T: Real> Op<T> for SliceCols {
    fn name(&self) -> &'static str {
        "slice_cols"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let x = inputs[0];
        if self.start + self.len > x.cols() {
            return Err(contract(format!(
                "slice_cols: [{}, {}) out of {} columns",
                self.start,
                self.start + self.len,
                x.cols()
            )));
        }
        let n = x.rows();
        let mut data = Vec::with_capacity(n * self.len);
        for i in 0..n {
            data.extend_from_slice(&x.row(i)[self.start..self.start + self.len]);
        }
        Ok(vec![Tensor::new(vec![n, self.len], data)?])
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let g = ctx.grad_or_zeros(0);
        let x = ctx.inputs[0];
        let mut gx = Tensor::zeros(&[x.rows(), x.cols()]);
        for i in 0..x.rows() {
            gx.row_mut(i)[self.start..self.start + self.len].copy_from_slice(g.row(i));
        }
        Ok(vec![Some(gx.reshape(x.shape())?)])
    }
}

/// Row gather `out[i] = x[idx[i]]`.
pub struct GatherRows {
    pub idx: Arc<Vec<usize>>,
}

impl<T: Real> Op<T> for GatherRows {
    fn name(&self) -> &'static str {
        "gather_rows"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let x = inputs[0];
        let d = x.cols();
        if let Some(&bad) = self.idx.iter().find(|&&i| i >= x.rows()) {
            return Err(contract(format!("gather_rows: index {bad} >= {}", x.rows())));
        }
        let mut data = Vec::with_capacity(self.idx.len() * d);
        for &i in self.idx.iter() {
            data.extend_from_slice(x.row(i));
        }
        Ok(vec![Tensor::new(vec![self.idx.len(), d], data)?])
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let g = ctx.grad_or_zeros(0);
        let x = ctx.inputs[0];
        let mut gx = Tensor::zeros(&[x.rows(), x.cols()]);
        for (r, &i) in self.idx.iter().enumerate() {
            for (a, &b) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                *a = *a + b;
            }
        }
        Ok(vec![Some(gx.reshape(x.shape())?)])
    }
}

/// Max over consecutive groups of `group` rows: `[g*group, d] -> [g, d]`.
pub struct GroupMax {
    pub group: usize,
    argmax: Vec<usize>,
}

impl GroupMax {
    pub fn new(group: usize) -> Self {
        Self {
            group,
            argmax: Vec::new(),
        }
    }
}

impl<T: Real> Op<T> for GroupMax {
    fn name(&self) -> &'static str {
        "group_max"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let x = inputs[0];
        let k = self.group;
        if k == 0 || x.rows() % k != 0 {
            return Err(contract(format!(
                "group_max: {} rows not divisible into groups of {k}",
                x.rows()
            )));
        }
        let (g, d) = (x.rows() / k, x.cols());
        let mut out = Tensor::zeros(&[g, d]);
        self.argmax = vec![0; g * d];
        for gi in 0..g {
            for c in 0..d {
                let mut best = gi * k;
                for r in gi * k + 1..(gi + 1) * k {
                    // first maximum wins on ties
                    if x.data()[r * d + c] > x.data()[best * d + c] {
                        best = r;
                    }
                }
                self.argmax[gi * d + c] = best;
                out.data_mut()[gi * d + c] = x.data()[best * d + c];
            }
        }
        Ok(vec![out])
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let g = ctx.grad_or_zeros(0);
        let x = ctx.inputs[0];
        let d = x.cols();
        let mut gx = Tensor::zeros(x.shape());
        for (j, &r) in self.argmax.iter().enumerate() {
            let c = j % d;
            gx.data_mut()[r * d + c] = gx.data()[r * d + c] + g.data()[j];
        }
        Ok(vec![Some(gx)])
    }
}

/// Fixed sparse row mixing: `out[i] = Σ_j w[i*k+j] · x[idx[i*k+j]]`.
///
/// Used for inverse-distance interpolation where neighbour sets and weights
/// come from non-differentiable geometry.
pub struct MixRows<T> {
    pub k: usize,
    pub idx: Arc<Vec<usize>>,
    pub weights: Arc<Vec<T>>,
}

impl<T: Real> Op<T> for MixRows<T> {
    fn name(&self) -> &'static str {
        "mix_rows"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let x = inputs[0];
        let d = x.cols();
        if self.idx.len() != self.weights.len() || self.k == 0 || self.idx.len() % self.k != 0 {
            return Err(contract("mix_rows: malformed neighbour table"));
        }
        if self.idx.iter().any(|&i| i >= x.rows()) {
            return Err(contract("mix_rows: neighbour index out of range"));
        }
        let m = self.idx.len() / self.k;
        let mut out = Tensor::zeros(&[m, d]);
        for i in 0..m {
            let row = out.row_mut(i);
            for j in i * self.k..(i + 1) * self.k {
                let w = self.weights[j];
                for (o, &v) in row.iter_mut().zip(x.row(self.idx[j])) {
                    *o = *o + w * v;
                }
            }
        }
        Ok(vec![out])
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let g = ctx.grad_or_zeros(0);
        let x = ctx.inputs[0];
        let mut gx = Tensor::zeros(&[x.rows(), x.cols()]);
        for (j, (&src, &w)) in self.idx.iter().zip(self.weights.iter()).enumerate() {
            let gi = g.row(j / self.k);
            for (a, &b) in gx.row_mut(src).iter_mut().zip(gi) {
                *a = *a + w * b;
            }
        }
        Ok(vec![Some(gx.reshape(x.shape())?)])
    }
}

/// Softmax attention pooling: `scores[n,1]`, `values[n,d]` → `Σ softmax(s)_i v_i` as `[1,d]`.
pub struct AttentionPool<T> {
    weights: Vec<T>,
}

impl<T> Default for AttentionPool<T> {
    fn default() -> Self {
        Self {
            weights: Vec::new(),
        }
    }
}

impl<T: Real> Op<T> for AttentionPool<T> {
    fn name(&self) -> &'static str {
        "attention_pool"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let (s, v) = (inputs[0], inputs[1]);
        if s.numel() != v.rows() || v.rows() == 0 {
            return Err(contract("attention_pool: one score per value row required"));
        }
        let max = s.data().iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = s.data().iter().map(|&x| (x - max).exp()).collect();
        let z: T = e.iter().copied().sum();
        self.weights = e.into_iter().map(|x| x / z).collect();
        let d = v.cols();
        let mut out = vec![T::zero(); d];
        for (i, &a) in self.weights.iter().enumerate() {
            for (o, &x) in out.iter_mut().zip(v.row(i)) {
                *o = *o + a * x;
            }
        }
        Ok(vec![Tensor::new(vec![1, d], out)?])
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let (s, v) = (ctx.inputs[0], ctx.inputs[1]);
        let g = ctx.grad_or_zeros(0);
        let pooled = ctx.outputs[0].data();
        let dot = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&x, &y)| x * y).sum::<T>();
        let g_out = dot(g.data(), pooled);
        let gs = ctx.needs[0].then(|| {
            let data = (0..v.rows())
                .map(|i| self.weights[i] * (dot(g.data(), v.row(i)) - g_out))
                .collect();
            Tensor::new(s.shape().to_vec(), data).expect("score shape")
        });
        let gv = ctx.needs[1].then(|| {
            let mut gv = Tensor::zeros(v.shape());
            for i in 0..v.rows() {
                for (a, &b) in gv.row_mut(i).iter_mut().zip(g.data()) {
                    *a = self.weights[i] * b;
                }
            }
            gv
        });
        Ok(vec![gs, gv])
    }
}

/// Column means `[n,d] -> [1,d]`.
pub struct MeanRows;

impl<T: Real> Op<T> for MeanRows {
    fn name(&self) -> &'static str {
        "mean_rows"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let x = inputs[0];
        let (n, d) = (x.rows(), x.cols());
        if n == 0 {
            return Err(contract("mean_rows: empty input"));
        }
        let mut out = vec![T::zero(); d];
        for i in 0..n {
            for (o, &v) in out.iter_mut().zip(x.row(i)) {
                *o = *o + v;
            }
        }
        let inv = T::one() / T::of(n as f64);
        Ok(vec![Tensor::new(vec![1, d], out.into_iter().map(|v| v * inv).collect())?])
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let x = ctx.inputs[0];
        let g = ctx.grad_or_zeros(0);
        let inv = T::one() / T::of(x.rows() as f64);
        let mut gx = Tensor::zeros(x.shape());
        for i in 0..x.rows() {
            for (a, &b) in gx.row_mut(i).iter_mut().zip(g.data()) {
                *a = b * inv;
            }
        }
        Ok(vec![Some(gx)])
    }
}

/// Repeats a `[1,d]` row `n` times.
pub struct BroadcastRows {
    pub n: usize,
}

impl<T: Real> Op<T> for BroadcastRows {
    fn name(&self) -> &'static str {
        "broadcast_rows"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let x = inputs[0];
        if x.rows() != 1 {
            return Err(contract("broadcast_rows: expects a single row"));
        }
        let d = x.cols();
        let data = x.data().repeat(self.n);
        Ok(vec![Tensor::new(vec![self.n, d], data)?])
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let x = ctx.inputs[0];
        let g = ctx.grad_or_zeros(0);
        let mut acc = vec![T::zero(); x.cols()];
        for i in 0..self.n {
            for (a, &b) in acc.iter_mut().zip(g.row(i)) {
                *a = *a + b;
            }
        }
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), acc)?)])
    }
}

/// Scales each row to unit Euclidean norm.
pub struct NormalizeRows;

impl<T: Real> Op<T> for NormalizeRows {
    fn name(&self) -> &'static str {
        "normalize_rows"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let x = inputs[0];
        let mut out = x.clone();
        for i in 0..x.rows() {
            let norm = x.row(i).iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm == T::zero() {
                return Err(contract(format!("normalize_rows: row {i} has zero norm")));
            }
            out.row_mut(i).iter_mut().for_each(|v| *v = *v / norm);
        }
        Ok(vec![out])
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let (x, y) = (ctx.inputs[0], ctx.outputs[0]);
        let g = ctx.grad_or_zeros(0);
        let mut gx = Tensor::zeros(x.shape());
        for i in 0..x.rows() {
            let norm = x.row(i).iter().map(|&v| v * v).sum::<T>().sqrt();
            let yg: T = y.row(i).iter().zip(g.row(i)).map(|(&a, &b)| a * b).sum();
            for ((o, &yi), &gi) in gx.row_mut(i).iter_mut().zip(y.row(i)).zip(g.row(i)) {
                *o = (gi - yi * yg) / norm;
            }
        }
        Ok(vec![Some(gx)])
    }
}

// ---------------------------------------------------------------------------
// Reductions and losses

/// `Σ_i w_i s_i` over scalar inputs.
pub struct LinearCombination {
    pub weights: Vec<f64>,
}

impl<T: Real> Op<T> for LinearCombination {
    fn name(&self) -> &'static str {
        "linear_combination"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        if inputs.len() != self.weights.len() || inputs.iter().any(|t| t.numel() != 1) {
            return Err(contract("linear_combination: one weight per scalar input"));
        }
        let v = inputs
            .iter()
            .zip(&self.weights)
            .map(|(t, &w)| t.item() * T::of(w))
            .sum();
        Ok(vec![Tensor::scalar(v)])
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let g = ctx.grad_or_zeros(0).item();
        Ok(ctx
            .inputs
            .iter()
            .zip(&self.weights)
            .map(|(t, &w)| Some(Tensor::full(t.shape(), g * T::of(w))))
            .collect())
    }
}

/// Sum of all entries.
pub struct SumAll;

impl<T: Real> Op<T> for SumAll {
    fn name(&self) -> &'static str {
        "sum_all"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        Ok(vec![Tensor::scalar(inputs[0].sum())])
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let g = ctx.grad_or_zeros(0).item();
        Ok(vec![Some(Tensor::full(ctx.inputs[0].shape(), g))])
    }
}

/// Masked L1: `Σ_i m_i |a_i − b_i| / divisor` (mask defaults to all ones).
pub struct L1<T> {
    pub mask: Option<Arc<Vec<T>>>,
    pub divisor: T,
}

impl<T: Real> Op<T> for L1<T> {
    fn name(&self) -> &'static str {
        "l1"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let (a, b) = (inputs[0], inputs[1]);
        same_shape("l1", a, b)?;
        if let Some(m) = &self.mask {
            if m.len() != a.numel() {
                return Err(contract("l1: mask length differs from operands"));
            }
        }
        if self.divisor <= T::zero() {
            return Err(contract("l1: divisor must be positive"));
        }
        let mut s = T::zero();
        for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
            let w = self.mask.as_ref().map_or(T::one(), |m| m[i]);
            s = s + w * (x - y).abs();
        }
        Ok(vec![Tensor::scalar(s / self.divisor)])
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let g = ctx.grad_or_zeros(0).item() / self.divisor;
        let ga = Tensor::new(
            a.shape().to_vec(),
            a.data()
                .iter()
                .zip(b.data())
                .enumerate()
                .map(|(i, (&x, &y))| {
                    let w = self.mask.as_ref().map_or(T::one(), |m| m[i]);
                    let d = x - y;
                    let sign = if d > T::zero() {
                        T::one()
                    } else if d < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    g * w * sign
                })
                .collect(),
        )?;
        let gb = ctx.needs[1].then(|| ga.map(|x| -x));
        Ok(vec![ctx.needs[0].then_some(ga), gb])
    }
}

/// Closed-form KL of diagonal Gaussians against N(0, I), averaged over rows:
/// `(1/n) Σ_rows Σ_dims ½(μ² + e^{lv} − 1 − lv)`.
pub struct KlStdNormal;

impl<T: Real> Op<T> for KlStdNormal {
    fn name(&self) -> &'static str {
        "kl_std_normal"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let (mu, lv) = (inputs[0], inputs[1]);
        same_shape("kl_std_normal", mu, lv)?;
        let half = T::of(0.5);
        let s: T = mu
            .data()
            .iter()
            .zip(lv.data())
            .map(|(&m, &l)| half * (m * m + l.exp() - T::one() - l))
            .sum();
        Ok(vec![Tensor::scalar(s / T::of(mu.rows().max(1) as f64))])
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let (mu, lv) = (ctx.inputs[0], ctx.inputs[1]);
        let g = ctx.grad_or_zeros(0).item() / T::of(mu.rows().max(1) as f64);
        let half = T::of(0.5);
        Ok(vec![
            ctx.needs[0].then(|| mu.map(|m| g * m)),
            ctx.needs[1].then(|| lv.map(|l| g * half * (l.exp() - T::one()))),
        ])
    }
}

// ---------------------------------------------------------------------------
// Recorders

impl<T: Real> Tape<T> {
    pub fn unary(&mut self, f: Unary, x: Var) -> Result<Var> {
        self.apply1(UnaryOp(f), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Silu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::Scale(c), x)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(Unary::Clamp(lo, hi), x)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply1(BinaryOp(Binary::Add), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply1(BinaryOp(Binary::Sub), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply1(BinaryOp(Binary::Mul), &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply1(MatMul, &[a, b])
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.apply1(AddBias, &[x, b])
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        self.apply1(ConcatCols, xs)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.apply1(SliceCols { start, len }, &[x])
    }

    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        self.apply1(GatherRows { idx }, &[x])
    }

    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        self.apply1(GroupMax::new(group), &[x])
    }

    pub fn mix_rows(&mut self, x: Var, k: usize, idx: Arc<Vec<usize>>, weights: Arc<Vec<T>>) -> Result<Var> {
        self.apply1(MixRows { k, idx, weights }, &[x])
    }

    pub fn attention_pool(&mut self, scores: Var, values: Var) -> Result<Var> {
        self.apply1(AttentionPool::default(), &[scores, values])
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.apply1(MeanRows, &[x])
    }

    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        self.apply1(BroadcastRows { n }, &[x])
    }

    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        self.apply1(NormalizeRows, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.apply1(SumAll, &[x])
    }

    pub fn linear_combination(&mut self, xs: &[Var], weights: &[f64]) -> Result<Var> {
        self.apply1(
            LinearCombination {
                weights: weights.to_vec(),
            },
            xs,
        )
    }

    pub fn l1(&mut self, a: Var, b: Var, mask: Option<Arc<Vec<T>>>, divisor: T) -> Result<Var> {
        self.apply1(L1 { mask, divisor }, &[a, b])
    }

    pub fn kl_std_normal(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        self.apply1(KlStdNormal, &[mu, logvar])
    }
}

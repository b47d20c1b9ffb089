//! Differentiable operations recorded on a [`Tape`].

use std::sync::Arc;

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, gemm, MatView};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Sparse linear map between row spaces: `out[r] = Σ w · x[src]`.
///
/// Used for gathers, permutations, partitioning and bilinear warping. The
/// backward pass is the transposed scatter of the same weights.
#[derive(Clone, Debug, Default)]
pub struct RowMap {
    in_rows: usize,
    offsets: Vec<usize>,
    src: Vec<usize>,
    weight: Vec<f64>,
}

impl RowMap {
    pub fn new(in_rows: usize) -> Self {
        Self { in_rows, offsets: vec![0], src: Vec::new(), weight: Vec::new() }
    }

    /// Plain gather: output row `r` copies input row `indices[r]`.
    pub fn gather(indices: &[usize], in_rows: usize) -> Self {
        let mut m = Self::new(in_rows);
        for &i in indices {
            m.push_row(&[(i, 1.0)]);
        }
        m
    }

    /// Append an output row. Entries with zero weight are dropped.
    pub fn push_row(&mut self, entries: &[(usize, f64)]) {
        for &(s, w) in entries {
            assert!(s < self.in_rows, "row map source {s} out of range {}", self.in_rows);
            if w != 0.0 {
                self.src.push(s);
                self.weight.push(w);
            }
        }
        self.offsets.push(self.src.len());
    }

    pub fn out_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn in_rows(&self) -> usize {
        self.in_rows
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (s, e) = (self.offsets[r], self.offsets[r + 1]);
        self.src[s..e].iter().copied().zip(self.weight[s..e].iter().copied())
    }

    /// Inverse of a gather that is a permutation of `0..in_rows`.
    pub fn inverse_permutation(indices: &[usize]) -> Self {
        let mut inv = vec![usize::MAX; indices.len()];
        for (o, &i) in indices.iter().enumerate() {
            inv[i] = o;
        }
        assert!(inv.iter().all(|&v| v != usize::MAX), "indices are not a permutation");
        Self::gather(&inv, indices.len())
    }

    /// Apply to a plain row-major buffer with `cols` values per row.
    pub fn apply(&self, x: &[f64], cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.out_rows() * cols];
        for r in 0..self.out_rows() {
            let dst = &mut out[r * cols..(r + 1) * cols];
            for (k, (s, w)) in self.row(r).enumerate() {
                let src = &x[s * cols..(s + 1) * cols];
                if k == 0 && w == 1.0 {
                    dst.copy_from_slice(src);
                } else if w == 1.0 {
                    kernels::add_into(src, dst);
                } else {
                    kernels::axpy(w, src, dst);
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
pub(crate) enum Bcast {
    Same,
    /// rhs repeats with period `rhs.len()` over lhs.
    RhsRepeat,
    LhsRepeat,
    General { a_idx: Vec<usize>, b_idx: Vec<usize> },
}

#[derive(Debug)]
pub(crate) struct BatchPlan {
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
    /// Element offsets (a, b, c) of every batch item.
    items: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add { a: Var, b: Var, plan: Bcast },
    Sub { a: Var, b: Var, plan: Bcast },
    Mul { a: Var, b: Var, plan: Bcast },
    Scale { a: Var, s: f64 },
    /// Scale whose backward is deliberately wrong; exists to prove the
    /// gradient checker catches faults.
    FaultyScale { a: Var, s: f64 },
    Relu { a: Var },
    Gelu { a: Var },
    Sigmoid { a: Var },
    Sum { a: Var },
    Reshape { a: Var },
    MatMul { a: Var, b: Var, plan: BatchPlan },
    MaskedSoftmax { a: Var, row: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64>, train: bool },
    Conv2d { x: Var, kernel: Var, bias: Option<Var>, cols: Option<Vec<f64>>, geom: ConvGeom },
    RowMap { x: Var, map: Arc<RowMap>, cols: usize },
    Concat { parts: Vec<Var> },
    SplitHeads { a: Var, outer: usize, t: usize, h: usize, d: usize },
    MergeHeads { a: Var, outer: usize, t: usize, h: usize, d: usize },
    FocalLoss { logits: Var, targets: Arc<Vec<f64>>, alpha: f64, gamma: f64, norm: f64 },
    SmoothL1 { pred: Var, target: Arc<Vec<f64>>, mask: Arc<Vec<bool>>, count: usize },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add { a, b, .. } | Sub { a, b, .. } | Mul { a, b, .. } | MatMul { a, b, .. } => vec![*a, *b],
            Scale { a, .. } | FaultyScale { a, .. } | Relu { a } | Gelu { a } | Sigmoid { a } | Sum { a } | Reshape { a } => vec![*a],
            MaskedSoftmax { a, .. } | SplitHeads { a, .. } | MergeHeads { a, .. } => vec![*a],
            LayerNorm { x, gamma, beta, .. } | BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Conv2d { x, kernel, bias, .. } => {
                let mut v = vec![*x, *kernel];
                v.extend(bias);
                v
            }
            RowMap { x, .. } => vec![*x],
            Concat { parts } => parts.clone(),
            FocalLoss { logits, .. } => vec![*logits],
            SmoothL1 { pred, .. } => vec![*pred],
        }
    }

    pub(crate) fn backward(
        &self,
        tape: &Tape,
        out: &Tensor,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        use Op::*;
        match self {
            Leaf => {}
            Add { a, b, plan } | Sub { a, b, plan } => {
                let sign = if matches!(self, Sub { .. }) { -1.0 } else { 1.0 };
                let (ia, ib) = match plan {
                    Bcast::General { a_idx, b_idx } => (Some(a_idx.as_slice()), Some(b_idx.as_slice())),
                    _ => (None, None),
                };
                reduce_grad(tape, grads, *a, g, 1.0, ia);
                reduce_grad(tape, grads, *b, g, sign, ib);
            }
            Mul { a, b, plan } => {
                let av = tape.value(*a).data();
                let bv = tape.value(*b).data();
                bcast_backward(tape, grads, *a, *b, plan, g, |gi, ia, ib| (gi * bv[ib], gi * av[ia]));
            }
            Scale { a, s } => tape.accumulate(grads, *a, |ga| kernels::axpy(*s, g, ga)),
            FaultyScale { a, s } => tape.accumulate(grads, *a, |ga| kernels::axpy(1.5 * *s, g, ga)),
            Relu { a } => {
                let x = tape.value(*a).data();
                tape.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Gelu { a } => {
                let x = tape.value(*a).data();
                tape.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * kernels::gelu_grad(x[i]);
                    }
                });
            }
            Sigmoid { a } => {
                let y = out.data();
                tape.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Sum { a } => tape.accumulate(grads, *a, |ga| {
                for v in ga.iter_mut() {
                    *v += g[0];
                }
            }),
            Reshape { a } => tape.accumulate(grads, *a, |ga| kernels::add_into(g, ga)),
            MatMul { a, b, plan } => matmul_backward(tape, grads, *a, *b, plan, g),
            MaskedSoftmax { a, row, .. } => {
                let y = out.data();
                tape.accumulate(grads, *a, |ga| {
                    for r in 0..y.len() / row {
                        let ys = &y[r * row..(r + 1) * row];
                        let gs = &g[r * row..(r + 1) * row];
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..*row {
                            ga[r * row + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                });
            }
            LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = tape.value(*gamma).len();
                let gm = tape.value(*gamma).data();
                let rows = xhat.len() / c;
                tape.accumulate(grads, *gamma, |gg| {
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                });
                tape.accumulate(grads, *beta, |gb| {
                    for r in 0..rows {
                        kernels::add_into(&g[r * c..(r + 1) * c], gb);
                    }
                });
                tape.accumulate(grads, *x, |gx| {
                    let mut dxhat = vec![0.0; c];
                    for r in 0..rows {
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            dxhat[j] = g[r * c + j] * gm[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xh[j];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        for j in 0..c {
                            gx[r * c + j] += rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
            }
            BatchNorm { x, gamma, beta, xhat, rstd, train } => {
                let c = tape.value(*gamma).len();
                let gm = tape.value(*gamma).data();
                let rows = xhat.len() / c;
                let mut sum_d = vec![0.0; c];
                let mut sum_dx = vec![0.0; c];
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for r in 0..rows {
                    for j in 0..c {
                        let gi = g[r * c + j];
                        let xh = xhat[r * c + j];
                        sum_g[j] += gi;
                        sum_gx[j] += gi * xh;
                        sum_d[j] += gi * gm[j];
                        sum_dx[j] += gi * gm[j] * xh;
                    }
                }
                tape.accumulate(grads, *gamma, |gg| kernels::add_into(&sum_gx, gg));
                tape.accumulate(grads, *beta, |gb| kernels::add_into(&sum_g, gb));
                tape.accumulate(grads, *x, |gx| {
                    let m = rows as f64;
                    for r in 0..rows {
                        for j in 0..c {
                            let d = g[r * c + j] * gm[j];
                            gx[r * c + j] += if *train {
                                rstd[j] * (d - sum_d[j] / m - xhat[r * c + j] * sum_dx[j] / m)
                            } else {
                                rstd[j] * d
                            };
                        }
                    }
                });
            }
            Conv2d { x, kernel, bias, cols, geom } => conv_backward(tape, grads, *x, *kernel, *bias, cols.as_deref(), *geom, g),
            RowMap { x, map, cols } => {
                let cols = *cols;
                tape.accumulate(grads, *x, |gx| {
                    for r in 0..map.out_rows() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        for (s, w) in map.row(r) {
                            let dst = &mut gx[s * cols..(s + 1) * cols];
                            if w == 1.0 {
                                kernels::add_into(gr, dst);
                            } else {
                                kernels::axpy(w, gr, dst);
                            }
                        }
                    }
                });
            }
            Concat { parts } => {
                let mut off = 0;
                for p in parts {
                    let n = tape.value(*p).len();
                    tape.accumulate(grads, *p, |gp| kernels::add_into(&g[off..off + n], gp));
                    off += n;
                }
            }
            SplitHeads { a, outer, t, h, d } => {
                // out [outer, h, t, d] <- in [outer, t, h*d]
                tape.accumulate(grads, *a, |ga| {
                    for o in 0..*outer {
                        for hi in 0..*h {
                            for ti in 0..*t {
                                let src = ((o * h + hi) * t + ti) * d;
                                let dst = (o * t + ti) * h * d + hi * d;
                                kernels::add_into(&g[src..src + d], &mut ga[dst..dst + d]);
                            }
                        }
                    }
                });
            }
            MergeHeads { a, outer, t, h, d } => {
                tape.accumulate(grads, *a, |ga| {
                    for o in 0..*outer {
                        for hi in 0..*h {
                            for ti in 0..*t {
                                let dst = ((o * h + hi) * t + ti) * d;
                                let src = (o * t + ti) * h * d + hi * d;
                                kernels::add_into(&g[src..src + d], &mut ga[dst..dst + d]);
                            }
                        }
                    }
                });
            }
            FocalLoss { logits, targets, alpha, gamma, norm } => {
                let x = tape.value(*logits).data();
                tape.accumulate(grads, *logits, |gl| {
                    for i in 0..x.len() {
                        gl[i] += g[0] * focal_grad(x[i], targets[i], *alpha, *gamma) / norm;
                    }
                });
            }
            SmoothL1 { pred, target, mask, count } => {
                if *count == 0 {
                    return;
                }
                let p = tape.value(*pred).data();
                let scale = g[0] / *count as f64;
                tape.accumulate(grads, *pred, |gp| {
                    for i in 0..p.len() {
                        if mask[i] {
                            let r = p[i] - target[i];
                            gp[i] += scale * if r.abs() < 1.0 { r } else { r.signum() };
                        }
                    }
                });
            }
        }
    }
}

/// Accumulate `sign · g` into `v`, summing over broadcast copies. Without an
/// explicit index map `v` repeats cyclically over `g`.
fn reduce_grad(tape: &Tape, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], sign: f64, idx: Option<&[usize]>) {
    tape.accumulate(grads, v, |s| match idx {
        Some(ix) => {
            for (&gi, &i) in g.iter().zip(ix) {
                s[i] += sign * gi;
            }
        }
        None => {
            for chunk in g.chunks(s.len()) {
                kernels::axpy(sign, chunk, s);
            }
        }
    });
}

fn bcast_backward(
    tape: &Tape,
    grads: &mut [Option<Vec<f64>>],
    a: Var,
    b: Var,
    plan: &Bcast,
    g: &[f64],
    f: impl Fn(f64, usize, usize) -> (f64, f64),
) {
    let na = tape.value(a).len();
    let nb = tape.value(b).len();
    let index = |i: usize| -> (usize, usize) {
        match plan {
            Bcast::Same => (i, i),
            Bcast::RhsRepeat => (i, i % nb),
            Bcast::LhsRepeat => (i % na, i),
            Bcast::General { a_idx, b_idx } => (a_idx[i], b_idx[i]),
        }
    };
    let mut ga = vec![0.0; na];
    let mut gb = vec![0.0; nb];
    for (i, &gi) in g.iter().enumerate() {
        let (ia, ib) = index(i);
        let (da, db) = f(gi, ia, ib);
        ga[ia] += da;
        gb[ib] += db;
    }
    tape.accumulate(grads, a, |s| kernels::add_into(&ga, s));
    tape.accumulate(grads, b, |s| kernels::add_into(&gb, s));
}

fn matmul_backward(tape: &Tape, grads: &mut [Option<Vec<f64>>], a: Var, b: Var, plan: &BatchPlan, g: &[f64]) {
    let BatchPlan { m, k, n, trans_b, ref items } = *plan;
    let av = tape.value(a).data();
    let bv = tape.value(b).data();
    let (brows, bcols) = if trans_b { (n, k) } else { (k, n) };
    tape.accumulate(grads, a, |ga| {
        for &(oa, ob, oc) in items {
            let gc = MatView::new(&g[oc..oc + m * n], m, n);
            let bm = MatView::new(&bv[ob..ob + k * n], brows, bcols);
            // dA = dC · op(B)ᵀ
            let opb_t = if trans_b { bm } else { bm.t() };
            gemm(gc, opb_t, &mut ga[oa..oa + m * k], true);
        }
    });
    tape.accumulate(grads, b, |gb| {
        for &(oa, ob, oc) in items {
            let gc = MatView::new(&g[oc..oc + m * n], m, n);
            let am = MatView::new(&av[oa..oa + m * k], m, k);
            if trans_b {
                // B is [n,k]: dB = dCᵀ · A
                gemm(gc.t(), am, &mut gb[ob..ob + n * k], true);
            } else {
                gemm(am.t(), gc, &mut gb[ob..ob + k * n], true);
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    tape: &Tape,
    grads: &mut [Option<Vec<f64>>],
    x: Var,
    kernel: Var,
    bias: Option<Var>,
    cols: Option<&[f64]>,
    geom: ConvGeom,
    g: &[f64],
) {
    let ConvGeom { batch, h, w, cin, cout, k } = geom;
    let rows = batch * h * w;
    let kk = k * k * cin;
    let xv = tape.value(x).data();
    let cols_data = cols.unwrap_or(xv);
    let kv = tape.value(kernel).data();
    let gout = MatView::new(g, rows, cout);
    if let Some(bv) = bias {
        tape.accumulate(grads, bv, |gb| {
            for r in 0..rows {
                kernels::add_into(&g[r * cout..(r + 1) * cout], gb);
            }
        });
    }
    tape.accumulate(grads, kernel, |gk| {
        gemm(MatView::new(cols_data, rows, kk).t(), gout, gk, true);
    });
    tape.accumulate(grads, x, |gx| {
        if k == 1 {
            gemm(gout, MatView::new(kv, kk, cout).t(), gx, true);
            return;
        }
        let mut dcols = vec![0.0; rows * kk];
        gemm(gout, MatView::new(kv, kk, cout).t(), &mut dcols, false);
        let p = (k / 2) as isize;
        for bi in 0..batch {
            for i in 0..h {
                for j in 0..w {
                    let r = (bi * h + i) * w + j;
                    for di in 0..k {
                        let si = i as isize + di as isize - p;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        for dj in 0..k {
                            let sj = j as isize + dj as isize - p;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            let src = ((bi * h + si as usize) * w + sj as usize) * cin;
                            let c0 = r * kk + (di * k + dj) * cin;
                            kernels::add_into(&dcols[c0..c0 + cin], &mut gx[src..src + cin]);
                        }
                    }
                }
            }
        }
    });
}

fn focal_grad(x: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    let (p_t, log_pt, s, a_t) = focal_terms(x, t, alpha);
    let q = 1.0 - p_t;
    s * a_t * (gamma * q.powf(gamma) * p_t * log_pt - q.powf(gamma + 1.0))
}

/// (p_t, ln p_t, sign of dp_t/dx, α_t) for a binary target.
fn focal_terms(x: f64, t: f64, alpha: f64) -> (f64, f64, f64, f64) {
    if t >= 0.5 {
        (kernels::sigmoid(x), -kernels::softplus(-x), 1.0, alpha)
    } else {
        (kernels::sigmoid(-x), -kernels::softplus(x), -1.0, 1.0 - alpha)
    }
}

pub(crate) fn focal_value(x: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    let (p_t, log_pt, _, a_t) = focal_terms(x, t, alpha);
    -a_t * (1.0 - p_t).powf(gamma) * log_pt
}

fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return shape_err(format!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// Flat source index into `src` for every element of `out` under broadcasting.
fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let oi = i + rank - src.len();
        strides[oi] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let n: usize = out.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    for _ in 0..n {
        idx.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum());
        for d in (0..rank).rev() {
            counter[d] += 1;
            if counter[d] < out[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    idx
}

fn plan_broadcast(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Bcast)> {
    if a == b {
        return Ok((a.to_vec(), Bcast::Same));
    }
    let out = broadcast_shapes(a, b)?;
    let strip = |s: &[usize]| -> Vec<usize> { s.iter().copied().skip_while(|&d| d == 1).collect() };
    if out == a && a.ends_with(&strip(b)) {
        return Ok((out, Bcast::RhsRepeat));
    }
    if out == b && b.ends_with(&strip(a)) {
        return Ok((out, Bcast::LhsRepeat));
    }
    let a_idx = broadcast_index(a, &out);
    let b_idx = broadcast_index(b, &out);
    Ok((out, Bcast::General { a_idx, b_idx }))
}

fn bcast_forward(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Bcast)> {
    let (shape, plan) = plan_broadcast(a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f64> = match &plan {
        Bcast::Same => ad.iter().zip(bd).map(|(x, y)| f(*x, *y)).collect(),
        Bcast::RhsRepeat => ad.iter().enumerate().map(|(i, x)| f(*x, bd[i % bd.len()])).collect(),
        Bcast::LhsRepeat => bd.iter().enumerate().map(|(i, y)| f(ad[i % ad.len()], *y)).collect(),
        Bcast::General { a_idx, b_idx } => a_idx.iter().zip(b_idx).map(|(&i, &j)| f(ad[i], bd[j])).collect(),
    };
    Ok((Tensor::new(shape, data)?, plan))
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, plan) = bcast_forward(self.value(a), self.value(b), |x, y| x + y)?;
        self.push(t, Op::Add { a, b, plan }, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, plan) = bcast_forward(self.value(a), self.value(b), |x, y| x - y)?;
        self.push(t, Op::Sub { a, b, plan }, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, plan) = bcast_forward(self.value(a), self.value(b), |x, y| x * y)?;
        self.push(t, Op::Mul { a, b, plan }, "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let x = self.value(a);
        let t = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * s).collect())?;
        self.push(t, Op::Scale { a, s }, "scale")
    }

    #[doc(hidden)]
    pub fn scale_with_faulty_grad(&mut self, a: Var, s: f64) -> Result<Var> {
        let x = self.value(a);
        let t = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * s).collect())?;
        self.push(t, Op::FaultyScale { a, s }, "faulty_scale")
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op, name: &'static str) -> Result<Var> {
        let x = self.value(a);
        let t = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| f(*v)).collect())?;
        self.push(t, op, name)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |v| v.max(0.0), Op::Relu { a }, "relu")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, kernels::gelu, Op::Gelu { a }, "gelu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, kernels::sigmoid, Op::Sigmoid { a }, "sigmoid")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if self.shape(a) == shape.as_slice() {
            return Ok(a);
        }
        let t = self.value(a).clone().reshape(shape)?;
        self.push(t, Op::Reshape { a }, "reshape")
    }

    /// Batched `a · b` with numpy-style broadcasting of leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a · bᵀ` (transpose of the last two dims of `b`).
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err(format!("matmul needs rank >= 2, got {sa:?} and {sb:?}"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return shape_err(format!("matmul inner extents differ: {sa:?} x {sb:?} (trans_b={trans_b})"));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shapes(ba, bb)?;
        let nbatch: usize = batch.iter().product();
        let ia = broadcast_index(ba, &batch);
        let ib = broadcast_index(bb, &batch);
        let items: Vec<_> = (0..nbatch).map(|i| (ia[i] * m * k, ib[i] * k * n, i * m * n)).collect();
        let mut out = vec![0.0; nbatch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let (brows, bcols) = if trans_b { (n, k) } else { (k, n) };
            for &(oa, ob, oc) in &items {
                let am = MatView::new(&av[oa..oa + m * k], m, k);
                let bm = MatView::new(&bv[ob..ob + k * n], brows, bcols);
                let bm = if trans_b { bm.t() } else { bm };
                gemm(am, bm, &mut out[oc..oc + m * n], false);
            }
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let plan = BatchPlan { m, k, n, trans_b, items };
        self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, plan }, "matmul")
    }

    /// `x · w + b` over the last axis of `x`; `w` is `[cin, cout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let cin = *sx.last().ok_or_else(|| TensorError::Shape("linear on a scalar".into()))?;
        if sw.len() != 2 || sw[0] != cin {
            return shape_err(format!("linear weight {sw:?} does not accept input {sx:?}"));
        }
        let rows = sx.iter().product::<usize>() / cin.max(1);
        let x2 = self.reshape(x, [rows, cin])?;
        let mut y = self.matmul(x2, w)?;
        if let Some(b) = b {
            y = self.add(y, b)?;
        }
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = sw[1];
        self.reshape(y, out_shape)
    }

    /// Softmax over the last axis restricted to `mask`-true entries.
    ///
    /// Masked entries come out exactly 0. Rows with no unmasked entry are
    /// returned as all zeros and their row indices are reported.
    pub fn masked_softmax(&mut self, a: Var, mask: Arc<Vec<bool>>) -> Result<(Var, Vec<usize>)> {
        let x = self.value(a);
        if mask.len() != x.len() {
            return shape_err(format!("mask has {} entries for logits {:?}", mask.len(), x.shape()));
        }
        let row = *x.shape().last().ok_or_else(|| TensorError::Shape("softmax on a scalar".into()))?;
        let mut out = vec![0.0; x.len()];
        let mut empty = Vec::new();
        let xd = x.data();
        for r in 0..x.len() / row.max(1) {
            let xs = &xd[r * row..(r + 1) * row];
            let ms = &mask[r * row..(r + 1) * row];
            let mut mx = f64::NEG_INFINITY;
            for (v, &m) in xs.iter().zip(ms) {
                if m && *v > mx {
                    mx = *v;
                }
            }
            if mx == f64::NEG_INFINITY {
                empty.push(r);
                continue;
            }
            let ys = &mut out[r * row..(r + 1) * row];
            let mut z = 0.0;
            for j in 0..row {
                if ms[j] {
                    ys[j] = (xs[j] - mx).exp();
                    z += ys[j];
                }
            }
            for y in ys.iter_mut() {
                *y /= z;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let v = self.push(t, Op::MaskedSoftmax { a, row }, "masked_softmax")?;
        Ok((v, empty))
    }

    /// Per-row normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xt = self.value(x);
        let c = *xt.shape().last().ok_or_else(|| TensorError::Shape("layer_norm on a scalar".into()))?;
        if c == 0 || self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return shape_err(format!("layer_norm channels {c} vs gamma {:?}", self.shape(gamma)));
        }
        let rows = xt.len() / c;
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xt.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xt.len()];
        let xd = xt.data();
        for r in 0..rows {
            let xs = &xd[r * c..(r + 1) * c];
            let mean = xs.iter().sum::<f64>() / c as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (xs[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gd[j] + bd[j];
            }
        }
        let t = Tensor::new(xt.shape().to_vec(), out)?;
        self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, "layer_norm")
    }

    /// Per-channel normalization over all leading axes.
    ///
    /// In `Train` mode batch statistics are used and updated running
    /// statistics (momentum-weighted, unbiased variance) are returned.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &BatchNormStats,
        mode: NormMode,
        momentum: f64,
        eps: f64,
    ) -> Result<(Var, Option<BatchNormStats>)> {
        let xt = self.value(x);
        let c = *xt.shape().last().ok_or_else(|| TensorError::Shape("batch_norm on a scalar".into()))?;
        if self.value(gamma).shape() != [c] || running.mean.len() != c || running.var.len() != c {
            return shape_err(format!("batch_norm channel mismatch for {:?}", xt.shape()));
        }
        let rows = xt.len() / c;
        let xd = xt.data();
        let (mean, var) = match mode {
            NormMode::Train => {
                let mut mean = vec![0.0; c];
                for r in 0..rows {
                    kernels::add_into(&xd[r * c..(r + 1) * c], &mut mean);
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; c];
                for r in 0..rows {
                    for j in 0..c {
                        let d = xd[r * c + j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                (mean, var)
            }
            NormMode::Eval => (running.mean.clone(), running.var.clone()),
        };
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xt.len()];
        let mut out = vec![0.0; xt.len()];
        for r in 0..rows {
            for j in 0..c {
                let h = (xd[r * c + j] - mean[j]) * rstd[j];
                xhat[r * c + j] = h;
                out[r * c + j] = h * gd[j] + bd[j];
            }
        }
        let updated = (mode == NormMode::Train).then(|| {
            let unbias = if rows > 1 { rows as f64 / (rows as f64 - 1.0) } else { 1.0 };
            BatchNormStats {
                mean: running.mean.iter().zip(&mean).map(|(r, b)| (1.0 - momentum) * r + momentum * b).collect(),
                var: running
                    .var
                    .iter()
                    .zip(&var)
                    .map(|(r, b)| (1.0 - momentum) * r + momentum * b * unbias)
                    .collect(),
            }
        });
        let t = Tensor::new(xt.shape().to_vec(), out)?;
        let train = mode == NormMode::Train;
        let v = self.push(t, Op::BatchNorm { x, gamma, beta, xhat, rstd, train }, "batch_norm")?;
        Ok((v, updated))
    }

    /// Stride-1, zero-padded "same" convolution of `[.., H, W, Cin]` with a
    /// `[k, k, Cin, Cout]` kernel, `k` odd.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() < 3 || sk.len() != 4 || sk[0] != sk[1] || sk[0] % 2 == 0 || sk[2] != sx[sx.len() - 1] {
            return shape_err(format!("conv2d input {sx:?} incompatible with kernel {sk:?}"));
        }
        let (h, w, cin) = (sx[sx.len() - 3], sx[sx.len() - 2], sx[sx.len() - 1]);
        let (k, cout) = (sk[0], sk[3]);
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return shape_err(format!("conv2d bias {:?} for {cout} outputs", self.shape(b)));
            }
        }
        let batch = sx[..sx.len() - 3].iter().product::<usize>();
        let rows = batch * h * w;
        let kk = k * k * cin;
        let cols = (k > 1).then(|| im2col(self.value(x).data(), batch, h, w, cin, k));
        let mut out = vec![0.0; rows * cout];
        {
            let src = cols.as_deref().unwrap_or(self.value(x).data());
            gemm(MatView::new(src, rows, kk), MatView::new(self.value(kernel).data(), kk, cout), &mut out, false);
        }
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for r in 0..rows {
                kernels::add_into(bd, &mut out[r * cout..(r + 1) * cout]);
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = cout;
        let geom = ConvGeom { batch, h, w, cin, cout, k };
        self.push(Tensor::new(shape, out)?, Op::Conv2d { x, kernel, bias, cols, geom }, "conv2d")
    }

    /// Apply a [`RowMap`] to `x` viewed as `[map.in_rows(), cols]`; the
    /// result has shape `[map.out_rows(), cols]`.
    pub fn row_map(&mut self, x: Var, map: Arc<RowMap>, cols: usize) -> Result<Var> {
        let xt = self.value(x);
        if cols == 0 || xt.len() != map.in_rows() * cols {
            return shape_err(format!("row map expects {} x {cols} input, got {:?}", map.in_rows(), xt.shape()));
        }
        let out = map.apply(xt.data(), cols);
        let t = Tensor::new(vec![map.out_rows(), cols], out)?;
        self.push(t, Op::RowMap { x, map, cols }, "row_map")
    }

    /// Concatenate along the first axis; trailing dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Shape("concat of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let s = self.shape(*p);
            if s.is_empty() || s[1..] != tail[..] {
                return shape_err(format!("concat trailing dims {:?} vs {:?}", s, tail));
            }
            lead += s[0];
            data.extend_from_slice(self.value(*p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        self.push(Tensor::new(shape, data)?, Op::Concat { parts: parts.to_vec() }, "concat")
    }

    /// `[.., T, h·d] → [.., h, T, d]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return shape_err(format!("split_heads needs rank >= 2, got {s:?}"));
        }
        let c = s[s.len() - 1];
        if heads == 0 || c % heads != 0 {
            return Err(TensorError::Config(format!("{c} channels not divisible into {heads} heads")));
        }
        let (t, d) = (s[s.len() - 2], c / heads);
        let outer = s[..s.len() - 2].iter().product::<usize>();
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for hi in 0..heads {
                for ti in 0..t {
                    let dst = ((o * heads + hi) * t + ti) * d;
                    let src = (o * t + ti) * c + hi * d;
                    out[dst..dst + d].copy_from_slice(&x[src..src + d]);
                }
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([heads, t, d]);
        self.push(Tensor::new(shape, out)?, Op::SplitHeads { a, outer, t, h: heads, d }, "split_heads")
    }

    /// `[.., h, T, d] → [.., T, h·d]`; exact inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 3 {
            return shape_err(format!("merge_heads needs rank >= 3, got {s:?}"));
        }
        let (h, t, d) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
        let outer = s[..s.len() - 3].iter().product::<usize>();
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for hi in 0..h {
                for ti in 0..t {
                    let src = ((o * h + hi) * t + ti) * d;
                    let dst = (o * t + ti) * h * d + hi * d;
                    out[dst..dst + d].copy_from_slice(&x[src..src + d]);
                }
            }
        }
        let mut shape = s[..s.len() - 3].to_vec();
        shape.extend([t, h * d]);
        self.push(Tensor::new(shape, out)?, Op::MergeHeads { a, outer, t, h, d }, "merge_heads")
    }

    /// Sigmoid focal loss summed over all logits and divided by `norm`.
    pub fn focal_loss(&mut self, logits: Var, targets: Arc<Vec<f64>>, alpha: f64, gamma: f64, norm: f64) -> Result<Var> {
        let x = self.value(logits).data();
        if targets.len() != x.len() {
            return shape_err(format!("focal targets {} vs logits {}", targets.len(), x.len()));
        }
        let total: f64 = x.iter().zip(targets.iter()).map(|(&xi, &ti)| focal_value(xi, ti, alpha, gamma)).sum();
        self.push(Tensor::scalar(total / norm), Op::FocalLoss { logits, targets, alpha, gamma, norm }, "focal_loss")
    }

    /// Smooth-ℓ1 (β = 1) averaged over the `mask`-selected components; 0
    /// when nothing is selected.
    pub fn smooth_l1(&mut self, pred: Var, target: Arc<Vec<f64>>, mask: Arc<Vec<bool>>) -> Result<Var> {
        let p = self.value(pred).data();
        if target.len() != p.len() || mask.len() != p.len() {
            return shape_err("smooth_l1 target/mask length mismatch");
        }
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..p.len() {
            if mask[i] {
                let r = (p[i] - target[i]).abs();
                total += if r < 1.0 { 0.5 * r * r } else { r - 0.5 };
                count += 1;
            }
        }
        let v = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(Tensor::scalar(v), Op::SmoothL1 { pred, target, mask, count }, "smooth_l1")
    }
}

fn im2col(x: &[f64], batch: usize, h: usize, w: usize, cin: usize, k: usize) -> Vec<f64> {
    let kk = k * k * cin;
    let mut cols = vec![0.0; batch * h * w * kk];
    let p = (k / 2) as isize;
    for bi in 0..batch {
        for i in 0..h {
            for j in 0..w {
                let r = (bi * h + i) * w + j;
                for di in 0..k {
                    let si = i as isize + di as isize - p;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for dj in 0..k {
                        let sj = j as isize + dj as isize - p;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + si as usize) * w + sj as usize) * cin;
                        let c0 = r * kk + (di * k + dj) * cin;
                        cols[c0..c0 + cin].copy_from_slice(&x[src..src + cin]);
                    }
                }
            }
        }
    }
    cols
}

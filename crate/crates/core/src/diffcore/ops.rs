//! Differentiable operations.
//!
//! Fallible ops return `Result` and check their documented preconditions;
//! ops without failure modes return the tensor directly. Probabilities are
//! clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` before any logarithm, with zero
//! gradient outside the clamp range.

use rand::Rng;

use super::batchnorm::BatchNormState;
use super::tensor::{BackwardOp, GradSink, Tensor};
use super::{Mode, TensorError};

/// Smallest probability fed to a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    let shape = t.shape();
    if shape.len() != 2 {
        return Err(TensorError::BadShape {
            op,
            expected: "2-d",
            shape,
        });
    }
    Ok((shape[0], shape[1]))
}

// ---------------------------------------------------------------------------
// Affine map
// ---------------------------------------------------------------------------

struct LinearBack {
    x: Tensor,
    w: Tensor,
    b: Tensor,
}

impl BackwardOp for LinearBack {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone(), self.w.clone(), self.b.clone()]
    }

    fn backward(&self, _out_values: &[f64], g: &[f64], sink: &mut GradSink) {
        let (batch, in_dim) = (self.x.shape()[0], self.x.shape()[1]);
        let out_dim = self.w.shape()[1];

        if self.x.needs_grad() {
            // dx[i,k] = sum_o g[i,o] * w[k,o]
            let dx = self.w.with_values(|w| {
                let mut dx = vec![0.0; batch * in_dim];
                for i in 0..batch {
                    let grow = &g[i * out_dim..(i + 1) * out_dim];
                    for k in 0..in_dim {
                        let wrow = &w[k * out_dim..(k + 1) * out_dim];
                        dx[i * in_dim + k] =
                            grow.iter().zip(wrow).map(|(gv, wv)| gv * wv).sum::<f64>();
                    }
                }
                dx
            });
            sink.add(&self.x, &dx);
        }
        if self.w.needs_grad() {
            // dw[k,o] = sum_i x[i,k] * g[i,o]
            let dw = self.x.with_values(|x| {
                let mut dw = vec![0.0; in_dim * out_dim];
                for i in 0..batch {
                    let grow = &g[i * out_dim..(i + 1) * out_dim];
                    for k in 0..in_dim {
                        let xv = x[i * in_dim + k];
                        let wrow = &mut dw[k * out_dim..(k + 1) * out_dim];
                        for (d, gv) in wrow.iter_mut().zip(grow) {
                            *d += xv * gv;
                        }
                    }
                }
                dw
            });
            sink.add(&self.w, &dw);
        }
        if self.b.needs_grad() {
            let mut db = vec![0.0; out_dim];
            for i in 0..batch {
                for (d, gv) in db.iter_mut().zip(&g[i * out_dim..(i + 1) * out_dim]) {
                    *d += gv;
                }
            }
            sink.add(&self.b, &db);
        }
    }
}

/// `y = x W + b` for `x: B x I`, `w: I x O`, `b: O`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (batch, in_dim) = require_2d("linear", x)?;
    let (w_in, out_dim) = require_2d("linear", w)?;
    if in_dim != w_in {
        return Err(TensorError::DimensionMismatch {
            op: "linear",
            left: x.shape(),
            right: w.shape(),
        });
    }
    if b.numel() != out_dim {
        return Err(TensorError::DimensionMismatch {
            op: "linear",
            left: w.shape(),
            right: b.shape(),
        });
    }

    let values = x.with_values(|xv| {
        w.with_values(|wv| {
            b.with_values(|bv| {
                let mut y = vec![0.0; batch * out_dim];
                for i in 0..batch {
                    let yrow = &mut y[i * out_dim..(i + 1) * out_dim];
                    yrow.copy_from_slice(bv);
                    for k in 0..in_dim {
                        let xv_ik = xv[i * in_dim + k];
                        if xv_ik == 0.0 {
                            continue;
                        }
                        let wrow = &wv[k * out_dim..(k + 1) * out_dim];
                        for (yo, wo) in yrow.iter_mut().zip(wrow) {
                            *yo += xv_ik * wo;
                        }
                    }
                }
                y
            })
        })
    });
    Ok(Tensor::from_op(
        vec![batch, out_dim],
        values,
        Box::new(LinearBack {
            x: x.clone(),
            w: w.clone(),
            b: b.clone(),
        }),
    ))
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

struct ReluBack {
    x: Tensor,
}

impl BackwardOp for ReluBack {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone()]
    }

    fn backward(&self, _out: &[f64], g: &[f64], sink: &mut GradSink) {
        if !self.x.needs_grad() {
            return;
        }
        // Subgradient 0 at exactly 0.
        let dx = self.x.with_values(|x| {
            x.iter()
                .zip(g)
                .map(|(xv, gv)| if *xv > 0.0 { *gv } else { 0.0 })
                .collect::<Vec<_>>()
        });
        sink.add(&self.x, &dx);
    }
}

/// Elementwise `max(0, x)`.
pub fn relu(x: &Tensor) -> Tensor {
    let values = x.with_values(|v| v.iter().map(|x| x.max(0.0)).collect::<Vec<_>>());
    Tensor::from_op(x.shape(), values, Box::new(ReluBack { x: x.clone() }))
}

struct SigmoidBack {
    x: Tensor,
}

impl BackwardOp for SigmoidBack {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone()]
    }

    fn backward(&self, out: &[f64], g: &[f64], sink: &mut GradSink) {
        if !self.x.needs_grad() {
            return;
        }
        let dx: Vec<f64> = out.iter().zip(g).map(|(y, gv)| gv * y * (1.0 - y)).collect();
        sink.add(&self.x, &dx);
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise logistic sigmoid; output strictly inside (0, 1).
pub fn sigmoid(x: &Tensor) -> Tensor {
    let values = x.with_values(|v| v.iter().map(|x| stable_sigmoid(*x)).collect::<Vec<_>>());
    Tensor::from_op(x.shape(), values, Box::new(SigmoidBack { x: x.clone() }))
}

struct ExpBack {
    x: Tensor,
}

impl BackwardOp for ExpBack {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone()]
    }

    fn backward(&self, out: &[f64], g: &[f64], sink: &mut GradSink) {
        if !self.x.needs_grad() {
            return;
        }
        let dx: Vec<f64> = out.iter().zip(g).map(|(y, gv)| gv * y).collect();
        sink.add(&self.x, &dx);
    }
}

/// Elementwise `e^x`.
pub fn exp(x: &Tensor) -> Tensor {
    let values = x.with_values(|v| v.iter().map(|x| x.exp()).collect::<Vec<_>>());
    Tensor::from_op(x.shape(), values, Box::new(ExpBack { x: x.clone() }))
}

struct AbsBack {
    x: Tensor,
}

impl BackwardOp for AbsBack {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone()]
    }

    fn backward(&self, _out: &[f64], g: &[f64], sink: &mut GradSink) {
        if !self.x.needs_grad() {
            return;
        }
        // Subgradient 0 at exactly 0.
        let dx = self.x.with_values(|x| {
            x.iter()
                .zip(g)
                .map(|(xv, gv)| gv * xv.signum() * if *xv == 0.0 { 0.0 } else { 1.0 })
                .collect::<Vec<_>>()
        });
        sink.add(&self.x, &dx);
    }
}

/// Elementwise absolute value.
pub fn abs(x: &Tensor) -> Tensor {
    let values = x.with_values(|v| v.iter().map(|x| x.abs()).collect::<Vec<_>>());
    Tensor::from_op(x.shape(), values, Box::new(AbsBack { x: x.clone() }))
}

macro_rules! binary_elementwise {
    ($name:ident, $back:ident, $fwd:expr, $da:expr, $db:expr, $doc:literal) => {
        struct $back {
            a: Tensor,
            b: Tensor,
        }

        impl BackwardOp for $back {
            fn parents(&self) -> Vec<Tensor> {
                vec![self.a.clone(), self.b.clone()]
            }

            fn backward(&self, _out: &[f64], g: &[f64], sink: &mut GradSink) {
                let (da, db) = self.a.with_values(|av| {
                    self.b.with_values(|bv| {
                        let da: Vec<f64> = if self.a.needs_grad() {
                            g.iter()
                                .zip(av.iter().zip(bv))
                                .map(|(gv, (a, b))| $da(*gv, *a, *b))
                                .collect()
                        } else {
                            Vec::new()
                        };
                        let db: Vec<f64> = if self.b.needs_grad() {
                            g.iter()
                                .zip(av.iter().zip(bv))
                                .map(|(gv, (a, b))| $db(*gv, *a, *b))
                                .collect()
                        } else {
                            Vec::new()
                        };
                        (da, db)
                    })
                });
                if !da.is_empty() {
                    sink.add(&self.a, &da);
                }
                if !db.is_empty() {
                    sink.add(&self.b, &db);
                }
            }
        }

        #[doc = $doc]
        pub fn $name(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
            if a.shape() != b.shape() {
                return Err(TensorError::DimensionMismatch {
                    op: stringify!($name),
                    left: a.shape(),
                    right: b.shape(),
                });
            }
            let values = a.with_values(|av| {
                b.with_values(|bv| {
                    av.iter()
                        .zip(bv)
                        .map(|(x, y)| $fwd(*x, *y))
                        .collect::<Vec<_>>()
                })
            });
            Ok(Tensor::from_op(
                a.shape(),
                values,
                Box::new($back {
                    a: a.clone(),
                    b: b.clone(),
                }),
            ))
        }
    };
}

binary_elementwise!(
    add,
    AddBack,
    |a, b| a + b,
    |g, _a, _b| g,
    |g, _a, _b| g,
    "Elementwise sum of two same-shape tensors."
);
binary_elementwise!(
    sub,
    SubBack,
    |a, b| a - b,
    |g, _a, _b| g,
    |g: f64, _a, _b| -g,
    "Elementwise difference of two same-shape tensors."
);
binary_elementwise!(
    mul,
    MulBack,
    |a, b| a * b,
    |g: f64, _a, b: f64| g * b,
    |g: f64, a: f64, _b| g * a,
    "Elementwise product of two same-shape tensors."
);

struct ScaleBack {
    x: Tensor,
    c: f64,
}

impl BackwardOp for ScaleBack {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone()]
    }

    fn backward(&self, _out: &[f64], g: &[f64], sink: &mut GradSink) {
        if !self.x.needs_grad() {
            return;
        }
        let dx: Vec<f64> = g.iter().map(|gv| gv * self.c).collect();
        sink.add(&self.x, &dx);
    }
}

/// `c * x` for a fixed scalar `c`.
pub fn scale(x: &Tensor, c: f64) -> Tensor {
    let values = x.with_values(|v| v.iter().map(|x| c * x).collect::<Vec<_>>());
    Tensor::from_op(x.shape(), values, Box::new(ScaleBack { x: x.clone(), c }))
}

struct AddNBack {
    parts: Vec<Tensor>,
}

impl BackwardOp for AddNBack {
    fn parents(&self) -> Vec<Tensor> {
        self.parts.clone()
    }

    fn backward(&self, _out: &[f64], g: &[f64], sink: &mut GradSink) {
        for p in &self.parts {
            if p.needs_grad() {
                sink.add(p, g);
            }
        }
    }
}

/// Sum of several same-shape tensors (late-fusion score summation).
pub fn add_n(parts: &[Tensor]) -> Result<Tensor, TensorError> {
    let first = parts.first().ok_or(TensorError::BadShape {
        op: "add_n",
        expected: "non-empty list",
        shape: vec![],
    })?;
    let shape = first.shape();
    for p in parts {
        if p.shape() != shape {
            return Err(TensorError::DimensionMismatch {
                op: "add_n",
                left: shape,
                right: p.shape(),
            });
        }
    }
    let mut values = first.values();
    for p in &parts[1..] {
        p.with_values(|v| {
            for (acc, x) in values.iter_mut().zip(v) {
                *acc += x;
            }
        });
    }
    Ok(Tensor::from_op(
        shape,
        values,
        Box::new(AddNBack {
            parts: parts.to_vec(),
        }),
    ))
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

struct SumBack {
    x: Tensor,
    mean: bool,
}

impl BackwardOp for SumBack {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone()]
    }

    fn backward(&self, _out: &[f64], g: &[f64], sink: &mut GradSink) {
        if !self.x.needs_grad() {
            return;
        }
        let n = self.x.numel();
        let gv = if self.mean { g[0] / n as f64 } else { g[0] };
        sink.add(&self.x, &vec![gv; n]);
    }
}

/// Sum of all entries, as a scalar tensor.
pub fn sum(x: &Tensor) -> Tensor {
    let total = x.with_values(|v| v.iter().sum());
    Tensor::from_op(
        Vec::new(),
        vec![total],
        Box::new(SumBack {
            x: x.clone(),
            mean: false,
        }),
    )
}

/// Mean of all entries, as a scalar tensor.
pub fn mean(x: &Tensor) -> Tensor {
    let n = x.numel().max(1) as f64;
    let total: f64 = x.with_values(|v| v.iter().sum());
    Tensor::from_op(
        Vec::new(),
        vec![total / n],
        Box::new(SumBack {
            x: x.clone(),
            mean: true,
        }),
    )
}

// ---------------------------------------------------------------------------
// Structural
// ---------------------------------------------------------------------------

struct ConcatColsBack {
    parts: Vec<Tensor>,
    widths: Vec<usize>,
}

impl BackwardOp for ConcatColsBack {
    fn parents(&self) -> Vec<Tensor> {
        self.parts.clone()
    }

    fn backward(&self, _out: &[f64], g: &[f64], sink: &mut GradSink) {
        let total: usize = self.widths.iter().sum();
        let rows = g.len() / total;
        let mut offset = 0;
        for (p, &w) in self.parts.iter().zip(&self.widths) {
            if p.needs_grad() {
                let mut dp = vec![0.0; rows * w];
                for r in 0..rows {
                    dp[r * w..(r + 1) * w]
                        .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                }
                sink.add(p, &dp);
            }
            offset += w;
        }
    }
}

/// Concatenate 2-d tensors with equal row counts along the feature axis.
pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor, TensorError> {
    let first = parts.first().ok_or(TensorError::BadShape {
        op: "concat_cols",
        expected: "non-empty list",
        shape: vec![],
    })?;
    let (rows, _) = require_2d("concat_cols", first)?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, c) = require_2d("concat_cols", p)?;
        if r != rows {
            return Err(TensorError::DimensionMismatch {
                op: "concat_cols",
                left: first.shape(),
                right: p.shape(),
            });
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let mut values = vec![0.0; rows * total];
    let mut offset = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        p.with_values(|v| {
            for r in 0..rows {
                values[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&v[r * w..(r + 1) * w]);
            }
        });
        offset += w;
    }
    Ok(Tensor::from_op(
        vec![rows, total],
        values,
        Box::new(ConcatColsBack {
            parts: parts.to_vec(),
            widths,
        }),
    ))
}

struct SelectRowsBack {
    x: Tensor,
    idx: Vec<usize>,
}

impl BackwardOp for SelectRowsBack {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone()]
    }

    fn backward(&self, _out: &[f64], g: &[f64], sink: &mut GradSink) {
        if !self.x.needs_grad() {
            return;
        }
        let cols = self.x.shape()[1];
        let mut dx = vec![0.0; self.x.numel()];
        for (r, &src) in self.idx.iter().enumerate() {
            for c in 0..cols {
                dx[src * cols + c] += g[r * cols + c];
            }
        }
        sink.add(&self.x, &dx);
    }
}

/// Gather rows of a 2-d tensor; gradients scatter-add back.
pub fn select_rows(x: &Tensor, idx: &[usize]) -> Result<Tensor, TensorError> {
    let (rows, cols) = require_2d("select_rows", x)?;
    if let Some(&bad) = idx.iter().find(|i| **i >= rows) {
        return Err(TensorError::RowOutOfRange {
            index: bad,
            rows,
        });
    }
    let values = x.with_values(|v| {
        let mut out = vec![0.0; idx.len() * cols];
        for (r, &src) in idx.iter().enumerate() {
            out[r * cols..(r + 1) * cols].copy_from_slice(&v[src * cols..(src + 1) * cols]);
        }
        out
    });
    Ok(Tensor::from_op(
        vec![idx.len(), cols],
        values,
        Box::new(SelectRowsBack {
            x: x.clone(),
            idx: idx.to_vec(),
        }),
    ))
}

// ---------------------------------------------------------------------------
// Softmax / losses
// ---------------------------------------------------------------------------

struct SoftmaxBack {
    x: Tensor,
    cols: usize,
}

impl BackwardOp for SoftmaxBack {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone()]
    }

    fn backward(&self, out: &[f64], g: &[f64], sink: &mut GradSink) {
        if !self.x.needs_grad() {
            return;
        }
        let k = self.cols;
        let mut dx = vec![0.0; g.len()];
        for r in 0..g.len() / k {
            let p = &out[r * k..(r + 1) * k];
            let gr = &g[r * k..(r + 1) * k];
            let dot: f64 = p.iter().zip(gr).map(|(pv, gv)| pv * gv).sum();
            for c in 0..k {
                dx[r * k + c] = p[c] * (gr[c] - dot);
            }
        }
        sink.add(&self.x, &dx);
    }
}

/// Row-wise softmax with max-subtraction; rows sum to 1 within 1e-12.
pub fn softmax(logits: &Tensor) -> Result<Tensor, TensorError> {
    let (rows, cols) = require_2d("softmax", logits)?;
    if cols < 2 {
        return Err(TensorError::BadShape {
            op: "softmax",
            expected: "at least 2 columns",
            shape: logits.shape(),
        });
    }
    if logits.with_values(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(TensorError::NonFinite { op: "softmax" });
    }
    let values = logits.with_values(|v| {
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &v[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[r * cols..(r + 1) * cols];
            let mut total = 0.0;
            for (o, x) in orow.iter_mut().zip(row) {
                *o = (x - max).exp();
                total += *o;
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        out
    });
    Ok(Tensor::from_op(
        vec![rows, cols],
        values,
        Box::new(SoftmaxBack {
            x: logits.clone(),
            cols,
        }),
    ))
}

struct CrossEntropyBack {
    probs: Tensor,
    labels: Vec<usize>,
}

impl BackwardOp for CrossEntropyBack {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.probs.clone()]
    }

    fn backward(&self, _out: &[f64], g: &[f64], sink: &mut GradSink) {
        if !self.probs.needs_grad() {
            return;
        }
        let cols = self.probs.shape()[1];
        let batch = self.labels.len() as f64;
        let dp = self.probs.with_values(|p| {
            let mut dp = vec![0.0; p.len()];
            for (r, &y) in self.labels.iter().enumerate() {
                let pv = p[r * cols + y];
                if pv >= PROB_FLOOR {
                    dp[r * cols + y] = -g[0] / (batch * pv);
                }
            }
            dp
        });
        sink.add(&self.probs, &dp);
    }
}

/// Mean over the batch of `-log probs[row, label]`; inputs are row-stochastic.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<Tensor, TensorError> {
    let (rows, cols) = require_2d("cross_entropy", probs)?;
    if labels.len() != rows {
        return Err(TensorError::DimensionMismatch {
            op: "cross_entropy",
            left: vec![rows],
            right: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|l| **l >= cols) {
        return Err(TensorError::LabelOutOfRange {
            label: bad,
            classes: cols,
        });
    }
    let total: f64 = probs.with_values(|p| {
        labels
            .iter()
            .enumerate()
            .map(|(r, &y)| -(p[r * cols + y].max(PROB_FLOOR)).ln())
            .sum()
    });
    Ok(Tensor::from_op(
        Vec::new(),
        vec![total / rows as f64],
        Box::new(CrossEntropyBack {
            probs: probs.clone(),
            labels: labels.to_vec(),
        }),
    ))
}

struct BinaryCrossEntropyBack {
    probs: Tensor,
    targets: Vec<bool>,
}

impl BackwardOp for BinaryCrossEntropyBack {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.probs.clone()]
    }

    fn backward(&self, _out: &[f64], g: &[f64], sink: &mut GradSink) {
        if !self.probs.needs_grad() {
            return;
        }
        let batch = self.targets.len() as f64;
        let dp = self.probs.with_values(|p| {
            p.iter()
                .zip(&self.targets)
                .map(|(pv, t)| {
                    if *pv <= PROB_FLOOR || *pv >= 1.0 - PROB_FLOOR {
                        0.0
                    } else if *t {
                        -g[0] / (batch * pv)
                    } else {
                        g[0] / (batch * (1.0 - pv))
                    }
                })
                .collect::<Vec<_>>()
        });
        sink.add(&self.probs, &dp);
    }
}

/// Mean over the batch of `-t log p - (1-t) log(1-p)` for per-row
/// probabilities `p` (any shape with one entry per target).
pub fn binary_cross_entropy(probs: &Tensor, targets: &[bool]) -> Result<Tensor, TensorError> {
    if probs.numel() != targets.len() {
        return Err(TensorError::DimensionMismatch {
            op: "binary_cross_entropy",
            left: vec![probs.numel()],
            right: vec![targets.len()],
        });
    }
    if targets.is_empty() {
        return Err(TensorError::BadShape {
            op: "binary_cross_entropy",
            expected: "non-empty batch",
            shape: probs.shape(),
        });
    }
    let total: f64 = probs.with_values(|p| {
        p.iter()
            .zip(targets)
            .map(|(pv, t)| {
                let pc = pv.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                if *t {
                    -pc.ln()
                } else {
                    -(1.0 - pc).ln()
                }
            })
            .sum()
    });
    Ok(Tensor::from_op(
        Vec::new(),
        vec![total / targets.len() as f64],
        Box::new(BinaryCrossEntropyBack {
            probs: probs.clone(),
            targets: targets.to_vec(),
        }),
    ))
}

// ---------------------------------------------------------------------------
// Gradient reversal
// ---------------------------------------------------------------------------

struct GradReversalBack {
    x: Tensor,
    grl_scale: f64,
}

impl BackwardOp for GradReversalBack {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone()]
    }

    fn backward(&self, _out: &[f64], g: &[f64], sink: &mut GradSink) {
        if !self.x.needs_grad() {
            return;
        }
        let dx: Vec<f64> = g.iter().map(|gv| -self.grl_scale * gv).collect();
        sink.add(&self.x, &dx);
    }
}

/// Identity in the forward pass; backward passes `-scale` times the
/// upstream gradient. Turns a discriminator's minimization into adversarial
/// training of the features behind it.
pub fn gradient_reversal(x: &Tensor, scale: f64) -> Tensor {
    assert!(scale > 0.0, "gradient_reversal requires scale > 0");
    Tensor::from_op(
        x.shape(),
        x.values(),
        Box::new(GradReversalBack {
            x: x.clone(),
            grl_scale: scale,
        }),
    )
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

struct BatchNormTrainBack {
    x: Tensor,
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl BackwardOp for BatchNormTrainBack {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone()]
    }

    fn backward(&self, _out: &[f64], g: &[f64], sink: &mut GradSink) {
        if !self.x.needs_grad() {
            return;
        }
        let cols = self.inv_std.len();
        let rows = g.len() / cols;
        let n = rows as f64;
        let mut dx = vec![0.0; g.len()];
        for c in 0..cols {
            let mut g_mean = 0.0;
            let mut gx_mean = 0.0;
            for r in 0..rows {
                let gv = g[r * cols + c];
                g_mean += gv;
                gx_mean += gv * self.x_hat[r * cols + c];
            }
            g_mean /= n;
            gx_mean /= n;
            for r in 0..rows {
                let i = r * cols + c;
                dx[i] = self.inv_std[c] * (g[i] - g_mean - self.x_hat[i] * gx_mean);
            }
        }
        sink.add(&self.x, &dx);
    }
}

struct BatchNormEvalBack {
    x: Tensor,
    inv_std: Vec<f64>,
}

impl BackwardOp for BatchNormEvalBack {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone()]
    }

    fn backward(&self, _out: &[f64], g: &[f64], sink: &mut GradSink) {
        if !self.x.needs_grad() {
            return;
        }
        let cols = self.inv_std.len();
        let dx: Vec<f64> = g
            .iter()
            .enumerate()
            .map(|(i, gv)| gv * self.inv_std[i % cols])
            .collect();
        sink.add(&self.x, &dx);
    }
}

/// Normalize `x: B x C` per column. Train mode uses batch statistics
/// (biased variance) and folds them into `state`'s running estimates; eval
/// mode normalizes with the running estimates and leaves `state` untouched.
pub fn batch_norm(
    x: &Tensor,
    state: &mut BatchNormState,
    mode: Mode,
) -> Result<Tensor, TensorError> {
    let (rows, cols) = require_2d("batch_norm", x)?;
    if cols != state.channels() {
        return Err(TensorError::DimensionMismatch {
            op: "batch_norm",
            left: vec![rows, cols],
            right: vec![state.channels()],
        });
    }
    match mode {
        Mode::Train => {
            if rows < 2 {
                return Err(TensorError::BatchTooSmall {
                    op: "batch_norm",
                    min: 2,
                    got: rows,
                });
            }
            let (values, x_hat, inv_std, mean_v, var_v) = x.with_values(|v| {
                let n = rows as f64;
                let mut mean_v = vec![0.0; cols];
                let mut var_v = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        mean_v[c] += v[r * cols + c];
                    }
                }
                for m in mean_v.iter_mut() {
                    *m /= n;
                }
                for r in 0..rows {
                    for c in 0..cols {
                        let d = v[r * cols + c] - mean_v[c];
                        var_v[c] += d * d;
                    }
                }
                for va in var_v.iter_mut() {
                    *va /= n;
                }
                let inv_std: Vec<f64> =
                    var_v.iter().map(|va| 1.0 / (va + state.epsilon).sqrt()).collect();
                let mut out = vec![0.0; v.len()];
                for r in 0..rows {
                    for c in 0..cols {
                        out[r * cols + c] = (v[r * cols + c] - mean_v[c]) * inv_std[c];
                    }
                }
                (out.clone(), out, inv_std, mean_v, var_v)
            });
            state.update(&mean_v, &var_v);
            Ok(Tensor::from_op(
                vec![rows, cols],
                values,
                Box::new(BatchNormTrainBack {
                    x: x.clone(),
                    x_hat,
                    inv_std,
                }),
            ))
        }
        Mode::Eval => {
            let inv_std: Vec<f64> = state
                .running_var
                .iter()
                .map(|v| 1.0 / (v + state.epsilon).sqrt())
                .collect();
            let values = x.with_values(|v| {
                let mut out = vec![0.0; v.len()];
                for r in 0..rows {
                    for c in 0..cols {
                        out[r * cols + c] =
                            (v[r * cols + c] - state.running_mean[c]) * inv_std[c];
                    }
                }
                out
            });
            Ok(Tensor::from_op(
                vec![rows, cols],
                values,
                Box::new(BatchNormEvalBack {
                    x: x.clone(),
                    inv_std,
                }),
            ))
        }
    }
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

struct DropoutBack {
    x: Tensor,
    scaled_mask: Vec<f64>,
}

impl BackwardOp for DropoutBack {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone()]
    }

    fn backward(&self, _out: &[f64], g: &[f64], sink: &mut GradSink) {
        if !self.x.needs_grad() {
            return;
        }
        let dx: Vec<f64> = g.iter().zip(&self.scaled_mask).map(|(gv, m)| gv * m).collect();
        sink.add(&self.x, &dx);
    }
}

/// Zero each element with probability `rate` and scale survivors by
/// `1/(1-rate)` in train mode; identity in eval mode or at rate 0.
pub fn dropout(
    x: &Tensor,
    rate: f64,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Tensor, TensorError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::InvalidParameter {
            op: "dropout",
            name: "rate",
            value: rate,
            constraint: "0 <= rate < 1",
        });
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - rate;
    let scaled_mask: Vec<f64> = (0..x.numel())
        .map(|_| if rng.gen::<f64>() >= rate { 1.0 / keep } else { 0.0 })
        .collect();
    let values = x.with_values(|v| {
        v.iter()
            .zip(&scaled_mask)
            .map(|(xv, m)| xv * m)
            .collect::<Vec<_>>()
    });
    Ok(Tensor::from_op(
        x.shape(),
        values,
        Box::new(DropoutBack {
            x: x.clone(),
            scaled_mask,
        }),
    ))
}

// ---------------------------------------------------------------------------
// Pairwise squared distances (kernel discrepancy support)
// ---------------------------------------------------------------------------

struct PairwiseSqDistsBack {
    x: Tensor,
    y: Tensor,
}

impl BackwardOp for PairwiseSqDistsBack {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone(), self.y.clone()]
    }

    fn backward(&self, _out: &[f64], g: &[f64], sink: &mut GradSink) {
        let (n, d) = (self.x.shape()[0], self.x.shape()[1]);
        let m = self.y.shape()[0];
        let (dx, dy) = self.x.with_values(|xv| {
            self.y.with_values(|yv| {
                let mut dx = vec![0.0; xv.len()];
                let mut dy = vec![0.0; yv.len()];
                for i in 0..n {
                    for j in 0..m {
                        let gv = g[i * m + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = xv[i * d + k] - yv[j * d + k];
                            dx[i * d + k] += 2.0 * gv * diff;
                            dy[j * d + k] -= 2.0 * gv * diff;
                        }
                    }
                }
                (dx, dy)
            })
        });
        if self.x.needs_grad() {
            sink.add(&self.x, &dx);
        }
        if self.y.needs_grad() {
            sink.add(&self.y, &dy);
        }
    }
}

/// `D[i,j] = ||x_i - y_j||^2` for `x: N x D`, `y: M x D`. The two arguments
/// may be the same tensor.
pub fn pairwise_sq_dists(x: &Tensor, y: &Tensor) -> Result<Tensor, TensorError> {
    let (n, d) = require_2d("pairwise_sq_dists", x)?;
    let (m, d2) = require_2d("pairwise_sq_dists", y)?;
    if d != d2 {
        return Err(TensorError::DimensionMismatch {
            op: "pairwise_sq_dists",
            left: x.shape(),
            right: y.shape(),
        });
    }
    let values = x.with_values(|xv| {
        y.with_values(|yv| {
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                let xi = &xv[i * d..(i + 1) * d];
                for j in 0..m {
                    let yj = &yv[j * d..(j + 1) * d];
                    out[i * m + j] = xi
                        .iter()
                        .zip(yj)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>();
                }
            }
            out
        })
    });
    Ok(Tensor::from_op(
        vec![n, m],
        values,
        Box::new(PairwiseSqDistsBack {
            x: x.clone(),
            y: y.clone(),
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn linear_identity_weights() {
        let x = Tensor::constant(&[1, 2], vec![1.0, 2.0]);
        let w = Tensor::constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = Tensor::constant(&[2], vec![0.0, 0.0]);
        assert_eq!(linear(&x, &w, &b).unwrap().values(), vec![1.0, 2.0]);
    }

    #[test]
    fn linear_hand_oracle() {
        // [[1,1]] @ [[2,0],[0,3]] + [1,1] = [[3,4]]
        let x = Tensor::constant(&[1, 2], vec![1.0, 1.0]);
        let w = Tensor::constant(&[2, 2], vec![2.0, 0.0, 0.0, 3.0]);
        let b = Tensor::constant(&[2], vec![1.0, 1.0]);
        assert_eq!(linear(&x, &w, &b).unwrap().values(), vec![3.0, 4.0]);
    }

    #[test]
    fn linear_bias_gradient_is_ones() {
        let x = Tensor::constant(&[2, 2], vec![0.3, -0.7, 1.5, 0.2]);
        let w = Tensor::parameter(&[2, 2], vec![0.1, 0.2, 0.3, 0.4]);
        let b = Tensor::parameter(&[2], vec![0.0, 0.0]);
        let y = linear(&x, &w, &b).unwrap();
        sum(&y).backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0]); // column sums of ones
    }

    #[test]
    fn linear_shape_mismatch_names_both_shapes() {
        let x = Tensor::constant(&[1, 3], vec![0.0; 3]);
        let w = Tensor::constant(&[2, 2], vec![0.0; 4]);
        let b = Tensor::constant(&[2], vec![0.0; 2]);
        let err = linear(&x, &w, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn relu_forward_and_zero_grad_on_negatives() {
        let x = Tensor::parameter(&[3], vec![-1.0, 0.0, 2.0]);
        let y = relu(&x);
        assert_eq!(y.values(), vec![0.0, 0.0, 2.0]);
        sum(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_all_negative_is_all_zero() {
        let x = Tensor::parameter(&[3], vec![-5.0, -0.1, -2.0]);
        let y = relu(&x);
        assert_eq!(y.values(), vec![0.0; 3]);
        sum(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn softmax_symmetry_and_oracle() {
        let t = softmax(&Tensor::constant(&[1, 2], vec![0.0, 0.0])).unwrap();
        assert_eq!(t.values(), vec![0.5, 0.5]);

        // e^2/(e^2+1) to full f64 precision.
        let t = softmax(&Tensor::constant(&[1, 2], vec![2.0, 0.0])).unwrap();
        let e2 = 2.0f64.exp();
        assert_close(t.values()[0], e2 / (e2 + 1.0), 1e-15);
        assert_close(t.values()[1], 1.0 / (e2 + 1.0), 1e-15);
    }

    #[test]
    fn softmax_is_stable_for_huge_logits() {
        let t = softmax(&Tensor::constant(&[1, 2], vec![1000.0, 0.0])).unwrap();
        assert_eq!(t.values(), vec![1.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = stream(3, "softmax-test");
        let vals: Vec<f64> = (0..24).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let t = softmax(&Tensor::constant(&[4, 6], vals)).unwrap();
        let v = t.values();
        for r in 0..4 {
            let s: f64 = v[r * 6..(r + 1) * 6].iter().sum();
            assert_close(s, 1.0, 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let err = softmax(&Tensor::constant(&[1, 2], vec![f64::NAN, 0.0])).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    #[test]
    fn cross_entropy_worked_values() {
        // prob 1 on the true class -> 0
        let p = Tensor::constant(&[1, 2], vec![1.0, 0.0]);
        assert_eq!(cross_entropy(&p, &[0]).unwrap().value(), 0.0);

        // prob 0.5 -> ln 2
        let p = Tensor::constant(&[1, 2], vec![0.5, 0.5]);
        assert_close(cross_entropy(&p, &[0]).unwrap().value(), 2.0f64.ln(), 1e-15);

        // softmax([2,0]) then label 0 -> -ln(e^2/(e^2+1))
        let p = softmax(&Tensor::constant(&[1, 2], vec![2.0, 0.0])).unwrap();
        let e2 = 2.0f64.exp();
        assert_close(
            cross_entropy(&p, &[0]).unwrap().value(),
            -(e2 / (e2 + 1.0)).ln(),
            1e-15,
        );
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let p = Tensor::constant(&[1, 2], vec![0.5, 0.5]);
        assert!(matches!(
            cross_entropy(&p, &[2]),
            Err(TensorError::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn gradient_reversal_contract() {
        // forward identity
        let x = Tensor::parameter(&[2], vec![3.0, -1.0]);
        let y = gradient_reversal(&x, 1.0);
        assert_eq!(y.values(), vec![3.0, -1.0]);

        // upstream [1,2], scale 1 -> [-1,-2]
        let weights = Tensor::constant(&[2], vec![1.0, 2.0]);
        sum(&mul(&y, &weights).unwrap()).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![-1.0, -2.0]);

        // upstream [2], scale 0.5 -> [-1]
        let x = Tensor::parameter(&[1], vec![4.0]);
        let y = scale(&gradient_reversal(&x, 0.5), 2.0);
        sum(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![-1.0]);
    }

    #[test]
    fn double_reversal_restores_gradient_exactly() {
        let mut rng = stream(11, "grl-test");
        let vals: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = Tensor::parameter(&[8], vals.clone());
        let plain = scale(&x, 3.0);
        sum(&plain).backward().unwrap();
        let expect = x.grad().unwrap();

        let x2 = Tensor::parameter(&[8], vals);
        let twice = scale(&gradient_reversal(&gradient_reversal(&x2, 1.0), 1.0), 3.0);
        sum(&twice).backward().unwrap();
        assert_eq!(x2.grad().unwrap(), expect); // bit-exact
    }

    #[test]
    fn batch_norm_constant_column_is_zero() {
        let x = Tensor::constant(&[3, 2], vec![5.0, 1.0, 5.0, 2.0, 5.0, 3.0]);
        let mut st = BatchNormState::new(2);
        let y = batch_norm(&x, &mut st, Mode::Train).unwrap();
        let v = y.values();
        for r in 0..3 {
            assert_eq!(v[r * 2], 0.0);
        }
    }

    #[test]
    fn batch_norm_eval_identity_stats() {
        let x = Tensor::constant(&[2, 2], vec![0.4, -1.0, 2.0, 0.1]);
        let mut st = BatchNormState::new(2); // mean 0, var 1
        let y = batch_norm(&x, &mut st, Mode::Eval).unwrap();
        for (yv, xv) in y.values().iter().zip(x.values()) {
            assert_close(*yv, xv / (1.0 + st.epsilon).sqrt(), 1e-9);
        }
    }

    #[test]
    fn batch_norm_train_output_moments() {
        let mut rng = stream(5, "bn-test");
        let vals: Vec<f64> = (0..40).map(|_| rng.gen_range(-3.0..7.0)).collect();
        let x = Tensor::constant(&[8, 5], vals);
        let mut st = BatchNormState::new(5);
        let y = batch_norm(&x, &mut st, Mode::Train).unwrap();
        let v = y.values();
        for c in 0..5 {
            let col: Vec<f64> = (0..8).map(|r| v[r * 5 + c]).collect();
            let m: f64 = col.iter().sum::<f64>() / 8.0;
            let var: f64 = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 8.0;
            assert_close(m, 0.0, 1e-9);
            // normalized by biased std with epsilon, so var is 1 up to eps
            assert_close(var, 1.0, 1e-4);
        }
    }

    #[test]
    fn batch_norm_train_needs_two_rows() {
        let x = Tensor::constant(&[1, 2], vec![1.0, 2.0]);
        let mut st = BatchNormState::new(2);
        assert!(matches!(
            batch_norm(&x, &mut st, Mode::Train),
            Err(TensorError::BatchTooSmall { .. })
        ));
    }

    #[test]
    fn dropout_eval_and_zero_rate_are_identity() {
        let x = Tensor::constant(&[4], vec![1.0, -2.0, 3.0, 0.5]);
        let mut rng = stream(0, "dropout-test");
        let y = dropout(&x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(y.values(), x.values());
        let y = dropout(&x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(y.values(), x.values());
    }

    #[test]
    fn dropout_rejects_bad_rate() {
        let x = Tensor::constant(&[1], vec![1.0]);
        let mut rng = stream(0, "dropout-test");
        assert!(dropout(&x, 1.0, Mode::Train, &mut rng).is_err());
        assert!(dropout(&x, -0.1, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_empirical_rate() {
        let n = 100_000;
        let x = Tensor::constant(&[n], vec![1.0; n]);
        let mut rng = stream(42, "dropout-test");
        let y = dropout(&x, 0.3, Mode::Train, &mut rng).unwrap();
        let dropped = y.values().iter().filter(|v| **v == 0.0).count();
        let frac = dropped as f64 / n as f64;
        assert!((frac - 0.3).abs() < 0.01, "drop fraction {frac}");
    }

    #[test]
    fn dropout_survivors_are_rescaled() {
        let x = Tensor::parameter(&[1000], vec![1.0; 1000]);
        let mut rng = stream(7, "dropout-test");
        let y = dropout(&x, 0.5, Mode::Train, &mut rng).unwrap();
        for v in y.values() {
            assert!(v == 0.0 || (v - 2.0).abs() < 1e-15);
        }
        sum(&y).backward().unwrap();
        for (g, v) in x.grad().unwrap().iter().zip(y.values()) {
            assert_eq!(*g, v); // gradient equals the applied scaled mask
        }
    }

    #[test]
    fn binary_cross_entropy_oracle() {
        // outputs [0.9 (t=1), 0.2 (t=0)] -> (-ln 0.9 - ln 0.8)/2
        let p = Tensor::constant(&[2, 1], vec![0.9, 0.2]);
        let loss = binary_cross_entropy(&p, &[true, false]).unwrap();
        assert_close(loss.value(), (-(0.9f64.ln()) - 0.8f64.ln()) / 2.0, 1e-15);
    }

    #[test]
    fn pairwise_sq_dists_forward() {
        let x = Tensor::constant(&[2, 1], vec![0.0, 2.0]);
        let y = Tensor::constant(&[1, 1], vec![1.0]);
        assert_eq!(pairwise_sq_dists(&x, &y).unwrap().values(), vec![1.0, 1.0]);
    }

    #[test]
    fn select_rows_and_concat() {
        let x = Tensor::parameter(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let picked = select_rows(&x, &[2, 0]).unwrap();
        assert_eq!(picked.values(), vec![5.0, 6.0, 1.0, 2.0]);

        let other = Tensor::constant(&[2, 1], vec![9.0, 8.0]);
        let cat = concat_cols(&[picked.clone(), other]).unwrap();
        assert_eq!(cat.values(), vec![5.0, 6.0, 9.0, 1.0, 2.0, 8.0]);

        sum(&cat).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }
}

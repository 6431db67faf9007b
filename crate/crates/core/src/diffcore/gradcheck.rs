//! Finite-difference gradient checking.
//!
//! The checker rebuilds a forward pass from a flat parameter vector and
//! compares analytic gradients against central differences. Random chain
//! cases compose the supported primitives; reversal layers multiply the
//! expected analytic gradient of everything upstream by `-scale`, so the
//! comparison folds that factor in per coordinate.

use rand::Rng;

use super::{
    batch_norm, cross_entropy, dropout, gradient_reversal, linear, mean, relu, softmax,
    with_no_grad, BatchNormState, Mode, Tensor,
};
use crate::rng::stream;

/// Central-difference gradient of `f` at `x0` with step `h`.
pub fn finite_diff_gradient(mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], h: f64) -> Vec<f64> {
    let mut pt = x0.to_vec();
    let mut grad = vec![0.0; x0.len()];
    for i in 0..x0.len() {
        let orig = pt[i];
        pt[i] = orig + h;
        let fp = f(&pt);
        pt[i] = orig - h;
        let fm = f(&pt);
        pt[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// One link in a randomly generated chain of primitives.
#[derive(Debug, Clone)]
pub enum ChainOp {
    Linear { out_dim: usize },
    Relu,
    BatchNorm,
    Softmax,
    GradReversal { scale: f64 },
    Dropout { rate: f64, seed: u64 },
}

/// How the chain collapses to a scalar.
#[derive(Debug, Clone)]
pub enum ChainHead {
    /// softmax over the final features, then cross-entropy against labels.
    CrossEntropy { labels: Vec<usize> },
    /// plain mean of the final features.
    Mean,
}

/// A reproducible gradient-check case: input dims, op sequence, and the
/// flat layout `[x, (w, b) per linear]` of all differentiable leaves.
#[derive(Debug, Clone)]
pub struct ChainCase {
    pub batch: usize,
    pub in_dim: usize,
    pub ops: Vec<ChainOp>,
    pub head: ChainHead,
    pub init: Vec<f64>,
}

/// Forward evaluation record: the loss plus every ReLU input observed, used
/// to exclude coordinates whose central difference straddles a kink.
pub struct ChainEval {
    pub loss: f64,
    pub relu_inputs: Vec<f64>,
}

/// Aggregate result of checking one case.
#[derive(Debug, Default, Clone, Copy)]
pub struct CheckStats {
    pub checked: usize,
    pub passed: usize,
    pub excluded: usize,
    pub max_rel_err: f64,
}

impl ChainCase {
    /// Draw a random case: depth at most `max_depth` middle ops, widths at
    /// most 16, always at least two feature columns.
    pub fn random(rng: &mut impl Rng, max_depth: usize, include_dropout: bool) -> ChainCase {
        let batch = rng.gen_range(2..=4);
        let in_dim = rng.gen_range(2..=8);
        let depth = rng.gen_range(1..=max_depth.max(1));
        let mut ops = Vec::new();
        let mut dim = in_dim;
        for _ in 0..depth {
            let choice = rng.gen_range(0..if include_dropout { 6 } else { 5 });
            match choice {
                0 => {
                    let out_dim = rng.gen_range(2..=8);
                    ops.push(ChainOp::Linear { out_dim });
                    dim = out_dim;
                }
                1 => ops.push(ChainOp::Relu),
                2 => ops.push(ChainOp::BatchNorm),
                3 => ops.push(ChainOp::GradReversal {
                    scale: [0.5, 1.0, 2.0][rng.gen_range(0..3)],
                }),
                4 => ops.push(ChainOp::Softmax),
                _ => ops.push(ChainOp::Dropout {
                    rate: [0.2, 0.5][rng.gen_range(0..2)],
                    seed: rng.gen(),
                }),
            }
        }
        let head = if rng.gen_bool(0.75) {
            ChainHead::CrossEntropy {
                labels: (0..batch).map(|_| rng.gen_range(0..dim)).collect(),
            }
        } else {
            ChainHead::Mean
        };

        let mut init: Vec<f64> = (0..batch * in_dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut d = in_dim;
        for op in &ops {
            if let ChainOp::Linear { out_dim } = op {
                for _ in 0..d * out_dim + out_dim {
                    init.push(rng.gen_range(-1.0..1.0));
                }
                d = *out_dim;
            }
        }
        ChainCase {
            batch,
            in_dim,
            ops,
            head,
            init,
        }
    }

    fn leaf_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = vec![vec![self.batch, self.in_dim]];
        let mut d = self.in_dim;
        for op in &self.ops {
            if let ChainOp::Linear { out_dim } = op {
                shapes.push(vec![d, *out_dim]);
                shapes.push(vec![*out_dim]);
                d = *out_dim;
            }
        }
        shapes
    }

    fn split_leaves(&self, flat: &[f64], differentiable: bool) -> Vec<Tensor> {
        let mut leaves = Vec::new();
        let mut offset = 0;
        for shape in self.leaf_shapes() {
            let n: usize = shape.iter().product();
            let vals = flat[offset..offset + n].to_vec();
            offset += n;
            leaves.push(if differentiable {
                Tensor::parameter(&shape, vals)
            } else {
                Tensor::constant(&shape, vals)
            });
        }
        assert_eq!(offset, flat.len(), "flat leaf vector length mismatch");
        leaves
    }

    fn run(&self, leaves: &[Tensor]) -> (Tensor, Vec<f64>) {
        let mut relu_inputs = Vec::new();
        let mut cur = leaves[0].clone();
        let mut next_leaf = 1;
        for op in &self.ops {
            cur = match op {
                ChainOp::Linear { .. } => {
                    let w = &leaves[next_leaf];
                    let b = &leaves[next_leaf + 1];
                    next_leaf += 2;
                    linear(&cur, w, b).expect("chain linear shapes are consistent")
                }
                ChainOp::Relu => {
                    cur.with_values(|v| relu_inputs.extend_from_slice(v));
                    relu(&cur)
                }
                ChainOp::BatchNorm => {
                    let mut st = BatchNormState::new(cur.shape()[1]);
                    batch_norm(&cur, &mut st, Mode::Train).expect("chain batch size >= 2")
                }
                ChainOp::Softmax => softmax(&cur).expect("chain keeps >= 2 columns"),
                ChainOp::GradReversal { scale } => gradient_reversal(&cur, *scale),
                ChainOp::Dropout { rate, seed } => {
                    let mut rng = stream(*seed, "gradcheck-dropout");
                    dropout(&cur, *rate, Mode::Train, &mut rng).expect("rate in [0,1)")
                }
            };
        }
        let loss = match &self.head {
            ChainHead::CrossEntropy { labels } => {
                let probs = softmax(&cur).expect("chain keeps >= 2 columns");
                cross_entropy(&probs, labels).expect("labels drawn in range")
            }
            ChainHead::Mean => mean(&cur),
        };
        (loss, relu_inputs)
    }

    /// Forward-only evaluation at a flat leaf vector.
    pub fn eval(&self, flat: &[f64]) -> ChainEval {
        with_no_grad(|| {
            let leaves = self.split_leaves(flat, false);
            let (loss, relu_inputs) = self.run(&leaves);
            ChainEval {
                loss: loss.value(),
                relu_inputs,
            }
        })
    }

    /// Loss and analytic gradient (flat layout) via the backward pass.
    pub fn analytic(&self, flat: &[f64]) -> (f64, Vec<f64>) {
        let leaves = self.split_leaves(flat, true);
        let (loss, _) = self.run(&leaves);
        loss.backward().expect("head reduces to a scalar");
        let mut grads = Vec::with_capacity(flat.len());
        for leaf in &leaves {
            match leaf.grad() {
                Some(g) => grads.extend_from_slice(&g),
                None => grads.extend(std::iter::repeat(0.0).take(leaf.numel())),
            }
        }
        (loss.value(), grads)
    }

    /// Per-coordinate factor relating the forward derivative to the analytic
    /// gradient: the product of `-scale` over every reversal layer downstream
    /// of the op where the leaf enters the chain.
    pub fn reversal_factors(&self) -> Vec<f64> {
        let suffix_factor = |from: usize| -> f64 {
            self.ops[from..]
                .iter()
                .map(|op| match op {
                    ChainOp::GradReversal { scale } => -scale,
                    _ => 1.0,
                })
                .product()
        };
        let mut factors = vec![suffix_factor(0); self.batch * self.in_dim];
        let mut d = self.in_dim;
        for (i, op) in self.ops.iter().enumerate() {
            if let ChainOp::Linear { out_dim } = op {
                let f = suffix_factor(i + 1);
                factors.extend(std::iter::repeat(f).take(d * *out_dim + *out_dim));
                d = *out_dim;
            }
        }
        factors
    }

    /// Compare analytic gradients against central differences.
    ///
    /// A coordinate is excluded when a ReLU input sits within `1e-5` of zero
    /// at the base point or changes sign between the two perturbed passes.
    pub fn check(&self, h: f64, tol: f64) -> CheckStats {
        let flat = self.init.clone();
        let base = self.eval(&flat);
        let base_kink = base.relu_inputs.iter().any(|v| v.abs() < 1e-5);
        let (_, analytic) = self.analytic(&flat);
        let factors = self.reversal_factors();

        let mut stats = CheckStats::default();
        let mut pt = flat.clone();
        for i in 0..flat.len() {
            let orig = pt[i];
            pt[i] = orig + h;
            let plus = self.eval(&pt);
            pt[i] = orig - h;
            let minus = self.eval(&pt);
            pt[i] = orig;

            let straddles_kink = plus
                .relu_inputs
                .iter()
                .zip(&minus.relu_inputs)
                .any(|(p, m)| p.signum() != m.signum() || p.abs() < 1e-5 || m.abs() < 1e-5);
            if base_kink || straddles_kink {
                stats.excluded += 1;
                continue;
            }

            let fd = factors[i] * (plus.loss - minus.loss) / (2.0 * h);
            let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-6);
            stats.checked += 1;
            stats.max_rel_err = stats.max_rel_err.max(rel);
            if rel <= tol {
                stats.passed += 1;
            }
        }
        stats
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_on_quadratic() {
        let g = finite_diff_gradient(|x| x.iter().map(|v| v * v).sum(), &[1.0, -3.0], 1e-5);
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] + 6.0).abs() < 1e-8);
    }

    #[test]
    fn composed_linear_relu_cross_entropy_matches_fd() {
        let case = ChainCase {
            batch: 2,
            in_dim: 3,
            ops: vec![ChainOp::Linear { out_dim: 4 }, ChainOp::Relu],
            head: ChainHead::CrossEntropy { labels: vec![1, 3] },
            init: vec![
                0.5, -0.2, 0.8, 1.1, 0.3, -0.7, // x
                0.2, -0.4, 0.6, 0.1, 0.9, -0.3, 0.5, 0.7, -0.8, 0.2, -0.1, 0.4, // w
                0.05, 0.07, 0.03, 0.0, // b
            ],
        };
        let stats = case.check(1e-5, 1e-4);
        assert_eq!(stats.passed, stats.checked, "max rel {}", stats.max_rel_err);
        assert_eq!(stats.excluded, 0);
        assert!(stats.checked > 0);
    }

    #[test]
    fn reversal_factor_accounts_for_grl() {
        let case = ChainCase {
            batch: 2,
            in_dim: 2,
            ops: vec![
                ChainOp::Linear { out_dim: 2 },
                ChainOp::GradReversal { scale: 1.0 },
                ChainOp::Linear { out_dim: 2 },
            ],
            head: ChainHead::Mean,
            init: {
                let mut v = vec![0.4, -0.6, 0.9, 0.2]; // x
                v.extend([0.3, -0.2, 0.5, 0.8, 0.0, 0.0]); // w1, b1 (upstream of grl)
                v.extend([0.7, 0.1, -0.5, 0.6, 0.0, 0.0]); // w2, b2 (downstream)
                v
            },
        };
        let factors = case.reversal_factors();
        // x and the first linear see one reversal; the second linear none.
        assert_eq!(&factors[..4], &[-1.0; 4]);
        assert_eq!(&factors[4..10], &[-1.0; 6]);
        assert_eq!(&factors[10..], &[1.0; 6]);

        let stats = case.check(1e-5, 1e-4);
        assert_eq!(stats.passed, stats.checked, "max rel {}", stats.max_rel_err);
    }

    #[test]
    fn random_cases_pass() {
        let mut rng = stream(123, "gradcheck-unit");
        for _ in 0..10 {
            let case = ChainCase::random(&mut rng, 6, true);
            let stats = case.check(1e-5, 1e-4);
            assert!(
                stats.passed == stats.checked,
                "case {:?}: {}/{} passed, max rel {}",
                case.ops,
                stats.passed,
                stats.checked,
                stats.max_rel_err
            );
        }
    }
}

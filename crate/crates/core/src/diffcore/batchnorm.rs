//! Running statistics for batch normalization.

use super::TensorError;

/// Per-channel running statistics plus the update hyper-parameters.
///
/// Train-mode normalization uses batch statistics and folds them into the
/// running estimates with an exponential moving average; eval-mode
/// normalization uses the running estimates directly. Variances are biased
/// (divide by the batch size), both for normalization and for the running
/// update. Test-time domain adaptation overwrites these estimates with
/// aggregate statistics of the deployment domain.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPSILON: f64 = 1e-5;

    /// Fresh state for `channels` features: mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: Self::DEFAULT_MOMENTUM,
            epsilon: Self::DEFAULT_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Check the struct invariants (matching lengths, momentum in (0,1),
    /// positive epsilon, non-negative variances).
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.running_mean.len() != self.running_var.len() {
            return Err(TensorError::DimensionMismatch {
                op: "batch_norm_state",
                left: vec![self.running_mean.len()],
                right: vec![self.running_var.len()],
            });
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(TensorError::InvalidParameter {
                op: "batch_norm_state",
                name: "momentum",
                value: self.momentum,
                constraint: "0 < momentum < 1",
            });
        }
        if !(self.epsilon > 0.0) {
            return Err(TensorError::InvalidParameter {
                op: "batch_norm_state",
                name: "epsilon",
                value: self.epsilon,
                constraint: "epsilon > 0",
            });
        }
        if let Some(&v) = self.running_var.iter().find(|v| **v < 0.0 || !v.is_finite()) {
            return Err(TensorError::InvalidParameter {
                op: "batch_norm_state",
                name: "running_var",
                value: v,
                constraint: "entries >= 0",
            });
        }
        Ok(())
    }

    /// Fold batch statistics into the running estimates.
    pub(crate) fn update(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(batch_var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

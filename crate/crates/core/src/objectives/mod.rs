//! Training objectives.
//!
//! The fused classification loss applies one softmax to the summed
//! per-modality class scores and is computed on corresponding source
//! examples only. The per-modality adversarial loss is a binary
//! cross-entropy on the domain discriminator output, with features routed
//! through a gradient-reversal layer so that minimizing the scalar trains
//! the discriminator normally while training the extractor adversarially.
//! The correspondence loss is a two-class cross-entropy on the shared
//! correspondence head over both domains; it keeps both the positive and
//! the negative term, since a positives-only objective would be degenerate.
//! The combined objective is
//! `L = L_y + lambda_d * sum_m L_d^m + lambda_c * L_c`.

mod mmd;

pub use mmd::{mmd_loss, mmd_with_bandwidths, median_pairwise_sq_dist, MmdEstimator, RBF_MULTIPLIERS};

use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::diffcore::{
    abs, add, add_n, binary_cross_entropy, cross_entropy, gradient_reversal, scale, select_rows,
    softmax, sub, sum, Mode, Tensor, TensorError,
};
use crate::nets::{ModelBundle, NetsError, WindowSample};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("{op}: batch is empty")]
    EmptyBatch { op: &'static str },
    #[error("{op}: example {index} violates the contract: {rule}")]
    ContractViolation {
        op: &'static str,
        index: usize,
        rule: &'static str,
    },
    #[error("kernel discrepancy needs at least {min} samples per side, got {got}")]
    SampleTooSmall { min: usize, got: usize },
    #[error("loss weight {name}={value} must be non-negative")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error(transparent)]
    Nets(#[from] NetsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Weights of the alignment terms in the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_d: f64,
    pub lambda_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_d: 1.0,
            lambda_c: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.lambda_d < 0.0 {
            return Err(ObjectiveError::NegativeWeight {
                name: "lambda_d",
                value: self.lambda_d,
            });
        }
        if self.lambda_c < 0.0 {
            return Err(ObjectiveError::NegativeWeight {
                name: "lambda_c",
                value: self.lambda_c,
            });
        }
        Ok(())
    }
}

/// One training example: a multi-modal window, an optional class label
/// (present exactly for source examples), the domain bit, and the
/// correspondence bit.
#[derive(Debug, Clone)]
pub struct LabeledExample {
    pub window: WindowSample,
    pub y: Option<usize>,
    /// Domain bit: true = source.
    pub source: bool,
    /// Correspondence bit: true = both modalities sampled from one action.
    pub corresponds: bool,
}

impl LabeledExample {
    pub fn validate(&self) -> bool {
        self.y.is_some() == self.source
    }
}

/// Column of the correspondence distribution holding the given label.
/// Column 0 is "corresponding", column 1 is "not corresponding".
pub fn correspondence_class(corresponds: bool) -> usize {
    if corresponds {
        0
    } else {
        1
    }
}

/// Per-component values of one combined-objective evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub classification: f64,
    /// One entry per modality; all zeros when the adversarial term is off.
    pub adversarial: Vec<f64>,
    pub correspondence: f64,
    pub total: f64,
}

/// Shared encoder forward: one feature tensor per modality over the whole
/// example list, so every loss term sees the same dropout draw.
pub fn extract_features(
    bundle: &mut ModelBundle,
    examples: &[LabeledExample],
    mode: Mode,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<Tensor>, ObjectiveError> {
    let windows: Vec<&WindowSample> = examples.iter().map(|e| &e.window).collect();
    (0..bundle.modality_count())
        .map(|m| {
            let input = bundle.windows_to_input(&windows, m)?;
            Ok(bundle.features(m, &input, mode, rng)?)
        })
        .collect()
}

/// Fusion probability: softmax of the summed per-modality class scores.
/// Evaluation uses this same quantity, so the metric matches the trained
/// objective exactly.
pub fn fused_probs(modality_logits: &[Tensor]) -> Result<Tensor, ObjectiveError> {
    Ok(softmax(&add_n(modality_logits)?)?)
}

/// Mean cross-entropy of the fused prediction against the labels.
pub fn fused_classification_loss(
    modality_logits: &[Tensor],
    labels: &[usize],
) -> Result<Tensor, ObjectiveError> {
    Ok(cross_entropy(&fused_probs(modality_logits)?, labels)?)
}

/// Classification loss over a batch of corresponding source examples.
pub fn classification_loss(
    bundle: &mut ModelBundle,
    examples: &[LabeledExample],
    mode: Mode,
    rng: &mut ChaCha12Rng,
) -> Result<Tensor, ObjectiveError> {
    if examples.is_empty() {
        return Err(ObjectiveError::EmptyBatch {
            op: "classification_loss",
        });
    }
    for (i, e) in examples.iter().enumerate() {
        if !e.source || !e.corresponds {
            return Err(ObjectiveError::ContractViolation {
                op: "classification_loss",
                index: i,
                rule: "only corresponding source examples train classification",
            });
        }
    }
    let features = extract_features(bundle, examples, mode, rng)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.y.expect("source example")).collect();
    let logits: Vec<Tensor> = (0..bundle.modality_count())
        .map(|m| bundle.classify(m, &features[m]))
        .collect::<Result<_, _>>()?;
    fused_classification_loss(&logits, &labels)
}

/// Domain loss for pre-extracted features of one modality: the features
/// pass through gradient reversal, then the discriminator, then a binary
/// cross-entropy against the domain bits.
pub fn adversarial_loss_from_features(
    bundle: &ModelBundle,
    m: usize,
    features: &Tensor,
    source_bits: &[bool],
    grl_scale: f64,
) -> Result<Tensor, ObjectiveError> {
    let reversed = gradient_reversal(features, grl_scale);
    let probs = bundle.discriminate(m, &reversed)?;
    Ok(binary_cross_entropy(&probs, source_bits)?)
}

/// Per-modality adversarial domain loss over a mixed batch.
pub fn adversarial_domain_loss(
    bundle: &mut ModelBundle,
    m: usize,
    examples: &[LabeledExample],
    mode: Mode,
    rng: &mut ChaCha12Rng,
) -> Result<Tensor, ObjectiveError> {
    if examples.is_empty() {
        return Err(ObjectiveError::EmptyBatch {
            op: "adversarial_domain_loss",
        });
    }
    let windows: Vec<&WindowSample> = examples.iter().map(|e| &e.window).collect();
    let input = bundle.windows_to_input(&windows, m)?;
    let features = bundle.features(m, &input, mode, rng)?;
    let bits: Vec<bool> = examples.iter().map(|e| e.source).collect();
    adversarial_loss_from_features(bundle, m, &features, &bits, 1.0)
}

/// Correspondence loss for pre-extracted features of every modality.
pub fn correspondence_loss_from_features(
    bundle: &ModelBundle,
    features: &[Tensor],
    corresponds: &[bool],
) -> Result<Tensor, ObjectiveError> {
    let probs = bundle.correspond(features)?;
    let labels: Vec<usize> = corresponds.iter().map(|c| correspondence_class(*c)).collect();
    Ok(cross_entropy(&probs, &labels)?)
}

/// Correspondence self-supervision loss over a mixed batch from both
/// domains.
pub fn correspondence_loss(
    bundle: &mut ModelBundle,
    examples: &[LabeledExample],
    mode: Mode,
    rng: &mut ChaCha12Rng,
) -> Result<Tensor, ObjectiveError> {
    if examples.is_empty() {
        return Err(ObjectiveError::EmptyBatch {
            op: "correspondence_loss",
        });
    }
    let features = extract_features(bundle, examples, mode, rng)?;
    let bits: Vec<bool> = examples.iter().map(|e| e.corresponds).collect();
    correspondence_loss_from_features(bundle, &features, &bits)
}

/// Weighted combination `L_y + lambda_d * sum_m L_d^m + lambda_c * L_c`
/// as a differentiable scalar.
pub fn combine_components(
    classification: &Tensor,
    adversarial: &[Tensor],
    correspondence: Option<&Tensor>,
    weights: &LossWeights,
) -> Result<Tensor, ObjectiveError> {
    let mut total = classification.clone();
    if !adversarial.is_empty() && weights.lambda_d != 0.0 {
        let d_sum = add_n(adversarial)?;
        total = add(&total, &scale(&d_sum, weights.lambda_d))?;
    }
    if let Some(c) = correspondence {
        if weights.lambda_c != 0.0 {
            total = add(&total, &scale(c, weights.lambda_c))?;
        }
    }
    Ok(total)
}

/// The combined objective over a composed batch.
///
/// Classification runs on the corresponding-source sub-batch only; both
/// alignment terms run on the full batch. Terms with a zero weight are not
/// computed and report exactly 0 in the breakdown. Features are extracted
/// once per modality and shared by all terms.
pub fn total_loss(
    bundle: &mut ModelBundle,
    examples: &[LabeledExample],
    weights: &LossWeights,
    mode: Mode,
    rng: &mut ChaCha12Rng,
) -> Result<(Tensor, LossBreakdown), ObjectiveError> {
    weights.validate()?;
    if examples.is_empty() {
        return Err(ObjectiveError::EmptyBatch { op: "total_loss" });
    }
    let class_idx: Vec<usize> = examples
        .iter()
        .enumerate()
        .filter(|(_, e)| e.source && e.corresponds)
        .map(|(i, _)| i)
        .collect();
    if class_idx.is_empty() {
        return Err(ObjectiveError::ContractViolation {
            op: "total_loss",
            index: 0,
            rule: "batch has no corresponding source examples to classify",
        });
    }

    let features = extract_features(bundle, examples, mode, rng)?;
    let modalities = bundle.modality_count();

    let labels: Vec<usize> = class_idx
        .iter()
        .map(|&i| examples[i].y.expect("source example"))
        .collect();
    let logits: Vec<Tensor> = (0..modalities)
        .map(|m| {
            let rows = select_rows(&features[m], &class_idx)?;
            Ok(bundle.classify(m, &rows)?)
        })
        .collect::<Result<_, ObjectiveError>>()?;
    let l_y = fused_classification_loss(&logits, &labels)?;

    let mut l_d = Vec::new();
    if weights.lambda_d > 0.0 {
        let bits: Vec<bool> = examples.iter().map(|e| e.source).collect();
        for (m, feats) in features.iter().enumerate() {
            l_d.push(adversarial_loss_from_features(bundle, m, feats, &bits, 1.0)?);
        }
    }

    let l_c = if weights.lambda_c > 0.0 {
        let bits: Vec<bool> = examples.iter().map(|e| e.corresponds).collect();
        Some(correspondence_loss_from_features(bundle, &features, &bits)?)
    } else {
        None
    };

    let total = combine_components(&l_y, &l_d, l_c.as_ref(), weights)?;
    let breakdown = LossBreakdown {
        classification: l_y.value(),
        adversarial: if l_d.is_empty() {
            vec![0.0; modalities]
        } else {
            l_d.iter().map(|t| t.value()).collect()
        },
        correspondence: l_c.as_ref().map_or(0.0, |t| t.value()),
        total: total.value(),
    };
    Ok((total, breakdown))
}

/// Mean L1 distance between two row-stochastic prediction matrices
/// (classifier-disagreement alignment).
pub fn mcd_discrepancy(probs1: &Tensor, probs2: &Tensor) -> Result<Tensor, ObjectiveError> {
    let shape = probs1.shape();
    if shape != probs2.shape() {
        return Err(ObjectiveError::Tensor(TensorError::DimensionMismatch {
            op: "mcd_discrepancy",
            left: shape,
            right: probs2.shape(),
        }));
    }
    if shape.len() != 2 || shape[0] == 0 {
        return Err(ObjectiveError::Tensor(TensorError::BadShape {
            op: "mcd_discrepancy",
            expected: "non-empty 2-d",
            shape,
        }));
    }
    let rows = shape[0] as f64;
    Ok(scale(&sum(&abs(&sub(probs1, probs2)?)), 1.0 / rows))
}

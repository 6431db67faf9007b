//! Desk-scale laboratory for multi-modal unsupervised domain adaptation on
//! synthetic action segments.
//!
//! A model sees two input streams per action segment: an appearance-like
//! stream that suffers a strong per-domain shift and a motion-like stream
//! that is mostly robust to it. Classifiers are trained on a labelled source
//! domain only; alignment to the unlabelled target domain is done by
//! per-stream domain discriminators behind a gradient-reversal layer, by a
//! cross-stream correspondence pretext task, or by both jointly. Baselines
//! (test-time batch-norm adaptation, kernel discrepancy minimisation,
//! classifier-disagreement alignment) share the same backbone.
//!
//! Module map:
//! - [`diffcore`]: minimal reverse-mode autodiff over dense f64 tensors.
//! - [`nets`]: per-stream encoders, classifiers, discriminators and the
//!   shared correspondence head.
//! - [`objectives`]: classification, adversarial, correspondence, kernel
//!   discrepancy and classifier-disagreement losses.
//! - [`synthdata`]: synthetic domain generator, window sampling and batch
//!   composition.
//! - [`trainer`]: two-stage Adam training schedule and the method selector.
//! - [`evaluator`]: accuracy protocols, metric records and exports.

pub mod diffcore;
pub mod evaluator;
pub mod nets;
pub mod objectives;
pub mod rng;
pub mod synthdata;
pub mod trainer;

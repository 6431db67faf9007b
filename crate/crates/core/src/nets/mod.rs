//! The four network roles at desk scale: per-modality feature extractors,
//! per-modality classifiers, per-modality domain discriminators, and the
//! shared correspondence head.
//!
//! The extractor flattens a temporal window and applies
//! `linear -> relu -> batch_norm -> linear -> relu`; temporal pooling is
//! implicit in the first projection. Classifiers are a single affine layer
//! returning raw logits (fusion applies one softmax after summing modality
//! scores). Discriminators and the correspondence head are two affine
//! layers with a ReLU between them and a fixed hidden width of 100; the
//! correspondence head is deliberately that shallow so the correspondence
//! signal is learned in the extractors.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::diffcore::{
    batch_norm, concat_cols, dropout, linear, relu, sigmoid, softmax, BatchNormState, Mode,
    Tensor, TensorError,
};
use crate::rng::stream;

/// Hidden width of discriminator and correspondence heads.
pub const HEAD_HIDDEN: usize = 100;
/// Default encoder hidden width.
pub const ENCODER_HIDDEN: usize = 128;
/// Default feature dimension. (The full-scale reference backbone this
/// stands in for produces 1024-dim features; 64 keeps runs desk-sized.)
pub const DEFAULT_FEAT_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum NetsError {
    #[error("modality index {index} out of range for {count} modalities")]
    ModalityOutOfRange { index: usize, count: usize },
    #[error("expected {expected} features per modality, got {got}")]
    FeatureCount { expected: usize, got: usize },
    #[error("this bundle was built without twin classifier heads")]
    NoTwinClassifier,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One multi-modal input sample: a fixed-length temporal window per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// Per modality, a `window_len x frame_dim` row-major matrix.
    pub modalities: Vec<FrameMatrix>,
}

/// A row-major `rows x frame_dim` sequence of frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    pub frame_dim: usize,
    pub data: Vec<f64>,
}

impl FrameMatrix {
    pub fn new(frame_dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len() % frame_dim.max(1), 0, "ragged frame matrix");
        FrameMatrix { frame_dim, data }
    }

    pub fn rows(&self) -> usize {
        if self.frame_dim == 0 {
            0
        } else {
            self.data.len() / self.frame_dim
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.frame_dim..(r + 1) * self.frame_dim]
    }

    /// Copy rows `[start, start + len)` into a new matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> FrameMatrix {
        FrameMatrix {
            frame_dim: self.frame_dim,
            data: self.data[start * self.frame_dim..(start + len) * self.frame_dim].to_vec(),
        }
    }
}

/// Architecture knobs for a [`ModelBundle`].
#[derive(Debug, Clone)]
pub struct NetsConfig {
    /// Per-modality frame dimension; its length fixes the modality count.
    pub frame_dims: Vec<usize>,
    pub window_len: usize,
    pub feat_dim: usize,
    pub encoder_hidden: usize,
    pub class_count: usize,
    pub dropout_rate: f64,
    /// Disable to build a normalization-free encoder.
    pub batch_norm: bool,
    /// Add a second classifier head per modality (classifier-discrepancy
    /// alignment needs two).
    pub twin_classifiers: bool,
    pub init_seed: u64,
}

impl NetsConfig {
    pub fn modality_count(&self) -> usize {
        self.frame_dims.len()
    }

    pub fn flat_input_dim(&self, m: usize) -> usize {
        self.window_len * self.frame_dims[m]
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearLayer {
    /// Uniform fan-in init for weights, zero biases.
    fn init(rng: &mut ChaCha12Rng, in_dim: usize, out_dim: usize) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = Tensor::parameter(
            &[in_dim, out_dim],
            (0..in_dim * out_dim).map(|_| rng.gen_range(-bound..bound)).collect(),
        );
        let b = Tensor::parameter(&[out_dim], vec![0.0; out_dim]);
        LinearLayer { w, b }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        linear(x, &self.w, &self.b)
    }
}

/// Windowed-input encoder producing `feat_dim` features.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub lin1: LinearLayer,
    pub bn: Option<BatchNormState>,
    pub lin2: LinearLayer,
}

/// Two affine layers with a ReLU in between.
#[derive(Debug, Clone)]
pub struct TwoLayerHead {
    pub lin1: LinearLayer,
    pub lin2: LinearLayer,
}

impl TwoLayerHead {
    fn apply(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        self.lin2.apply(&relu(&self.lin1.apply(x)?))
    }
}

/// Everything learned for one modality.
#[derive(Debug, Clone)]
pub struct ModalityNets {
    pub encoder: Encoder,
    pub classifier: LinearLayer,
    pub twin_classifier: Option<LinearLayer>,
    pub discriminator: TwoLayerHead,
}

/// All learnable parameters plus batch-norm state.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub cfg: NetsConfig,
    pub modalities: Vec<ModalityNets>,
    pub correspondence: TwoLayerHead,
}

impl ModelBundle {
    pub fn new(cfg: NetsConfig) -> Self {
        let mut rng = stream(cfg.init_seed, "nets-init");
        let modalities = (0..cfg.modality_count())
            .map(|m| {
                let flat = cfg.flat_input_dim(m);
                ModalityNets {
                    encoder: Encoder {
                        lin1: LinearLayer::init(&mut rng, flat, cfg.encoder_hidden),
                        bn: cfg.batch_norm.then(|| BatchNormState::new(cfg.encoder_hidden)),
                        lin2: LinearLayer::init(&mut rng, cfg.encoder_hidden, cfg.feat_dim),
                    },
                    classifier: LinearLayer::init(&mut rng, cfg.feat_dim, cfg.class_count),
                    twin_classifier: cfg
                        .twin_classifiers
                        .then(|| LinearLayer::init(&mut rng, cfg.feat_dim, cfg.class_count)),
                    discriminator: TwoLayerHead {
                        lin1: LinearLayer::init(&mut rng, cfg.feat_dim, HEAD_HIDDEN),
                        lin2: LinearLayer::init(&mut rng, HEAD_HIDDEN, 1),
                    },
                }
            })
            .collect();
        let correspondence = TwoLayerHead {
            lin1: LinearLayer::init(
                &mut rng,
                cfg.modality_count() * cfg.feat_dim,
                HEAD_HIDDEN,
            ),
            lin2: LinearLayer::init(&mut rng, HEAD_HIDDEN, 2),
        };
        ModelBundle {
            cfg,
            modalities,
            correspondence,
        }
    }

    pub fn modality_count(&self) -> usize {
        self.modalities.len()
    }

    fn check_modality(&self, m: usize) -> Result<(), NetsError> {
        if m >= self.modalities.len() {
            return Err(NetsError::ModalityOutOfRange {
                index: m,
                count: self.modalities.len(),
            });
        }
        Ok(())
    }

    /// Flatten windows of modality `m` into a `B x (window_len * frame_dim)`
    /// constant input tensor.
    pub fn windows_to_input(&self, windows: &[&WindowSample], m: usize) -> Result<Tensor, NetsError> {
        self.check_modality(m)?;
        let flat = self.cfg.flat_input_dim(m);
        let mut values = Vec::with_capacity(windows.len() * flat);
        for w in windows {
            let fm = &w.modalities[m];
            assert_eq!(fm.data.len(), flat, "window does not match configured shape");
            values.extend_from_slice(&fm.data);
        }
        Ok(Tensor::constant(&[windows.len(), flat], values))
    }

    /// Encoder forward for modality `m` over a flattened batch.
    ///
    /// Train mode normalizes with batch statistics (updating the running
    /// estimates) and applies dropout to the output features; eval mode is
    /// deterministic and leaves all state untouched.
    pub fn features(
        &mut self,
        m: usize,
        input: &Tensor,
        mode: Mode,
        rng: &mut ChaCha12Rng,
    ) -> Result<Tensor, NetsError> {
        self.check_modality(m)?;
        let enc = &mut self.modalities[m].encoder;
        let h = relu(&enc.lin1.apply(input)?);
        let h = match enc.bn.as_mut() {
            Some(st) => batch_norm(&h, st, mode)?,
            None => h,
        };
        let f = relu(&enc.lin2.apply(&h)?);
        Ok(dropout(&f, self.cfg.dropout_rate, mode, rng)?)
    }

    /// Eval-mode encoder forward without touching any state.
    pub fn features_frozen(&self, m: usize, input: &Tensor) -> Result<Tensor, NetsError> {
        self.check_modality(m)?;
        let enc = &self.modalities[m].encoder;
        let h = relu(&enc.lin1.apply(input)?);
        let h = match &enc.bn {
            Some(st) => {
                // Eval-mode normalization reads the running stats only.
                let mut st = st.clone();
                batch_norm(&h, &mut st, Mode::Eval)?
            }
            None => h,
        };
        Ok(relu(&enc.lin2.apply(&h)?))
    }

    /// Eval-mode feature vector for a single window.
    pub fn feature_extract(&self, m: usize, window: &WindowSample) -> Result<Vec<f64>, NetsError> {
        let input = self.windows_to_input(&[window], m)?;
        Ok(self.features_frozen(m, &input)?.values())
    }

    /// Raw class logits (`B x K`) for modality `m` features. The fusion
    /// softmax is applied once over summed modality scores, not here.
    pub fn classify(&self, m: usize, features: &Tensor) -> Result<Tensor, NetsError> {
        self.check_modality(m)?;
        self.check_feat(features)?;
        Ok(self.modalities[m].classifier.apply(features)?)
    }

    /// Logits from the second classifier head.
    pub fn classify_twin(&self, m: usize, features: &Tensor) -> Result<Tensor, NetsError> {
        self.check_modality(m)?;
        self.check_feat(features)?;
        let head = self.modalities[m]
            .twin_classifier
            .as_ref()
            .ok_or(NetsError::NoTwinClassifier)?;
        Ok(head.apply(features)?)
    }

    /// Per-row probability (`B x 1`, strictly inside (0,1)) that the
    /// features come from the source domain. Callers route features through
    /// a gradient-reversal op first when training adversarially.
    pub fn discriminate(&self, m: usize, features: &Tensor) -> Result<Tensor, NetsError> {
        self.check_modality(m)?;
        self.check_feat(features)?;
        Ok(sigmoid(&self.modalities[m].discriminator.apply(features)?))
    }

    /// Two-class correspondence distribution (`B x 2`, rows sum to 1) from
    /// one feature tensor per modality, concatenated along the feature axis
    /// in modality order.
    pub fn correspond(&self, features: &[Tensor]) -> Result<Tensor, NetsError> {
        if features.len() != self.modality_count() {
            return Err(NetsError::FeatureCount {
                expected: self.modality_count(),
                got: features.len(),
            });
        }
        for f in features {
            self.check_feat(f)?;
        }
        let joint = concat_cols(features)?;
        Ok(softmax(&self.correspondence.apply(&joint)?)?)
    }

    fn check_feat(&self, features: &Tensor) -> Result<(), NetsError> {
        let shape = features.shape();
        if shape.len() != 2 || shape[1] != self.cfg.feat_dim {
            return Err(NetsError::Tensor(TensorError::DimensionMismatch {
                op: "feature input",
                left: shape,
                right: vec![self.cfg.feat_dim],
            }));
        }
        Ok(())
    }

    /// All learnable parameters in a stable order with checkpoint names.
    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (m, nets) in self.modalities.iter().enumerate() {
            let mut push = |name: String, layer: &LinearLayer| {
                out.push((format!("{name}.w"), layer.w.clone()));
                out.push((format!("{name}.b"), layer.b.clone()));
            };
            push(format!("m{m}.enc.lin1"), &nets.encoder.lin1);
            push(format!("m{m}.enc.lin2"), &nets.encoder.lin2);
            push(format!("m{m}.cls"), &nets.classifier);
            if let Some(twin) = &nets.twin_classifier {
                push(format!("m{m}.cls2"), twin);
            }
            push(format!("m{m}.disc.lin1"), &nets.discriminator.lin1);
            push(format!("m{m}.disc.lin2"), &nets.discriminator.lin2);
        }
        out.push(("corr.lin1.w".into(), self.correspondence.lin1.w.clone()));
        out.push(("corr.lin1.b".into(), self.correspondence.lin1.b.clone()));
        out.push(("corr.lin2.w".into(), self.correspondence.lin2.w.clone()));
        out.push(("corr.lin2.b".into(), self.correspondence.lin2.b.clone()));
        out
    }

    /// Parameters of the classifier heads only (both heads when twins exist).
    pub fn classifier_parameters(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for nets in &self.modalities {
            out.push(nets.classifier.w.clone());
            out.push(nets.classifier.b.clone());
            if let Some(twin) = &nets.twin_classifier {
                out.push(twin.w.clone());
                out.push(twin.b.clone());
            }
        }
        out
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.parameters() {
            p.zero_grad();
        }
    }

    /// Batch-norm states in modality order (empty when built without them).
    pub fn bn_states(&self) -> Vec<(String, &BatchNormState)> {
        self.modalities
            .iter()
            .enumerate()
            .filter_map(|(m, nets)| {
                nets.encoder.bn.as_ref().map(|st| (format!("m{m}.enc.bn"), st))
            })
            .collect()
    }

    pub fn bn_states_mut(&mut self) -> Vec<&mut BatchNormState> {
        self.modalities
            .iter_mut()
            .filter_map(|nets| nets.encoder.bn.as_mut())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn test_cfg() -> NetsConfig {
        NetsConfig {
            frame_dims: vec![3, 4],
            window_len: 5,
            feat_dim: 6,
            encoder_hidden: 8,
            class_count: 4,
            dropout_rate: 0.5,
            batch_norm: true,
            twin_classifiers: false,
            init_seed: 9,
        }
    }

    fn window(cfg: &NetsConfig, fill: f64) -> WindowSample {
        WindowSample {
            modalities: cfg
                .frame_dims
                .iter()
                .map(|&d| FrameMatrix::new(d, vec![fill; cfg.window_len * d]))
                .collect(),
        }
    }

    #[test]
    fn eval_features_are_deterministic() {
        let bundle = ModelBundle::new(test_cfg());
        let w = window(&bundle.cfg, 0.37);
        let f1 = bundle.feature_extract(0, &w).unwrap();
        let f2 = bundle.feature_extract(0, &w).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1.len(), bundle.cfg.feat_dim);
    }

    #[test]
    fn zero_window_zero_bias_gives_zero_feature() {
        let bundle = ModelBundle::new(test_cfg()); // biases init to zero
        let w = window(&bundle.cfg, 0.0);
        let f = bundle.feature_extract(1, &w).unwrap();
        assert_eq!(f, vec![0.0; bundle.cfg.feat_dim]);
    }

    #[test]
    fn modality_out_of_range_is_an_error() {
        let bundle = ModelBundle::new(test_cfg());
        let w = window(&bundle.cfg, 0.0);
        assert!(matches!(
            bundle.feature_extract(2, &w),
            Err(NetsError::ModalityOutOfRange { index: 2, count: 2 })
        ));
    }

    #[test]
    fn zero_init_heads_are_uninformative() {
        let bundle = ModelBundle::new(test_cfg());
        for (_, p) in bundle.parameters() {
            p.update_values(|v| v.fill(0.0));
        }
        let feats = Tensor::constant(&[2, 6], vec![0.3; 12]);
        let logits = bundle.classify(0, &feats).unwrap();
        assert_eq!(logits.values(), vec![0.0; 8]);
        assert_eq!(logits.shape(), vec![2, 4]);

        let d = bundle.discriminate(1, &feats).unwrap();
        assert_eq!(d.values(), vec![0.5, 0.5]); // sigmoid(0)

        let c = bundle.correspond(&[feats.clone(), feats]).unwrap();
        assert_eq!(c.values(), vec![0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn discriminator_output_strictly_inside_unit_interval() {
        let bundle = ModelBundle::new(test_cfg());
        let feats = Tensor::constant(&[3, 6], (0..18).map(|i| i as f64 - 9.0).collect());
        for v in bundle.discriminate(0, &feats).unwrap().values() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn correspondence_rows_sum_to_one_and_wrong_count_errors() {
        let bundle = ModelBundle::new(test_cfg());
        let feats = Tensor::constant(&[2, 6], (0..12).map(|i| 0.1 * i as f64).collect());
        let probs = bundle.correspond(&[feats.clone(), feats.clone()]).unwrap();
        let v = probs.values();
        for r in 0..2 {
            assert!((v[r * 2] + v[r * 2 + 1] - 1.0).abs() < 1e-12);
        }
        assert!(matches!(
            bundle.correspond(&[feats]),
            Err(NetsError::FeatureCount { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn correspondence_input_slice_layout() {
        // Swapping which sample supplies modality 1 changes only the second
        // half of the concatenated input.
        let bundle = ModelBundle::new(test_cfg());
        let a = Tensor::constant(&[1, 6], vec![1.0; 6]);
        let b = Tensor::constant(&[1, 6], vec![2.0; 6]);
        let c = Tensor::constant(&[1, 6], vec![3.0; 6]);
        let joint_ab = crate::diffcore::concat_cols(&[a.clone(), b]).unwrap();
        let joint_ac = crate::diffcore::concat_cols(&[a, c]).unwrap();
        assert_eq!(joint_ab.values()[..6], joint_ac.values()[..6]);
        assert_ne!(joint_ab.values()[6..], joint_ac.values()[6..]);
        drop(bundle);
    }

    #[test]
    fn heads_have_fixed_hidden_width() {
        let bundle = ModelBundle::new(test_cfg());
        assert_eq!(bundle.modalities[0].discriminator.lin1.w.shape(), vec![6, HEAD_HIDDEN]);
        assert_eq!(bundle.correspondence.lin1.w.shape(), vec![12, HEAD_HIDDEN]);
        // exactly two affine layers in the correspondence head
        assert_eq!(bundle.correspondence.lin2.w.shape(), vec![HEAD_HIDDEN, 2]);
    }

    #[test]
    fn parameter_names_are_stable_and_unique() {
        let bundle = ModelBundle::new(test_cfg());
        let names: Vec<String> = bundle.parameters().iter().map(|(n, _)| n.clone()).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert!(names.contains(&"m0.enc.lin1.w".to_string()));
        assert!(names.contains(&"corr.lin2.b".to_string()));
    }

    #[test]
    fn train_features_apply_dropout_and_update_bn() {
        let mut bundle = ModelBundle::new(test_cfg());
        let windows: Vec<WindowSample> = (0..4)
            .map(|i| window(&bundle.cfg, 0.1 + 0.2 * i as f64))
            .collect();
        let refs: Vec<&WindowSample> = windows.iter().collect();
        let input = bundle.windows_to_input(&refs, 0).unwrap();
        let before = bundle.modalities[0].encoder.bn.as_ref().unwrap().clone();
        let mut rng = stream(3, "nets-test");
        let f = bundle.features(0, &input, Mode::Train, &mut rng).unwrap();
        assert_eq!(f.shape(), vec![4, 6]);
        let after = bundle.modalities[0].encoder.bn.as_ref().unwrap();
        assert_ne!(before.running_mean, after.running_mean);
    }
}

//! Synthetic multi-modal action segments with controllable domain shift.
//!
//! Each class owns a latent prototype trajectory (a small bank of harmonics
//! around a class center), drawn once from a shared seed so every domain
//! speaks the same underlying language. A segment samples a class from the
//! domain's prior, jitters the prototype in time, and renders two streams:
//!
//! - modality 0, appearance-like: a linear view of the latent state, passed
//!   through a per-domain orthogonal transform plus bias. This is the
//!   fragile stream; the transform is the domain shift.
//! - modality 1, motion-like: a linear view of the latent temporal
//!   difference. Domains differ only in this stream's noise scale, so it is
//!   largely robust to the shift.
//!
//! The asymmetry is the generator's core contract: alignment methods earn
//! their keep by repairing the fragile stream while the robust one anchors
//! the task. Class priors are drawn per domain from a flat Dirichlet, so
//! domains are imbalanced in different ways.

mod io;
mod probe;
mod sampling;

pub use io::{dump_dataset, load_dataset};
pub use probe::{nearest_mean_probe, pooled_stats};
pub use sampling::{
    compose_adaptation_batch, compose_batch, compose_labeled_batch, make_pair, sample_window,
    test_window_starts, window_at, BatchComposition, CorrespondencePolicy, PairSample,
    TrainingBatch, WindowMode,
};

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

use crate::nets::FrameMatrix;
use crate::rng::{stream, sub_seed};

/// Latent trajectory dimension.
pub const LATENT_DIM: usize = 6;
/// Harmonics per class prototype.
const HARMONICS: usize = 3;
/// Shared harmonic frequencies (radians per frame).
const FREQS: [f64; HARMONICS] = [0.07, 0.15, 0.31];
/// Scale of class centers in latent space.
const CLASS_CENTER_SCALE: f64 = 1.0;
/// Scale of harmonic amplitudes.
const AMPLITUDE_SCALE: f64 = 0.8;
/// Per-segment latent offset noise.
const SEGMENT_OFFSET_SCALE: f64 = 1.0;
/// Gain applied to the latent temporal difference of the motion stream.
const MOTION_GAIN: f64 = 6.0;
/// Observation noise on the appearance stream (equal in every domain; the
/// shift lives in the transform, not the noise).
const APPEARANCE_NOISE: f64 = 0.7;
/// Default frame width of both streams.
pub const DEFAULT_FRAME_DIM: usize = 12;
/// Default class count.
pub const DEFAULT_CLASS_COUNT: usize = 8;
/// Default rotation strength of the appearance shift.
pub const DEFAULT_SHIFT_STRENGTH: f64 = 0.5;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("domain spec {domain}: {msg}")]
    InvalidSpec { domain: String, msg: String },
    #[error("specs disagree: {msg}")]
    InconsistentSpecs { msg: String },
    #[error("need at least 2 domain specs, got {got}")]
    TooFewSpecs { got: usize },
    #[error("segment of length {len} is shorter than the window ({window})")]
    SegmentTooShort { len: usize, window: usize },
    #[error("dataset has no segment with a class different from {class}")]
    NoDistinctClasses { class: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("batch size {got} must be divisible by {divisor}")]
    BadBatchSize { got: usize, divisor: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("dataset parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Orthogonal transform plus bias applied to the appearance stream.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceShift {
    pub dim: usize,
    /// Row-major `dim x dim`, orthogonal within 1e-9.
    pub transform: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AppearanceShift {
    pub fn identity(dim: usize) -> Self {
        let mut transform = vec![0.0; dim * dim];
        for i in 0..dim {
            transform[i * dim + i] = 1.0;
        }
        AppearanceShift {
            dim,
            transform,
            bias: vec![0.0; dim],
        }
    }

    /// Random orthogonal transform (QR of a Gaussian matrix, positive
    /// diagonal convention) and a Gaussian bias.
    pub fn random(dim: usize, bias_scale: f64, seed: u64) -> Self {
        let mut rng = stream(seed, "appearance-shift");
        let gaussian: Vec<f64> = (0..dim * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let transform = orthogonalize(&gaussian, dim);
        let bias = (0..dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * bias_scale
            })
            .collect();
        AppearanceShift {
            dim,
            transform,
            bias,
        }
    }

    /// Partial rotation: a product of plane rotations with angles up to
    /// `strength * 90` degrees, plus a Gaussian bias. Strength 0 is the
    /// identity; strength 1 approaches a fully scrambled rotation.
    pub fn partial_rotation(dim: usize, strength: f64, bias_scale: f64, seed: u64) -> Self {
        let mut rng = stream(seed, "appearance-shift-partial");
        let mut transform = Self::identity(dim).transform;
        let max_angle = strength * std::f64::consts::FRAC_PI_2;
        // two rounds of disjoint random plane pairs
        for _ in 0..2 {
            let mut dims: Vec<usize> = (0..dim).collect();
            for i in (1..dims.len()).rev() {
                dims.swap(i, rng.gen_range(0..=i));
            }
            for pair in dims.chunks(2) {
                if let [a, b] = *pair {
                    let theta = rng.gen_range(-max_angle..max_angle);
                    rotate_plane(&mut transform, dim, a, b, theta);
                }
            }
        }
        let bias = (0..dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * bias_scale
            })
            .collect();
        AppearanceShift {
            dim,
            transform,
            bias,
        }
    }

    /// Largest deviation of `QᵀQ` from the identity.
    pub fn orthogonality_error(&self) -> f64 {
        let d = self.dim;
        let mut worst: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                let dot: f64 = (0..d)
                    .map(|k| self.transform[k * d + i] * self.transform[k * d + j])
                    .sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - expect).abs());
            }
        }
        worst
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.transform[i * d..(i + 1) * d];
            *o = row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() + self.bias[i];
        }
    }
}


/// Left-multiply `m` (row-major `dim x dim`) by a rotation of `theta` in
/// the (a, b) coordinate plane.
fn rotate_plane(m: &mut [f64], dim: usize, a: usize, b: usize, theta: f64) {
    let (sin, cos) = theta.sin_cos();
    for col in 0..dim {
        let ra = m[a * dim + col];
        let rb = m[b * dim + col];
        m[a * dim + col] = cos * ra - sin * rb;
        m[b * dim + col] = sin * ra + cos * rb;
    }
}

/// Modified Gram-Schmidt on the columns of a square matrix.
fn orthogonalize(m: &[f64], dim: usize) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = (0..dim)
        .map(|j| (0..dim).map(|i| m[i * dim + j]).collect())
        .collect();
    for j in 0..dim {
        for k in 0..j {
            let dot: f64 = cols[j].iter().zip(&cols[k]).map(|(a, b)| a * b).sum();
            let prev = cols[k].clone();
            for (c, p) in cols[j].iter_mut().zip(&prev) {
                *c -= dot * p;
            }
        }
        let norm: f64 = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        // positive first entry fixes the sign convention
        let sign = if cols[j][0] < 0.0 { -1.0 } else { 1.0 };
        for c in cols[j].iter_mut() {
            *c *= sign / norm;
        }
    }
    let mut out = vec![0.0; dim * dim];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..dim {
            out[i * dim + j] = col[i];
        }
    }
    out
}

/// Everything that defines one synthetic domain.
#[derive(Debug, Clone)]
pub struct SyntheticDomainSpec {
    pub domain_id: String,
    pub class_count: usize,
    pub class_prior: Vec<f64>,
    pub appearance_shift: AppearanceShift,
    pub motion_noise_scale: f64,
    pub train_segments: usize,
    pub test_segments: usize,
    /// Inclusive range of segment lengths in frames.
    pub segment_len_range: (usize, usize),
    pub seed: u64,
}

impl SyntheticDomainSpec {
    /// The default shifted domain `index` (0-based): flat-Dirichlet class
    /// prior, random orthogonal appearance transform, and a per-domain
    /// motion noise scale.
    pub fn default_domain(index: usize, seed: u64) -> Self {
        let domain_seed = sub_seed(seed, &format!("domain-{index}"));
        let mut prior_rng = stream(domain_seed, "class-prior");
        let class_prior = dirichlet_flat(DEFAULT_CLASS_COUNT, &mut prior_rng);
        SyntheticDomainSpec {
            domain_id: format!("d{}", index + 1),
            class_count: DEFAULT_CLASS_COUNT,
            class_prior,
            appearance_shift: AppearanceShift::partial_rotation(
                DEFAULT_FRAME_DIM,
                DEFAULT_SHIFT_STRENGTH,
                1.2,
                domain_seed,
            ),
            motion_noise_scale: [1.2, 1.35, 1.5][index % 3],
            train_segments: 600,
            test_segments: 150,
            segment_len_range: (40, 120),
            seed: domain_seed,
        }
    }

    /// A shift-free control domain: identity appearance transform and a
    /// motion noise scale shared by every domain. Different indices still
    /// draw different segments, but from the same distribution.
    pub fn shift_free_domain(index: usize, seed: u64) -> Self {
        let mut spec = Self::default_domain(index, seed);
        spec.appearance_shift = AppearanceShift::identity(DEFAULT_FRAME_DIM);
        spec.motion_noise_scale = 1.35;
        // a common prior keeps the control distributions identical
        let mut prior_rng = stream(sub_seed(seed, "shift-free-prior"), "class-prior");
        spec.class_prior = dirichlet_flat(DEFAULT_CLASS_COUNT, &mut prior_rng);
        spec
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |msg: String| DataError::InvalidSpec {
            domain: self.domain_id.clone(),
            msg,
        };
        if self.class_count < 2 {
            return Err(fail("need at least 2 classes".into()));
        }
        if self.class_prior.len() != self.class_count {
            return Err(fail(format!(
                "prior has {} entries for {} classes",
                self.class_prior.len(),
                self.class_count
            )));
        }
        let total: f64 = self.class_prior.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.class_prior.iter().any(|p| *p < 0.0) {
            return Err(fail(format!("class prior sums to {total}, must be 1")));
        }
        let ortho = self.appearance_shift.orthogonality_error();
        if ortho > 1e-9 {
            return Err(fail(format!(
                "appearance transform deviates from orthogonality by {ortho:e}"
            )));
        }
        if self.motion_noise_scale < 0.0 {
            return Err(fail("motion noise scale must be non-negative".into()));
        }
        if self.train_segments == 0 || self.test_segments == 0 {
            return Err(fail("segment counts must be positive".into()));
        }
        if self.segment_len_range.0 == 0 || self.segment_len_range.0 > self.segment_len_range.1 {
            return Err(fail(format!(
                "bad segment length range {:?}",
                self.segment_len_range
            )));
        }
        Ok(())
    }
}

fn dirichlet_flat(k: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    // Dirichlet(1, ..., 1) = normalized unit exponentials.
    let draws: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / total).collect()
}

/// A labeled temporal segment carrying one frame sequence per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSegment {
    /// Index of the segment within its dataset.
    pub id: u32,
    class: usize,
    pub modalities: Vec<FrameMatrix>,
}

impl ActionSegment {
    pub fn len(&self) -> usize {
        self.modalities[0].rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn class(&self) -> usize {
        self.class
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One split of one domain, with an audit counter on training-side label
/// access.
///
/// [`Dataset::label`] is the accessor for anything feeding a training
/// objective; it counts every read so runs can prove that no unsupervised
/// method touched target labels. [`Dataset::label_for_eval`] is reserved
/// for metric computation and generator-side tooling (accuracy needs
/// ground truth; correspondence negatives are constructed cross-class from
/// generator ground truth) and is not counted.
#[derive(Debug)]
pub struct Dataset {
    pub domain_id: String,
    pub split: Split,
    pub class_count: usize,
    pub frame_dims: Vec<usize>,
    pub segments: Vec<ActionSegment>,
    label_reads: AtomicU64,
}

impl Dataset {
    pub fn new(
        domain_id: String,
        split: Split,
        class_count: usize,
        frame_dims: Vec<usize>,
        segments: Vec<ActionSegment>,
    ) -> Self {
        Dataset {
            domain_id,
            split,
            class_count,
            frame_dims,
            segments,
            label_reads: AtomicU64::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Audited label read (training-side).
    pub fn label(&self, segment: usize) -> usize {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        self.segments[segment].class
    }

    /// Unaudited label read for evaluation and generator-side tooling.
    pub fn label_for_eval(&self, segment: usize) -> usize {
        self.segments[segment].class
    }

    pub fn label_reads(&self) -> u64 {
        self.label_reads.load(Ordering::Relaxed)
    }

    pub fn reset_label_reads(&self) {
        self.label_reads.store(0, Ordering::Relaxed);
    }
}

/// Train and test splits of one generated domain.
#[derive(Debug)]
pub struct DomainData {
    pub spec: SyntheticDomainSpec,
    pub train: Dataset,
    pub test: Dataset,
}

struct ClassPrototype {
    center: Vec<f64>,
    /// `HARMONICS x LATENT_DIM` amplitudes and phases.
    amplitudes: Vec<f64>,
    phases: Vec<f64>,
}

impl ClassPrototype {
    fn latent_at(&self, t: f64, amp_gain: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.center);
        for h in 0..HARMONICS {
            let angle_base = FREQS[h] * t;
            for d in 0..LATENT_DIM {
                let idx = h * LATENT_DIM + d;
                out[d] += amp_gain * self.amplitudes[idx] * (angle_base + self.phases[idx]).sin();
            }
        }
    }
}

struct SharedGenerator {
    prototypes: Vec<ClassPrototype>,
    /// `frame_dim x LATENT_DIM` mixing matrices.
    appearance_mix: Vec<f64>,
    motion_mix: Vec<f64>,
    frame_dim: usize,
}

impl SharedGenerator {
    fn new(shared_seed: u64, class_count: usize, frame_dim: usize) -> Self {
        let mut rng = stream(shared_seed, "class-prototypes");
        let prototypes = (0..class_count)
            .map(|_| {
                let center = (0..LATENT_DIM)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * CLASS_CENTER_SCALE
                    })
                    .collect();
                // Classes differ in how harmonic energy is allocated, not in
                // total energy: equal power keeps aggregate activation
                // statistics comparable across class mixtures.
                let mut amplitudes: Vec<f64> = (0..HARMONICS * LATENT_DIM)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let norm: f64 = amplitudes.iter().map(|a| a * a).sum::<f64>().sqrt();
                let target = AMPLITUDE_SCALE * ((HARMONICS * LATENT_DIM) as f64).sqrt();
                for a in amplitudes.iter_mut() {
                    *a *= target / norm;
                }
                ClassPrototype {
                    center,
                    amplitudes,
                    phases: (0..HARMONICS * LATENT_DIM)
                        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
                        .collect(),
                }
            })
            .collect();

        let mut mix_rng = stream(shared_seed, "mixing");
        let scale = 1.0 / (LATENT_DIM as f64).sqrt();
        let mut draw_mix = || -> Vec<f64> {
            (0..frame_dim * LATENT_DIM)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut mix_rng);
                    z * scale
                })
                .collect()
        };
        let appearance_mix = draw_mix();
        let motion_mix = draw_mix();
        SharedGenerator {
            prototypes,
            appearance_mix,
            motion_mix,
            frame_dim,
        }
    }

    fn mix(matrix: &[f64], v: &[f64], frame_dim: usize, out: &mut [f64]) {
        for (i, o) in out.iter_mut().take(frame_dim).enumerate() {
            let row = &matrix[i * LATENT_DIM..(i + 1) * LATENT_DIM];
            *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
        }
    }

    fn render_segment(
        &self,
        spec: &SyntheticDomainSpec,
        id: u32,
        class: usize,
        len: usize,
        rng: &mut ChaCha12Rng,
    ) -> ActionSegment {
        let speed = rng.gen_range(0.7..1.3);
        let amp_gain = rng.gen_range(0.75..1.25);
        let offset = rng.gen_range(0.0..40.0);
        let seg_offset: Vec<f64> = (0..LATENT_DIM)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * SEGMENT_OFFSET_SCALE
            })
            .collect();

        let proto = &self.prototypes[class];
        let d = self.frame_dim;
        let mut appearance = vec![0.0; len * d];
        let mut motion = vec![0.0; len * d];
        let mut z = vec![0.0; LATENT_DIM];
        let mut z_next = vec![0.0; LATENT_DIM];
        let mut mixed = vec![0.0; d];
        for t in 0..len {
            let pos = speed * (t as f64 + offset);
            proto.latent_at(pos, amp_gain, &mut z);
            for (zi, o) in z.iter_mut().zip(&seg_offset) {
                *zi += o;
            }
            Self::mix(&self.appearance_mix, &z, d, &mut mixed);
            spec.appearance_shift
                .apply(&mixed, &mut appearance[t * d..(t + 1) * d]);
            for a in appearance[t * d..(t + 1) * d].iter_mut() {
                let noise: f64 = StandardNormal.sample(rng);
                *a += noise * APPEARANCE_NOISE;
            }

            proto.latent_at(speed * (t as f64 + 1.0 + offset), amp_gain, &mut z_next);
            let delta: Vec<f64> = z_next
                .iter()
                .zip(z.iter().zip(&seg_offset))
                .map(|(n, (c, o))| (n - (c - o)) * MOTION_GAIN)
                .collect();
            Self::mix(&self.motion_mix, &delta, d, &mut motion[t * d..(t + 1) * d]);
            for m in motion[t * d..(t + 1) * d].iter_mut() {
                let noise: f64 = StandardNormal.sample(rng);
                *m += noise * spec.motion_noise_scale;
            }
        }
        ActionSegment {
            id,
            class,
            modalities: vec![FrameMatrix::new(d, appearance), FrameMatrix::new(d, motion)],
        }
    }

    fn render_split(
        &self,
        spec: &SyntheticDomainSpec,
        split: Split,
        count: usize,
    ) -> Dataset {
        let mut rng = stream(spec.seed, &format!("segments-{}", split.as_str()));
        let segments = (0..count)
            .map(|i| {
                let class = draw_class(&spec.class_prior, &mut rng);
                let len = rng.gen_range(spec.segment_len_range.0..=spec.segment_len_range.1);
                self.render_segment(spec, i as u32, class, len, &mut rng)
            })
            .collect();
        Dataset::new(
            spec.domain_id.clone(),
            split,
            spec.class_count,
            vec![self.frame_dim, self.frame_dim],
            segments,
        )
    }
}

pub(crate) fn draw_class(prior: &[f64], rng: &mut ChaCha12Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, p) in prior.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    prior.len() - 1
}

/// Generate train/test datasets for each spec. All specs must agree on the
/// class count and frame dimension; the class prototypes and mixing
/// matrices are drawn once from `shared_seed`.
pub fn generate_domains(
    specs: &[SyntheticDomainSpec],
    shared_seed: u64,
) -> Result<Vec<DomainData>, DataError> {
    if specs.len() < 2 {
        return Err(DataError::TooFewSpecs { got: specs.len() });
    }
    for spec in specs {
        spec.validate()?;
    }
    let class_count = specs[0].class_count;
    let frame_dim = specs[0].appearance_shift.dim;
    for spec in &specs[1..] {
        if spec.class_count != class_count {
            return Err(DataError::InconsistentSpecs {
                msg: format!(
                    "class counts differ: {} has {}, {} has {}",
                    specs[0].domain_id, class_count, spec.domain_id, spec.class_count
                ),
            });
        }
        if spec.appearance_shift.dim != frame_dim {
            return Err(DataError::InconsistentSpecs {
                msg: format!(
                    "frame dims differ: {} vs {}",
                    frame_dim, spec.appearance_shift.dim
                ),
            });
        }
    }

    let shared = SharedGenerator::new(shared_seed, class_count, frame_dim);
    Ok(specs
        .iter()
        .map(|spec| DomainData {
            spec: spec.clone(),
            train: shared.render_split(spec, Split::Train, spec.train_segments),
            test: shared.render_split(spec, Split::Test, spec.test_segments),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_specs(seed: u64) -> Vec<SyntheticDomainSpec> {
        (0..2)
            .map(|i| {
                let mut s = SyntheticDomainSpec::default_domain(i, seed);
                s.train_segments = 12;
                s.test_segments = 6;
                s.segment_len_range = (20, 30);
                s
            })
            .collect()
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_domains(&tiny_specs(5), 5).unwrap();
        let b = generate_domains(&tiny_specs(5), 5).unwrap();
        for (da, db) in a.iter().zip(&b) {
            assert_eq!(da.train.segments, db.train.segments);
            assert_eq!(da.test.segments, db.test.segments);
        }
    }

    #[test]
    fn different_shared_seed_changes_prototypes() {
        let a = generate_domains(&tiny_specs(5), 5).unwrap();
        let b = generate_domains(&tiny_specs(5), 6).unwrap();
        assert_ne!(a[0].train.segments[0], b[0].train.segments[0]);
    }

    #[test]
    fn class_frequencies_match_prior() {
        let spec = SyntheticDomainSpec::default_domain(0, 3);
        let mut rng = stream(99, "class-freq-test");
        let n = 10_000;
        let mut counts = vec![0usize; spec.class_count];
        for _ in 0..n {
            counts[draw_class(&spec.class_prior, &mut rng)] += 1;
        }
        for (k, c) in counts.iter().enumerate() {
            let freq = *c as f64 / n as f64;
            assert!(
                (freq - spec.class_prior[k]).abs() < 0.02,
                "class {k}: {freq} vs prior {}",
                spec.class_prior[k]
            );
        }
    }

    #[test]
    fn inconsistent_class_counts_are_rejected() {
        let mut specs = tiny_specs(1);
        specs[1].class_count = 4;
        specs[1].class_prior = vec![0.25; 4];
        assert!(matches!(
            generate_domains(&specs, 1),
            Err(DataError::InconsistentSpecs { .. })
        ));
    }

    #[test]
    fn single_spec_is_rejected() {
        let specs = tiny_specs(1);
        assert!(matches!(
            generate_domains(&specs[..1], 1),
            Err(DataError::TooFewSpecs { got: 1 })
        ));
    }

    #[test]
    fn default_specs_validate() {
        for i in 0..3 {
            SyntheticDomainSpec::default_domain(i, 7).validate().unwrap();
            SyntheticDomainSpec::shift_free_domain(i, 7).validate().unwrap();
        }
    }

    #[test]
    fn random_transform_is_orthogonal() {
        let shift = AppearanceShift::random(12, 0.5, 42);
        assert!(shift.orthogonality_error() < 1e-12);
        // norms are preserved
        let v: Vec<f64> = (0..12).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let mut out = vec![0.0; 12];
        shift.apply(&v, &mut out);
        for (o, b) in out.iter_mut().zip(&shift.bias) {
            *o -= b;
        }
        let n1: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let n2: f64 = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n1 - n2).abs() < 1e-9);
    }

    #[test]
    fn label_audit_counts_training_reads_only() {
        let domains = generate_domains(&tiny_specs(2), 2).unwrap();
        let ds = &domains[0].train;
        assert_eq!(ds.label_reads(), 0);
        let _ = ds.label_for_eval(0);
        assert_eq!(ds.label_reads(), 0);
        let _ = ds.label(0);
        let _ = ds.label(1);
        assert_eq!(ds.label_reads(), 2);
        ds.reset_label_reads();
        assert_eq!(ds.label_reads(), 0);
    }

    #[test]
    fn prior_is_dirichlet_normalized() {
        let spec = SyntheticDomainSpec::default_domain(1, 11);
        let total: f64 = spec.class_prior.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(spec.class_prior.iter().all(|p| *p > 0.0));
    }
}

//! Window sampling, correspondence-pair construction, and batch
//! composition.
//!
//! Self-supervised batches are split equally between source and target,
//! and within each half equally between corresponding and non-corresponding
//! examples; only corresponding source examples are classification-eligible.
//! Correspondence negatives pair segments of different classes from the
//! same domain, so the pretext task is purely about whether the two streams
//! show the same action.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::{ActionSegment, DataError, Dataset};
use crate::nets::WindowSample;
use crate::objectives::LabeledExample;

/// Train-time sampling draws one random window; test-time sampling reads a
/// fixed set of equidistant windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowMode {
    Train,
    Test,
}

/// What counts as a corresponding (positive) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrespondencePolicy {
    /// Both streams cut at the identical temporal position of one segment.
    Sync,
    /// Both streams from one segment, positions sampled independently.
    SegCorr,
}

impl CorrespondencePolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            CorrespondencePolicy::Sync => "sync",
            CorrespondencePolicy::SegCorr => "seg_corr",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sync" => Some(CorrespondencePolicy::Sync),
            "seg_corr" => Some(CorrespondencePolicy::SegCorr),
            _ => None,
        }
    }
}

/// Cut the aligned multi-modal window starting at `start`.
pub fn window_at(segment: &ActionSegment, start: usize, window_len: usize) -> WindowSample {
    WindowSample {
        modalities: segment
            .modalities
            .iter()
            .map(|m| m.slice_rows(start, window_len))
            .collect(),
    }
}

fn random_start(segment: &ActionSegment, window_len: usize, rng: &mut ChaCha12Rng) -> usize {
    rng.gen_range(0..=segment.len() - window_len)
}

/// Equidistant test-window start positions: `round(i (T - L) / (n - 1))`.
pub fn test_window_starts(len: usize, window_len: usize, n_windows: usize) -> Vec<usize> {
    let span = (len - window_len) as f64;
    (0..n_windows)
        .map(|i| {
            if n_windows < 2 {
                0
            } else {
                (i as f64 * span / (n_windows - 1) as f64).round() as usize
            }
        })
        .collect()
}

/// Sample aligned windows from one segment: one uniformly random window in
/// train mode, `n_test_windows` equidistant windows in test mode.
pub fn sample_window(
    segment: &ActionSegment,
    mode: WindowMode,
    window_len: usize,
    n_test_windows: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<WindowSample>, DataError> {
    if segment.len() < window_len {
        return Err(DataError::SegmentTooShort {
            len: segment.len(),
            window: window_len,
        });
    }
    Ok(match mode {
        WindowMode::Train => vec![window_at(segment, random_start(segment, window_len, rng), window_len)],
        WindowMode::Test => test_window_starts(segment.len(), window_len, n_test_windows)
            .into_iter()
            .map(|start| window_at(segment, start, window_len))
            .collect(),
    })
}

/// A constructed correspondence example with its provenance.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub window: WindowSample,
    pub corresponds: bool,
    /// Segment supplying each modality.
    pub segment_ids: Vec<u32>,
    /// Window start position of each modality.
    pub starts: Vec<usize>,
}

/// Build one correspondence example.
///
/// Positives follow the policy (`Sync` shares the start position, `SegCorr`
/// samples starts independently within one segment). Negatives draw the two
/// modalities from segments of different classes, using generator ground
/// truth; class labels never reach the objective through this path.
pub fn make_pair(
    dataset: &Dataset,
    policy: CorrespondencePolicy,
    corresponds: bool,
    window_len: usize,
    rng: &mut ChaCha12Rng,
) -> Result<PairSample, DataError> {
    if dataset.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let pick = |rng: &mut ChaCha12Rng| rng.gen_range(0..dataset.len());
    if corresponds {
        let seg = &dataset.segments[pick(rng)];
        if seg.len() < window_len {
            return Err(DataError::SegmentTooShort {
                len: seg.len(),
                window: window_len,
            });
        }
        let start0 = random_start(seg, window_len, rng);
        let starts: Vec<usize> = match policy {
            CorrespondencePolicy::Sync => vec![start0; seg.modalities.len()],
            CorrespondencePolicy::SegCorr => {
                let mut starts = vec![start0];
                for _ in 1..seg.modalities.len() {
                    starts.push(random_start(seg, window_len, rng));
                }
                starts
            }
        };
        let window = WindowSample {
            modalities: seg
                .modalities
                .iter()
                .zip(&starts)
                .map(|(m, &s)| m.slice_rows(s, window_len))
                .collect(),
        };
        return Ok(PairSample {
            window,
            corresponds: true,
            segment_ids: vec![seg.id; seg.modalities.len()],
            starts,
        });
    }

    // Negative: modality 0 from one segment, the rest from a segment of a
    // different class.
    let first = &dataset.segments[pick(rng)];
    let first_class = first.class();
    let candidates: Vec<usize> = dataset
        .segments
        .iter()
        .enumerate()
        .filter(|(_, s)| s.class() != first_class && s.len() >= window_len)
        .map(|(i, _)| i)
        .collect();
    let other = match candidates.as_slice() {
        [] => return Err(DataError::NoDistinctClasses { class: first_class }),
        c => &dataset.segments[c[rng.gen_range(0..c.len())]],
    };
    if first.len() < window_len {
        return Err(DataError::SegmentTooShort {
            len: first.len(),
            window: window_len,
        });
    }
    let mut modalities = Vec::with_capacity(first.modalities.len());
    let mut segment_ids = Vec::new();
    let mut starts = Vec::new();
    for m in 0..first.modalities.len() {
        let seg = if m == 0 { first } else { other };
        let start = random_start(seg, window_len, rng);
        modalities.push(seg.modalities[m].slice_rows(start, window_len));
        segment_ids.push(seg.id);
        starts.push(start);
    }
    Ok(PairSample {
        window: WindowSample { modalities },
        corresponds: false,
        segment_ids,
        starts,
    })
}

/// Composition counts of a training batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchComposition {
    pub n_source: usize,
    pub n_target: usize,
    pub n_corresponding: usize,
    pub n_noncorresponding: usize,
}

/// A composed mini-batch plus its composition record.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub examples: Vec<LabeledExample>,
    pub composition: BatchComposition,
}

impl TrainingBatch {
    /// Indices of the classification-eligible examples
    /// (source and corresponding, exactly).
    pub fn classification_eligible(&self) -> Vec<usize> {
        self.examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.source && e.corresponds)
            .map(|(i, _)| i)
            .collect()
    }

    /// Check the self-supervised composition rules structurally.
    pub fn validate_self_supervised(&self) -> bool {
        let b = self.examples.len();
        let n_src = self.examples.iter().filter(|e| e.source).count();
        let n_src_corr = self.examples.iter().filter(|e| e.source && e.corresponds).count();
        let n_tgt_corr = self.examples.iter().filter(|e| !e.source && e.corresponds).count();
        let labels_ok = self.examples.iter().all(|e| e.validate());
        n_src == b / 2
            && n_src_corr == b / 4
            && n_tgt_corr == b / 4
            && labels_ok
            && self.composition.n_source == n_src
            && self.composition.n_target == b - n_src
            && self.composition.n_corresponding == n_src_corr + n_tgt_corr
            && self.composition.n_noncorresponding == b - n_src_corr - n_tgt_corr
            && self.classification_eligible().len() == b / 4
    }
}

fn labeled_from_pair(dataset: &Dataset, pair: PairSample, source: bool) -> LabeledExample {
    // Source examples carry the class of the segment behind modality 0,
    // read through the audited accessor; target examples stay unlabeled.
    let y = source.then(|| dataset.label(pair.segment_ids[0] as usize));
    LabeledExample {
        window: pair.window,
        y,
        source,
        corresponds: pair.corresponds,
    }
}

/// Compose a self-supervised adaptation batch: `B/2` source and `B/2`
/// target, each half split into `B/4` corresponding and `B/4`
/// non-corresponding examples. `B` must be divisible by 4.
pub fn compose_batch(
    source: &Dataset,
    target: &Dataset,
    batch_size: usize,
    policy: CorrespondencePolicy,
    window_len: usize,
    rng: &mut ChaCha12Rng,
) -> Result<TrainingBatch, DataError> {
    if batch_size == 0 || batch_size % 4 != 0 {
        return Err(DataError::BadBatchSize {
            got: batch_size,
            divisor: 4,
        });
    }
    let quarter = batch_size / 4;
    let mut examples = Vec::with_capacity(batch_size);
    for (dataset, is_source) in [(source, true), (target, false)] {
        for corresponds in [true, false] {
            for _ in 0..quarter {
                let pair = make_pair(dataset, policy, corresponds, window_len, rng)?;
                examples.push(labeled_from_pair(dataset, pair, is_source));
            }
        }
    }
    Ok(TrainingBatch {
        examples,
        composition: BatchComposition {
            n_source: batch_size / 2,
            n_target: batch_size / 2,
            n_corresponding: batch_size / 2,
            n_noncorresponding: batch_size / 2,
        },
    })
}

/// Compose a mixed batch without the correspondence split: `B/2` labeled
/// source and `B/2` unlabeled target examples, every window time-aligned.
/// Used by alignment methods that do not train the correspondence task.
pub fn compose_adaptation_batch(
    source: &Dataset,
    target: &Dataset,
    batch_size: usize,
    window_len: usize,
    rng: &mut ChaCha12Rng,
) -> Result<TrainingBatch, DataError> {
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(DataError::BadBatchSize {
            got: batch_size,
            divisor: 2,
        });
    }
    let half = batch_size / 2;
    let mut examples = Vec::with_capacity(batch_size);
    for (dataset, is_source) in [(source, true), (target, false)] {
        for _ in 0..half {
            let pair = make_pair(dataset, CorrespondencePolicy::Sync, true, window_len, rng)?;
            examples.push(labeled_from_pair(dataset, pair, is_source));
        }
    }
    Ok(TrainingBatch {
        examples,
        composition: BatchComposition {
            n_source: half,
            n_target: half,
            n_corresponding: batch_size,
            n_noncorresponding: 0,
        },
    })
}

/// Compose a fully labeled single-domain batch (source-only training, or
/// supervised training on the target domain, where the dataset plays the
/// labeled-domain role).
pub fn compose_labeled_batch(
    dataset: &Dataset,
    batch_size: usize,
    window_len: usize,
    rng: &mut ChaCha12Rng,
) -> Result<TrainingBatch, DataError> {
    if batch_size == 0 {
        return Err(DataError::BadBatchSize {
            got: batch_size,
            divisor: 1,
        });
    }
    let examples = (0..batch_size)
        .map(|_| {
            let pair = make_pair(dataset, CorrespondencePolicy::Sync, true, window_len, rng)?;
            Ok(labeled_from_pair(dataset, pair, true))
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    Ok(TrainingBatch {
        examples,
        composition: BatchComposition {
            n_source: batch_size,
            n_target: 0,
            n_corresponding: batch_size,
            n_noncorresponding: 0,
        },
    })
}

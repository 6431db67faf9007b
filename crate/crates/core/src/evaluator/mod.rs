//! Accuracy protocols, metric records, and exports.
//!
//! Top-1 accuracy averages the class distribution over five equidistant
//! windows per segment before the argmax. The fused prediction is the
//! softmax of summed modality scores, the same quantity the classification
//! objective optimizes; per-modality accuracy reads each stream's own
//! softmax before fusion, from the same trained bundle. Argmax ties break
//! toward the lowest class index. Reported numbers average the last nine
//! epochs of training.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::diffcore::{softmax, with_no_grad, Tensor};
use crate::nets::{ModelBundle, NetsError, WindowSample};
use crate::objectives::{fused_probs, ObjectiveError};
use crate::synthdata::{test_window_starts, window_at, Dataset};

/// Segments evaluated per forward chunk.
const CHUNK_SEGMENTS: usize = 48;

/// Number of equidistant test windows in the standard protocol.
pub const TEST_WINDOWS: usize = 5;

/// Epochs averaged when reporting an accuracy.
pub const REPORT_LAST_K: usize = 9;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot evaluate an empty dataset")]
    EmptyDataset,
    #[error("need at least {need} records, have {have}")]
    TooFewRecords { have: usize, need: usize },
    #[error(transparent)]
    Nets(#[from] NetsError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which prediction to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    /// softmax of summed modality scores.
    Fused,
    /// a single modality's softmax, before fusion.
    Modality(usize),
}

/// Fused and per-modality top-1 accuracy from one evaluation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub fused: f64,
    pub per_modality: Vec<f64>,
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Evaluate fused and per-modality top-1 accuracy with `n_windows`
/// equidistant windows per segment.
pub fn evaluate(
    bundle: &ModelBundle,
    dataset: &Dataset,
    n_windows: usize,
) -> Result<EvalOutcome, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let k = bundle.cfg.class_count;
    let window_len = bundle.cfg.window_len;
    let modality_count = bundle.modality_count();
    let mut fused_correct = 0usize;
    let mut modality_correct = vec![0usize; modality_count];

    with_no_grad(|| -> Result<(), EvalError> {
        let mut start_seg = 0;
        while start_seg < dataset.len() {
            let chunk = &dataset.segments[start_seg..(start_seg + CHUNK_SEGMENTS).min(dataset.len())];
            let mut windows: Vec<WindowSample> = Vec::with_capacity(chunk.len() * n_windows);
            for seg in chunk {
                for s in test_window_starts(seg.len(), window_len, n_windows) {
                    windows.push(window_at(seg, s, window_len));
                }
            }
            let refs: Vec<&WindowSample> = windows.iter().collect();
            let mut logits: Vec<Tensor> = Vec::with_capacity(modality_count);
            for m in 0..modality_count {
                let input = bundle.windows_to_input(&refs, m)?;
                let feats = bundle.features_frozen(m, &input)?;
                logits.push(bundle.classify(m, &feats)?);
            }
            let fused = fused_probs(&logits)?.values();
            let per_mod: Vec<Vec<f64>> = logits
                .iter()
                .map(|l| Ok(softmax(l)?.values()))
                .collect::<Result<_, ObjectiveError>>()?;

            for (si, seg) in chunk.iter().enumerate() {
                let truth = dataset.label_for_eval(start_seg + si);
                let score = |probs: &[f64]| -> usize {
                    let mut avg = vec![0.0; k];
                    for w in 0..n_windows {
                        let row = &probs[(si * n_windows + w) * k..(si * n_windows + w + 1) * k];
                        for (a, p) in avg.iter_mut().zip(row) {
                            *a += p / n_windows as f64;
                        }
                    }
                    argmax_lowest(&avg)
                };
                if score(&fused) == truth {
                    fused_correct += 1;
                }
                for (m, probs) in per_mod.iter().enumerate() {
                    if score(probs) == truth {
                        modality_correct[m] += 1;
                    }
                }
                let _ = seg;
            }
            start_seg += chunk.len();
        }
        Ok(())
    })?;

    let n = dataset.len() as f64;
    Ok(EvalOutcome {
        fused: fused_correct as f64 / n,
        per_modality: modality_correct.iter().map(|c| *c as f64 / n).collect(),
    })
}

/// Top-1 accuracy under the standard 5-window protocol.
pub fn evaluate_top1(
    bundle: &ModelBundle,
    dataset: &Dataset,
    fusion: Fusion,
) -> Result<f64, EvalError> {
    let outcome = evaluate(bundle, dataset, TEST_WINDOWS)?;
    Ok(match fusion {
        Fusion::Fused => outcome.fused,
        Fusion::Modality(m) => outcome.per_modality[m],
    })
}

/// Arithmetic mean of `field` over the last `k` items.
pub fn average_last_k<T>(
    items: &[T],
    k: usize,
    field: impl Fn(&T) -> f64,
) -> Result<f64, EvalError> {
    if items.len() < k || k == 0 {
        return Err(EvalError::TooFewRecords {
            have: items.len(),
            need: k.max(1),
        });
    }
    Ok(items[items.len() - k..].iter().map(field).sum::<f64>() / k as f64)
}

/// Identity of one training run, repeated on every metrics row.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMeta {
    pub method: String,
    pub source_domain: String,
    pub target_domain: String,
    pub seed: u64,
    pub lambda_d: f64,
    pub lambda_c: f64,
    pub policy: String,
}

/// Per-epoch metrics of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub source_top1: f64,
    pub target_top1: f64,
    /// Target accuracy of each modality stream before fusion.
    pub modality_target_top1: Vec<f64>,
    pub loss_y: f64,
    /// Alignment loss component per modality (epoch mean).
    pub loss_d: Vec<f64>,
    pub loss_c: f64,
}

/// Exact column order of the metrics CSV.
pub const METRICS_HEADER: &str = "method,source_domain,target_domain,seed,lambda_d,lambda_c,policy,epoch,source_top1,target_top1,rgblike_top1,flowlike_top1,loss_y,loss_d1,loss_d2,loss_c";

/// Render the metrics CSV for one run. The schema reports two modality
/// streams: the appearance-like stream first, the motion-like second.
pub fn metrics_csv(meta: &RunMeta, records: &[MetricsRecord]) -> String {
    let mut out = String::with_capacity(records.len() * 96 + 128);
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let get = |v: &Vec<f64>, i: usize| v.get(i).copied().unwrap_or(0.0);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            meta.method,
            meta.source_domain,
            meta.target_domain,
            meta.seed,
            meta.lambda_d,
            meta.lambda_c,
            meta.policy,
            r.epoch,
            r.source_top1,
            r.target_top1,
            get(&r.modality_target_top1, 0),
            get(&r.modality_target_top1, 1),
            r.loss_y,
            get(&r.loss_d, 0),
            get(&r.loss_d, 1),
            r.loss_c,
        );
    }
    out
}

/// Write a file atomically (write a sibling temp file, then rename).
pub fn write_atomic(path: &Path, contents: &str) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)
}

/// Write the metrics CSV for one run.
pub fn write_metrics_csv(
    path: &Path,
    meta: &RunMeta,
    records: &[MetricsRecord],
) -> Result<(), EvalError> {
    write_atomic(path, &metrics_csv(meta, records))?;
    Ok(())
}

/// Render eval-mode features of the first test window of every segment,
/// one row per (segment, modality): `modality domain split class f0..f{D-1}`,
/// tab separated.
pub fn embeddings_tsv(bundle: &ModelBundle, datasets: &[&Dataset]) -> Result<String, EvalError> {
    let mut out = String::new();
    let mut header = String::from("modality\tdomain\tsplit\tclass");
    for d in 0..bundle.cfg.feat_dim {
        let _ = write!(header, "\tf{d}");
    }
    out.push_str(&header);
    out.push('\n');
    with_no_grad(|| -> Result<(), EvalError> {
        for ds in datasets {
            for (i, seg) in ds.segments.iter().enumerate() {
                let window = window_at(seg, 0, bundle.cfg.window_len);
                for m in 0..bundle.modality_count() {
                    let feats = bundle.feature_extract(m, &window)?;
                    let mut line = format!(
                        "{m}\t{}\t{}\t{}",
                        ds.domain_id,
                        ds.split.as_str(),
                        ds.label_for_eval(i)
                    );
                    for v in feats {
                        let _ = write!(line, "\t{v}");
                    }
                    out.push_str(&line);
                    out.push('\n');
                }
            }
        }
        Ok(())
    })?;
    Ok(out)
}

/// Export feature embeddings for projection tools.
pub fn export_embeddings(
    bundle: &ModelBundle,
    datasets: &[&Dataset],
    path: &Path,
) -> Result<(), EvalError> {
    write_atomic(path, &embeddings_tsv(bundle, datasets)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::NetsConfig;
    use crate::synthdata::{generate_domains, SyntheticDomainSpec};

    fn domains(seed: u64) -> Vec<crate::synthdata::DomainData> {
        let specs: Vec<SyntheticDomainSpec> = (0..2)
            .map(|i| {
                let mut s = SyntheticDomainSpec::default_domain(i, seed);
                s.train_segments = 10;
                s.test_segments = 40;
                s.segment_len_range = (20, 60);
                s
            })
            .collect();
        generate_domains(&specs, seed).unwrap()
    }

    fn bundle(seed: u64, class_count: usize) -> ModelBundle {
        ModelBundle::new(NetsConfig {
            frame_dims: vec![12, 12],
            window_len: 16,
            feat_dim: 8,
            encoder_hidden: 10,
            class_count,
            dropout_rate: 0.5,
            batch_norm: true,
            twin_classifiers: false,
            init_seed: seed,
        })
    }

    #[test]
    fn uniform_predictor_scores_near_chance() {
        let domains = domains(3);
        let mut b = bundle(1, 8);
        // zero parameters -> identical logits -> argmax always class 0
        for (_, p) in b.parameters() {
            p.update_values(|v| v.fill(0.0));
        }
        // exercise with many segments for a stable frequency estimate
        let ds = &domains[1].test;
        let acc = evaluate_top1(&b, ds, Fusion::Fused).unwrap();
        let class0 = (0..ds.len())
            .filter(|i| ds.label_for_eval(*i) == 0)
            .count() as f64
            / ds.len() as f64;
        assert!((acc - class0).abs() < 1e-12);
        drop(b);
    }

    #[test]
    fn window_probability_averaging_picks_majority() {
        // [0.6, 0.4] and [0.2, 0.8] average to [0.4, 0.6] -> class 1
        let avg = [(0.6 + 0.2) / 2.0, (0.4 + 0.8) / 2.0];
        assert_eq!(argmax_lowest(&avg), 1);
        // ties break toward the lowest index
        assert_eq!(argmax_lowest(&[0.5, 0.5]), 0);
    }

    #[test]
    fn evaluation_is_deterministic_and_order_independent() {
        let domains = domains(5);
        let b = bundle(2, 8);
        let a1 = evaluate(&b, &domains[0].test, 5).unwrap();
        let a2 = evaluate(&b, &domains[0].test, 5).unwrap();
        assert_eq!(a1, a2);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let ds = Dataset::new(
            "empty".into(),
            crate::synthdata::Split::Test,
            8,
            vec![12, 12],
            Vec::new(),
        );
        let b = bundle(3, 8);
        assert!(matches!(
            evaluate_top1(&b, &ds, Fusion::Fused),
            Err(EvalError::EmptyDataset)
        ));
    }

    #[test]
    fn average_last_k_matches_hand_arithmetic() {
        let series = [0.1, 0.2, 0.4, 0.4, 0.4, 0.4, 0.4, 0.5, 0.5, 0.5, 0.5];
        let avg = average_last_k(&series, 9, |v| *v).unwrap();
        let expect = (5.0 * 0.4 + 4.0 * 0.5) / 9.0;
        assert!((avg - expect).abs() < 1e-12);
        assert!((avg - 0.4444).abs() < 1e-4);

        // constant series
        let avg = average_last_k(&[0.7; 12], 9, |v| *v).unwrap();
        assert!((avg - 0.7).abs() < 1e-15);

        // k = 1 is the final value
        let avg = average_last_k(&series, 1, |v| *v).unwrap();
        assert_eq!(avg, 0.5);

        // too few records
        assert!(matches!(
            average_last_k(&series[..5], 9, |v| *v),
            Err(EvalError::TooFewRecords { have: 5, need: 9 })
        ));
    }

    #[test]
    fn average_last_k_ignores_earlier_records() {
        let mut a = vec![9.9; 20];
        let mut b = vec![-3.0; 4];
        let tail = [0.3, 0.4, 0.5];
        a.extend_from_slice(&tail);
        b.extend_from_slice(&tail);
        let fa = average_last_k(&a, 3, |v| *v).unwrap();
        let fb = average_last_k(&b, 3, |v| *v).unwrap();
        assert_eq!(fa, fb);
    }

    #[test]
    fn metrics_csv_shape_and_determinism() {
        let meta = RunMeta {
            method: "joint".into(),
            source_domain: "d1".into(),
            target_domain: "d2".into(),
            seed: 3,
            lambda_d: 1.0,
            lambda_c: 5.0,
            policy: "seg_corr".into(),
        };
        let records = vec![MetricsRecord {
            epoch: 1,
            source_top1: 0.5,
            target_top1: 0.25,
            modality_target_top1: vec![0.125, 0.375],
            loss_y: 2.0,
            loss_d: vec![0.69, 0.70],
            loss_c: 0.6,
        }];
        let text = metrics_csv(&meta, &records);
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER);
        assert_eq!(
            lines.next().unwrap(),
            "joint,d1,d2,3,1,5,seg_corr,1,0.5,0.25,0.125,0.375,2,0.69,0.7,0.6"
        );
        assert_eq!(text, metrics_csv(&meta, &records));
    }

    #[test]
    fn embeddings_export_cardinality_and_determinism() {
        let domains = domains(7);
        let b = bundle(4, 8);
        let parts = [&domains[0].test, &domains[1].test];
        let text = embeddings_tsv(&b, &parts).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let expected_rows = (domains[0].test.len() + domains[1].test.len()) * 2;
        assert_eq!(lines.len(), 1 + expected_rows);
        // numeric columns = feat_dim
        let first = lines[1].split('\t').collect::<Vec<_>>();
        assert_eq!(first.len(), 4 + b.cfg.feat_dim);

        let again = embeddings_tsv(&b, &parts).unwrap();
        assert_eq!(text, again);
    }
}

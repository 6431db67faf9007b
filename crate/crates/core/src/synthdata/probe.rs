//! Dataset-qualification probe.
//!
//! A deliberately simple, learner-independent classifier: pool each segment
//! of one modality into per-dimension mean and standard deviation, average
//! those vectors per class on a labeled dataset, then classify by nearest
//! class mean. Comparing in-domain against cross-domain probe accuracy
//! measures how robust each modality is to the shift, without involving any
//! trained network.

use super::{ActionSegment, Dataset};

/// Per-dimension mean and standard deviation over all frames of modality
/// `m`, concatenated.
pub fn pooled_stats(segment: &ActionSegment, m: usize) -> Vec<f64> {
    let fm = &segment.modalities[m];
    let (rows, dim) = (fm.rows(), fm.frame_dim);
    let mut mean = vec![0.0; dim];
    for r in 0..rows {
        for (acc, v) in mean.iter_mut().zip(fm.row(r)) {
            *acc += v;
        }
    }
    for v in mean.iter_mut() {
        *v /= rows as f64;
    }
    let mut var = vec![0.0; dim];
    for r in 0..rows {
        for (acc, (v, mu)) in var.iter_mut().zip(fm.row(r).iter().zip(&mean)) {
            let d = v - mu;
            *acc += d * d;
        }
    }
    let mut out = mean;
    out.extend(var.into_iter().map(|v| (v / rows as f64).sqrt()));
    out
}

/// Nearest-class-mean probe on pooled statistics: fit on `train`, report
/// top-1 accuracy on `test`, using modality `m` only.
pub fn nearest_mean_probe(train: &Dataset, test: &Dataset, m: usize) -> f64 {
    let dim = 2 * train.frame_dims[m];
    let k = train.class_count;
    let mut means = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (i, seg) in train.segments.iter().enumerate() {
        let class = train.label_for_eval(i);
        let stats = pooled_stats(seg, m);
        for (acc, v) in means[class].iter_mut().zip(&stats) {
            *acc += v;
        }
        counts[class] += 1;
    }
    for (mean, count) in means.iter_mut().zip(&counts) {
        if *count > 0 {
            for v in mean.iter_mut() {
                *v /= *count as f64;
            }
        }
    }

    let mut correct = 0usize;
    for (i, seg) in test.segments.iter().enumerate() {
        let stats = pooled_stats(seg, m);
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for (class, mean) in means.iter().enumerate() {
            if counts[class] == 0 {
                continue;
            }
            let dist: f64 = mean
                .iter()
                .zip(&stats)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if dist < best_dist {
                best_dist = dist;
                best = class;
            }
        }
        if best == test.label_for_eval(i) {
            correct += 1;
        }
    }
    correct as f64 / test.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_domains, SyntheticDomainSpec};

    fn domains(seed: u64, shifted: bool) -> Vec<crate::synthdata::DomainData> {
        let specs: Vec<SyntheticDomainSpec> = (0..2)
            .map(|i| {
                let mut s = if shifted {
                    SyntheticDomainSpec::default_domain(i, seed)
                } else {
                    SyntheticDomainSpec::shift_free_domain(i, seed)
                };
                s.train_segments = 160;
                s.test_segments = 80;
                s
            })
            .collect();
        generate_domains(&specs, seed).unwrap()
    }

    #[test]
    fn motion_stream_transfers_better_than_appearance() {
        // mean over 3 seeds, as a dataset-qualification gate
        let mut appearance_gap = 0.0;
        let mut motion_gap = 0.0;
        for seed in [1, 2, 3] {
            let d = domains(seed, true);
            let (src, tgt) = (&d[0], &d[1]);
            let app_cross = nearest_mean_probe(&src.train, &tgt.test, 0);
            let mot_cross = nearest_mean_probe(&src.train, &tgt.test, 1);
            appearance_gap += app_cross / 3.0;
            motion_gap += mot_cross / 3.0;
        }
        assert!(
            motion_gap > appearance_gap,
            "motion probe {motion_gap:.3} must beat appearance probe {appearance_gap:.3} across the shift"
        );
    }

    #[test]
    fn probes_are_informative_in_domain() {
        let d = domains(5, true);
        for m in [0, 1] {
            let acc = nearest_mean_probe(&d[0].train, &d[0].test, m);
            assert!(acc > 0.5, "modality {m} in-domain probe accuracy {acc}");
        }
    }

    #[test]
    fn shift_free_domains_transfer_like_in_domain() {
        let mut in_domain = 0.0;
        let mut cross = 0.0;
        for seed in [7, 8, 9] {
            let d = domains(seed, false);
            in_domain += nearest_mean_probe(&d[0].train, &d[0].test, 0) / 3.0;
            cross += nearest_mean_probe(&d[0].train, &d[1].test, 0) / 3.0;
        }
        assert!(
            (in_domain - cross).abs() < 0.08,
            "shift-free cross-domain {cross:.3} vs in-domain {in_domain:.3}"
        );
    }
}

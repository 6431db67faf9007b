//! Test-time batch-norm adaptation.
//!
//! Re-estimates each normalization layer's running statistics as the
//! aggregate moments of a dataset's training windows pushed through the
//! frozen network, leaving every weight untouched. Deployment on a domain
//! installs that domain's statistics; adapting twice with the same data is
//! idempotent. One deterministic window per segment (the first test
//! window) feeds the estimate.

use crate::diffcore::{relu, with_no_grad, Tensor};
use crate::nets::{ModelBundle, WindowSample};
use crate::synthdata::{window_at, Dataset};

use super::TrainError;

/// Windows processed per forward chunk while collecting statistics.
const CHUNK: usize = 256;

/// Per-channel aggregate moments of the pre-normalization activations, one
/// entry per modality that carries a normalization layer.
pub fn collect_bn_stats(
    bundle: &ModelBundle,
    dataset: &Dataset,
) -> Result<Vec<Option<(Vec<f64>, Vec<f64>)>>, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let window_len = bundle.cfg.window_len;
    let windows: Vec<WindowSample> = dataset
        .segments
        .iter()
        .map(|seg| window_at(seg, 0, window_len))
        .collect();
    let refs: Vec<&WindowSample> = windows.iter().collect();

    let mut out = Vec::with_capacity(bundle.modality_count());
    with_no_grad(|| -> Result<(), TrainError> {
        for (m, nets) in bundle.modalities.iter().enumerate() {
            if nets.encoder.bn.is_none() {
                out.push(None);
                continue;
            }
            let channels = bundle.cfg.encoder_hidden;
            let mut count = 0usize;
            let mut sum = vec![0.0; channels];
            let mut sum_sq = vec![0.0; channels];
            for chunk in refs.chunks(CHUNK) {
                let input = bundle.windows_to_input(chunk, m)?;
                let pre_norm: Tensor = relu(&nets.encoder.lin1.apply(&input)?);
                pre_norm.with_values(|v| {
                    for row in v.chunks(channels) {
                        for ((s, q), x) in sum.iter_mut().zip(sum_sq.iter_mut()).zip(row) {
                            *s += x;
                            *q += x * x;
                        }
                    }
                    count += v.len() / channels;
                });
            }
            let n = count as f64;
            let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
            // biased variance, matching train-mode normalization
            let var: Vec<f64> = sum_sq
                .iter()
                .zip(&mean)
                .map(|(q, mu)| (q / n - mu * mu).max(0.0))
                .collect();
            out.push(Some((mean, var)));
        }
        Ok(())
    })?;
    Ok(out)
}

/// Install the given statistics into the bundle's normalization layers.
pub fn install_bn_stats(bundle: &mut ModelBundle, stats: &[Option<(Vec<f64>, Vec<f64>)>]) {
    let mut states = bundle.bn_states_mut();
    let mut idx = 0;
    for stat in stats {
        if let Some((mean, var)) = stat {
            let st = &mut states[idx];
            st.running_mean.clone_from(mean);
            st.running_var.clone_from(var);
            idx += 1;
        }
    }
}

/// Adapt a trained bundle's normalization statistics to a dataset. Only
/// [`crate::diffcore::BatchNormState`] fields change; a bundle without
/// normalization layers passes through untouched.
pub fn adabn_adapt(bundle: &mut ModelBundle, dataset: &Dataset) -> Result<(), TrainError> {
    if bundle.bn_states().is_empty() {
        return Ok(());
    }
    let stats = collect_bn_stats(bundle, dataset)?;
    install_bn_stats(bundle, &stats);
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
                s.train_segments = 30;
                s.test_segments = 10;
                s.segment_len_range = (20, 40);
                s
            })
            .collect();
        generate_domains(&specs, seed).unwrap()
    }

    fn cfg(batch_norm: bool) -> NetsConfig {
        NetsConfig {
            frame_dims: vec![12, 12],
            window_len: 16,
            feat_dim: 8,
            encoder_hidden: 10,
            class_count: 8,
            dropout_rate: 0.5,
            batch_norm,
            twin_classifiers: false,
            init_seed: 5,
        }
    }

    #[test]
    fn adaptation_changes_only_bn_state() {
        let domains = domains(1);
        let mut bundle = ModelBundle::new(cfg(true));
        let before: Vec<Vec<f64>> = bundle.parameters().iter().map(|(_, p)| p.values()).collect();
        let bn_before: Vec<_> = bundle.bn_states().iter().map(|(_, s)| (*s).clone()).collect();
        adabn_adapt(&mut bundle, &domains[1].train).unwrap();
        let after: Vec<Vec<f64>> = bundle.parameters().iter().map(|(_, p)| p.values()).collect();
        assert_eq!(before, after);
        let bn_after: Vec<_> = bundle.bn_states().iter().map(|(_, s)| (*s).clone()).collect();
        assert_ne!(bn_before, bn_after);
    }

    #[test]
    fn adaptation_is_idempotent_and_deterministic() {
        let domains = domains(2);
        let mut bundle = ModelBundle::new(cfg(true));
        adabn_adapt(&mut bundle, &domains[1].train).unwrap();
        let first: Vec<_> = bundle.bn_states().iter().map(|(_, s)| (*s).clone()).collect();
        adabn_adapt(&mut bundle, &domains[1].train).unwrap();
        let second: Vec<_> = bundle.bn_states().iter().map(|(_, s)| (*s).clone()).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn bn_free_model_is_a_no_op() {
        let domains = domains(3);
        let mut bundle = ModelBundle::new(cfg(false));
        adabn_adapt(&mut bundle, &domains[1].train).unwrap();
        assert!(bundle.bn_states().is_empty());
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let mut bundle = ModelBundle::new(cfg(true));
        let empty = Dataset::new(
            "none".into(),
            crate::synthdata::Split::Train,
            8,
            vec![12, 12],
            Vec::new(),
        );
        assert!(matches!(
            adabn_adapt(&mut bundle, &empty),
            Err(TrainError::EmptyDataset)
        ));
    }
}

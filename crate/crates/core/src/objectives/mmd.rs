//! Kernel two-sample discrepancy used as an alignment baseline.
//!
//! The squared discrepancy is estimated with a mixture of RBF kernels
//! `k(a, b) = exp(-||a - b||^2 / (2 sigma^2))`, one bandwidth per multiple
//! of the median pairwise squared distance of the pooled sample. The
//! default estimator is the biased V-statistic (keeps the diagonal terms),
//! which is non-negative and exactly zero on identical sets; the unbiased
//! U-statistic is available behind a flag.

use crate::diffcore::{add, exp, mean, pairwise_sq_dists, scale, sub, sum, Tensor};

use super::ObjectiveError;

/// Bandwidth multipliers applied to the median pairwise squared distance.
pub const RBF_MULTIPLIERS: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

/// Floor for the median heuristic so degenerate (all-equal) samples do not
/// produce a zero bandwidth.
const MEDIAN_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmdEstimator {
    /// V-statistic, diagonal included: non-negative, zero iff the empirical
    /// kernel embeddings coincide.
    Biased,
    /// U-statistic, diagonal removed: unbiased but can go negative.
    Unbiased,
}

fn kernel_mean(dists: &Tensor, sigma_sq: f64, estimator: MmdEstimator, same_set: bool) -> Tensor {
    let k = exp(&scale(dists, -1.0 / (2.0 * sigma_sq)));
    match (estimator, same_set) {
        (MmdEstimator::Unbiased, true) => {
            // Remove the diagonal: each self-pair contributes exactly 1.
            let n = dists.shape()[0] as f64;
            let off_diag_sum = add(&sum(&k), &Tensor::scalar(-n)).expect("scalar shapes");
            scale(&off_diag_sum, 1.0 / (n * (n - 1.0)))
        }
        _ => mean(&k),
    }
}

/// Squared discrepancy with explicit bandwidths (`sigma^2` values), averaged
/// over the kernel mixture. Accepts any sample sizes the estimator allows
/// (the unbiased form needs at least 2 per side).
pub fn mmd_with_bandwidths(
    x: &Tensor,
    y: &Tensor,
    sigmas_sq: &[f64],
    estimator: MmdEstimator,
) -> Result<Tensor, ObjectiveError> {
    if sigmas_sq.is_empty() {
        return Err(ObjectiveError::SampleTooSmall { min: 1, got: 0 });
    }
    let n = x.shape()[0];
    let m = y.shape()[0];
    if estimator == MmdEstimator::Unbiased && (n < 2 || m < 2) {
        return Err(ObjectiveError::SampleTooSmall { min: 2, got: n.min(m) });
    }
    let d_xx = pairwise_sq_dists(x, x)?;
    let d_yy = pairwise_sq_dists(y, y)?;
    let d_xy = pairwise_sq_dists(x, y)?;

    let mut terms = Vec::with_capacity(sigmas_sq.len());
    for &s in sigmas_sq {
        let kxx = kernel_mean(&d_xx, s, estimator, true);
        let kyy = kernel_mean(&d_yy, s, estimator, true);
        let kxy = mean(&exp(&scale(&d_xy, -1.0 / (2.0 * s))));
        let t = sub(&add(&kxx, &kyy)?, &scale(&kxy, 2.0))?;
        terms.push(t);
    }
    let total = terms
        .into_iter()
        .reduce(|a, b| add(&a, &b).expect("scalar shapes"))
        .expect("at least one bandwidth");
    Ok(scale(&total, 1.0 / sigmas_sq.len() as f64))
}

/// Median of the squared distances over all distinct pairs of the pooled
/// sample (the usual bandwidth heuristic). Computed on values only; no
/// gradient flows through the bandwidth.
pub fn median_pairwise_sq_dist(x: &Tensor, y: &Tensor) -> f64 {
    let d = x.shape()[1];
    let mut pooled: Vec<f64> = x.values();
    pooled.extend(y.values());
    let n = pooled.len() / d;
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let a = &pooled[i * d..(i + 1) * d];
            let b = &pooled[j * d..(j + 1) * d];
            dists.push(a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>());
        }
    }
    if dists.is_empty() {
        return MEDIAN_FLOOR;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    median.max(MEDIAN_FLOOR)
}

/// Multi-kernel discrepancy between two feature samples: bandwidths are the
/// median pairwise squared distance times each multiplier. Needs at least
/// two samples per side.
pub fn mmd_loss(
    x: &Tensor,
    y: &Tensor,
    multipliers: &[f64],
    estimator: MmdEstimator,
) -> Result<Tensor, ObjectiveError> {
    let n = x.shape()[0];
    let m = y.shape()[0];
    if n < 2 || m < 2 {
        return Err(ObjectiveError::SampleTooSmall { min: 2, got: n.min(m) });
    }
    let median = median_pairwise_sq_dist(x, y);
    let sigmas: Vec<f64> = multipliers.iter().map(|f| f * median).collect();
    mmd_with_bandwidths(x, y, &sigmas, estimator)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand_distr::{Distribution, Normal};

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn singleton_closed_form() {
        // {0} vs {2}, sigma^2 = 1: 2 - 2 e^{-2}
        let x = Tensor::constant(&[1, 1], vec![0.0]);
        let y = Tensor::constant(&[1, 1], vec![2.0]);
        let v = mmd_with_bandwidths(&x, &y, &[1.0], MmdEstimator::Biased)
            .unwrap()
            .value();
        close(v, 2.0 - 2.0 * (-2.0f64).exp(), 1e-12);
        close(v, 1.729329, 1e-6);
    }

    #[test]
    fn identical_sets_give_zero() {
        let mut rng = stream(8, "mmd-test");
        let vals: Vec<f64> = (0..40).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        let x = Tensor::constant(&[10, 4], vals.clone());
        let y = Tensor::constant(&[10, 4], vals);
        let v = mmd_loss(&x, &y, &RBF_MULTIPLIERS, MmdEstimator::Biased)
            .unwrap()
            .value();
        assert!(v.abs() <= 1e-12, "mmd on identical sets = {v}");
    }

    #[test]
    fn biased_estimate_is_non_negative() {
        let mut rng = stream(9, "mmd-test");
        for _ in 0..5 {
            let xv: Vec<f64> = (0..24).map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0)).collect();
            let yv: Vec<f64> = (0..24).map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0)).collect();
            let x = Tensor::constant(&[8, 3], xv);
            let y = Tensor::constant(&[8, 3], yv);
            let v = mmd_loss(&x, &y, &RBF_MULTIPLIERS, MmdEstimator::Biased)
                .unwrap()
                .value();
            assert!(v >= 0.0);
        }
    }

    #[test]
    fn larger_mean_shift_gives_larger_estimate() {
        let mut rng = stream(10, "mmd-test");
        let normal = Normal::new(0.0, 1.0).unwrap();
        let draw = |rng: &mut rand_chacha::ChaCha12Rng, shift: f64| -> Tensor {
            let vals: Vec<f64> = (0..200).map(|_| normal.sample(rng) + shift).collect();
            Tensor::constant(&[200, 1], vals)
        };
        let base = draw(&mut rng, 0.0);
        let near = draw(&mut rng, 1.0);
        let far = draw(&mut rng, 3.0);
        let v_near = mmd_loss(&base, &near, &RBF_MULTIPLIERS, MmdEstimator::Biased)
            .unwrap()
            .value();
        let v_far = mmd_loss(&base, &far, &RBF_MULTIPLIERS, MmdEstimator::Biased)
            .unwrap()
            .value();
        assert!(v_far > v_near, "far {v_far} vs near {v_near}");
    }

    #[test]
    fn symmetric_and_order_invariant() {
        let mut rng = stream(11, "mmd-test");
        let xv: Vec<f64> = (0..12).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        let yv: Vec<f64> = (0..12).map(|_| rand::Rng::gen_range(&mut rng, 0.0..2.0)).collect();
        let x = Tensor::constant(&[6, 2], xv.clone());
        let y = Tensor::constant(&[6, 2], yv);
        let a = mmd_loss(&x, &y, &RBF_MULTIPLIERS, MmdEstimator::Biased).unwrap().value();
        let b = mmd_loss(&y, &x, &RBF_MULTIPLIERS, MmdEstimator::Biased).unwrap().value();
        close(a, b, 1e-15);

        // permuting sample rows leaves the estimate unchanged
        let mut shuffled = xv.clone();
        shuffled.rotate_left(4); // rotate whole rows (2 columns x 2 rows)
        let xs = Tensor::constant(&[6, 2], shuffled);
        let c = mmd_loss(&xs, &y, &RBF_MULTIPLIERS, MmdEstimator::Biased).unwrap().value();
        close(a, c, 1e-12);
    }

    #[test]
    fn sample_size_contract() {
        let x = Tensor::constant(&[1, 2], vec![0.0, 0.0]);
        let y = Tensor::constant(&[4, 2], vec![0.0; 8]);
        assert!(matches!(
            mmd_loss(&x, &y, &RBF_MULTIPLIERS, MmdEstimator::Biased),
            Err(ObjectiveError::SampleTooSmall { min: 2, got: 1 })
        ));
    }

    #[test]
    fn unbiased_flag_changes_the_estimator() {
        let mut rng = stream(12, "mmd-test");
        let xv: Vec<f64> = (0..16).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        let yv: Vec<f64> = (0..16).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        let x = Tensor::constant(&[8, 2], xv);
        let y = Tensor::constant(&[8, 2], yv);
        let b = mmd_loss(&x, &y, &[1.0], MmdEstimator::Biased).unwrap().value();
        let u = mmd_loss(&x, &y, &[1.0], MmdEstimator::Unbiased).unwrap().value();
        assert_ne!(b, u);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use crate::diffcore::gradcheck::finite_diff_gradient;
        let mut rng = stream(13, "mmd-test");
        let xv: Vec<f64> = (0..8).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        let yv: Vec<f64> = (0..8).map(|_| rand::Rng::gen_range(&mut rng, 0.0..2.0)).collect();

        let x = Tensor::parameter(&[4, 2], xv.clone());
        let y = Tensor::constant(&[4, 2], yv.clone());
        // fixed bandwidths so the (non-differentiated) median heuristic
        // cannot shift between perturbed evaluations
        let loss = mmd_with_bandwidths(&x, &y, &[0.5, 1.0, 2.0], MmdEstimator::Biased).unwrap();
        loss.backward().unwrap();
        let analytic = x.grad().unwrap();

        let yv2 = yv.clone();
        let fd = finite_diff_gradient(
            move |flat| {
                let x = Tensor::constant(&[4, 2], flat.to_vec());
                let y = Tensor::constant(&[4, 2], yv2.clone());
                mmd_with_bandwidths(&x, &y, &[0.5, 1.0, 2.0], MmdEstimator::Biased)
                    .unwrap()
                    .value()
            },
            &xv,
            1e-5,
        );
        for (a, f) in analytic.iter().zip(&fd) {
            let rel = (a - f).abs() / a.abs().max(f.abs()).max(1e-6);
            assert!(rel < 1e-6, "{a} vs {f}");
        }
    }
}

//! Adam with decoupled-from-nothing weight decay: the decay term is added
//! to the gradient before the moment updates, matching the classic
//! formulation.

use crate::diffcore::Tensor;

use super::TrainError;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moment accumulators and per-parameter step counters.
///
/// Counters are per parameter so that masked updates (training only a
/// subset of heads for some steps) keep their bias correction exact.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: Vec<u64>,
}

impl AdamState {
    pub fn new(params: &[(String, Tensor)]) -> Self {
        AdamState {
            m: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            steps: vec![0; params.len()],
        }
    }

    /// One bias-corrected update over every parameter. Each parameter must
    /// carry a populated gradient.
    pub fn step(
        &mut self,
        params: &[(String, Tensor)],
        lr: f64,
        weight_decay: f64,
    ) -> Result<(), TrainError> {
        self.update(params, lr, weight_decay, None, false)
    }

    /// One update where a parameter outside the current objective (no
    /// gradient populated) receives a zero loss gradient; weight decay
    /// still applies to it, since the decay term covers every parameter.
    pub fn step_lenient(
        &mut self,
        params: &[(String, Tensor)],
        lr: f64,
        weight_decay: f64,
    ) -> Result<(), TrainError> {
        self.update(params, lr, weight_decay, None, true)
    }

    /// One update restricted to parameters whose mask entry is true.
    pub fn step_masked(
        &mut self,
        params: &[(String, Tensor)],
        lr: f64,
        weight_decay: f64,
        mask: Option<&[bool]>,
    ) -> Result<(), TrainError> {
        self.update(params, lr, weight_decay, mask, false)
    }

    fn update(
        &mut self,
        params: &[(String, Tensor)],
        lr: f64,
        weight_decay: f64,
        mask: Option<&[bool]>,
        lenient: bool,
    ) -> Result<(), TrainError> {
        for (i, (name, p)) in params.iter().enumerate() {
            if let Some(mask) = mask {
                if !mask[i] {
                    continue;
                }
            }
            let g = match p.grad() {
                Some(g) => g,
                None if lenient => vec![0.0; p.numel()],
                None => return Err(TrainError::MissingGradient { name: name.clone() }),
            };
            self.steps[i] += 1;
            let t = self.steps[i];
            let bc1 = 1.0 - BETA1.powi(t as i32);
            let bc2 = 1.0 - BETA2.powi(t as i32);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            p.update_values(|values| {
                for (j, value) in values.iter_mut().enumerate() {
                    let grad = g[j] + weight_decay * *value;
                    m[j] = BETA1 * m[j] + (1.0 - BETA1) * grad;
                    v[j] = BETA2 * v[j] + (1.0 - BETA2) * grad * grad;
                    let m_hat = m[j] / bc1;
                    let v_hat = v[j] / bc2;
                    *value -= lr * m_hat / (v_hat.sqrt() + EPSILON);
                }
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named(t: Tensor) -> Vec<(String, Tensor)> {
        vec![("p".to_string(), t)]
    }

    #[test]
    fn first_step_moves_by_about_lr_against_the_gradient() {
        let p = Tensor::parameter(&[2], vec![1.0, -2.0]);
        let params = named(p.clone());
        let mut state = AdamState::new(&params);
        // hand-seeded gradients
        crate::diffcore::sum(&crate::diffcore::mul(&p, &Tensor::constant(&[2], vec![3.0, -0.5])).unwrap())
            .backward()
            .unwrap();
        state.step(&params, 0.01, 0.0).unwrap();
        let v = p.values();
        // reference formula: step ~= lr * sign(g) when moments start at zero
        let expect0 = 1.0 - 0.01 * (3.0 / (3.0f64.powi(2).sqrt() + EPSILON * (1.0f64 - BETA2).sqrt().recip()));
        assert!((v[0] - 0.99).abs() < 1e-4, "{} vs {expect0}", v[0]);
        assert!((v[1] - (-2.0 + 0.01)).abs() < 1e-4);
    }

    #[test]
    fn zero_grad_and_zero_state_leave_parameter_unchanged() {
        let p = Tensor::parameter(&[2], vec![0.3, 0.7]);
        let params = named(p.clone());
        let mut state = AdamState::new(&params);
        crate::diffcore::sum(&crate::diffcore::mul(&p, &Tensor::constant(&[2], vec![0.0, 0.0])).unwrap())
            .backward()
            .unwrap();
        state.step(&params, 0.01, 0.0).unwrap();
        assert_eq!(p.values(), vec![0.3, 0.7]);
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let p = Tensor::parameter(&[1], vec![0.5]);
        let params = named(p);
        let mut state = AdamState::new(&params);
        assert!(matches!(
            state.step(&params, 0.01, 0.0),
            Err(TrainError::MissingGradient { .. })
        ));
    }

    #[test]
    fn identical_seeds_give_identical_trajectories() {
        let run = || -> Vec<f64> {
            let p = Tensor::parameter(&[2], vec![0.4, -0.9]);
            let params = named(p.clone());
            let mut state = AdamState::new(&params);
            for step in 0..10 {
                let c = Tensor::constant(&[2], vec![1.0 + step as f64 * 0.1, -0.3]);
                crate::diffcore::sum(&crate::diffcore::mul(&p, &c).unwrap())
                    .backward()
                    .unwrap();
                state.step(&params, 0.05, 1e-7).unwrap();
                p.zero_grad();
            }
            p.values()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let p = Tensor::parameter(&[1], vec![5.0]);
        let params = named(p.clone());
        let mut state = AdamState::new(&params);
        crate::diffcore::sum(&crate::diffcore::mul(&p, &Tensor::constant(&[1], vec![0.0])).unwrap())
            .backward()
            .unwrap();
        state.step(&params, 0.01, 0.1).unwrap();
        assert!(p.values()[0] < 5.0);
    }

    #[test]
    fn masked_step_skips_parameters() {
        let a = Tensor::parameter(&[1], vec![1.0]);
        let b = Tensor::parameter(&[1], vec![1.0]);
        let params = vec![("a".to_string(), a.clone()), ("b".to_string(), b.clone())];
        let mut state = AdamState::new(&params);
        let loss = crate::diffcore::add(
            &crate::diffcore::sum(&a),
            &crate::diffcore::sum(&b),
        )
        .unwrap();
        loss.backward().unwrap();
        state
            .step_masked(&params, 0.01, 0.0, Some(&[true, false]))
            .unwrap();
        assert!(a.values()[0] < 1.0);
        assert_eq!(b.values()[0], 1.0);
    }
}

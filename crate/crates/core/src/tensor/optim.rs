//! Adam optimizer with a warmup-then-decay learning-rate schedule.

use super::{Tensor, TensorError};

/// Linear warmup to a peak rate over the first fraction of steps, then linear
/// decay to zero at the final step. Steps are 1-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_frac: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup_frac: f64, total_steps: u64) -> Result<Self, TensorError> {
        if !(peak > 0.0) {
            return Err(TensorError::NotPositive {
                what: "peak learning rate",
                got: peak,
            });
        }
        if !(0.0..1.0).contains(&warmup_frac) {
            return Err(TensorError::OutOfRange {
                what: "warmup fraction",
                detail: format!("must lie in [0, 1), got {warmup_frac}"),
            });
        }
        if total_steps == 0 {
            return Err(TensorError::NotPositive {
                what: "total steps",
                got: 0.0,
            });
        }
        Ok(LrSchedule {
            peak,
            warmup_frac,
            total_steps,
        })
    }

    /// Learning rate used for step number `step` (1-based, clamped to range).
    pub fn at(&self, step: u64) -> f64 {
        let step = step.clamp(1, self.total_steps);
        let warm = ((self.total_steps as f64) * self.warmup_frac).round() as u64;
        let warm = warm.min(self.total_steps - 1);
        if warm > 0 && step <= warm {
            self.peak * step as f64 / warm as f64
        } else {
            self.peak * (self.total_steps - step) as f64 / (self.total_steps - warm) as f64
        }
    }
}

/// Adam state over a fixed list of parameter tensors, identified by position.
#[derive(Debug, Clone)]
pub struct AdamState {
    schedule: LrSchedule,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(schedule: LrSchedule, param_sizes: &[usize]) -> Self {
        AdamState {
            schedule,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn schedule(&self) -> &LrSchedule {
        &self.schedule
    }

    /// One Adam update across all parameters. Every parameter must carry a
    /// finite gradient of matching length; parameters stay finite afterwards.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<(), TensorError> {
        if params.len() != self.m.len() {
            return Err(TensorError::OutOfRange {
                what: "optimizer parameter count",
                detail: format!("state tracks {}, got {}", self.m.len(), params.len()),
            });
        }
        for (i, p) in params.iter().enumerate() {
            let g = p.grad().ok_or_else(|| TensorError::MissingGrad {
                what: format!("parameter {i}"),
            })?;
            if g.len() != self.m[i].len() {
                return Err(TensorError::ShapeMismatch {
                    shape: p.shape().to_vec(),
                    expected: self.m[i].len(),
                    got: g.len(),
                });
            }
            if let Some((index, &value)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                let _ = (index, value);
                return Err(TensorError::NonFinite { index, value });
            }
        }

        self.step += 1;
        let lr = self.schedule.at(self.step);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = p.grad().expect("checked above").to_vec();
            let vals = p.values_mut();
            for j in 0..g.len() {
                self.m[i][j] = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * g[j];
                self.v[i][j] = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = self.m[i][j] / bc1;
                let vh = self.v[i][j] / bc2;
                vals[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_hits_peak_then_decays_to_zero() {
        let s = LrSchedule::new(2e-4, 0.07, 100).unwrap();
        assert!((s.at(7) - 2e-4).abs() < 1e-18);
        assert_eq!(s.at(100), 0.0);
        assert!((s.at(1) - 2e-4 / 7.0).abs() < 1e-18);
        assert!((s.at(8) - 2e-4 * 92.0 / 93.0).abs() < 1e-18);
        for step in 1..100 {
            assert!(s.at(step) > 0.0);
        }
    }

    #[test]
    fn schedule_validates_inputs() {
        assert!(LrSchedule::new(0.0, 0.07, 10).is_err());
        assert!(LrSchedule::new(1e-3, 1.0, 10).is_err());
        assert!(LrSchedule::new(1e-3, 0.07, 0).is_err());
    }

    #[test]
    fn first_adam_step_moves_by_about_the_rate() {
        // With zero moment history, |update| ~= lr * g / (|g| + eps).
        let sched = LrSchedule::new(1e-2, 0.0, 10_000_000).unwrap();
        let mut p = Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap();
        p.set_grad(vec![0.3, -4.0, 0.001]).unwrap();
        let before = p.values().to_vec();
        let mut opt = AdamState::new(sched, &[3]);
        opt.step(&mut [&mut p]).unwrap();
        let lr = sched.at(1);
        for (b, a) in before.iter().zip(p.values()) {
            let moved = (b - a).abs();
            assert!((moved - lr).abs() < lr * 1e-4, "moved {moved}, lr {lr}");
        }
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn step_requires_finite_gradients() {
        let sched = LrSchedule::new(1e-2, 0.0, 100).unwrap();
        let mut p = Tensor::vector(vec![1.0]).unwrap();
        let mut opt = AdamState::new(sched, &[1]);
        assert!(matches!(
            opt.step(&mut [&mut p]),
            Err(TensorError::MissingGrad { .. })
        ));
        p.set_grad(vec![f64::NAN]).unwrap();
        assert!(matches!(
            opt.step(&mut [&mut p]),
            Err(TensorError::NonFinite { .. })
        ));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let sched = LrSchedule::new(1e-2, 0.0, 100).unwrap();
        let mut p = Tensor::vector(vec![1.0, -2.0]).unwrap();
        p.set_grad(vec![0.0, 0.0]).unwrap();
        let before = p.values().to_vec();
        let mut opt = AdamState::new(sched, &[2]);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.values(), before.as_slice());
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let sched = LrSchedule::new(0.05, 0.1, 200).unwrap();
        let mut p = Tensor::vector(vec![3.0, -2.0]).unwrap();
        let mut opt = AdamState::new(sched, &[2]);
        for _ in 0..200 {
            let g: Vec<f64> = p.values().iter().map(|&v| 2.0 * v).collect();
            p.set_grad(g).unwrap();
            opt.step(&mut [&mut p]).unwrap();
        }
        let norm: f64 = p.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 0.5, "did not approach the minimum: {:?}", p.values());
    }
}

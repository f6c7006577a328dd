use super::params::ParameterSet;
use crate::error::{Error, Result};

/// Adam with bias correction and optional global gradient-norm clipping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Adam {
            lr,
            ..Adam::default()
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&self, ps: &mut ParameterSet) -> Result<()> {
        for p in ps.iter() {
            if !p.grad.is_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        let clip = match self.clip_norm {
            Some(max) => {
                let norm = ps.grad_norm();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        ps.step += 1;
        let t = ps.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in ps.iter_mut() {
            let n = p.value.len();
            for k in 0..n {
                let g = p.grad.data()[k] * clip;
                let m = self.beta1 * p.m.data()[k] + (1.0 - self.beta1) * g;
                let v = self.beta2 * p.v.data()[k] + (1.0 - self.beta2) * g * g;
                p.m.data_mut()[k] = m;
                p.v.data_mut()[k] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                p.value.data_mut()[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.grad.fill(0.0);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Array;

    fn one_scalar(value: f64) -> ParameterSet {
        let mut ps = ParameterSet::new();
        ps.insert("w", Array::scalar(value)).unwrap();
        ps
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = one_scalar(0.5);
        ps.iter_mut().next().unwrap().grad.fill(1.0);
        Adam::default().step(&mut ps).unwrap();
        let w = ps.by_name("w").unwrap();
        // m_hat = v_hat = 1 -> delta = lr * 1 / (1 + eps)
        let expected = 0.5 - 1e-4 / (1.0 + 1e-8);
        assert!((w.value.item() - expected).abs() < 1e-15);
        assert_eq!(w.grad.item(), 0.0);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut ps = one_scalar(0.5);
        Adam::default().step(&mut ps).unwrap();
        assert_eq!(ps.by_name("w").unwrap().value.item(), 0.5);
    }

    #[test]
    fn nan_gradient_is_reported_by_name() {
        let mut ps = one_scalar(0.5);
        ps.iter_mut().next().unwrap().grad.fill(f64::NAN);
        let err = Adam::default().step(&mut ps).unwrap_err();
        assert_eq!(err.to_string(), "non-finite gradient in w");
    }

    #[test]
    fn two_steps_shrink_quadratic() {
        // loss = (w - 3)^2
        let mut ps = one_scalar(0.0);
        let loss = |w: f64| (w - 3.0) * (w - 3.0);
        let opt = Adam::with_lr(0.1);
        let mut last = loss(0.0);
        for _ in 0..2 {
            let w = ps.by_name("w").unwrap().value.item();
            ps.iter_mut().next().unwrap().grad.fill(2.0 * (w - 3.0));
            opt.step(&mut ps).unwrap();
            let now = loss(ps.by_name("w").unwrap().value.item());
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut ps = ParameterSet::new();
        ps.insert("a", Array::scalar(0.0)).unwrap();
        ps.insert("b", Array::scalar(0.0)).unwrap();
        for p in ps.iter_mut() {
            p.grad.fill(30.0);
        }
        let opt = Adam::default();
        opt.step(&mut ps).unwrap();
        let m = ps.by_name("a").unwrap().m.item();
        // clipped gradient is 5/sqrt(2) per entry, m = 0.1 * g
        assert!((m - 0.1 * 5.0 / 2f64.sqrt()).abs() < 1e-12);
    }
}

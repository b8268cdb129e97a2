//! Adam optimizer over the [`Visit`](crate::nn::Visit) parameter tree.

use std::collections::HashMap;

use crate::nn::Visit;
use crate::scalar::{sc, Scalar};
use crate::{Error, Result};

/// First and second moment estimates for one named parameter group.
#[derive(Debug, Clone)]
struct Slot<S> {
    m: Vec<S>,
    v: Vec<S>,
}

/// Adam with per-parameter-group state keyed by visit name.
///
/// The effective step size for a group is `lr * lr_scale` where `lr_scale`
/// comes from the group's [`ParamView`](crate::nn::ParamView). Groups
/// marked `plain` bypass the moment machinery and take raw gradient steps.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    step: u64,
    slots: HashMap<String, Slot<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: S) -> Result<Self> {
        if !(lr > S::zero()) || !lr.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be finite and positive, got {lr}"
            )));
        }
        Ok(Self {
            lr,
            beta1: sc(0.9),
            beta2: sc(0.999),
            eps: sc(1e-8),
            step: 0,
            slots: HashMap::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients currently stored in `model`.
    ///
    /// Gradients are not cleared; call [`Visit`] zeroing separately so a
    /// caller can inspect them after the step.
    pub fn step(&mut self, model: &mut dyn Visit<S>) {
        self.step += 1;
        let t = self.step;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bias1 = S::one() - b1.powi(t as i32);
        let bias2 = S::one() - b2.powi(t as i32);
        let base_lr = self.lr;
        let slots = &mut self.slots;
        model.visit(&mut |p| {
            let lr = base_lr * p.lr_scale;
            if p.plain {
                for i in 0..p.value.len() {
                    p.value[i] = p.value[i] - lr * p.grad[i];
                }
                return;
            }
            let slot = slots.entry(p.name.clone()).or_insert_with(|| Slot {
                m: vec![S::zero(); p.value.len()],
                v: vec![S::zero(); p.value.len()],
            });
            debug_assert_eq!(slot.m.len(), p.value.len(), "group {} resized", p.name);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                slot.m[i] = b1 * slot.m[i] + (S::one() - b1) * g;
                slot.v[i] = b2 * slot.v[i] + (S::one() - b2) * g * g;
                let m_hat = slot.m[i] / bias1;
                let v_hat = slot.v[i] / bias2;
                p.value[i] = p.value[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamView;

    /// Two scalar groups with distinct learning-rate scales.
    struct Pair {
        a: f64,
        a_grad: f64,
        b: f64,
        b_grad: f64,
        b_scale: f64,
        b_plain: bool,
    }

    impl Visit<f64> for Pair {
        fn visit(&mut self, f: &mut dyn FnMut(ParamView<'_, f64>)) {
            f(ParamView {
                name: "a".into(),
                lr_scale: 1.0,
                plain: false,
                value: std::slice::from_mut(&mut self.a),
                grad: std::slice::from_mut(&mut self.a_grad),
            });
            f(ParamView {
                name: "b".into(),
                lr_scale: self.b_scale,
                plain: self.b_plain,
                value: std::slice::from_mut(&mut self.b),
                grad: std::slice::from_mut(&mut self.b_grad),
            });
        }
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p = Pair {
            a: 3.0,
            a_grad: 0.0,
            b: -2.0,
            b_grad: 0.0,
            b_scale: 1.0,
            b_plain: false,
        };
        let mut opt = Adam::new(0.05).unwrap();
        for _ in 0..2000 {
            p.a_grad = 2.0 * (p.a - 1.5);
            p.b_grad = 2.0 * (p.b + 0.5);
            opt.step(&mut p);
        }
        assert!((p.a - 1.5).abs() < 1e-4, "a = {}", p.a);
        assert!((p.b + 0.5).abs() < 1e-4, "b = {}", p.b);
    }

    #[test]
    fn first_step_size_is_lr_times_scale() {
        // With bias correction the first Adam step is lr * g/(|g| + eps').
        let mut p = Pair {
            a: 0.0,
            a_grad: 0.7,
            b: 0.0,
            b_grad: -0.7,
            b_scale: 4.0,
            b_plain: false,
        };
        let mut opt = Adam::new(1e-3).unwrap();
        opt.step(&mut p);
        assert!((p.a + 1e-3).abs() < 1e-8, "a moved {}", p.a);
        assert!((p.b - 4e-3).abs() < 1e-8, "b moved {}", p.b);
    }

    #[test]
    fn state_is_per_group() {
        let mut p = Pair {
            a: 0.0,
            a_grad: 1.0,
            b: 0.0,
            b_grad: 0.0,
            b_scale: 1.0,
            b_plain: false,
        };
        let mut opt = Adam::new(1e-2).unwrap();
        for _ in 0..5 {
            opt.step(&mut p);
        }
        // b saw only zero gradients; its moments must stay zero.
        assert_eq!(p.b, 0.0);
        assert!(p.a < 0.0);
        assert_eq!(opt.step_count(), 5);
    }

    #[test]
    fn plain_groups_take_raw_gradient_steps() {
        let mut p = Pair {
            a: 0.0,
            a_grad: 0.5,
            b: 1.0,
            b_grad: 0.01,
            b_scale: 2.0,
            b_plain: true,
        };
        let mut opt = Adam::new(1e-3).unwrap();
        opt.step(&mut p);
        opt.step(&mut p);
        // b moves by lr * scale * grad each step, no moment normalization.
        assert!((p.b - (1.0 - 2.0 * 2.0e-3 * 0.01)).abs() < 1e-12, "b = {}", p.b);
        assert!(p.a < 0.0);
    }

    #[test]
    fn rejects_bad_lr() {
        assert!(Adam::<f64>::new(0.0).is_err());
        assert!(Adam::<f64>::new(-1.0).is_err());
        assert!(Adam::<f64>::new(f64::NAN).is_err());
    }
}

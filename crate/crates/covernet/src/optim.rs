//! Parameter update rules.
//!
//! The momentum update is applied elementwise in exactly this form and
//! order:
//!
//! ```text
//! v <- momentum * v - weight_decay * lr * w - lr * grad
//! w <- w + v
//! ```
//!
//! with momentum 0.9 and weight decay 0.0005 as the training defaults.
//! Adam is the canonical bias-corrected variant. The step schedule divides
//! the base rate by `drop_factor` every `drop_every` steps; the division
//! uses an integer power so decade drops land exactly on 1e-3, 1e-6, ...

use thiserror::Error;

use crate::tensor::{Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("{rule}: {what} shape {actual:?} does not match parameter shape {expected:?}")]
    ShapeMismatch {
        rule: &'static str,
        what: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("{rule}: invalid {name}: {reason}")]
    InvalidParam {
        rule: &'static str,
        name: &'static str,
        reason: String,
    },
}

/// Momentum/decay coefficients, fixed for a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdMomentumConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    /// When false, bias parameters (rank-1 tensors) skip the decay term.
    pub decay_biases: bool,
}

impl Default for SgdMomentumConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 0.0005,
            decay_biases: true,
        }
    }
}

/// Per-parameter momentum state.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdMomentumState<T = f32> {
    pub velocity: Tensor<T>,
    pub iteration: u64,
}

impl<T: Real> SgdMomentumState<T> {
    pub fn zeros_like(param: &Tensor<T>) -> Self {
        Self {
            velocity: Tensor::zeros(param.shape()).expect("parameter shape is valid"),
            iteration: 0,
        }
    }
}

pub fn sgd_momentum_step<T: Real>(
    w: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut SgdMomentumState<T>,
    cfg: &SgdMomentumConfig,
    lr: f64,
) -> Result<(), OptimError> {
    const RULE: &str = "sgd_momentum_step";
    if grad.shape() != w.shape() {
        return Err(OptimError::ShapeMismatch {
            rule: RULE,
            what: "gradient",
            expected: w.shape().to_vec(),
            actual: grad.shape().to_vec(),
        });
    }
    if state.velocity.shape() != w.shape() {
        return Err(OptimError::ShapeMismatch {
            rule: RULE,
            what: "velocity",
            expected: w.shape().to_vec(),
            actual: state.velocity.shape().to_vec(),
        });
    }
    if !(lr > 0.0) {
        return Err(OptimError::InvalidParam {
            rule: RULE,
            name: "lr",
            reason: format!("{lr} is not positive"),
        });
    }
    let momentum = T::of_f64(cfg.momentum);
    let decay = if cfg.decay_biases || w.rank() > 1 {
        cfg.weight_decay
    } else {
        0.0
    };
    let decay_lr = T::of_f64(decay * lr);
    let rate = T::of_f64(lr);
    let wd = w.data_mut();
    let vd = state.velocity.data_mut();
    let gd = grad.data();
    for i in 0..wd.len() {
        vd[i] = momentum * vd[i] - decay_lr * wd[i] - rate * gd[i];
        wd[i] += vd[i];
    }
    state.iteration += 1;
    Ok(())
}

/// Adam constants, fixed for a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon_hat: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon_hat: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        const RULE: &str = "adam_step";
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(OptimError::InvalidParam {
                    rule: RULE,
                    name: if name == "beta1" { "beta1" } else { "beta2" },
                    reason: format!("{b} is outside (0, 1)"),
                });
            }
        }
        Ok(())
    }
}

/// Per-parameter Adam moments; the shared step counter `t` lives with the
/// caller because it advances once per optimizer step, not per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Tensor<T>,
    pub u: Tensor<T>,
}

impl<T: Real> AdamState<T> {
    pub fn zeros_like(param: &Tensor<T>) -> Self {
        let zeros = Tensor::zeros(param.shape()).expect("parameter shape is valid");
        Self {
            m: zeros.clone(),
            u: zeros,
        }
    }
}

/// One bias-corrected Adam update. `t` is the 1-based step count.
pub fn adam_step<T: Real>(
    w: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    t: u64,
    lr: f64,
) -> Result<(), OptimError> {
    const RULE: &str = "adam_step";
    cfg.validate()?;
    if grad.shape() != w.shape() {
        return Err(OptimError::ShapeMismatch {
            rule: RULE,
            what: "gradient",
            expected: w.shape().to_vec(),
            actual: grad.shape().to_vec(),
        });
    }
    if state.m.shape() != w.shape() || state.u.shape() != w.shape() {
        return Err(OptimError::ShapeMismatch {
            rule: RULE,
            what: "moment",
            expected: w.shape().to_vec(),
            actual: state.m.shape().to_vec(),
        });
    }
    if t == 0 {
        return Err(OptimError::InvalidParam {
            rule: RULE,
            name: "t",
            reason: "step count is 1-based".into(),
        });
    }
    let b1 = T::of_f64(cfg.beta1);
    let b2 = T::of_f64(cfg.beta2);
    let one_m_b1 = T::of_f64(1.0 - cfg.beta1);
    let one_m_b2 = T::of_f64(1.0 - cfg.beta2);
    // Bias corrections in f64; t can be large.
    let corr1 = T::of_f64(1.0 - cfg.beta1.powi(t.min(i32::MAX as u64) as i32));
    let corr2 = T::of_f64(1.0 - cfg.beta2.powi(t.min(i32::MAX as u64) as i32));
    let eps = T::of_f64(cfg.epsilon_hat);
    let rate = T::of_f64(lr);
    let wd = w.data_mut();
    let md = state.m.data_mut();
    let ud = state.u.data_mut();
    let gd = grad.data();
    for i in 0..wd.len() {
        md[i] = b1 * md[i] + one_m_b1 * gd[i];
        ud[i] = b2 * ud[i] + one_m_b2 * gd[i] * gd[i];
        let m_hat = md[i] / corr1;
        let u_hat = ud[i] / corr2;
        wd[i] -= rate * m_hat / (u_hat.sqrt() + eps);
    }
    Ok(())
}

/// Step schedule: `rate(step) = base_rate / drop_factor^(step / drop_every)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_rate: f64,
    pub drop_factor: f64,
    pub drop_every: u64,
}

impl LrSchedule {
    /// Training default for the eight-layer network: 0.01 divided by 10
    /// every 100,000 steps.
    pub fn step_decade() -> Self {
        Self {
            base_rate: 0.01,
            drop_factor: 10.0,
            drop_every: 100_000,
        }
    }

    /// Flat schedule; the drop interval is an unreachable sentinel.
    pub fn constant(rate: f64) -> Self {
        Self {
            base_rate: rate,
            drop_factor: 1.0,
            drop_every: u64::MAX,
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.base_rate > 0.0) {
            return Err(OptimError::InvalidParam {
                rule: "lr_at",
                name: "base_rate",
                reason: format!("{} is not positive", self.base_rate),
            });
        }
        if self.drop_every == 0 {
            return Err(OptimError::InvalidParam {
                rule: "lr_at",
                name: "drop_every",
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let drops = (step / self.drop_every).min(i32::MAX as u64) as i32;
        self.base_rate / self.drop_factor.powi(drops)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    #[test]
    fn zero_everything_is_a_fixed_point() {
        let mut w = scalar(0.0);
        let mut st = SgdMomentumState::zeros_like(&w);
        sgd_momentum_step(&mut w, &scalar(0.0), &mut st, &SgdMomentumConfig::default(), 0.01)
            .unwrap();
        assert_eq!(w.data(), &[0.0]);
        assert_eq!(st.velocity.data(), &[0.0]);
        assert_eq!(st.iteration, 1);
    }

    #[test]
    fn hand_evaluated_single_step() {
        // lr=0.01, w=1, v=0, grad=1:
        // v' = 0.9*0 - 0.0005*0.01*1 - 0.01*1 = -0.010005
        // w' = 1 - 0.010005 = 0.989995
        let mut w = scalar(1.0);
        let mut st = SgdMomentumState::zeros_like(&w);
        sgd_momentum_step(&mut w, &scalar(1.0), &mut st, &SgdMomentumConfig::default(), 0.01)
            .unwrap();
        assert!((st.velocity.data()[0] - (-0.010005)).abs() < 1e-18);
        assert!((w.data()[0] - 0.989995).abs() < 1e-18);
    }

    #[test]
    fn thousand_steps_match_scalar_reimplementation() {
        let cfg = SgdMomentumConfig::default();
        let mut w = scalar(0.3);
        let mut st = SgdMomentumState::zeros_like(&w);
        // Independent scalar recurrence.
        let (mut sw, mut sv) = (0.3f64, 0.0f64);
        let lr = 0.01;
        for i in 0..1_000u64 {
            // Deterministic pseudo-gradient sequence.
            let g = ((i as f64) * 0.618).sin();
            sv = 0.9 * sv - 0.0005 * lr * sw - lr * g;
            sw += sv;
            sgd_momentum_step(&mut w, &scalar(g), &mut st, &cfg, lr).unwrap();
            assert!((w.data()[0] - sw).abs() <= 1e-12, "step {i}");
            assert!((st.velocity.data()[0] - sv).abs() <= 1e-12, "step {i}");
        }
        assert_eq!(st.iteration, 1_000);
    }

    #[test]
    fn zero_momentum_zero_decay_is_plain_gradient_descent() {
        let cfg = SgdMomentumConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            decay_biases: true,
        };
        let mut w = scalar(2.0);
        let mut st = SgdMomentumState::zeros_like(&w);
        sgd_momentum_step(&mut w, &scalar(0.5), &mut st, &cfg, 0.1).unwrap();
        assert_eq!(w.data(), &[2.0 - 0.1 * 0.5]);
    }

    #[test]
    fn update_is_linear_in_state_and_gradient() {
        let cfg = SgdMomentumConfig::default();
        let c = 3.0;
        let mut w1 = scalar(0.7);
        let mut st1 = SgdMomentumState::zeros_like(&w1);
        st1.velocity = scalar(0.2);
        let mut w2 = scalar(0.7 * c);
        let mut st2 = SgdMomentumState::zeros_like(&w2);
        st2.velocity = scalar(0.2 * c);
        sgd_momentum_step(&mut w1, &scalar(0.4), &mut st1, &cfg, 0.01).unwrap();
        sgd_momentum_step(&mut w2, &scalar(0.4 * c), &mut st2, &cfg, 0.01).unwrap();
        assert!((w2.data()[0] - c * w1.data()[0]).abs() < 1e-15);
        assert!((st2.velocity.data()[0] - c * st1.velocity.data()[0]).abs() < 1e-15);
    }

    #[test]
    fn bias_decay_exemption_flag() {
        let cfg = SgdMomentumConfig {
            decay_biases: false,
            ..SgdMomentumConfig::default()
        };
        // Rank-1 parameter with zero gradient: no decay means no motion.
        let mut b = scalar(5.0);
        let mut st = SgdMomentumState::zeros_like(&b);
        sgd_momentum_step(&mut b, &scalar(0.0), &mut st, &cfg, 0.01).unwrap();
        assert_eq!(b.data(), &[5.0]);
        // Rank-2 parameter still decays.
        let mut w = Tensor::new(&[1, 1], vec![5.0f64]).unwrap();
        let mut st = SgdMomentumState {
            velocity: Tensor::zeros(&[1, 1]).unwrap(),
            iteration: 0,
        };
        sgd_momentum_step(&mut w, &Tensor::zeros(&[1, 1]).unwrap(), &mut st, &cfg, 0.01).unwrap();
        assert!((w.data()[0] - (5.0 - 0.0005 * 0.01 * 5.0)).abs() < 1e-15);
    }

    #[test]
    fn sgd_shape_mismatch_is_structured() {
        let mut w = Tensor::<f64>::zeros(&[2]).unwrap();
        let mut st = SgdMomentumState::zeros_like(&w);
        let err = sgd_momentum_step(
            &mut w,
            &Tensor::zeros(&[3]).unwrap(),
            &mut st,
            &SgdMomentumConfig::default(),
            0.01,
        )
        .unwrap_err();
        assert!(matches!(err, OptimError::ShapeMismatch { what: "gradient", .. }));
    }

    #[test]
    fn adam_zero_gradient_leaves_weights_alone() {
        let mut w = scalar(1.5);
        let mut st = AdamState::zeros_like(&w);
        adam_step(&mut w, &scalar(0.0), &mut st, &AdamConfig::default(), 1, 1e-4).unwrap();
        assert_eq!(w.data(), &[1.5]);
    }

    #[test]
    fn adam_first_step_moves_by_about_the_rate() {
        // With grad 1 from zero state, m_hat = u_hat = 1, so the step is
        // lr / (1 + epsilon_hat).
        let mut w = scalar(1.0);
        let mut st = AdamState::zeros_like(&w);
        adam_step(&mut w, &scalar(1.0), &mut st, &AdamConfig::default(), 1, 1e-4).unwrap();
        let want = 1.0 - 1e-4 / (1.0 + 1e-8);
        assert!((w.data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn adam_hundred_constant_steps_match_scalar_oracle() {
        let cfg = AdamConfig::default();
        let mut w = scalar(1.0);
        let mut st = AdamState::zeros_like(&w);
        let (mut sw, mut sm, mut su) = (1.0f64, 0.0f64, 0.0f64);
        let lr = 1e-4;
        let mut prev = sw;
        for t in 1..=100u64 {
            sm = 0.9 * sm + 0.1 * 1.0;
            su = 0.999 * su + 0.001 * 1.0;
            let mh = sm / (1.0 - 0.9f64.powi(t as i32));
            let uh = su / (1.0 - 0.999f64.powi(t as i32));
            sw -= lr * mh / (uh.sqrt() + 1e-8);
            adam_step(&mut w, &scalar(1.0), &mut st, &cfg, t, lr).unwrap();
            assert!((w.data()[0] - sw).abs() <= 1e-10, "step {t}");
            assert!(sw < prev, "monotone decrease violated at step {t}");
            prev = sw;
        }
    }

    #[test]
    fn schedule_hits_exact_decades() {
        let s = LrSchedule::step_decade();
        assert_eq!(s.lr_at(0), 0.01);
        assert_eq!(s.lr_at(99_999), 0.01);
        assert_eq!(s.lr_at(100_000), 0.001);
        assert_eq!(s.lr_at(399_999), 1e-5);
        assert_eq!(s.lr_at(450_000), 1e-6);
    }

    #[test]
    fn constant_schedule_never_drops() {
        let s = LrSchedule::constant(1e-4);
        assert_eq!(s.lr_at(0), 1e-4);
        assert_eq!(s.lr_at(30_000), 1e-4);
        assert_eq!(s.lr_at(u64::MAX - 1), 1e-4);
    }

    #[test]
    fn schedule_validation() {
        assert!(LrSchedule::constant(0.0).validate().is_err());
        assert!(LrSchedule {
            base_rate: 0.1,
            drop_factor: 10.0,
            drop_every: 0
        }
        .validate()
        .is_err());
        assert!(LrSchedule::step_decade().validate().is_ok());
    }
}

use log::warn;

use crate::encoder::Param;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Consecutive aborted steps tolerated before training is declared unhealthy.
pub const MAX_CONSECUTIVE_ABORTS: usize = 3;

/// `0.5 * base_lr * (1 + cos(pi * step / total))`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdState<T> {
    pub velocity: Vec<Tensor<T>>,
    pub step: u64,
    pub consecutive_aborts: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    Aborted,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(params: &[Param<T>]) -> Self {
        Self {
            velocity: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            step: 0,
            consecutive_aborts: 0,
        }
    }

    /// Records a step that never reached the update (e.g. a non-finite loss).
    pub fn abort(&mut self, reason: &str) -> Result<StepOutcome> {
        self.consecutive_aborts += 1;
        warn!("aborted optimizer step ({reason}); {} in a row", self.consecutive_aborts);
        if self.consecutive_aborts >= MAX_CONSECUTIVE_ABORTS {
            return Err(Error::TrainingHealth(format!(
                "{MAX_CONSECUTIVE_ABORTS} consecutive aborted steps, last: {reason}"
            )));
        }
        Ok(StepOutcome::Aborted)
    }
}

/// `g' = g + wd * theta` (weights only), `v <- mu v + g'`, `theta <- theta - lr v`.
/// A missing gradient counts as zero. Non-finite gradients abort the whole step.
pub fn sgd_step<T: Scalar>(
    params: &mut [Param<T>],
    grads: &[Option<Tensor<T>>],
    state: &mut SgdState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<StepOutcome> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::invalid(
            "sgd_step",
            format!("{} params, {} grads, {} velocity buffers", params.len(), grads.len(), state.velocity.len()),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.value.shape() {
                return Err(Error::invalid(
                    "sgd_step",
                    format!("gradient shape {:?} for {} of shape {:?}", g.shape(), p.name, p.value.shape()),
                ));
            }
            if !g.is_finite() {
                return state.abort(&format!("non-finite gradient for {}", p.name));
            }
        }
    }
    let (lr, mu, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        let decay = p.decays();
        let theta = p.value.data_mut();
        let vel = v.data_mut();
        for i in 0..theta.len() {
            let mut gi = g.as_ref().map_or(T::zero(), |g| g.data()[i]);
            if decay {
                gi = gi + wd * theta[i];
            }
            vel[i] = mu * vel[i] + gi;
            theta[i] = theta[i] - lr * vel[i];
        }
    }
    state.step += 1;
    state.consecutive_aborts = 0;
    Ok(StepOutcome::Applied)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ParamKind;

    fn param(v: f64, kind: ParamKind) -> Vec<Param<f64>> {
        vec![Param {
            name: "w".into(),
            value: Tensor::full(&[2], v),
            kind,
        }]
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.01), 0.01);
        assert!(cosine_lr(100, 100, 0.01).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.01) - 0.005).abs() < 1e-15);
    }

    #[test]
    fn plain_descent_without_momentum_or_decay() {
        let mut p = param(1.0, ParamKind::Weight);
        let mut s = SgdState::new(&p);
        let g = vec![Some(Tensor::full(&[2], 0.5))];
        sgd_step(&mut p, &g, &mut s, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p[0].value.data(), &[0.95, 0.95]);
    }

    #[test]
    fn momentum_coasts_on_zero_gradient() {
        let mut p = param(1.0, ParamKind::Weight);
        let mut s = SgdState::new(&p);
        s.velocity[0] = Tensor::full(&[2], 2.0);
        sgd_step(&mut p, &[Some(Tensor::zeros(&[2]))], &mut s, 0.1, 0.9, 0.0).unwrap();
        assert!((p[0].value.data()[0] - (1.0 - 0.1 * 0.9 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn two_step_unrolled_recursion() {
        let mut p = param(1.0, ParamKind::Weight);
        let mut s = SgdState::new(&p);
        let g = vec![Some(Tensor::full(&[2], 0.3))];
        for _ in 0..2 {
            sgd_step(&mut p, &g, &mut s, 0.05, 0.9, 0.0).unwrap();
        }
        let want = 1.0 - 0.05 * 0.3 * (1.0 + (1.0 + 0.9));
        assert!((p[0].value.data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn decay_skips_biases() {
        let mut w = param(1.0, ParamKind::Weight);
        let mut b = param(1.0, ParamKind::Bias);
        let (mut sw, mut sb) = (SgdState::new(&w), SgdState::new(&b));
        let g = vec![Some(Tensor::zeros(&[2]))];
        sgd_step(&mut w, &g, &mut sw, 0.1, 0.0, 0.5).unwrap();
        sgd_step(&mut b, &g, &mut sb, 0.1, 0.0, 0.5).unwrap();
        assert_eq!(w[0].value.data()[0], 0.95);
        assert_eq!(b[0].value.data()[0], 1.0);
    }

    #[test]
    fn three_non_finite_steps_are_fatal() {
        let mut p = param(1.0, ParamKind::Weight);
        let mut s = SgdState::new(&p);
        let g = vec![Some(Tensor::full(&[2], f64::NAN))];
        assert_eq!(sgd_step(&mut p, &g, &mut s, 0.1, 0.9, 0.0).unwrap(), StepOutcome::Aborted);
        assert_eq!(sgd_step(&mut p, &g, &mut s, 0.1, 0.9, 0.0).unwrap(), StepOutcome::Aborted);
        assert!(matches!(sgd_step(&mut p, &g, &mut s, 0.1, 0.9, 0.0), Err(Error::TrainingHealth(_))));
        assert_eq!(p[0].value.data(), &[1.0, 1.0]);
    }
}

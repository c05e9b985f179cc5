//! SGD with momentum, linear warmup, cosine decay, and global-norm clipping.

use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn constant(base_lr: f64) -> Self {
        Self {
            base_lr,
            warmup_steps: 0,
            total_steps: 0,
        }
    }

    /// Learning rate at zero-based step `t`.
    ///
    /// During warmup (`t < warmup_steps`) the rate is `base_lr * t / warmup_steps`.
    /// Afterwards it follows `base_lr * 0.5 * (1 + cos(pi * progress))`, where
    /// progress runs from 0 at `t = warmup_steps` to 1 at the final step
    /// `t = total_steps - 1`. A schedule with `total_steps == 0` is constant;
    /// one with no decay steps after warmup holds `base_lr`.
    pub fn lr_at(&self, t: usize) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        if t < self.warmup_steps {
            return self.base_lr * t as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(1 + self.warmup_steps);
        if span == 0 {
            return self.base_lr;
        }
        let progress = ((t - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.base_lr * 0.5 * (1.0 + math::cos(core::f64::consts::PI * progress))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub momentum_buffers: Vec<Tensor>,
    pub step_index: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub clip_global_norm: Option<f64>,
}

impl OptimizerState {
    /// Zero momentum buffers shaped like `params`.
    pub fn new<'a>(
        params: impl IntoIterator<Item = &'a Tensor>,
        schedule: LrSchedule,
        momentum: f64,
        clip_global_norm: Option<f64>,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(invalid!("momentum must lie in [0, 1), got {momentum}"));
        }
        if schedule.base_lr < 0.0 || !schedule.base_lr.is_finite() {
            return Err(invalid!("learning rate must be nonnegative, got {}", schedule.base_lr));
        }
        if let Some(c) = clip_global_norm {
            if !(c > 0.0) {
                return Err(invalid!("clip norm must be positive, got {c}"));
            }
        }
        Ok(Self {
            momentum_buffers: params.into_iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step_index: 0,
            schedule,
            momentum,
            clip_global_norm,
        })
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.step_index)
    }
}

/// Global l2 norm across a set of tensors.
pub fn global_norm<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    math::sqrt(
        tensors
            .into_iter()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum(),
    )
}

/// One momentum-SGD update: `v <- mu * v + g; theta <- theta - lr_t * v`,
/// after rescaling `g` to the clip norm when configured. Returns the
/// learning rate used.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut OptimizerState) -> Result<f64> {
    if params.len() != grads.len() || params.len() != state.momentum_buffers.len() {
        return Err(invalid!(
            "{} parameters, {} gradients, {} momentum buffers",
            params.len(),
            grads.len(),
            state.momentum_buffers.len()
        ));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(&state.momentum_buffers) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::ShapeMismatch {
                context: "sgd step",
                expected: p.shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
    }
    let mut clip_scale = 1.0;
    if let Some(limit) = state.clip_global_norm {
        let norm = global_norm(grads.iter().copied());
        if norm > limit {
            clip_scale = limit / norm;
        }
    }
    let lr = state.current_lr();
    let mu = state.momentum;
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.momentum_buffers.iter_mut()) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = mu * *vv + gv * clip_scale;
            *pv -= lr * *vv;
        }
    }
    state.step_index += 1;
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn state_for(p: &Tensor, lr: f64, mu: f64, clip: Option<f64>) -> OptimizerState {
        OptimizerState::new([p], LrSchedule::constant(lr), mu, clip).unwrap()
    }

    #[test]
    fn plain_step() {
        let mut p = Tensor::vector(&[1.0]);
        let g = Tensor::vector(&[2.0]);
        let mut s = state_for(&p, 0.1, 0.0, None);
        sgd_step(&mut [&mut p], &[&g], &mut s).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(s.step_index, 1);
    }

    #[test]
    fn momentum_recursion() {
        let mut p = Tensor::vector(&[0.0]);
        let g = Tensor::vector(&[1.0]);
        let mut s = state_for(&p, 1.0, 0.9, None);
        sgd_step(&mut [&mut p], &[&g], &mut s).unwrap();
        assert_eq!(s.momentum_buffers[0].data()[0], 1.0);
        assert_eq!(p.data()[0], -1.0);
        sgd_step(&mut [&mut p], &[&g], &mut s).unwrap();
        assert!((s.momentum_buffers[0].data()[0] - 1.9).abs() < 1e-15);
        assert!((p.data()[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn clipping_halves_norm_two() {
        let mut p = Tensor::vector(&[0.0, 0.0]);
        // global norm 2
        let g = Tensor::vector(&[libm::sqrt(2.0), libm::sqrt(2.0)]);
        let mut s = state_for(&p, 1.0, 0.0, Some(1.0));
        sgd_step(&mut [&mut p], &[&g], &mut s).unwrap();
        let expected = -libm::sqrt(2.0) / 2.0;
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!((global_norm([&p]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule {
            base_lr: 0.1,
            warmup_steps: 10,
            total_steps: 100,
        };
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(5), 0.05);
        assert_eq!(s.lr_at(10), 0.1);
        assert!(s.lr_at(99) <= 1e-9 * 0.1);
        for t in 0..120 {
            assert!(s.lr_at(t) >= 0.0);
        }
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut p = Tensor::vector(&[0.0, 0.0]);
        let g = Tensor::vector(&[1.0]);
        let mut s = OptimizerState::new(vec![&p], LrSchedule::constant(0.1), 0.0, None).unwrap();
        assert!(sgd_step(&mut [&mut p], &[&g], &mut s).is_err());
    }
}

//! AdamW with linear warmup, cosine decay and global-norm gradient clipping.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::ParamMap;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Linear warmup to `peak_lr`, then half-cosine decay to zero at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSpec {
    pub peak_lr: f64,
    pub warmup: usize,
    pub total: usize,
}

impl ScheduleSpec {
    pub fn new(peak_lr: f64, warmup: usize, total: usize) -> Result<Self> {
        if !(peak_lr.is_finite() && peak_lr > 0.0) {
            return Err(Error::InvalidArgument(format!("peak learning rate {peak_lr}")));
        }
        if warmup == 0 || warmup >= total {
            return Err(Error::InvalidArgument(format!(
                "schedule needs 0 < warmup ({warmup}) < total ({total})"
            )));
        }
        Ok(Self { peak_lr, warmup, total })
    }

    /// Like [`ScheduleSpec::new`], but shortens a warmup that would not fit
    /// in `total` steps to a tenth of the run (at least one step).
    pub fn fitted(peak_lr: f64, warmup: usize, total: usize) -> Result<Self> {
        let warmup = if warmup == 0 || warmup >= total {
            (total / 10).max(1)
        } else {
            warmup
        };
        Self::new(peak_lr, warmup, total)
    }

    pub fn lr_at_step(&self, t: usize) -> Result<f64> {
        if t > self.total {
            return Err(Error::InvalidArgument(format!(
                "step {t} beyond schedule end {}",
                self.total
            )));
        }
        if t < self.warmup {
            return Ok(self.peak_lr * t as f64 / self.warmup as f64);
        }
        let progress = (t - self.warmup) as f64 / (self.total - self.warmup) as f64;
        Ok(self.peak_lr * 0.5 * (1.0 + (PI * progress).cos()))
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &ParamMap, max_norm: f64) -> Result<ParamMap> {
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    let norm = grads.global_norm();
    if norm <= max_norm {
        return Ok(grads.clone());
    }
    Ok(grads.map(|g| g * max_norm / norm))
}

#[derive(Debug, Clone)]
pub struct OptState {
    pub step: u64,
    pub m: ParamMap,
    pub v: ParamMap,
    pub weight_decay: f64,
}

impl OptState {
    pub fn new(params: &ParamMap, weight_decay: f64) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
            weight_decay,
        }
    }
}

/// One decoupled-weight-decay Adam update of every tensor in `params`:
///
/// ```text
/// m ← β1 m + (1−β1) g        v ← β2 v + (1−β2) g²
/// θ ← θ − lr (m̂ / (√v̂ + ε) + wd θ)
/// ```
///
/// with bias-corrected `m̂`, `v̂`.
pub fn adamw_step(params: &mut ParamMap, grads: &ParamMap, state: &mut OptState, lr: f64) -> Result<()> {
    params.check_compatible(grads)?;
    params.check_compatible(&state.m)?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let wd = state.weight_decay;

    let mut next = params.clone();
    for (((name, theta), (_, g)), ((_, m), (_, v))) in next
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let theta = theta.data_mut();
        for (((th, &gi), mi), vi) in theta.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
            *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *th -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + wd * *th);
            if !th.is_finite() {
                return Err(Error::NonFinite(format!("AdamW update of `{name}`")));
            }
        }
    }
    *params = next;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn sched() -> ScheduleSpec {
        ScheduleSpec::new(3e-4, 50, 450).unwrap()
    }

    #[test]
    fn schedule_landmarks() {
        let s = sched();
        assert_eq!(s.lr_at_step(0).unwrap(), 0.0);
        assert_eq!(s.lr_at_step(50).unwrap(), 3e-4);
        assert_eq!(s.lr_at_step(450).unwrap(), 0.0);
        assert_eq!(s.lr_at_step(250).unwrap(), 0.5 * 3e-4);
        assert!(s.lr_at_step(451).is_err());
    }

    #[test]
    fn schedule_is_continuous_and_decays() {
        let s = sched();
        let before = s.lr_at_step(49).unwrap();
        assert!((s.lr_at_step(50).unwrap() - before) <= 3e-4 / 50.0 + 1e-18);
        let mut prev = f64::INFINITY;
        for t in 50..=450 {
            let lr = s.lr_at_step(t).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(ScheduleSpec::new(1e-3, 0, 10).is_err());
        assert!(ScheduleSpec::new(1e-3, 10, 10).is_err());
        assert!(ScheduleSpec::new(0.0, 1, 10).is_err());
        assert_eq!(ScheduleSpec::fitted(1e-3, 50, 20).unwrap().warmup, 2);
        assert!(ScheduleSpec::fitted(1e-3, 50, 1).is_err());
    }

    fn one(name: &str, data: Vec<f64>) -> ParamMap {
        let mut p = ParamMap::new();
        p.insert(name, Tensor::vector(data));
        p
    }

    #[test]
    fn clipping() {
        let g = one("g", vec![3.0, 4.0]);
        assert_eq!(clip_global_norm(&g, 1.0).unwrap().get("g").unwrap().data(), &[0.6, 0.8]);
        let small = one("g", vec![0.3, 0.4]);
        assert!(clip_global_norm(&small, 1.0).unwrap().bit_eq(&small));
        let mut zeros = one("a", vec![0.0; 3]);
        zeros.insert("b", Tensor::zeros(&[2, 2]));
        assert!(clip_global_norm(&zeros, 1.0).unwrap().bit_eq(&zeros));
        assert!(clip_global_norm(&one("g", vec![f64::NAN]), 1.0).is_err());
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = one("w", vec![1.5, -2.0]);
        let before = p.clone();
        let mut st = OptState::new(&p, 0.0);
        let z = p.zeros_like();
        adamw_step(&mut p, &z, &mut st, 0.1).unwrap();
        assert!(p.bit_eq(&before));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn pure_decay() {
        let mut p = one("w", vec![2.0, -4.0]);
        let mut st = OptState::new(&p, 0.1);
        let z = p.zeros_like();
        adamw_step(&mut p, &z, &mut st, 0.01).unwrap();
        assert_eq!(
            p.get("w").unwrap().data(),
            &[2.0 - 0.01 * (0.1 * 2.0), -4.0 - 0.01 * (0.1 * -4.0)]
        );
    }

    #[test]
    fn decay_is_decoupled_from_moments() {
        let history = [one("w", vec![0.7]), one("w", vec![-0.2]), one("w", vec![0.0])];
        let run = |wd: f64| {
            let mut p = one("w", vec![1.0]);
            let mut st = OptState::new(&p, 0.0);
            for g in &history[..2] {
                adamw_step(&mut p, g, &mut st, 0.05).unwrap();
            }
            let before = p.get("w").unwrap().data()[0];
            st.weight_decay = wd;
            adamw_step(&mut p, &history[2], &mut st, 0.05).unwrap();
            (before, p.get("w").unwrap().data()[0])
        };
        let (b0, a0) = run(0.0);
        let (b1, a1) = run(0.1);
        assert_eq!(b0, b1);
        assert!(((a0 - a1) - 0.05 * 0.1 * b1).abs() < 1e-15);
    }

    #[test]
    fn first_step_by_hand() {
        let mut p = one("w", vec![0.0]);
        let mut st = OptState::new(&p, 0.0);
        adamw_step(&mut p, &one("w", vec![1.0]), &mut st, 0.1).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let expect = -0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p.get("w").unwrap().data()[0] - expect).abs() <= 1e-15);
    }

    #[test]
    fn incompatible_gradients_rejected() {
        let mut p = one("w", vec![0.0]);
        let mut st = OptState::new(&p, 0.0);
        assert!(adamw_step(&mut p, &one("x", vec![1.0]), &mut st, 0.1).is_err());
    }
}

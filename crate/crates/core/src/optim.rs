//! LARS and Nesterov-momentum optimizers, learning-rate scaling rules
//! and the warmup + cosine schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Batch-size to base-learning-rate scaling rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrScaling {
    /// 0.3 * batch / 256
    Linear,
    /// 0.075 * sqrt(batch)
    Sqrt,
}

/// Base learning rate for a batch size under the given scaling rule.
pub fn scaled_base_lr(batch_size: usize, rule: LrScaling) -> f64 {
    match rule {
        LrScaling::Linear => 0.3 * batch_size as f64 / 256.0,
        LrScaling::Sqrt => 0.075 * (batch_size as f64).sqrt(),
    }
}

/// Linear warmup followed by cosine decay without restarts.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
    pub scaling: LrScaling,
}

impl ScheduleConfig {
    pub fn new(base_lr: f64, warmup_epochs: usize, total_epochs: usize, steps_per_epoch: usize) -> Self {
        ScheduleConfig {
            base_lr,
            warmup_epochs,
            total_epochs,
            steps_per_epoch,
            scaling: LrScaling::Linear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::contract(format!(
                "warmup epochs {} exceed total epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }
}

/// Learning rate at a global step.
///
/// Warmup rises linearly from 0 to the base rate; afterwards the rate
/// follows base * (1 + cos(pi * progress)) / 2, hitting exactly the
/// base rate at the warmup boundary and 0 at the final step.
pub fn lr_at(step: usize, config: &ScheduleConfig) -> Result<f64> {
    config.validate()?;
    let warmup = config.warmup_steps();
    let total = config.total_steps();
    if step > total {
        return Err(Error::contract(format!(
            "step {step} beyond schedule of {total} steps"
        )));
    }
    if step < warmup {
        return Ok(config.base_lr * step as f64 / warmup as f64);
    }
    if total == warmup {
        return Ok(config.base_lr);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(config.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Parameter-group metadata the optimizers act on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamKind {
    /// Excluded groups (batch-norm scales/shifts and biases) skip weight
    /// decay and trust-ratio adaptation, receiving plain momentum.
    pub exclude_from_adaptation: bool,
}

impl ParamKind {
    pub fn weight() -> Self {
        ParamKind {
            exclude_from_adaptation: false,
        }
    }

    pub fn bias_or_bn() -> Self {
        ParamKind {
            exclude_from_adaptation: true,
        }
    }
}

/// Per-parameter momentum state plus hyperparameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub momentum: f64,
    pub weight_decay: f64,
    pub trust_coefficient: f64,
    /// Apply the exclusion list (bias/BN) when true.
    pub exclusions_enabled: bool,
    pub step_count: usize,
    buffers: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        OptimizerState {
            momentum,
            weight_decay,
            trust_coefficient: 1.0,
            exclusions_enabled: true,
            step_count: 0,
            buffers: Vec::new(),
        }
    }

    fn buffer(&mut self, index: usize, len: usize) -> &mut Vec<f64> {
        while self.buffers.len() <= index {
            self.buffers.push(Vec::new());
        }
        let buf = &mut self.buffers[index];
        if buf.len() != len {
            *buf = vec![0.0; len];
        }
        buf
    }

    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.buffers
    }

    pub fn restore_buffers(&mut self, buffers: Vec<Vec<f64>>) {
        self.buffers = buffers;
    }
}

/// One LARS step over the parameter list.
///
/// Per layer: g = grad + wd * w, trust ratio eta = |w| / |g| (1 when
/// either norm vanishes), v <- mu * v + eta * lr * g, w <- w - v.
/// Excluded groups use eta = 1 and no weight decay.
pub fn lars_step(
    params: &mut [(&mut Tensor, ParamKind)],
    lr: f64,
    state: &mut OptimizerState,
) -> Result<()> {
    for (index, (param, kind)) in params.iter_mut().enumerate() {
        let Some(grad) = param.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
            return Err(Error::numeric(format!(
                "lars_step: non-finite gradient {bad} in parameter {index}"
            )));
        }
        let excluded = state.exclusions_enabled && kind.exclude_from_adaptation;
        let wd = if excluded { 0.0 } else { state.weight_decay };
        let mut update: Vec<f64> = grad
            .iter()
            .zip(param.data())
            .map(|(g, w)| g + wd * w)
            .collect();
        let eta = if excluded {
            1.0
        } else {
            let wnorm = param.norm();
            let gnorm = update.iter().map(|v| v * v).sum::<f64>().sqrt();
            if wnorm == 0.0 || gnorm == 0.0 {
                1.0
            } else {
                state.trust_coefficient * wnorm / gnorm
            }
        };
        for u in &mut update {
            *u *= eta * lr;
        }
        let momentum = state.momentum;
        let buf = state.buffer(index, update.len());
        for (v, u) in buf.iter_mut().zip(&update) {
            *v = momentum * *v + u;
        }
        let buf = state.buffers[index].clone();
        for (w, v) in param.data_mut().iter_mut().zip(&buf) {
            *w -= v;
        }
    }
    state.step_count += 1;
    Ok(())
}

/// One Nesterov-momentum step: v <- mu * v + g, w <- w - lr (g + mu v).
pub fn nesterov_step(
    params: &mut [(&mut Tensor, ParamKind)],
    lr: f64,
    state: &mut OptimizerState,
) -> Result<()> {
    for (index, (param, kind)) in params.iter_mut().enumerate() {
        let Some(grad) = param.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
            return Err(Error::numeric(format!(
                "nesterov_step: non-finite gradient {bad} in parameter {index}"
            )));
        }
        let excluded = state.exclusions_enabled && kind.exclude_from_adaptation;
        let wd = if excluded { 0.0 } else { state.weight_decay };
        let g: Vec<f64> = grad
            .iter()
            .zip(param.data())
            .map(|(g, w)| g + wd * w)
            .collect();
        let momentum = state.momentum;
        let buf = state.buffer(index, g.len());
        for (v, gi) in buf.iter_mut().zip(&g) {
            *v = momentum * *v + gi;
        }
        let buf = state.buffers[index].clone();
        for ((w, gi), v) in param.data_mut().iter_mut().zip(&g).zip(&buf) {
            *w -= lr * (gi + momentum * v);
        }
    }
    state.step_count += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_rules_match_reference_values() {
        assert!((scaled_base_lr(4096, LrScaling::Linear) - 4.8).abs() < 1e-12);
        assert!((scaled_base_lr(4096, LrScaling::Sqrt) - 4.8).abs() < 1e-12);
        assert!((scaled_base_lr(256, LrScaling::Linear) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn schedule_boundary_values_are_exact() {
        let cfg = ScheduleConfig::new(2.0, 10, 100, 7);
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.0);
        assert_eq!(lr_at(cfg.warmup_steps(), &cfg).unwrap(), 2.0);
        // Decay midpoint: base / 2.
        let mid = cfg.warmup_steps() + (cfg.total_steps() - cfg.warmup_steps()) / 2;
        assert!((lr_at(mid, &cfg).unwrap() - 1.0).abs() < 1e-12);
        // Final step: zero within rounding.
        assert!(lr_at(cfg.total_steps(), &cfg).unwrap().abs() < 1e-12);
        assert!(lr_at(cfg.total_steps() + 1, &cfg).is_err());
    }

    #[test]
    fn schedule_is_continuous_and_non_increasing_after_warmup() {
        let cfg = ScheduleConfig::new(1.5, 3, 20, 5);
        let mut prev = lr_at(cfg.warmup_steps(), &cfg).unwrap();
        for step in cfg.warmup_steps() + 1..=cfg.total_steps() {
            let lr = lr_at(step, &cfg).unwrap();
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
        // Continuity at the boundary: one step before warmup end is close.
        let before = lr_at(cfg.warmup_steps() - 1, &cfg).unwrap();
        assert!((before - cfg.base_lr).abs() < cfg.base_lr / (cfg.warmup_steps() - 1) as f64);
        // Warmup validation.
        assert!(ScheduleConfig::new(1.0, 30, 20, 5).validate().is_err());
    }

    #[test]
    fn lars_zero_gradient_leaves_parameters_unchanged() {
        let mut w = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap().set_requires_grad(true);
        w.accumulate_grad(&[0.0, 0.0, 0.0]);
        let before = w.data().to_vec();
        let mut state = OptimizerState::new(0.9, 0.0);
        lars_step(&mut [(&mut w, ParamKind::weight())], 0.1, &mut state).unwrap();
        assert_eq!(w.data(), before.as_slice());
    }

    #[test]
    fn lars_update_is_gradient_scale_invariant() {
        // With zero momentum and zero weight decay, eta cancels any
        // positive rescaling of the gradient.
        let run = |scale: f64| {
            let mut w = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap().set_requires_grad(true);
            w.accumulate_grad(&[0.6 * scale, -0.8 * scale]);
            let mut state = OptimizerState::new(0.0, 0.0);
            lars_step(&mut [(&mut w, ParamKind::weight())], 0.05, &mut state).unwrap();
            w.data().to_vec()
        };
        let a = run(1.0);
        let b = run(37.5);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn lars_update_magnitude_is_lr_times_weight_norm() {
        // Zero decay, zero momentum: |delta w| = lr * |w|.
        let mut w = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap().set_requires_grad(true);
        w.accumulate_grad(&[0.1, 0.2]);
        let before = w.data().to_vec();
        let mut state = OptimizerState::new(0.0, 0.0);
        lars_step(&mut [(&mut w, ParamKind::weight())], 0.01, &mut state).unwrap();
        let delta: f64 = w
            .data()
            .iter()
            .zip(&before)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let wnorm = (9.0f64 + 16.0).sqrt();
        assert!((delta - 0.01 * wnorm).abs() < 1e-12);
    }

    #[test]
    fn lars_two_step_scalar_trace_matches_hand_computation() {
        // Single scalar parameter w0=2, grads 0.5 then 0.25,
        // lr=0.1, mu=0.5, wd=0.2, trust=1.
        let mut w = Tensor::from_vec(&[1], vec![2.0]).unwrap().set_requires_grad(true);
        let mut state = OptimizerState::new(0.5, 0.2);

        // Step 1: g = 0.5 + 0.2*2 = 0.9; eta = 2/0.9; v = eta*0.1*0.9 = 0.2
        // w = 2 - 0.2 = 1.8
        w.accumulate_grad(&[0.5]);
        lars_step(&mut [(&mut w, ParamKind::weight())], 0.1, &mut state).unwrap();
        assert!((w.data()[0] - 1.8).abs() < 1e-12);

        // Step 2: g = 0.25 + 0.2*1.8 = 0.61; eta = 1.8/0.61;
        // v = 0.5*0.2 + (1.8/0.61)*0.1*0.61 = 0.1 + 0.18 = 0.28
        // w = 1.8 - 0.28 = 1.52
        w.zero_grad();
        w.accumulate_grad(&[0.25]);
        lars_step(&mut [(&mut w, ParamKind::weight())], 0.1, &mut state).unwrap();
        assert!((w.data()[0] - 1.52).abs() < 1e-12);
    }

    #[test]
    fn lars_rejects_non_finite_gradients() {
        let mut w = Tensor::from_vec(&[1], vec![1.0]).unwrap().set_requires_grad(true);
        w.accumulate_grad(&[f64::NAN]);
        let mut state = OptimizerState::new(0.9, 0.0);
        let err = lars_step(&mut [(&mut w, ParamKind::weight())], 0.1, &mut state);
        assert!(matches!(err, Err(Error::Numeric(_))));
    }

    #[test]
    fn excluded_groups_get_plain_momentum() {
        // A BN scale with eta forced to 1 and no decay: update = lr * g.
        let mut w = Tensor::from_vec(&[1], vec![5.0]).unwrap().set_requires_grad(true);
        w.accumulate_grad(&[0.4]);
        let mut state = OptimizerState::new(0.0, 0.3);
        lars_step(&mut [(&mut w, ParamKind::bias_or_bn())], 0.1, &mut state).unwrap();
        assert!((w.data()[0] - (5.0 - 0.1 * 0.4)).abs() < 1e-12);
    }

    #[test]
    fn nesterov_fine_tune_lr_rule() {
        // 0.05 * batch / 256 at batch 4096 gives 0.8.
        let lr = 0.05 * 4096.0 / 256.0;
        assert!((lr - 0.8).abs() < 1e-12);
    }

    #[test]
    fn nesterov_zero_gradient_and_velocity_is_identity() {
        let mut w = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().set_requires_grad(true);
        w.accumulate_grad(&[0.0, 0.0]);
        let before = w.data().to_vec();
        let mut state = OptimizerState::new(0.9, 0.0);
        nesterov_step(&mut [(&mut w, ParamKind::weight())], 0.5, &mut state).unwrap();
        assert_eq!(w.data(), before.as_slice());
    }

    #[test]
    fn nesterov_two_step_scalar_trace_matches_hand_computation() {
        // w0=1, lr=0.1, mu=0.9, grads 1 then 1.
        // v1 = 1; w1 = 1 - 0.1*(1 + 0.9) = 0.81
        // v2 = 0.9 + 1 = 1.9; w2 = 0.81 - 0.1*(1 + 0.9*1.9) = 0.539
        let mut w = Tensor::from_vec(&[1], vec![1.0]).unwrap().set_requires_grad(true);
        let mut state = OptimizerState::new(0.9, 0.0);
        w.accumulate_grad(&[1.0]);
        nesterov_step(&mut [(&mut w, ParamKind::weight())], 0.1, &mut state).unwrap();
        assert!((w.data()[0] - 0.81).abs() < 1e-12);
        w.zero_grad();
        w.accumulate_grad(&[1.0]);
        nesterov_step(&mut [(&mut w, ParamKind::weight())], 0.1, &mut state).unwrap();
        assert!((w.data()[0] - 0.539).abs() < 1e-12);
    }

    #[test]
    fn optimizer_steps_are_deterministic() {
        let run = || {
            let mut w = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap().set_requires_grad(true);
            let mut state = OptimizerState::new(0.9, 1e-6);
            for i in 0..5 {
                w.zero_grad();
                w.accumulate_grad(&[0.1 * i as f64, -0.2, 0.3]);
                lars_step(&mut [(&mut w, ParamKind::weight())], 0.05, &mut state).unwrap();
            }
            w.data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }
}

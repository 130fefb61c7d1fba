use crate::error::{Error, Result};
use crate::nn::ParamVisit;
use crate::numerics::Tensor;
use std::f64::consts::PI;

/// AdamW with linear warmup and cosine decay to zero. Weight decay is
/// decoupled and applied only to tensors of rank ≥ 2 (weights), never to
/// biases, norm affines, or the mask token.
#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl AdamWConfig {
    /// Warmup over the first 10% of steps, then cosine decay.
    pub fn with_schedule(base_lr: f64, weight_decay: f64, total_steps: u64) -> Self {
        AdamWConfig {
            base_lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            warmup_steps: (total_steps as f64 * 0.1).ceil() as u64,
            total_steps,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Tensor<f64>>,
    v: Vec<Tensor<f64>>,
}

impl OptimizerState {
    pub fn new<P: ParamVisit<f64>>(config: AdamWConfig, params: &P) -> Self {
        let mut m = Vec::new();
        let mut v = Vec::new();
        params.visit_learnables(&mut |d| {
            m.push(d.value.zeros_like());
            v.push(d.value.zeros_like());
        });
        OptimizerState {
            config,
            step: 0,
            m,
            v,
        }
    }

    /// Learning rate for a given 0-based step.
    pub fn lr_at(&self, step: u64) -> f64 {
        let c = &self.config;
        if c.warmup_steps > 0 && step < c.warmup_steps {
            return c.base_lr * (step + 1) as f64 / c.warmup_steps as f64;
        }
        let span = c.total_steps.saturating_sub(c.warmup_steps).max(1);
        let progress = (step - c.warmup_steps) as f64 / span as f64;
        c.base_lr * 0.5 * (1.0 + (PI * progress.min(1.0)).cos())
    }

    /// One decoupled-weight-decay adaptive-moment update over all
    /// accumulated adjoints. Returns the learning rate that was applied.
    pub fn apply<P: ParamVisit<f64>>(&mut self, params: &mut P) -> Result<f64> {
        let lr = self.lr_at(self.step);
        let c = self.config.clone();
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let mut i = 0;
        let mut err: Option<Error> = None;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_learnables_mut(&mut |d| {
            if err.is_some() {
                return;
            }
            if i >= ms.len() || ms[i].shape() != d.value.shape() {
                err = Some(Error::config(
                    "optimizer state does not match parameter tree".to_string(),
                ));
                return;
            }
            let decay = if d.value.rank() >= 2 { c.weight_decay } else { 0.0 };
            let m = ms[i].data_mut();
            let v = vs[i].data_mut();
            for ((p, g), (mi, vi)) in d
                .value
                .data_mut()
                .iter_mut()
                .zip(d.grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + c.eps) + decay * *p);
            }
            i += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        self.step += 1;
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LinearParams;

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut p = LinearParams::<f64>::zeros(3, 3);
        for (i, v) in p.weight.value.data_mut().iter_mut().enumerate() {
            *v = i as f64 * 0.1;
        }
        for g in p.weight.grad.data_mut() {
            *g = 1.0;
        }
        let before = p.weight.value.clone();
        let cfg = AdamWConfig {
            base_lr: 0.0,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            warmup_steps: 0,
            total_steps: 10,
        };
        let mut opt = OptimizerState::new(cfg, &p);
        opt.apply(&mut p).unwrap();
        assert_eq!(p.weight.value.data(), before.data());
    }

    #[test]
    fn quadratic_objective_decreases_monotonically_after_warmup() {
        // loss = 0.5‖w − target‖², adjoint = w − target; lr small enough
        // that the cosine-decayed path never overshoots the optimum
        let mut p = LinearParams::<f64>::zeros(2, 2);
        let target = [0.7, -0.3, 0.2, 0.9];
        let cfg = AdamWConfig::with_schedule(0.01, 0.0, 100);
        let warmup = cfg.warmup_steps as usize;
        let mut opt = OptimizerState::new(cfg, &p);
        let mut losses = Vec::new();
        for _ in 0..100 {
            let mut loss = 0.0;
            for (i, g) in p.weight.grad.data_mut().iter_mut().enumerate() {
                let d = p.weight.value.data()[i] - target[i];
                loss += 0.5 * d * d;
                *g = d;
            }
            losses.push(loss);
            opt.apply(&mut p).unwrap();
            p.weight.zero_grad();
            p.bias.zero_grad();
        }
        for w in losses[warmup..].windows(2) {
            assert!(w[1] < w[0], "loss went up after warmup: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn warmup_then_cosine_schedule_shape() {
        let cfg = AdamWConfig::with_schedule(1.0, 0.0, 100);
        let p = LinearParams::<f64>::zeros(1, 1);
        let opt = OptimizerState::new(cfg, &p);
        assert!((opt.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((opt.lr_at(9) - 1.0).abs() < 1e-12);
        assert!(opt.lr_at(50) < 1.0);
        assert!(opt.lr_at(99) < 0.01);
        let mid = opt.lr_at(10 + 45); // halfway through the cosine span
        assert!((mid - 0.5).abs() < 0.01);
    }

    #[test]
    fn weight_decay_skips_rank_one_tensors() {
        let mut p = LinearParams::<f64>::zeros(2, 2);
        for v in p.bias.value.data_mut() {
            *v = 1.0;
        }
        // zero gradients: only decay could move parameters
        let cfg = AdamWConfig {
            base_lr: 0.1,
            weight_decay: 0.5,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            warmup_steps: 0,
            total_steps: 1,
        };
        let mut opt = OptimizerState::new(cfg, &p);
        opt.apply(&mut p).unwrap();
        assert_eq!(p.bias.value.data(), &[1.0, 1.0]);
    }
}

//! Parameter update rules with global-norm gradient clipping.

use super::config::{OptimizerConfig, OptimizerKind};
use crate::error::{NsfError, Result};
use crate::filter::layers::Param;

#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    steps: u64,
    /// Per-parameter first and second moment buffers.
    state: Vec<(Vec<f64>, Vec<f64>)>,
}

/// What one update did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// Global L2 norm of the raw gradient.
    pub grad_norm: f64,
    /// Factor the gradient was multiplied by before the update.
    pub clip_scale: f64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            steps: 0,
            state: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to `params` using their accumulated gradients.
    /// The slice order must be the same on every call.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<StepInfo> {
        if self.state.is_empty() {
            self.state = params.iter().map(|p| (vec![0.0; p.len()], vec![0.0; p.len()])).collect();
        }
        if self.state.len() != params.len() || self.state.iter().zip(params.iter()).any(|(s, p)| s.0.len() != p.len()) {
            return Err(NsfError::ShapeMismatch("parameter set changed between optimizer steps".into()));
        }
        let grad_norm = params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if !grad_norm.is_finite() {
            return Err(NsfError::Diverged {
                step: self.steps as usize,
                loss: grad_norm,
            });
        }
        let clip_scale = if self.cfg.clip_norm > 0.0 && grad_norm > self.cfg.clip_norm {
            self.cfg.clip_norm / grad_norm
        } else {
            1.0
        };
        self.steps += 1;
        let lr = self.cfg.learning_rate;
        let t = self.steps as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (p, (m, v)) in params.iter_mut().zip(&mut self.state) {
            let Param { value, grad, .. } = &mut **p;
            for i in 0..value.len() {
                let g = grad[i] * clip_scale;
                match self.cfg.kind {
                    OptimizerKind::PlainSgd => value[i] -= lr * g,
                    OptimizerKind::Momentum => {
                        m[i] = self.cfg.momentum * m[i] + g;
                        value[i] -= lr * m[i];
                    }
                    OptimizerKind::Adaptive => {
                        m[i] = b1 * m[i] + (1.0 - b1) * g;
                        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                        value[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.cfg.epsilon);
                    }
                }
            }
        }
        Ok(StepInfo { grad_norm, clip_scale })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe(value: f64, grad: f64) -> Param {
        let mut p = Param::zeros(&[1]);
        p.value[0] = value;
        p.grad[0] = grad;
        p
    }

    fn cfg(kind: OptimizerKind, lr: f64) -> OptimizerConfig {
        OptimizerConfig {
            kind,
            learning_rate: lr,
            clip_norm: 0.0,
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn plain_sgd_matches_hand_computation() {
        let mut p = probe(1.5, 0.25);
        let mut opt = Optimizer::new(cfg(OptimizerKind::PlainSgd, 0.1));
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value[0], 1.5 - 0.1 * 0.25);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = probe(0.0, 1.0);
        let mut opt = Optimizer::new(cfg(OptimizerKind::Momentum, 0.1));
        opt.step(&mut [&mut p]).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        // v1 = 1, v2 = 0.9 + 1
        assert!((p.value[0] - -(0.1 + 0.19)).abs() < 1e-15);
    }

    #[test]
    fn adaptive_first_step_is_lr_sized() {
        let mut p = probe(0.0, 123.0);
        let mut opt = Optimizer::new(cfg(OptimizerKind::Adaptive, 0.01));
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.value[0] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn clipping_scales_global_norm() {
        let mut a = probe(0.0, 30.0);
        let mut b = probe(0.0, 40.0);
        let mut opt = Optimizer::new(OptimizerConfig {
            clip_norm: 10.0,
            ..cfg(OptimizerKind::PlainSgd, 1.0)
        });
        let info = opt.step(&mut [&mut a, &mut b]).unwrap();
        assert_eq!(info.grad_norm, 50.0);
        assert!((a.value[0] + 6.0).abs() < 1e-12 && (b.value[0] + 8.0).abs() < 1e-12);
    }

    #[test]
    fn zero_rate_is_a_no_op() {
        let mut p = probe(0.7, 3.0);
        for kind in [OptimizerKind::PlainSgd, OptimizerKind::Momentum, OptimizerKind::Adaptive] {
            let mut opt = Optimizer::new(cfg(kind, 0.0));
            opt.step(&mut [&mut p]).unwrap();
            assert_eq!(p.value[0], 0.7);
        }
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut p = probe(0.0, f64::NAN);
        let mut opt = Optimizer::new(cfg(OptimizerKind::PlainSgd, 0.1));
        assert!(matches!(opt.step(&mut [&mut p]), Err(NsfError::Diverged { .. })));
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::store::ParameterStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adaptive moments with decoupled weight decay.
    AdamW,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &ParameterStore<f32>) -> Self {
        let zeros = || params.iter().map(|(_, p)| vec![0.0f32; p.value.numel()]).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &[f32] {
        &self.first[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f32] {
        &self.second[index]
    }

    /// One update at learning rate `lr` (the caller applies any schedule).
    /// Gradients are left in place. Frozen parameters are skipped.
    pub fn step(&mut self, params: &mut ParameterStore<f32>, lr: f64) -> Result<()> {
        for (name, p) in params.iter() {
            if p.trainable && p.grad.is_none() {
                return Err(TensorError::MissingGrad(name.to_string()));
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let decay = (1.0 - lr * c.weight_decay) as f32;
        let (b1, b2, eps) = (c.beta1 as f32, c.beta2 as f32, c.eps as f32);
        let lr32 = lr as f32;

        for (idx, (_, p)) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.as_ref().expect("checked above");
            let w = p.value.data_mut();
            match c.kind {
                OptimizerKind::Sgd => {
                    for (w, &g) in w.iter_mut().zip(grad) {
                        *w = *w * decay - lr32 * g;
                    }
                }
                OptimizerKind::AdamW => {
                    let (m, v) = (&mut self.first[idx], &mut self.second[idx]);
                    let step1 = (lr / bias1) as f32;
                    let corr2 = (1.0 / bias2.sqrt()) as f32;
                    for k in 0..w.len() {
                        let g = grad[k];
                        m[k] = b1 * m[k] + (1.0 - b1) * g;
                        v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                        let update = step1 * m[k] / (v[k].sqrt() * corr2 + eps);
                        w[k] = w[k] * decay - update;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store() -> ParameterStore<f32> {
        let mut s = ParameterStore::new();
        s.insert("a", Tensor::new(vec![3], vec![1.5, -2.0, 0.25]).unwrap()).unwrap();
        s.insert("b", Tensor::new(vec![1, 2], vec![3.0, -7.125]).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_scales_by_decay_exactly() {
        let (lr, wd) = (1e-2, 0.5);
        let mut s = store();
        let before = s.clone();
        s.zero_grads();
        let mut opt = OptimizerState::new(
            OptimizerConfig {
                lr,
                weight_decay: wd,
                ..Default::default()
            },
            &s,
        );
        opt.step(&mut s, lr).unwrap();
        let factor = (1.0 - lr * wd) as f32;
        for ((_, p0), (_, p1)) in before.iter().zip(s.iter()) {
            for (&x0, &x1) in p0.value.data().iter().zip(p1.value.data()) {
                assert_eq!(x1, x0 * factor);
            }
        }
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut s = store();
        s.accumulate_grad("a", &[1.0, 2.0, 3.0], 1.0).unwrap();
        s.accumulate_grad("b", &[-1.0, 0.5], 1.0).unwrap();
        let before = s.clone();
        let mut opt = OptimizerState::new(OptimizerConfig::default(), &s);
        for _ in 0..5 {
            opt.step(&mut s, 0.0).unwrap();
        }
        assert!(s.values_equal(&before));
        assert_eq!(opt.step_count(), 5);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut s = store();
        let mut opt = OptimizerState::new(OptimizerConfig::default(), &s);
        let err = opt.step(&mut s, 1e-3).unwrap_err();
        assert!(matches!(err, TensorError::MissingGrad(ref n) if n == "a"));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn first_step_moves_against_gradient_by_lr() {
        // With bias correction the first AdamW step has magnitude ~lr.
        let mut s = store();
        s.accumulate_grad("a", &[1.0, -1.0, 4.0], 1.0).unwrap();
        s.accumulate_grad("b", &[0.0, 0.0], 1.0).unwrap();
        let before = s.clone();
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(cfg, &s);
        opt.step(&mut s, 0.1).unwrap();
        let a0 = before.value("a").unwrap().data();
        let a1 = s.value("a").unwrap().data();
        for (k, sign) in [(0, -1.0f32), (1, 1.0), (2, -1.0)] {
            assert!(((a1[k] - a0[k]) - sign * 0.1).abs() < 1e-5);
        }
    }

    #[test]
    fn identical_runs_bitwise_equal() {
        let run = || {
            let mut s = store();
            let mut opt = OptimizerState::new(OptimizerConfig::default(), &s);
            for i in 0..20 {
                s.zero_grads();
                let x = i as f32 * 0.37;
                s.accumulate_grad("a", &[x.sin(), x.cos(), -x], 1.0).unwrap();
                s.accumulate_grad("b", &[x * x, 1.0 / (1.0 + x)], 1.0).unwrap();
                opt.step(&mut s, 1e-2).unwrap();
            }
            s
        };
        assert!(run().values_equal(&run()));
    }

    #[test]
    fn frozen_params_untouched() {
        let mut s = store();
        s.set_trainable("b", false).unwrap();
        s.accumulate_grad("a", &[1.0, 1.0, 1.0], 1.0).unwrap();
        let before = s.clone();
        let mut opt = OptimizerState::new(OptimizerConfig::default(), &s);
        opt.step(&mut s, 1e-2).unwrap();
        assert_eq!(s.value("b").unwrap(), before.value("b").unwrap());
        assert_ne!(s.value("a").unwrap(), before.value("a").unwrap());
    }
}

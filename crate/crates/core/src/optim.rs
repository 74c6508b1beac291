//! AdamW optimizer and training-run records.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optimizer hyperparameters; the defaults follow the training setup used
/// throughout: betas (0.9, 0.999), epsilon 1e-8, weight decay 0.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// One training stage's run settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        // iterations == 0 is allowed: it runs no updates, which several
        // initialization contracts rely on.
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }
}

struct ParamState {
    tensor: Tensor,
    /// Restrict the update to one row of a 2-D parameter (textual inversion
    /// trains a single vocabulary row).
    row: Option<usize>,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW over an explicit list of trainable tensors. Parameters not handed
/// to the optimizer are never touched, which is what keeps frozen weights
/// bit-exact across training stages.
pub struct AdamW {
    lr: f64,
    cfg: AdamConfig,
    step: u64,
    params: Vec<ParamState>,
}

impl AdamW {
    pub fn new(params: Vec<Tensor>, lr: f64, cfg: AdamConfig) -> AdamW {
        let params = params
            .into_iter()
            .map(|tensor| {
                let n = tensor.numel();
                ParamState { tensor, row: None, m: vec![0.0; n], v: vec![0.0; n] }
            })
            .collect();
        AdamW { lr, cfg, step: 0, params }
    }

    /// Optimize a single row of a 2-D table.
    pub fn new_row_masked(table: Tensor, row: usize, lr: f64, cfg: AdamConfig) -> AdamW {
        let n = table.numel();
        AdamW {
            lr,
            cfg,
            step: 0,
            params: vec![ParamState { tensor: table, row: Some(row), m: vec![0.0; n], v: vec![0.0; n] }],
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Apply one update from accumulated gradients, then clear them.
    pub fn step(&mut self) {
        self.step += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        for p in &mut self.params {
            let Some(mut grad) = p.tensor.grad() else { continue };
            if let Some(row) = p.row {
                let cols = p.tensor.shape()[1];
                for (i, g) in grad.iter_mut().enumerate() {
                    if i / cols != row {
                        *g = 0.0;
                    }
                }
            }
            let (lr, cfg) = (self.lr, self.cfg);
            let (m, v) = (&mut p.m, &mut p.v);
            p.tensor.with_data_mut(|data| {
                for i in 0..data.len() {
                    let g = grad[i];
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    let update = mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * data[i];
                    // A fully masked/zero-gradient element has m = v = 0 and
                    // must stay bit-identical.
                    if m[i] != 0.0 || v[i] != 0.0 || cfg.weight_decay != 0.0 {
                        data[i] -= lr * update;
                    }
                }
            });
            p.tensor.zero_grad();
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.tensor.zero_grad();
        }
    }
}

/// One logged training step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainStep {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Line-delimited training log.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<TrainStep>,
}

impl TrainLog {
    pub fn push(&mut self, step: usize, loss: f64, lr: f64, wall_ms: u64) {
        self.steps.push(TrainStep { step, loss, lr, wall_ms });
    }

    /// Mean loss over the first `window` steps.
    pub fn initial_loss(&self, window: usize) -> f64 {
        let n = window.min(self.steps.len()).max(1);
        self.steps.iter().take(n).map(|s| s.loss).sum::<f64>() / n as f64
    }

    /// Mean loss over the last `window` steps.
    pub fn final_loss(&self, window: usize) -> f64 {
        let n = window.min(self.steps.len()).max(1);
        self.steps.iter().rev().take(n).map(|s| s.loss).sum::<f64>() / n as f64
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("train step serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &std::path::Path) -> Result<()> {
        crate::storage::write_atomic(path, self.to_jsonl().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        // f(x) = sum((x - 3)^2) has minimum at 3.
        let x = Tensor::param(vec![0.0, 10.0], &[2]);
        let mut opt = AdamW::new(vec![x.clone()], 0.1, AdamConfig::default());
        for _ in 0..500 {
            let t = Tensor::full(&[2], 3.0);
            let d = x.sub(&t);
            let loss = d.mul(&d).sum_all();
            loss.backward();
            opt.step();
        }
        for v in x.to_vec() {
            assert!((v - 3.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn row_masked_update_touches_one_row() {
        let table = Tensor::param(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
        let before = table.to_vec();
        let mut opt = AdamW::new_row_masked(table.clone(), 1, 0.05, AdamConfig::default());
        for _ in 0..10 {
            let looked = table.gather_rows(&[0, 1, 2]);
            let loss = looked.mul(&looked).sum_all();
            loss.backward();
            opt.step();
        }
        let after = table.to_vec();
        assert_eq!(after[0..2], before[0..2], "row 0 must be bit-identical");
        assert_eq!(after[4..6], before[4..6], "row 2 must be bit-identical");
        assert_ne!(after[2..4], before[2..4], "row 1 must train");
    }

    #[test]
    fn deterministic_given_same_grads() {
        let run = || {
            let x = Tensor::param(vec![0.5, -0.25], &[2]);
            let mut opt = AdamW::new(vec![x.clone()], 0.01, AdamConfig::default());
            for _ in 0..20 {
                let loss = x.mul(&x).mul(&x).sum_all();
                loss.backward();
                opt.step();
            }
            x.to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn log_windows() {
        let mut log = TrainLog::default();
        for i in 0..100 {
            log.push(i, 100.0 - i as f64, 0.1, 0);
        }
        assert!(log.initial_loss(10) > log.final_loss(10));
        assert_eq!(log.initial_loss(1), 100.0);
        assert_eq!(log.final_loss(1), 1.0);
    }
}

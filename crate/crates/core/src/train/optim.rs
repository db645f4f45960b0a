use serde::{Deserialize, Serialize};

use crate::params::{Grads, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Final learning rate as a fraction of the initial one.
    pub min_lr_ratio: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Rescale gradients whose global norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            min_lr_ratio: 0.0,
            warmup_steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(5.0),
        }
    }
}

impl OptimizerConfig {
    /// Linear warmup, then cosine decay from `learning_rate` to
    /// `learning_rate · min_lr_ratio` at `total_steps`.
    pub fn learning_rate_at(&self, step: usize, total_steps: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = self.learning_rate * self.min_lr_ratio;
        floor + 0.5 * (self.learning_rate - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    config: OptimizerConfig,
    first: Vec<Mat>,
    second: Vec<Mat>,
    steps: u64,
}

impl Adam {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store
            .iter()
            .map(|(_, _, m)| Mat::zeros(m.rows, m.cols))
            .collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    /// Clips `grads` in place if configured and returns the pre-clip global norm.
    pub fn clip(&self, grads: &mut Grads) -> f64 {
        let norm = grads.global_norm();
        if let Some(max) = self.config.clip_norm {
            if norm > max {
                grads.scale_in_place(max / norm);
            }
        }
        norm
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.steps += 1;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bias2 = 1.0 - c.beta2.powi(self.steps as i32);
        for (k, value) in store.values_mut().enumerate() {
            let g = &grads.values[k];
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for i in 0..value.data.len() {
                let gi = g.data[i];
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
                let update = (m.data[i] / bias1) / ((v.data[i] / bias2).sqrt() + c.epsilon);
                value.data[i] -= lr * (update + c.weight_decay * value.data[i]);
            }
        }
    }
}

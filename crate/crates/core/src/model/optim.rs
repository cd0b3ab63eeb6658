use serde::{Deserialize, Serialize};

use super::params::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup to the base rate, then decay with the inverse square
    /// root of the step.
    InverseSqrt {
        warmup_steps: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
    /// Rescale the gradient when its global L2 norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            schedule: LrSchedule::Constant,
            clip_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::InverseSqrt { warmup_steps } => {
                let s = step.max(1) as f64;
                let w = warmup_steps.max(1) as f64;
                if s < w {
                    self.lr * s / w
                } else {
                    self.lr * (w / s).sqrt()
                }
            }
        }
    }
}

pub struct Adam {
    config: AdamConfig,
    m: ModelParams,
    v: ModelParams,
    step: usize,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ModelParams) -> Self {
        Adam {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.step += 1;
        let c = &self.config;
        let clip = match c.clip_norm {
            Some(max) => {
                let norm = grads
                    .tensors()
                    .iter()
                    .map(|(_, t)| t.sq_norm())
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let lr = c.lr_at(self.step);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let gs = grads.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((_, p), (_, g)), (_, m)), (_, v)) in
            params.tensors_mut().into_iter().zip(gs).zip(ms).zip(vs)
        {
            for i in 0..p.data.len() {
                let gi = g.data[i] * clip;
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_schedule() {
        let c = AdamConfig {
            lr: 1.0,
            schedule: LrSchedule::InverseSqrt { warmup_steps: 4 },
            ..Default::default()
        };
        assert_eq!(c.lr_at(2), 0.5);
        assert_eq!(c.lr_at(4), 1.0);
        assert_eq!(c.lr_at(16), 0.5);
        assert_eq!(AdamConfig::default().lr_at(100), 5e-4);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let cfg = super::super::ModelConfig {
            d_model: 4,
            n_heads: 1,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            d_ff: 4,
            vocab_size: 10,
            max_positions: 8,
            dropout_rate: 0.0,
        };
        let mut p = ModelParams::init(&cfg, 0).unwrap();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.embedding.data[0] = 3.0;
        g.embedding.data[1] = -0.5;
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.update(&mut p, &g);
        let lr = AdamConfig::default().lr;
        assert!((before.embedding.data[0] - p.embedding.data[0] - lr).abs() < 1e-9);
        assert!((p.embedding.data[1] - before.embedding.data[1] - lr).abs() < 1e-9);
        assert_eq!(p.embedding.data[2], before.embedding.data[2]);
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Mat;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout_rate: f64,
}

impl ModelConfig {
    /// Desk-scale defaults for a given vocabulary.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            d_ff: 256,
            vocab_size,
            max_positions: 512,
            dropout_rate: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout_rate must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Mat,
    pub bias: Mat,
}

/// Multi-head attention projections. The key projection has no bias: a key
/// bias only shifts every score in a row by the same amount and cancels in
/// the softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Mat,
    pub bq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub bv: Mat,
    pub wo: Mat,
    pub bo: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardParams {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams {
    pub norm1: LayerNormParams,
    pub self_attn: AttentionParams,
    pub norm2: LayerNormParams,
    pub ffn: FeedForwardParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerParams {
    pub norm1: LayerNormParams,
    pub self_attn: AttentionParams,
    pub norm2: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub norm3: LayerNormParams,
    pub ffn: FeedForwardParams,
}

/// All weights of the encoder-decoder. The output projection is the
/// transposed token embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embedding: Mat,
    pub encoder: Vec<EncoderLayerParams>,
    pub encoder_norm: LayerNormParams,
    pub decoder: Vec<DecoderLayerParams>,
    pub decoder_norm: LayerNormParams,
    /// Fixed sinusoidal encodings, `max_positions x d_model`. Not trained.
    pub positions: Mat,
}

pub fn sinusoidal_positions(max_positions: usize, d_model: usize) -> Mat {
    let mut m = Mat::zeros(max_positions, d_model);
    for pos in 0..max_positions {
        for i in 0..d_model {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
            m.data[pos * d_model + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    m
}

struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    fn weight(&mut self, fan_in: usize, fan_out: usize) -> Mat {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        Mat::from_vec(fan_in, fan_out, data)
    }

    fn norm(&mut self, d: usize) -> LayerNormParams {
        LayerNormParams {
            gain: Mat::from_vec(1, d, vec![1.0; d]),
            bias: Mat::zeros(1, d),
        }
    }

    fn attention(&mut self, d: usize) -> AttentionParams {
        AttentionParams {
            wq: self.weight(d, d),
            bq: Mat::zeros(1, d),
            wk: self.weight(d, d),
            wv: self.weight(d, d),
            bv: Mat::zeros(1, d),
            wo: self.weight(d, d),
            bo: Mat::zeros(1, d),
        }
    }

    fn ffn(&mut self, d: usize, ff: usize) -> FeedForwardParams {
        FeedForwardParams {
            w1: self.weight(d, ff),
            b1: Mat::zeros(1, ff),
            w2: self.weight(ff, d),
            b2: Mat::zeros(1, d),
        }
    }
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let d = config.d_model;
        let embedding = init.weight(d, config.vocab_size);
        // Stored as vocab x d; drawn with the d fan-in bound.
        let embedding = Mat::from_vec(config.vocab_size, d, embedding.data);
        let encoder = (0..config.n_encoder_layers)
            .map(|_| EncoderLayerParams {
                norm1: init.norm(d),
                self_attn: init.attention(d),
                norm2: init.norm(d),
                ffn: init.ffn(d, config.d_ff),
            })
            .collect();
        let encoder_norm = init.norm(d);
        let decoder = (0..config.n_decoder_layers)
            .map(|_| DecoderLayerParams {
                norm1: init.norm(d),
                self_attn: init.attention(d),
                norm2: init.norm(d),
                cross_attn: init.attention(d),
                norm3: init.norm(d),
                ffn: init.ffn(d, config.d_ff),
            })
            .collect();
        let decoder_norm = init.norm(d);
        Ok(ModelParams {
            config: config.clone(),
            embedding,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            positions: sinusoidal_positions(config.max_positions, d),
        })
    }

    /// Same shapes, every trainable value zero. Used for gradients and
    /// optimizer moments.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Trainable tensors with stable names, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> = vec![("embedding".into(), &self.embedding)];
        for (i, l) in self.encoder.iter().enumerate() {
            let p = format!("encoder.{i}");
            push_norm(&mut out, &format!("{p}.norm1"), &l.norm1);
            push_attn(&mut out, &format!("{p}.self_attn"), &l.self_attn);
            push_norm(&mut out, &format!("{p}.norm2"), &l.norm2);
            push_ffn(&mut out, &format!("{p}.ffn"), &l.ffn);
        }
        push_norm(&mut out, "encoder_norm", &self.encoder_norm);
        for (i, l) in self.decoder.iter().enumerate() {
            let p = format!("decoder.{i}");
            push_norm(&mut out, &format!("{p}.norm1"), &l.norm1);
            push_attn(&mut out, &format!("{p}.self_attn"), &l.self_attn);
            push_norm(&mut out, &format!("{p}.norm2"), &l.norm2);
            push_attn(&mut out, &format!("{p}.cross_attn"), &l.cross_attn);
            push_norm(&mut out, &format!("{p}.norm3"), &l.norm3);
            push_ffn(&mut out, &format!("{p}.ffn"), &l.ffn);
        }
        push_norm(&mut out, "decoder_norm", &self.decoder_norm);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out: Vec<(String, &mut Mat)> = vec![("embedding".into(), &mut self.embedding)];
        for (i, l) in self.encoder.iter_mut().enumerate() {
            let p = format!("encoder.{i}");
            push_norm_mut(&mut out, &format!("{p}.norm1"), &mut l.norm1);
            push_attn_mut(&mut out, &format!("{p}.self_attn"), &mut l.self_attn);
            push_norm_mut(&mut out, &format!("{p}.norm2"), &mut l.norm2);
            push_ffn_mut(&mut out, &format!("{p}.ffn"), &mut l.ffn);
        }
        push_norm_mut(&mut out, "encoder_norm", &mut self.encoder_norm);
        for (i, l) in self.decoder.iter_mut().enumerate() {
            let p = format!("decoder.{i}");
            push_norm_mut(&mut out, &format!("{p}.norm1"), &mut l.norm1);
            push_attn_mut(&mut out, &format!("{p}.self_attn"), &mut l.self_attn);
            push_norm_mut(&mut out, &format!("{p}.norm2"), &mut l.norm2);
            push_attn_mut(&mut out, &format!("{p}.cross_attn"), &mut l.cross_attn);
            push_norm_mut(&mut out, &format!("{p}.norm3"), &mut l.norm3);
            push_ffn_mut(&mut out, &format!("{p}.ffn"), &mut l.ffn);
        }
        push_norm_mut(&mut out, "decoder_norm", &mut self.decoder_norm);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// `self += other * scale`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        let src = other.tensors();
        for ((_, dst), (_, s)) in self.tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.data.iter_mut().zip(&s.data) {
                *d += v * scale;
            }
        }
    }

    /// Parameter-wise arithmetic mean of several checkpoints.
    pub fn average(snapshots: &[ModelParams]) -> Result<ModelParams> {
        let first = snapshots
            .first()
            .ok_or_else(|| Error::invalid("no checkpoints to average"))?;
        let mut acc = first.zeros_like();
        for s in snapshots {
            if s.config != first.config {
                return Err(Error::Shape("checkpoints have different configs".into()));
            }
            acc.add_scaled(s, 1.0 / snapshots.len() as f64);
        }
        Ok(acc)
    }
}

fn push_norm<'a>(out: &mut Vec<(String, &'a Mat)>, p: &str, n: &'a LayerNormParams) {
    out.push((format!("{p}.gain"), &n.gain));
    out.push((format!("{p}.bias"), &n.bias));
}

fn push_attn<'a>(out: &mut Vec<(String, &'a Mat)>, p: &str, a: &'a AttentionParams) {
    out.push((format!("{p}.wq"), &a.wq));
    out.push((format!("{p}.bq"), &a.bq));
    out.push((format!("{p}.wk"), &a.wk));
    out.push((format!("{p}.wv"), &a.wv));
    out.push((format!("{p}.bv"), &a.bv));
    out.push((format!("{p}.wo"), &a.wo));
    out.push((format!("{p}.bo"), &a.bo));
}

fn push_ffn<'a>(out: &mut Vec<(String, &'a Mat)>, p: &str, f: &'a FeedForwardParams) {
    out.push((format!("{p}.w1"), &f.w1));
    out.push((format!("{p}.b1"), &f.b1));
    out.push((format!("{p}.w2"), &f.w2));
    out.push((format!("{p}.b2"), &f.b2));
}

fn push_norm_mut<'a>(out: &mut Vec<(String, &'a mut Mat)>, p: &str, n: &'a mut LayerNormParams) {
    out.push((format!("{p}.gain"), &mut n.gain));
    out.push((format!("{p}.bias"), &mut n.bias));
}

fn push_attn_mut<'a>(out: &mut Vec<(String, &'a mut Mat)>, p: &str, a: &'a mut AttentionParams) {
    out.push((format!("{p}.wq"), &mut a.wq));
    out.push((format!("{p}.bq"), &mut a.bq));
    out.push((format!("{p}.wk"), &mut a.wk));
    out.push((format!("{p}.wv"), &mut a.wv));
    out.push((format!("{p}.bv"), &mut a.bv));
    out.push((format!("{p}.wo"), &mut a.wo));
    out.push((format!("{p}.bo"), &mut a.bo));
}

fn push_ffn_mut<'a>(out: &mut Vec<(String, &'a mut Mat)>, p: &str, f: &'a mut FeedForwardParams) {
    out.push((format!("{p}.w1"), &mut f.w1));
    out.push((format!("{p}.b1"), &mut f.b1));
    out.push((format!("{p}.w2"), &mut f.w2));
    out.push((format!("{p}.b2"), &mut f.b2));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::desk(20);
        c.validate().unwrap();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(20);
        c.dropout_rate = 1.0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(0);
        c.vocab_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_seeded_and_named_uniquely() {
        let c = ModelConfig::desk(30);
        let a = ModelParams::init(&c, 3).unwrap();
        assert_eq!(a, ModelParams::init(&c, 3).unwrap());
        assert_ne!(a, ModelParams::init(&c, 4).unwrap());
        let names: std::collections::HashSet<_> = a.tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), a.tensors().len());
        assert!(a.is_finite());
    }

    #[test]
    fn averaging_is_elementwise_mean() {
        let c = ModelConfig::desk(10);
        let a = ModelParams::init(&c, 1).unwrap();
        let b = ModelParams::init(&c, 2).unwrap();
        let avg = ModelParams::average(&[a.clone(), b.clone()]).unwrap();
        let i = 17;
        assert!(
            (avg.embedding.data[i] - 0.5 * (a.embedding.data[i] + b.embedding.data[i])).abs()
                < 1e-15
        );
        assert!(ModelParams::average(&[]).is_err());
    }
}

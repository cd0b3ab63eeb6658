//! Desk-scale transformer encoder-decoder trained with a target-masked
//! likelihood: only output positions after `[Output]` contribute to the loss,
//! while the knowledge prefix before it is still visible to the decoder.

mod batch;
mod checkpoint;
mod optim;
mod params;
pub mod tensor;
mod train;
mod transformer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub use batch::{example_nll, loss, shift_right, Batch, EncodedExample};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use optim::{Adam, AdamConfig, LrSchedule};
pub use params::{
    sinusoidal_positions, AttentionParams, DecoderLayerParams, EncoderLayerParams,
    FeedForwardParams, LayerNormParams, ModelConfig, ModelParams,
};
pub use tensor::Mat;
pub use train::{train, train_two_stage, EpochStats, TrainConfig, TrainOutcome};
pub use transformer::{backward_tape, encode, forward_tape, DecoderState, Tape};

/// Examples handled by one parallel task. Fixed so that the order of
/// floating-point accumulation does not depend on the thread count.
const GRAD_CHUNK: usize = 4;

fn check_ids(params: &ModelParams, batch: &Batch) -> Result<()> {
    let cfg = &params.config;
    for r in 0..batch.len() {
        let (input, output, _) = batch.row(r);
        if input.len() > cfg.max_positions || output.len() > cfg.max_positions {
            return Err(Error::Shape(format!(
                "example {}: sequence longer than max_positions {}",
                batch.ids[r], cfg.max_positions
            )));
        }
        if let Some(bad) = input
            .iter()
            .chain(output)
            .find(|&&t| t as usize >= cfg.vocab_size)
        {
            return Err(Error::Shape(format!(
                "example {}: token id {bad} outside vocabulary of {}",
                batch.ids[r], cfg.vocab_size
            )));
        }
    }
    Ok(())
}

/// Logits for every valid output position of every example,
/// `output_len x vocab` each. Row `j` is the distribution of output token
/// `j` given the input and output tokens before `j`.
pub fn forward(params: &ModelParams, batch: &Batch) -> Result<Vec<Mat>> {
    check_ids(params, batch)?;
    Ok((0..batch.len())
        .into_par_iter()
        .map(|r| {
            let (input, output, _) = batch.row(r);
            forward_tape(params, input, &shift_right(output), None).logits
        })
        .collect())
}

/// Loss and its gradient with respect to every parameter, without dropout.
pub fn gradients(params: &ModelParams, batch: &Batch) -> Result<(f64, ModelParams)> {
    gradients_inner(params, batch, None)
}

/// With `dropout_seed`, example `i` draws its dropout masks from a stream
/// seeded by `dropout_seed + i`.
pub(crate) fn gradients_inner(
    params: &ModelParams,
    batch: &Batch,
    dropout_seed: Option<u64>,
) -> Result<(f64, ModelParams)> {
    check_ids(params, batch)?;
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let rows: Vec<usize> = (0..batch.len()).collect();
    let partials: Vec<Result<(f64, ModelParams)>> = rows
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = params.zeros_like();
            let mut total = 0.0;
            for &r in chunk {
                let (input, output, mask) = batch.row(r);
                let mut rng =
                    dropout_seed.map(|s| ChaCha8Rng::seed_from_u64(s.wrapping_add(r as u64)));
                let tape = forward_tape(params, input, &shift_right(output), rng.as_mut());
                let (l, dlogits) =
                    example_nll(&tape.logits, output, mask).map_err(|e| Error::Record {
                        id: batch.ids[r],
                        message: e.to_string(),
                    })?;
                total += l;
                backward_tape(params, &tape, &dlogits, &mut g);
            }
            Ok((total, g))
        })
        .collect();
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for p in partials {
        let (l, g) = p?;
        total += l;
        grads.add_scaled(&g, scale);
    }
    Ok((total * scale, grads))
}

#[cfg(test)]
pub(crate) mod tests {
    use rand::Rng;

    use super::*;
    use crate::corpus::special;

    pub(crate) fn tiny_config(vocab: usize) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            d_ff: 16,
            vocab_size: vocab,
            max_positions: 32,
            dropout_rate: 0.0,
        }
    }

    fn random_example(rng: &mut ChaCha8Rng, id: usize, vocab: u32) -> EncodedExample {
        let n = rng.random_range(2..7);
        let m = rng.random_range(2..7);
        let input = (0..n).map(|_| rng.random_range(0..vocab)).collect();
        let output: Vec<u32> = (0..m).map(|_| rng.random_range(0..vocab)).collect();
        let mut mask: Vec<u8> = (0..m).map(|_| rng.random_range(0..2)).collect();
        mask[m - 1] = 1;
        EncodedExample {
            id,
            input,
            output,
            mask,
        }
    }

    fn batch_loss(p: &ModelParams, b: &Batch) -> f64 {
        loss(&forward(p, b).unwrap(), b).unwrap()
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = ModelParams::init(&tiny_config(13), 3).unwrap();
        let examples: Vec<_> = (0..3).map(|i| random_example(&mut rng, i, 13)).collect();
        let b = Batch::new(&examples).unwrap();
        let (l, g) = gradients(&p, &b).unwrap();
        assert!((l - batch_loss(&p, &b)).abs() < 1e-12);

        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for (name, grad) in g.tensors() {
            let samples = grad.data.len().min(20);
            let idx: Vec<usize> = if grad.data.len() <= 20 {
                (0..grad.data.len()).collect()
            } else {
                (0..samples)
                    .map(|_| rng.random_range(0..grad.data.len()))
                    .collect()
            };
            for i in idx {
                let mut plus = p.clone();
                let mut minus = p.clone();
                plus.tensors_mut()
                    .into_iter()
                    .find(|(n, _)| *n == name)
                    .unwrap()
                    .1
                    .data[i] += h;
                minus
                    .tensors_mut()
                    .into_iter()
                    .find(|(n, _)| *n == name)
                    .unwrap()
                    .1
                    .data[i] -= h;
                let fd = (batch_loss(&plus, &b) - batch_loss(&minus, &b)) / (2.0 * h);
                let rel = (grad.data[i] - fd).abs() / (fd.abs() + 1e-8);
                worst = worst.max(rel);
                assert!(
                    rel < 1e-4,
                    "{name}[{i}]: analytic {} vs fd {fd}",
                    grad.data[i]
                );
            }
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn decoder_is_causal_and_sees_whole_input() {
        let p = ModelParams::init(&tiny_config(11), 1).unwrap();
        let input = [7, 4, 9, 10];
        let dec = [2, 8, 5, 6, 9];
        let base = forward_tape(&p, &input, &dec, None).logits;
        for j in 0..dec.len() {
            let mut changed = dec;
            changed[j] = if dec[j] == 3 { 4 } else { 3 };
            let l = forward_tape(&p, &input, &changed, None).logits;
            for r in 0..dec.len() {
                let same = l.row(r) == base.row(r);
                assert_eq!(same, r < j, "position {r} after changing {j}");
            }
        }
        let mut other = input;
        other[3] = 5;
        let l = forward_tape(&p, &other, &dec, None).logits;
        for r in 0..dec.len() {
            assert_ne!(l.row(r), base.row(r));
        }
    }

    #[test]
    fn incremental_decoding_matches_full_forward() {
        let mut cfg = tiny_config(17);
        cfg.n_decoder_layers = 2;
        let p = ModelParams::init(&cfg, 9).unwrap();
        let input = [7, 12, 13, 14];
        let dec = [2, 8, 15, 16, 11, 4];
        let full = forward_tape(&p, &input, &dec, None).logits;
        let mut st = DecoderState::new(&p, &encode(&p, &input));
        for (j, &t) in dec.iter().enumerate() {
            let step = st.step(&p, t);
            for (a, b) in step.iter().zip(full.row(j)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(st.len(), dec.len());
    }

    #[test]
    fn loss_matches_per_position_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ModelParams::init(&tiny_config(12), 4).unwrap();
        let examples: Vec<_> = (0..2).map(|i| random_example(&mut rng, i, 12)).collect();
        let b = Batch::new(&examples).unwrap();
        let logits = forward(&p, &b).unwrap();
        let mut oracle = 0.0;
        for (e, l) in examples.iter().zip(&logits) {
            for j in 0..e.output.len() {
                if e.mask[j] == 1 {
                    let row = l.row(j);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    oracle -= (row[e.output[j] as usize] - max) - z.ln();
                }
            }
        }
        oracle /= examples.len() as f64;
        let got = loss(&logits, &b).unwrap();
        assert!((got - oracle).abs() <= 1e-10 * oracle.abs());
    }

    #[test]
    fn masked_positions_are_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = ModelParams::init(&tiny_config(12), 4).unwrap();
        let e = random_example(&mut rng, 0, 12);
        let b = Batch::new(std::slice::from_ref(&e)).unwrap();
        let logits = forward(&p, &b).unwrap();
        let l0 = loss(&logits, &b).unwrap();
        let mut relabeled = e.clone();
        for (t, &m) in relabeled.output.iter_mut().zip(&e.mask) {
            if m == 0 {
                *t = (*t + 5) % 12;
            }
        }
        let b2 = Batch::new(&[relabeled]).unwrap();
        assert_eq!(loss(&logits, &b2).unwrap(), l0);
    }

    #[test]
    fn forward_validates_ids() {
        let p = ModelParams::init(&tiny_config(10), 0).unwrap();
        let b = Batch::new(&[EncodedExample {
            id: 4,
            input: vec![7, 10],
            output: vec![8, 3],
            mask: vec![0, 1],
        }])
        .unwrap();
        assert!(forward(&p, &b).is_err());
        let one = Batch::new(&[EncodedExample {
            id: 0,
            input: vec![7],
            output: vec![3],
            mask: vec![1],
        }])
        .unwrap();
        let l = forward(&p, &one).unwrap();
        assert_eq!(l[0].shape(), (1, 10));
        assert!(l[0].is_finite());
        let mut row = l[0].row(0).to_vec();
        tensor::softmax_in_place(&mut row);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gradients_do_not_depend_on_thread_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ModelParams::init(&tiny_config(12), 4).unwrap();
        let examples: Vec<_> = (0..9).map(|i| random_example(&mut rng, i, 12)).collect();
        let b = Batch::new(&examples).unwrap();
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let four = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let a = one.install(|| gradients_inner(&p, &b, Some(3)).unwrap());
        let c = four.install(|| gradients_inner(&p, &b, Some(3)).unwrap());
        assert_eq!(a.0.to_bits(), c.0.to_bits());
        assert_eq!(a.1, c.1);
    }

    fn copy_task(n: usize, seed: u64) -> Vec<EncodedExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|id| {
                let len = rng.random_range(2..5);
                let words: Vec<u32> = (0..len).map(|_| rng.random_range(9..15)).collect();
                let mut input = vec![special::INPUT_ID];
                input.extend(&words);
                let mut output = vec![special::OUTPUT_ID];
                output.extend(&words);
                output.push(special::EOS_ID);
                let mut mask = vec![1; output.len()];
                mask[0] = 0;
                EncodedExample {
                    id,
                    input,
                    output,
                    mask,
                }
            })
            .collect()
    }

    #[test]
    fn overfits_a_copy_task() {
        let data = copy_task(50, 21);
        let cfg = ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            d_ff: 128,
            vocab_size: 15,
            max_positions: 16,
            dropout_rate: 0.0,
        };
        let p = ModelParams::init(&cfg, 1).unwrap();
        let tc = TrainConfig {
            epochs: 30,
            batch_size: 5,
            adam: AdamConfig {
                lr: 1e-3,
                clip_norm: Some(1.0),
                ..Default::default()
            },
            patience: None,
            average_last: 5,
            ..Default::default()
        };
        let out = train(p, &data, &[], &tc).unwrap();
        // Averaging the last few epochs smooths out late Adam spikes.
        let last = batch_loss(&out.params, &Batch::new(&data).unwrap());
        assert!(out.initial_loss.is_finite());
        assert!(last < 0.1, "final loss {last}");
    }

    #[test]
    fn training_is_deterministic_and_zero_epochs_is_identity() {
        let data = copy_task(12, 3);
        let mut cfg = tiny_config(15);
        cfg.dropout_rate = 0.1;
        let p = ModelParams::init(&cfg, 2).unwrap();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let a = train(p.clone(), &data, &data[..4], &tc).unwrap();
        let b = train(p.clone(), &data, &data[..4], &tc).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.params, b.params);

        let zero = TrainConfig { epochs: 0, ..tc };
        let z = train(p.clone(), &data, &[], &zero).unwrap();
        assert_eq!(z.params, p);
        assert!(z.curve.is_empty());
    }

    #[test]
    fn second_stage_starts_from_first() {
        let data = copy_task(8, 4);
        let p = ModelParams::init(&tiny_config(15), 2).unwrap();
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..Default::default()
        };
        let (s1, s2) = train_two_stage(p, (&data, &[]), (&data, &[]), &tc, &tc).unwrap();
        assert!(s2.initial_loss.is_finite());
        assert!((s2.initial_loss - s1.curve[0].train_loss).abs() < 1.0);
        assert!(train(s1.params, &[], &[], &tc).is_err());
    }
}

//! Beam search with a forced target prefix.
//!
//! The decoder is first fed `<bos>` and the knowledge prefix ending in
//! `[Output]` regardless of what it would have predicted; generation starts
//! after `[Output]` and only the generated tokens are returned.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{special, BpeModel, Vocab};
use crate::error::{Error, Result};
use crate::model::{encode, tensor::log_softmax, DecoderState, ModelParams};
use crate::prompt::PromptedExample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub max_new_tokens: usize,
    /// Score = log-probability / length^penalty.
    pub length_penalty: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 4,
            max_new_tokens: 128,
            length_penalty: 1.0,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::invalid("beam_size must be at least 1"));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::invalid("max_new_tokens must be at least 1"));
        }
        if self.length_penalty.is_nan() || self.length_penalty < 0.0 {
            return Err(Error::invalid("length_penalty must be non-negative"));
        }
        Ok(())
    }

    fn score(&self, log_prob: f64, len: usize) -> f64 {
        log_prob / (len.max(1) as f64).powf(self.length_penalty)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeStats {
    /// Prefix tokens plus the `[Output]` separator.
    pub tokens_forced: usize,
    pub tokens_generated: usize,
    pub wall_time: Duration,
}

/// Log-probability bounds of one beam step: the worst candidate kept and
/// the best one pruned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTrace {
    pub worst_kept: f64,
    pub best_pruned: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamOutput {
    /// Decoder sequence after `<bos>`: the forced prefix, then the
    /// generated tokens (including `<eos>` when reached).
    pub sequence: Vec<u32>,
    /// Generated tokens without `<eos>`.
    pub generated: Vec<u32>,
    pub log_prob: f64,
    pub score: f64,
    pub finished: bool,
    pub trace: Vec<StepTrace>,
}

#[derive(Clone)]
struct Live {
    state: DecoderState,
    tokens: Vec<u32>,
    log_prob: f64,
    next: Vec<f64>,
}

struct Done {
    tokens: Vec<u32>,
    log_prob: f64,
    score: f64,
    finished: bool,
}

/// Tokens the decoder is never allowed to emit.
fn banned(t: u32) -> bool {
    t == special::PAD_ID || t == special::BOS_ID
}

/// Id-level beam search. `prefix` gets `[Output]` appended if it does not
/// already end with it.
pub fn beam_search(
    params: &ModelParams,
    input: &[u32],
    prefix: &[u32],
    cfg: &BeamConfig,
) -> Result<(BeamOutput, DecodeStats)> {
    cfg.validate()?;
    let start = Instant::now();
    let mcfg = &params.config;
    let mut forced = prefix.to_vec();
    if forced.last() != Some(&special::OUTPUT_ID) {
        forced.push(special::OUTPUT_ID);
    }
    if input.is_empty() {
        return Err(Error::invalid("empty input sequence"));
    }
    if input.len() > mcfg.max_positions {
        return Err(Error::Shape(format!(
            "input of {} tokens exceeds max_positions {}",
            input.len(),
            mcfg.max_positions
        )));
    }
    // `<bos>` occupies one decoder position.
    if forced.len() + 1 > mcfg.max_positions {
        return Err(Error::Shape(format!(
            "forced prefix of {} tokens exceeds max_positions {}",
            forced.len(),
            mcfg.max_positions
        )));
    }
    if let Some(bad) = input
        .iter()
        .chain(&forced)
        .find(|&&t| t as usize >= mcfg.vocab_size)
    {
        return Err(Error::Shape(format!(
            "token id {bad} outside vocabulary of {}",
            mcfg.vocab_size
        )));
    }

    let enc = encode(params, input);
    let mut state = DecoderState::new(params, &enc);
    let mut next = state.step(params, special::BOS_ID);
    for &t in &forced {
        next = state.step(params, t);
    }
    let budget = cfg.max_new_tokens.min(mcfg.max_positions - forced.len());

    let mut live = vec![Live {
        state,
        tokens: Vec::new(),
        log_prob: 0.0,
        next,
    }];
    let mut done: Vec<Done> = Vec::new();
    let mut trace = Vec::new();

    for step in 0..budget {
        // (log_prob, beam, token)
        let mut cands: Vec<(f64, usize, u32)> = Vec::with_capacity(live.len() * mcfg.vocab_size);
        for (b, h) in live.iter().enumerate() {
            for (t, lp) in log_softmax(&h.next).into_iter().enumerate() {
                if !banned(t as u32) {
                    cands.push((h.log_prob + lp, b, t as u32));
                }
            }
        }
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.2.cmp(&y.2)).then(x.1.cmp(&y.1)));
        let keep = cfg.beam_size.min(cands.len());
        trace.push(StepTrace {
            worst_kept: cands[keep - 1].0,
            best_pruned: cands.get(keep).map(|c| c.0),
        });

        let last_step = step + 1 == budget;
        let mut next_live = Vec::with_capacity(keep);
        for &(lp, b, t) in &cands[..keep] {
            let mut tokens = live[b].tokens.clone();
            tokens.push(t);
            if t == special::EOS_ID {
                let score = cfg.score(lp, tokens.len());
                done.push(Done {
                    tokens,
                    log_prob: lp,
                    score,
                    finished: true,
                });
            } else if last_step {
                let score = cfg.score(lp, tokens.len());
                done.push(Done {
                    tokens,
                    log_prob: lp,
                    score,
                    finished: false,
                });
            } else {
                let mut st = live[b].state.clone();
                let next = st.step(params, t);
                next_live.push(Live {
                    state: st,
                    tokens,
                    log_prob: lp,
                    next,
                });
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
        if done.len() >= cfg.beam_size {
            let worst_done = done.iter().map(|d| d.score).fold(f64::INFINITY, f64::min);
            let best_live = live
                .iter()
                .map(|h| cfg.score(h.log_prob, h.tokens.len()))
                .fold(f64::NEG_INFINITY, f64::max);
            if best_live <= worst_done {
                break;
            }
        }
    }
    // Only reached when the prefix leaves no room to generate.
    if done.is_empty() {
        for h in live {
            let score = cfg.score(h.log_prob, h.tokens.len());
            done.push(Done {
                tokens: h.tokens,
                log_prob: h.log_prob,
                score,
                finished: false,
            });
        }
    }
    let best = done
        .into_iter()
        .min_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.tokens.cmp(&b.tokens))
        })
        .ok_or_else(|| Error::invalid("no decoder positions left after the forced prefix"))?;

    let mut generated = best.tokens.clone();
    if generated.last() == Some(&special::EOS_ID) {
        generated.pop();
    }
    let mut sequence = forced.clone();
    sequence.extend(&best.tokens);
    let stats = DecodeStats {
        tokens_forced: forced.len(),
        tokens_generated: best.tokens.len(),
        wall_time: start.elapsed(),
    };
    Ok((
        BeamOutput {
            sequence,
            generated,
            log_prob: best.log_prob,
            score: best.score,
            finished: best.finished,
            trace,
        },
        stats,
    ))
}

/// Translates BPE units: returns the generated words with subword
/// segmentation undone and special tokens removed.
pub fn translate<S: AsRef<str>>(
    params: &ModelParams,
    vocab: &Vocab,
    input_units: &[S],
    target_prefix: &[S],
    cfg: &BeamConfig,
) -> Result<(Vec<String>, DecodeStats)> {
    if !input_units.iter().any(|t| t.as_ref() == special::INPUT) {
        return Err(Error::invalid("input has no [Input] marker"));
    }
    let input = vocab.encode(input_units);
    let prefix = vocab.encode(target_prefix);
    let (out, stats) = beam_search(params, &input, &prefix, cfg)?;
    let units = vocab.decode(&out.generated);
    let words = BpeModel::decode_sequence(&units)
        .into_iter()
        .filter(|w| !special::is_reserved(w))
        .collect();
    Ok((words, stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub mean_forced: f64,
    pub mean_generated: f64,
    pub sentences_per_second: f64,
}

/// Translates every record of a BPE-level prompt dataset. Decoder tokens
/// from `[Output]` on are ignored; only the knowledge prefix is forced.
pub fn batch_translate(
    params: &ModelParams,
    vocab: &Vocab,
    records: &[PromptedExample],
    cfg: &BeamConfig,
) -> Result<(Vec<Vec<String>>, BatchStats)> {
    cfg.validate()?;
    let start = Instant::now();
    let results: Vec<Result<(Vec<String>, DecodeStats)>> = records
        .par_iter()
        .map(|r| {
            translate(params, vocab, &r.input_tokens, r.knowledge_prefix(), cfg).map_err(|e| {
                Error::Record {
                    id: r.id,
                    message: e.to_string(),
                }
            })
        })
        .collect();
    let mut lines = Vec::with_capacity(records.len());
    let (mut forced, mut generated) = (0usize, 0usize);
    for r in results {
        let (words, s) = r?;
        forced += s.tokens_forced;
        generated += s.tokens_generated;
        lines.push(words);
    }
    let n = records.len().max(1) as f64;
    let secs = start.elapsed().as_secs_f64();
    Ok((
        lines,
        BatchStats {
            mean_forced: forced as f64 / n,
            mean_generated: generated as f64 / n,
            sentences_per_second: if secs > 0.0 {
                records.len() as f64 / secs
            } else {
                0.0
            },
        },
    ))
}

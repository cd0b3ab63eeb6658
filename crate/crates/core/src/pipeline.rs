//! End-to-end run on the synthetic task: generate data, acquire knowledge,
//! build plain and prompted datasets, train in two stages, then translate
//! the test set with and without knowledge prefixes and score both.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{detokenize, write_string, BpeModel, SentencePair, Token, Vocab};
use crate::decode::{batch_translate, BatchStats, BeamConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, report_table, EvalReport};
use crate::model::{
    save_checkpoint, train_two_stage, EncodedExample, EpochStats, ModelConfig, ModelParams,
    TrainConfig,
};
use crate::prompt::{assemble, assemble_capped, write_jsonl, KnowledgeBundle, PromptedExample};
use crate::retrieval::TmIndex;
use crate::synth::{generate, write_synth, SynthConfig};
use crate::template::{extract_template, ParseTree};
use crate::terminology::{TermMatchSet, TermMatcher};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Knowledge {
    Sent,
    Term,
    Template,
}

impl std::str::FromStr for Knowledge {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sent" | "sentence" => Ok(Knowledge::Sent),
            "term" => Ok(Knowledge::Term),
            "template" => Ok(Knowledge::Template),
            other => Err(Error::invalid(format!(
                "unknown knowledge kind {other:?} (expected sent, term or template)"
            ))),
        }
    }
}

/// Model dimensions; the vocabulary size comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub dropout_rate: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        let d = ModelConfig::desk(1);
        ModelShape {
            d_model: d.d_model,
            n_heads: d.n_heads,
            n_layers: d.n_encoder_layers,
            d_ff: d.d_ff,
            max_positions: 128,
            dropout_rate: d.dropout_rate,
        }
    }
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_encoder_layers: self.n_layers,
            n_decoder_layers: self.n_layers,
            d_ff: self.d_ff,
            vocab_size,
            max_positions: self.max_positions,
            dropout_rate: self.dropout_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub bpe_merges: usize,
    /// Retrieval similarity threshold.
    pub lambda: f64,
    pub template_depth: usize,
    pub knowledge: Vec<Knowledge>,
    /// Drop knowledge blocks while the BPE input is longer than this.
    pub max_input_units: Option<usize>,
    pub model: ModelShape,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub beam: BeamConfig,
    pub smooth_bleu: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            synth: SynthConfig::default(),
            bpe_merges: 500,
            lambda: 0.4,
            template_depth: 4,
            knowledge: vec![Knowledge::Term],
            max_input_units: None,
            model: ModelShape::default(),
            stage1: stage_recipe(),
            stage2: stage_recipe(),
            beam: BeamConfig::default(),
            smooth_bleu: true,
        }
    }
}

/// Small batches, a raised constant learning rate with clipping, and the
/// average of the last five epochs: Adam with beta2 0.98 spikes now and then
/// late in training, and averaging irons that out.
fn stage_recipe() -> TrainConfig {
    let mut t = TrainConfig {
        epochs: 25,
        batch_size: 16,
        patience: None,
        average_last: 5,
        ..TrainConfig::default()
    };
    t.adam.lr = 1e-3;
    t.adam.clip_norm = Some(1.0);
    t
}

impl PipelineConfig {
    /// Makes `seed` the single source of randomness for data, init and
    /// training.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.stage1.seed = seed.wrapping_add(1);
        self.stage2.seed = seed.wrapping_add(2);
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.config(special_count()).validate()?;
        self.beam.validate()?;
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(Error::invalid("lambda must lie in [0, 1)"));
        }
        if self.knowledge.is_empty() {
            return Err(Error::invalid("select at least one knowledge kind"));
        }
        Ok(())
    }
}

fn special_count() -> usize {
    crate::corpus::special::ALL.len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub prompted: EvalReport,
    pub unprompted: EvalReport,
    pub stage1_initial_loss: f64,
    pub stage2_initial_loss: f64,
    pub stage1: Vec<EpochStats>,
    pub stage2: Vec<EpochStats>,
    pub prompted_decode: BatchStats,
    pub unprompted_decode: BatchStats,
    pub num_parameters: usize,
    pub vocab_size: usize,
    pub seconds: f64,
}

impl PipelineReport {
    pub fn table(&self) -> String {
        report_table(&[
            ("prompted", &self.prompted),
            ("unprompted", &self.unprompted),
        ])
    }
}

/// Knowledge for every pair of one split.
struct Acquirer<'a> {
    cfg: &'a PipelineConfig,
    matcher: TermMatcher,
}

impl Acquirer<'_> {
    fn bundles(
        &self,
        pairs: &[SentencePair],
        index: &TmIndex,
        trees: &(Vec<ParseTree>, Vec<ParseTree>),
    ) -> Vec<KnowledgeBundle> {
        let want = |k| self.cfg.knowledge.contains(&k);
        let hits = if want(Knowledge::Sent) {
            let queries: Vec<Vec<Token>> = pairs.iter().map(|p| p.source.clone()).collect();
            index.retrieve_all(&queries, self.cfg.lambda)
        } else {
            vec![None; pairs.len()]
        };
        pairs
            .iter()
            .zip(hits)
            .enumerate()
            .map(|(i, (p, hit))| KnowledgeBundle {
                similar: hit.map(|h| h.pair),
                terms: if want(Knowledge::Term) {
                    self.matcher.soft_match(p)
                } else {
                    TermMatchSet::default()
                },
                template: want(Knowledge::Template).then(|| {
                    (
                        extract_template(&trees.0[i], self.cfg.template_depth),
                        extract_template(&trees.1[i], self.cfg.template_depth),
                    )
                }),
            })
            .collect()
    }
}

fn prompted(
    cfg: &PipelineConfig,
    bpe: &BpeModel,
    pairs: &[SentencePair],
    bundles: &[KnowledgeBundle],
) -> Vec<PromptedExample> {
    pairs
        .iter()
        .zip(bundles)
        .map(|(p, k)| {
            let ex = match cfg.max_input_units {
                Some(cap) => assemble_capped(p, k, bpe, cap),
                None => assemble(p, k),
            };
            ex.apply_bpe(bpe)
        })
        .collect()
}

fn plain(bpe: &BpeModel, pairs: &[SentencePair]) -> Vec<PromptedExample> {
    pairs
        .iter()
        .map(|p| assemble(p, &KnowledgeBundle::default()).apply_bpe(bpe))
        .collect()
}

fn encoded(examples: &[PromptedExample], vocab: &Vocab) -> Vec<EncodedExample> {
    examples
        .iter()
        .map(|e| EncodedExample::from_prompted(e, vocab))
        .collect()
}

fn lines(v: &[Vec<String>]) -> String {
    v.iter().map(|l| detokenize(l) + "\n").collect()
}

/// Runs the whole experiment. With `out_dir`, every intermediate artifact
/// is written there as well.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: Option<&Path>) -> Result<PipelineReport> {
    cfg.validate()?;
    let start = Instant::now();
    let data = generate(&cfg.synth)?;
    log::info!("synth: {}", data.summary());

    let corpus: Vec<&Vec<Token>> = data
        .train
        .iter()
        .flat_map(|p| [&p.source, &p.target])
        .chain(
            data.dictionary
                .iter()
                .flat_map(|e| [&e.source_terms, &e.target_terms]),
        )
        .collect();
    let corpus: Vec<Vec<Token>> = corpus.into_iter().cloned().collect();
    let bpe = BpeModel::train(&corpus, cfg.bpe_merges)?;

    let acq = Acquirer {
        cfg,
        matcher: TermMatcher::new(&data.dictionary),
    };
    // Training sentences retrieve from the rest of the training set; held-out
    // sentences from the translation memory plus the training set.
    let train_index = TmIndex::build(data.train.clone());
    let mut eval_tm = data.tm.clone();
    eval_tm.extend(data.train.iter().cloned());
    let eval_index = TmIndex::build(eval_tm);
    let train_k = acq.bundles(&data.train, &train_index, &data.trees.train);
    let valid_k = acq.bundles(&data.valid, &eval_index, &data.trees.valid);
    let test_k = acq.bundles(&data.test, &eval_index, &data.trees.test);

    let train_plain = plain(&bpe, &data.train);
    let valid_plain = plain(&bpe, &data.valid);
    let test_plain = plain(&bpe, &data.test);
    let train_prompted = prompted(cfg, &bpe, &data.train, &train_k);
    let valid_prompted = prompted(cfg, &bpe, &data.valid, &valid_k);
    let test_prompted = prompted(cfg, &bpe, &data.test, &test_k);

    // Everything the model may read: training data in both forms, the
    // dictionary, the memory, and test inputs (never test references).
    let mut units: Vec<String> = Vec::new();
    for ex in train_plain
        .iter()
        .chain(&train_prompted)
        .chain(&valid_plain)
        .chain(&valid_prompted)
    {
        units.extend(ex.input_tokens.iter().cloned());
        units.extend(ex.output_tokens.iter().cloned());
    }
    for ex in test_prompted.iter().chain(&test_plain) {
        units.extend(ex.input_tokens.iter().cloned());
        units.extend(ex.knowledge_prefix().iter().cloned());
    }
    for e in &data.dictionary {
        units.extend(bpe.encode_sequence(&e.source_terms));
        units.extend(bpe.encode_sequence(&e.target_terms));
    }
    for p in &data.tm {
        units.extend(bpe.encode_sequence(&p.source));
        units.extend(bpe.encode_sequence(&p.target));
    }
    let vocab = Vocab::from_tokens(units);

    let mcfg = cfg.model.config(vocab.len());
    let params = ModelParams::init(&mcfg, cfg.seed)?;
    log::info!(
        "model: {} parameters, vocabulary {}",
        params.num_parameters(),
        vocab.len()
    );
    let (s1, s2) = train_two_stage(
        params,
        (
            &encoded(&train_plain, &vocab),
            &encoded(&valid_plain, &vocab),
        ),
        (
            &encoded(&train_prompted, &vocab),
            &encoded(&valid_prompted, &vocab),
        ),
        &cfg.stage1,
        &cfg.stage2,
    )?;
    let model = &s2.params;

    let (hyp_prompted, prompted_decode) =
        batch_translate(model, &vocab, &test_prompted, &cfg.beam)?;
    let (hyp_plain, unprompted_decode) = batch_translate(model, &vocab, &test_plain, &cfg.beam)?;

    let refs: Vec<Vec<Token>> = data.test.iter().map(|p| p.target.clone()).collect();
    // Exact match is always measured against the dictionary, whichever
    // knowledge the prompts carried.
    let terms: Vec<TermMatchSet> = data
        .test
        .iter()
        .map(|p| acq.matcher.soft_match(p))
        .collect();
    let prompted_report = evaluate(&hyp_prompted, &refs, Some(&terms), cfg.smooth_bleu)?;
    let unprompted_report = evaluate(&hyp_plain, &refs, Some(&terms), cfg.smooth_bleu)?;

    let report = PipelineReport {
        prompted: prompted_report,
        unprompted: unprompted_report,
        stage1_initial_loss: s1.initial_loss,
        stage2_initial_loss: s2.initial_loss,
        stage1: s1.curve,
        stage2: s2.curve,
        prompted_decode,
        unprompted_decode,
        num_parameters: model.num_parameters(),
        vocab_size: vocab.len(),
        seconds: start.elapsed().as_secs_f64(),
    };

    if let Some(dir) = out_dir {
        write_synth(&dir.join("data"), &data)?;
        bpe.save(&dir.join("bpe.merges"))?;
        vocab.save(&dir.join("vocab.txt"))?;
        for (name, set) in [
            ("train.plain", &train_plain),
            ("train.prompted", &train_prompted),
            ("valid.plain", &valid_plain),
            ("valid.prompted", &valid_prompted),
            ("test.plain", &test_plain),
            ("test.prompted", &test_prompted),
        ] {
            write_jsonl(&dir.join(format!("{name}.jsonl")), set)?;
        }
        save_checkpoint(&dir.join("model.ckpt"), model, &vocab.hash())?;
        write_string(&dir.join("hyp.prompted.txt"), &lines(&hyp_prompted))?;
        write_string(&dir.join("hyp.unprompted.txt"), &lines(&hyp_plain))?;
        write_string(
            &dir.join("report.json"),
            &serde_json::to_string_pretty(&report)?,
        )?;
    }
    Ok(report)
}

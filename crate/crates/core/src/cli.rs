//! Command-line interface.
//!
//! Every subcommand takes its defaults from an optional TOML run config
//! (`--config`), and explicit flags override the file. Exit status is 0 on
//! success, 1 on a usage error and 2 on a data error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::corpus::{
    detokenize, load_parallel, read_to_string, read_token_lines, tokenize, write_string, BpeModel,
    Token, Vocab,
};
use crate::decode::batch_translate;
use crate::error::{Error, Result};
use crate::eval::{evaluate, report_table};
use crate::model::{
    load_checkpoint, save_checkpoint, train, train_two_stage, EncodedExample, LrSchedule,
    ModelParams, TrainConfig,
};
use crate::pipeline::{run_pipeline, Knowledge, PipelineConfig};
use crate::prompt::{
    assemble, assemble_capped, read_jsonl, write_jsonl, KnowledgeBundle, PromptedExample,
};
use crate::retrieval::TmIndex;
use crate::synth::{generate, write_synth};
use crate::template::{extract_template, parse_ptb, ParseTree};
use crate::terminology::{load_dictionary, TermMatchRecord, TermMatchSet, TermMatcher};

/// All module options in one file. Same layout as the pipeline config:
/// top-level `seed`, `lambda`, `template_depth`, `bpe_merges`, `knowledge`,
/// and `[synth]`, `[model]`, `[stage1]`, `[stage2]`, `[beam]` tables.
pub type RunConfig = PipelineConfig;

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = read_to_string(path)?;
    let cfg: RunConfig = toml::from_str(&text).map_err(|e| {
        let line = e
            .span()
            .map(|s| text[..s.start].lines().count().max(1))
            .unwrap_or(0);
        Error::format(path.display().to_string(), line, e.message().to_owned())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Parser)]
#[command(
    name = "mkprompt",
    version,
    about = "Knowledge-prompted translation toolkit"
)]
pub struct Cli {
    /// TOML run config supplying defaults for every subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn BPE merges from tokenized text files.
    BpeTrain(BpeTrainArgs),
    /// Index a translation memory for retrieval.
    BuildTm(BuildTmArgs),
    /// Retrieve the most similar memory entry for each query line.
    Retrieve(RetrieveArgs),
    /// Soft-match a terminology dictionary against a parallel corpus.
    MatchTerms(MatchTermsArgs),
    /// Cut bracketed parse trees into templates.
    ExtractTemplates(ExtractTemplatesArgs),
    /// Assemble prompted examples as JSONL.
    BuildDataset(BuildDatasetArgs),
    /// Train a model, optionally in two stages.
    Train(TrainArgs),
    /// Translate a prompted JSONL dataset.
    Translate(TranslateArgs),
    /// Score hypotheses with BLEU and terminology exact match.
    Evaluate(EvaluateArgs),
    /// Generate the synthetic task.
    Synth(SynthArgs),
    /// Run synth, dataset construction, two-stage training, translation and
    /// evaluation end to end.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct BpeTrainArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub merges: Option<usize>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildTmArgs {
    #[arg(long)]
    pub tm_src: PathBuf,
    #[arg(long)]
    pub tm_tgt: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    /// Prebuilt index from `build-tm`.
    #[arg(long, conflicts_with_all = ["tm_src", "tm_tgt"])]
    pub index: Option<PathBuf>,
    #[arg(long, requires = "tm_tgt")]
    pub tm_src: Option<PathBuf>,
    #[arg(long, requires = "tm_src")]
    pub tm_tgt: Option<PathBuf>,
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MatchTermsArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    #[arg(long)]
    pub dict: PathBuf,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtractTemplatesArgs {
    #[arg(long)]
    pub trees: PathBuf,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    /// Knowledge kinds, comma separated: sent, term, template.
    #[arg(long, value_delimiter = ',')]
    pub knowledge: Option<Vec<Knowledge>>,
    /// Knowledge-free examples, for a first training stage.
    #[arg(long, conflicts_with = "knowledge")]
    pub plain: bool,
    #[arg(long)]
    pub tm_src: Option<PathBuf>,
    #[arg(long)]
    pub tm_tgt: Option<PathBuf>,
    #[arg(long)]
    pub dict: Option<PathBuf>,
    #[arg(long)]
    pub src_trees: Option<PathBuf>,
    #[arg(long)]
    pub tgt_trees: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub depth: Option<usize>,
    /// Apply these BPE merges to the assembled examples.
    #[arg(long)]
    pub bpe: Option<PathBuf>,
    #[arg(long, requires = "bpe")]
    pub max_input_units: Option<usize>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Prompted training data (the only stage when no stage-1 data is given).
    #[arg(long)]
    pub train_data: PathBuf,
    #[arg(long)]
    pub valid_data: Option<PathBuf>,
    /// Knowledge-free data for a first training stage.
    #[arg(long)]
    pub stage1_data: Option<PathBuf>,
    #[arg(long, requires = "stage1_data")]
    pub stage1_valid: Option<PathBuf>,
    /// Vocabulary file; built from the training data and written here if it
    /// does not exist.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub average_last: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Write the per-epoch loss curve as JSON.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Write {"mean_forced", "mean_generated", "sentences_per_second"}.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Ignore knowledge blocks and decode from `[Input]` onwards only.
    #[arg(long)]
    pub no_knowledge: bool,
    #[arg(long)]
    pub beam_size: Option<usize>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub length_penalty: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// JSONL term matches from `match-terms`.
    #[arg(long)]
    pub terms: Option<PathBuf>,
    #[arg(long)]
    pub no_smooth: bool,
    /// Also print a plain-text table to stderr.
    #[arg(long)]
    pub table: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_ambiguous_terms: Option<usize>,
    #[arg(long)]
    pub n_train_clusters: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub knowledge: Option<Vec<Knowledge>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Keep every intermediate artifact here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

impl clap::ValueEnum for Knowledge {
    fn value_variants<'a>() -> &'a [Self] {
        &[Knowledge::Sent, Knowledge::Term, Knowledge::Template]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            Knowledge::Sent => "sent",
            Knowledge::Term => "term",
            Knowledge::Template => "template",
        }))
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn output_sink(path: &Option<PathBuf>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_string(p, text),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn json_lines<T: Serialize>(records: impl IntoIterator<Item = T>) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(&r)?);
        s.push('\n');
    }
    Ok(s)
}

fn read_trees(path: &Path) -> Result<Vec<ParseTree>> {
    let name = path.display().to_string();
    read_to_string(path)?
        .lines()
        .enumerate()
        .map(|(i, l)| parse_ptb(l).map_err(|e| Error::format(&name, i + 1, e.to_string())))
        .collect()
}

fn train_config(base: &TrainConfig, a: &TrainArgs) -> TrainConfig {
    let mut c = base.clone();
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.epochs {
        c.epochs = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.lr {
        c.adam.lr = v;
    }
    if let Some(w) = a.warmup {
        c.adam.schedule = LrSchedule::InverseSqrt { warmup_steps: w };
    }
    if a.clip_norm.is_some() {
        c.adam.clip_norm = a.clip_norm;
    }
    if a.patience.is_some() {
        c.patience = a.patience;
    }
    if let Some(v) = a.average_last {
        c.average_last = v;
    }
    c
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::BpeTrain(a) => {
            let mut corpus = Vec::new();
            for p in &a.input {
                corpus.extend(read_token_lines(p)?);
            }
            let bpe = BpeModel::train(&corpus, a.merges.unwrap_or(cfg.bpe_merges))?;
            bpe.save(&a.output)
        }
        Command::BuildTm(a) => {
            let index = TmIndex::build(load_parallel(&a.tm_src, &a.tm_tgt)?);
            write_string(&a.output, &serde_json::to_string(&index)?)
        }
        Command::Retrieve(a) => {
            let index = match (&a.index, &a.tm_src, &a.tm_tgt) {
                (Some(p), _, _) => serde_json::from_str(&read_to_string(p)?)?,
                (None, Some(s), Some(t)) => TmIndex::build(load_parallel(s, t)?),
                _ => return Err(Error::invalid("give --index or both --tm-src and --tm-tgt")),
            };
            let lambda = a.lambda.unwrap_or(cfg.lambda);
            let queries = read_token_lines(&a.query)?;
            let hits = index.retrieve_all(&queries, lambda);
            let text = json_lines(hits.iter().map(|h| {
                h.as_ref().map(|h| {
                    serde_json::json!({
                        "id": h.pair.id,
                        "score": h.score,
                        "src": detokenize(&h.pair.source),
                        "tgt": detokenize(&h.pair.target),
                    })
                })
            }))?;
            output_sink(&a.output, &text)
        }
        Command::MatchTerms(a) => {
            let pairs = load_parallel(&a.src, &a.tgt)?;
            let matcher = TermMatcher::new(&load_dictionary(&a.dict)?);
            let text = json_lines(
                pairs
                    .iter()
                    .map(|p| TermMatchRecord::new(p.id, &matcher.soft_match(p))),
            )?;
            output_sink(&a.output, &text)
        }
        Command::ExtractTemplates(a) => {
            let depth = a.depth.unwrap_or(cfg.template_depth);
            let text: String = read_trees(&a.trees)?
                .iter()
                .map(|t| detokenize(&extract_template(t, depth).units) + "\n")
                .collect();
            output_sink(&a.output, &text)
        }
        Command::BuildDataset(a) => build_dataset(&cfg, &a),
        Command::Train(a) => train_command(&cfg, &a),
        Command::Translate(a) => {
            let mut beam = cfg.beam.clone();
            if let Some(v) = a.beam_size {
                beam.beam_size = v;
            }
            if let Some(v) = a.max_new_tokens {
                beam.max_new_tokens = v;
            }
            if let Some(v) = a.length_penalty {
                beam.length_penalty = v;
            }
            let vocab = Vocab::load(&a.vocab)?;
            let (params, meta) = load_checkpoint(&a.model)?;
            if meta.vocab_hash != vocab.hash() {
                return Err(Error::Checkpoint(format!(
                    "{} was trained with a different vocabulary than {}",
                    a.model.display(),
                    a.vocab.display()
                )));
            }
            let mut records: Vec<PromptedExample> = read_jsonl(&a.data)?;
            if a.no_knowledge {
                for r in &mut records {
                    strip_knowledge(r);
                }
            }
            let (lines, stats) = batch_translate(&params, &vocab, &records, &beam)?;
            let text: String = lines.iter().map(|l| detokenize(l) + "\n").collect();
            output_sink(&a.output, &text)?;
            if let Some(p) = &a.stats {
                write_string(p, &serde_json::to_string_pretty(&stats)?)?;
            }
            Ok(())
        }
        Command::Evaluate(a) => {
            let hyps = read_lines_allow_empty(&a.hyp)?;
            let refs = read_lines_allow_empty(&a.reference)?;
            if hyps.len() != refs.len() {
                return Err(Error::LineCountMismatch {
                    left_path: a.hyp.display().to_string(),
                    left: hyps.len(),
                    right_path: a.reference.display().to_string(),
                    right: refs.len(),
                });
            }
            let terms = match &a.terms {
                Some(p) => {
                    let recs: Vec<TermMatchRecord> = read_jsonl(p)?;
                    if recs.len() != hyps.len() {
                        return Err(Error::LineCountMismatch {
                            left_path: a.hyp.display().to_string(),
                            left: hyps.len(),
                            right_path: p.display().to_string(),
                            right: recs.len(),
                        });
                    }
                    Some(
                        recs.iter()
                            .map(TermMatchRecord::to_match_set)
                            .collect::<Result<Vec<TermMatchSet>>>()?,
                    )
                }
                None => None,
            };
            let report = evaluate(
                &hyps,
                &refs,
                terms.as_deref(),
                !a.no_smooth && cfg.smooth_bleu,
            )?;
            println!("{}", serde_json::to_string(&report)?);
            if a.table {
                eprint!(
                    "{}",
                    report_table(&[(&a.hyp.display().to_string(), &report)])
                );
            }
            Ok(())
        }
        Command::Synth(a) => {
            if let Some(s) = a.seed {
                cfg.synth.seed = s;
            }
            if let Some(v) = a.n_ambiguous_terms {
                cfg.synth.n_ambiguous_terms = v;
            }
            if let Some(v) = a.n_train_clusters {
                cfg.synth.n_train_clusters = v;
            }
            if let Some(v) = a.n_test {
                cfg.synth.n_test = v;
            }
            let data = generate(&cfg.synth)?;
            write_synth(&a.out_dir, &data)?;
            eprintln!("{}", data.summary());
            Ok(())
        }
        Command::Pipeline(a) => {
            if let Some(s) = a.seed {
                cfg.reseed(s);
            }
            if let Some(k) = a.knowledge {
                cfg.knowledge = k;
            }
            if let Some(e) = a.epochs {
                cfg.stage1.epochs = e;
                cfg.stage2.epochs = e;
            }
            let report = run_pipeline(&cfg, a.out_dir.as_deref())?;
            println!(
                "{}",
                serde_json::to_string(&serde_json::json!({
                    "prompted": report.prompted,
                    "unprompted": report.unprompted,
                }))?
            );
            eprint!("{}", report.table());
            Ok(())
        }
    }
}

/// Reduces a record to its knowledge-free form: input from `[Input]`,
/// decoder output from `[Output]`.
fn strip_knowledge(r: &mut PromptedExample) {
    use crate::corpus::special;
    if let Some(i) = r.input_tokens.iter().position(|t| t == special::INPUT) {
        r.input_tokens.drain(..i);
    }
    if let Some(o) = r.output_tokens.iter().position(|t| t == special::OUTPUT) {
        r.output_tokens.drain(..o);
        r.loss_mask.drain(..o);
    }
}

fn read_lines_allow_empty(path: &Path) -> Result<Vec<Vec<Token>>> {
    Ok(read_to_string(path)?.lines().map(tokenize).collect())
}

fn build_dataset(cfg: &RunConfig, a: &BuildDatasetArgs) -> Result<()> {
    let pairs = load_parallel(&a.src, &a.tgt)?;
    let knowledge = if a.plain {
        Vec::new()
    } else {
        a.knowledge.clone().unwrap_or_else(|| cfg.knowledge.clone())
    };
    let want = |k| knowledge.contains(&k);
    let lambda = a.lambda.unwrap_or(cfg.lambda);
    let depth = a.depth.unwrap_or(cfg.template_depth);

    let hits = if want(Knowledge::Sent) {
        let (Some(s), Some(t)) = (&a.tm_src, &a.tm_tgt) else {
            return Err(Error::invalid(
                "sentence knowledge needs --tm-src and --tm-tgt",
            ));
        };
        let index = TmIndex::build(load_parallel(s, t)?);
        let queries: Vec<Vec<Token>> = pairs.iter().map(|p| p.source.clone()).collect();
        index.retrieve_all(&queries, lambda)
    } else {
        vec![None; pairs.len()]
    };
    let matcher = if want(Knowledge::Term) {
        let Some(d) = &a.dict else {
            return Err(Error::invalid("term knowledge needs --dict"));
        };
        Some(TermMatcher::new(&load_dictionary(d)?))
    } else {
        None
    };
    let trees = if want(Knowledge::Template) {
        let (Some(s), Some(t)) = (&a.src_trees, &a.tgt_trees) else {
            return Err(Error::invalid(
                "template knowledge needs --src-trees and --tgt-trees",
            ));
        };
        let (s, t) = (read_trees(s)?, read_trees(t)?);
        if s.len() != pairs.len() || t.len() != pairs.len() {
            return Err(Error::invalid(format!(
                "{} pairs but {} source and {} target trees",
                pairs.len(),
                s.len(),
                t.len()
            )));
        }
        Some((s, t))
    } else {
        None
    };
    let bpe = a.bpe.as_deref().map(BpeModel::load).transpose()?;

    let mut out = Vec::with_capacity(pairs.len());
    for (i, (p, hit)) in pairs.iter().zip(hits).enumerate() {
        let k = KnowledgeBundle {
            similar: hit.map(|h| h.pair),
            terms: matcher
                .as_ref()
                .map(|m| m.soft_match(p))
                .unwrap_or_default(),
            template: trees.as_ref().map(|(s, t)| {
                (
                    extract_template(&s[i], depth),
                    extract_template(&t[i], depth),
                )
            }),
        };
        let ex = match (&bpe, a.max_input_units) {
            (Some(b), Some(cap)) => assemble_capped(p, &k, b, cap).apply_bpe(b),
            (Some(b), None) => assemble(p, &k).apply_bpe(b),
            _ => assemble(p, &k),
        };
        out.push(ex);
    }
    write_jsonl(&a.output, &out)
}

fn load_examples(path: &Path) -> Result<Vec<PromptedExample>> {
    let recs: Vec<PromptedExample> = read_jsonl(path)?;
    for r in &recs {
        r.validate()?;
    }
    Ok(recs)
}

fn train_command(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    let train_set = load_examples(&a.train_data)?;
    let valid_set = a
        .valid_data
        .as_deref()
        .map(load_examples)
        .transpose()?
        .unwrap_or_default();
    let s1_train = a.stage1_data.as_deref().map(load_examples).transpose()?;
    let s1_valid = a
        .stage1_valid
        .as_deref()
        .map(load_examples)
        .transpose()?
        .unwrap_or_default();

    let vocab = if a.vocab.exists() {
        Vocab::load(&a.vocab)?
    } else {
        let mut units = Vec::new();
        for ex in train_set
            .iter()
            .chain(&valid_set)
            .chain(s1_train.iter().flatten())
            .chain(&s1_valid)
        {
            units.extend(ex.input_tokens.iter().cloned());
            units.extend(ex.output_tokens.iter().cloned());
        }
        let v = Vocab::from_tokens(units);
        v.save(&a.vocab)?;
        v
    };
    let enc = |v: &[PromptedExample]| -> Vec<EncodedExample> {
        v.iter()
            .map(|e| EncodedExample::from_prompted(e, &vocab))
            .collect()
    };

    let params = match &a.init {
        Some(p) => {
            let (params, meta) = load_checkpoint(p)?;
            if meta.vocab_hash != vocab.hash() {
                return Err(Error::Checkpoint(format!(
                    "{} uses a different vocabulary",
                    p.display()
                )));
            }
            params
        }
        None => {
            let mut shape = cfg.model.clone();
            if let Some(v) = a.d_model {
                shape.d_model = v;
            }
            if let Some(v) = a.n_heads {
                shape.n_heads = v;
            }
            if let Some(v) = a.n_layers {
                shape.n_layers = v;
            }
            if let Some(v) = a.d_ff {
                shape.d_ff = v;
            }
            if let Some(v) = a.dropout {
                shape.dropout_rate = v;
            }
            ModelParams::init(&shape.config(vocab.len()), a.seed.unwrap_or(cfg.seed))?
        }
    };

    let stage2 = train_config(&cfg.stage2, a);
    let (outcome, curves) = match &s1_train {
        Some(s1) => {
            let stage1 = train_config(&cfg.stage1, a);
            let (o1, o2) = train_two_stage(
                params,
                (&enc(s1), &enc(&s1_valid)),
                (&enc(&train_set), &enc(&valid_set)),
                &stage1,
                &stage2,
            )?;
            eprintln!("stage 2 initial loss {:.4}", o2.initial_loss);
            let curves = serde_json::json!({"stage1": o1.curve, "stage2": o2.curve});
            (o2, curves)
        }
        None => {
            let o = train(params, &enc(&train_set), &enc(&valid_set), &stage2)?;
            let curves = serde_json::json!({"stage2": o.curve});
            (o, curves)
        }
    };
    eprintln!("initial loss {:.4}", outcome.initial_loss);
    if let Some(last) = outcome.curve.last() {
        eprintln!(
            "final epoch {}: train loss {:.4}",
            last.epoch, last.train_loss
        );
    }
    save_checkpoint(&a.output, &outcome.params, &vocab.hash())?;
    if let Some(p) = &a.curve {
        write_string(p, &serde_json::to_string_pretty(&curves)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_parse_and_usage_errors_exit_1() {
        assert_eq!(run(["mkprompt", "retrieve"]), 1);
        assert_eq!(run(["mkprompt", "frobnicate"]), 1);
        assert_eq!(run(["mkprompt", "evaluate", "--help"]), 0);
        assert_eq!(
            run([
                "mkprompt",
                "evaluate",
                "--hyp",
                "/nonexistent/h",
                "--ref",
                "/nonexistent/r"
            ]),
            2
        );
    }

    #[test]
    fn config_file_defaults_are_overridable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(
            &p,
            "lambda = 0.5\nknowledge = [\"sent\", \"term\"]\n[beam]\nbeam_size = 2\n",
        )
        .unwrap();
        let c = load_config(&p).unwrap();
        assert_eq!(c.lambda, 0.5);
        assert_eq!(c.knowledge, vec![Knowledge::Sent, Knowledge::Term]);
        assert_eq!(c.beam.beam_size, 2);
        assert_eq!(c.template_depth, 4);

        std::fs::write(&p, "lambda = 0.5\nbogus = [\n").unwrap();
        match load_config(&p).unwrap_err() {
            Error::Format { line, .. } => assert!(line >= 2),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn stripping_knowledge_keeps_the_sentence() {
        let mut r = PromptedExample {
            id: 0,
            input_tokens: tokenize("[Term] a [Input] a b"),
            output_tokens: tokenize("[Term] x [Output] x y <eos>"),
            loss_mask: vec![0, 0, 0, 1, 1, 1],
        };
        strip_knowledge(&mut r);
        assert_eq!(r.input_tokens, tokenize("[Input] a b"));
        assert_eq!(r.output_tokens, tokenize("[Output] x y <eos>"));
        assert_eq!(r.loss_mask, vec![0, 1, 1, 1]);
        r.validate().unwrap();
    }
}

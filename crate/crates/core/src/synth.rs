//! Seeded synthetic bilingual task.
//!
//! Every regular source word has exactly one target word and word order is
//! preserved. Ambiguous terms are the exception: each has several target
//! renderings, and which one a sentence uses is drawn at random, so it cannot
//! be inferred from the source. The dictionary lists every rendering, so
//! soft matching against a reference recovers the right one.
//!
//! Sentences come in clusters of near-duplicates (one word substituted) that
//! share the rendering of their term. Training clusters go entirely into the
//! training set. Each validation and test sentence comes from a fresh
//! cluster whose other member is held out in the translation memory, so
//! retrieval finds a similar pair carrying the same rendering.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{detokenize, write_parallel, write_string, SentencePair, Token};
use crate::error::{Error, Result};
use crate::template::ParseTree;
use crate::terminology::{dictionary_to_tsv, TermEntry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Regular words per language.
    pub n_words: usize,
    /// Sentence length range in items (a multi-word term counts as one).
    pub min_len: usize,
    pub max_len: usize,
    pub n_ambiguous_terms: usize,
    /// Target renderings per ambiguous term.
    pub renderings: usize,
    /// Maximum words on either side of a term.
    pub max_term_len: usize,
    /// Probability that a training sentence contains a term. Validation and
    /// test sentences always contain one when terms exist.
    pub term_rate: f64,
    pub n_train_clusters: usize,
    pub cluster_size: usize,
    pub n_valid: usize,
    pub n_test: usize,
    /// Word substitutions between near-duplicates.
    pub edits: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            n_words: 60,
            min_len: 5,
            max_len: 9,
            n_ambiguous_terms: 8,
            renderings: 2,
            max_term_len: 2,
            term_rate: 0.7,
            n_train_clusters: 1000,
            cluster_size: 2,
            n_valid: 50,
            n_test: 100,
            edits: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_words < 2 {
            return Err(Error::invalid("n_words must be at least 2"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::invalid("need 1 <= min_len <= max_len"));
        }
        if self.n_ambiguous_terms > 0 && self.renderings < 2 {
            return Err(Error::invalid("ambiguous terms need at least 2 renderings"));
        }
        if self.max_term_len == 0 {
            return Err(Error::invalid("max_term_len must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.term_rate) {
            return Err(Error::invalid("term_rate must lie in [0, 1]"));
        }
        if self.cluster_size == 0 || self.n_train_clusters == 0 {
            return Err(Error::invalid(
                "need at least one training cluster of size >= 1",
            ));
        }
        if self.edits >= self.min_len {
            return Err(Error::invalid("edits must be smaller than min_len"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub train: Vec<SentencePair>,
    pub valid: Vec<SentencePair>,
    pub test: Vec<SentencePair>,
    /// Held-out near-duplicates of the validation and test sentences.
    pub tm: Vec<SentencePair>,
    pub dictionary: Vec<TermEntry>,
    /// Parse trees per split, source and target side.
    pub trees: SynthTrees,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynthTrees {
    pub train: (Vec<ParseTree>, Vec<ParseTree>),
    pub valid: (Vec<ParseTree>, Vec<ParseTree>),
    pub test: (Vec<ParseTree>, Vec<ParseTree>),
    pub tm: (Vec<ParseTree>, Vec<ParseTree>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Item {
    Word(usize),
    /// Term index and rendering index.
    Term(usize, usize),
}

struct Lexicon {
    src: Vec<Token>,
    tgt: Vec<Token>,
    term_src: Vec<Vec<Token>>,
    term_tgt: Vec<Vec<Vec<Token>>>,
}

const SRC_CONSONANTS: &[u8] = b"bdgkmpst";
const SRC_VOWELS: &[u8] = b"aiou";
const TGT_CONSONANTS: &[u8] = b"fhlnrvwz";
const TGT_VOWELS: &[u8] = b"aeiy";

fn word(rng: &mut ChaCha8Rng, consonants: &[u8], vowels: &[u8], syllables: usize) -> String {
    let mut s = String::with_capacity(syllables * 2);
    for _ in 0..syllables {
        s.push(consonants[rng.random_range(0..consonants.len())] as char);
        s.push(vowels[rng.random_range(0..vowels.len())] as char);
    }
    s
}

fn fresh(
    rng: &mut ChaCha8Rng,
    seen: &mut HashSet<String>,
    target: bool,
    syllables: usize,
) -> String {
    let (c, v) = if target {
        (TGT_CONSONANTS, TGT_VOWELS)
    } else {
        (SRC_CONSONANTS, SRC_VOWELS)
    };
    loop {
        let w = word(rng, c, v, syllables);
        if seen.insert(w.clone()) {
            return w;
        }
    }
}

impl Lexicon {
    fn new(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut seen = HashSet::new();
        let src = (0..cfg.n_words)
            .map(|_| fresh(rng, &mut seen, false, 2))
            .collect();
        let tgt = (0..cfg.n_words)
            .map(|_| fresh(rng, &mut seen, true, 2))
            .collect();
        let mut term_src = Vec::new();
        let mut term_tgt = Vec::new();
        for _ in 0..cfg.n_ambiguous_terms {
            let n = rng.random_range(1..=cfg.max_term_len);
            term_src.push((0..n).map(|_| fresh(rng, &mut seen, false, 3)).collect());
            term_tgt.push(
                (0..cfg.renderings)
                    .map(|_| {
                        let m = rng.random_range(1..=cfg.max_term_len);
                        (0..m).map(|_| fresh(rng, &mut seen, true, 3)).collect()
                    })
                    .collect(),
            );
        }
        Lexicon {
            src,
            tgt,
            term_src,
            term_tgt,
        }
    }

    fn tag(item: Item) -> &'static str {
        match item {
            Item::Word(i) => ["N", "V", "A"][i % 3],
            Item::Term(..) => "T",
        }
    }

    fn realize(&self, items: &[Item], target: bool) -> (Vec<Token>, ParseTree) {
        let mut words = Vec::new();
        let mut children = Vec::new();
        for &it in items {
            let ws: Vec<Token> = match (it, target) {
                (Item::Word(i), false) => vec![self.src[i].clone()],
                (Item::Word(i), true) => vec![self.tgt[i].clone()],
                (Item::Term(t, _), false) => self.term_src[t].clone(),
                (Item::Term(t, r), true) => self.term_tgt[t][r].clone(),
            };
            children.push(ParseTree::node(
                Self::tag(it),
                ws.iter().map(|w| ParseTree::leaf(w.clone())).collect(),
            ));
            words.extend(ws);
        }
        (words, ParseTree::node("S", children))
    }
}

/// Rendering choices that cycle through all renderings of each term, so that
/// no rendering is more frequent than another by more than one.
struct Balancer {
    next: Vec<usize>,
    renderings: usize,
}

impl Balancer {
    fn take(&mut self, term: usize) -> usize {
        let r = self.next[term] % self.renderings;
        self.next[term] += 1;
        r
    }
}

fn base_sentence(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    with_term: bool,
    balancer: &mut Balancer,
) -> Vec<Item> {
    let len = rng.random_range(cfg.min_len..=cfg.max_len);
    let mut items: Vec<Item> = (0..len)
        .map(|_| Item::Word(rng.random_range(0..cfg.n_words)))
        .collect();
    if with_term && cfg.n_ambiguous_terms > 0 {
        let t = rng.random_range(0..cfg.n_ambiguous_terms);
        let pos = rng.random_range(0..len);
        items[pos] = Item::Term(t, balancer.take(t));
    }
    items
}

/// A near-duplicate: `edits` regular words replaced by different ones.
fn mutate(cfg: &SynthConfig, rng: &mut ChaCha8Rng, base: &[Item]) -> Vec<Item> {
    let mut out = base.to_vec();
    let mut slots: Vec<usize> = (0..out.len())
        .filter(|&i| matches!(out[i], Item::Word(_)))
        .collect();
    slots.shuffle(rng);
    for &i in slots.iter().take(cfg.edits) {
        if let Item::Word(w) = out[i] {
            let mut n = rng.random_range(0..cfg.n_words - 1);
            if n >= w {
                n += 1;
            }
            out[i] = Item::Word(n);
        }
    }
    out
}

struct Split {
    pairs: Vec<SentencePair>,
    trees: (Vec<ParseTree>, Vec<ParseTree>),
}

impl Split {
    fn new() -> Self {
        Split {
            pairs: Vec::new(),
            trees: (Vec::new(), Vec::new()),
        }
    }

    fn push(&mut self, lex: &Lexicon, items: &[Item]) -> Result<()> {
        let (src, st) = lex.realize(items, false);
        let (tgt, tt) = lex.realize(items, true);
        self.pairs
            .push(SentencePair::new(self.pairs.len(), src, tgt)?);
        self.trees.0.push(st);
        self.trees.1.push(tt);
        Ok(())
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lex = Lexicon::new(cfg, &mut rng);
    let new_balancer = || Balancer {
        next: vec![0; cfg.n_ambiguous_terms],
        renderings: cfg.renderings.max(1),
    };

    let mut train = Split::new();
    let mut bal = new_balancer();
    for _ in 0..cfg.n_train_clusters {
        let with_term = rng.random_bool(cfg.term_rate);
        let base = base_sentence(cfg, &mut rng, with_term, &mut bal);
        let mut members = vec![base.clone()];
        let mut tries = 0;
        while members.len() < cfg.cluster_size && tries < 100 {
            tries += 1;
            let m = mutate(cfg, &mut rng, &base);
            if !members.contains(&m) {
                members.push(m);
            }
        }
        for m in &members {
            train.push(&lex, m)?;
        }
    }

    let mut valid = Split::new();
    let mut test = Split::new();
    let mut tm = Split::new();
    for (split, n) in [(&mut valid, cfg.n_valid), (&mut test, cfg.n_test)] {
        let mut bal = new_balancer();
        for _ in 0..n {
            let base = base_sentence(cfg, &mut rng, true, &mut bal);
            let member = loop {
                let m = mutate(cfg, &mut rng, &base);
                if m != base || cfg.edits == 0 {
                    break m;
                }
            };
            split.push(&lex, &member)?;
            tm.push(&lex, &base)?;
        }
    }

    let mut dictionary = Vec::new();
    for (t, src) in lex.term_src.iter().enumerate() {
        for tgt in &lex.term_tgt[t] {
            dictionary.push(TermEntry::new(src.clone(), tgt.clone())?);
        }
    }

    Ok(SynthData {
        train: train.pairs,
        valid: valid.pairs,
        test: test.pairs,
        tm: tm.pairs,
        dictionary,
        trees: SynthTrees {
            train: train.trees,
            valid: valid.trees,
            test: test.trees,
            tm: tm.trees,
        },
    })
}

fn tree_lines(trees: &[ParseTree]) -> String {
    trees.iter().map(|t| format!("{t}\n")).collect()
}

/// Writes `{train,valid,test,tm}.{src,tgt}`, the matching `.tree` files and
/// `dict.tsv` into `dir`.
pub fn write_synth(dir: &Path, data: &SynthData) -> Result<()> {
    let splits = [
        ("train", &data.train, &data.trees.train),
        ("valid", &data.valid, &data.trees.valid),
        ("test", &data.test, &data.trees.test),
        ("tm", &data.tm, &data.trees.tm),
    ];
    for (name, pairs, trees) in splits {
        write_parallel(
            &dir.join(format!("{name}.src")),
            &dir.join(format!("{name}.tgt")),
            pairs,
        )?;
        write_string(&dir.join(format!("{name}.src.tree")), &tree_lines(&trees.0))?;
        write_string(&dir.join(format!("{name}.tgt.tree")), &tree_lines(&trees.1))?;
    }
    write_string(&dir.join("dict.tsv"), &dictionary_to_tsv(&data.dictionary))
}

impl SynthData {
    /// Human-readable summary for logs.
    pub fn summary(&self) -> String {
        format!(
            "{} train, {} valid, {} test, {} tm pairs, {} dictionary entries; e.g. {} => {}",
            self.train.len(),
            self.valid.len(),
            self.test.len(),
            self.tm.len(),
            self.dictionary.len(),
            self.train
                .first()
                .map(|p| detokenize(&p.source))
                .unwrap_or_default(),
            self.train
                .first()
                .map(|p| detokenize(&p.target))
                .unwrap_or_default(),
        )
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::retrieval::{similarity, TmIndex};
    use crate::terminology::soft_match;

    fn small() -> SynthConfig {
        SynthConfig {
            n_train_clusters: 40,
            n_valid: 10,
            n_test: 20,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn every_test_sentence_has_one_resolving_entry() {
        let d = generate(&small()).unwrap();
        for p in d.test.iter().chain(&d.valid) {
            let m = soft_match(&d.dictionary, p);
            assert_eq!(m.len(), 1, "{p:?}");
        }
        // Renderings of each term are balanced on the test split.
        let mut counts: HashMap<&TermEntry, usize> = HashMap::new();
        for p in &d.test {
            for e in soft_match(&d.dictionary, p).matches {
                *counts
                    .entry(d.dictionary.iter().find(|x| **x == e).unwrap())
                    .or_default() += 1;
            }
        }
        for pair in d.dictionary.chunks(2) {
            let a = counts.get(&pair[0]).copied().unwrap_or(0);
            let b = counts.get(&pair[1]).copied().unwrap_or(0);
            assert!(a.abs_diff(b) <= 1);
        }
    }

    #[test]
    fn test_sentences_have_similar_tm_siblings() {
        let d = generate(&small()).unwrap();
        let index = TmIndex::build(d.tm.clone());
        for (p, sib) in d.test.iter().zip(&d.tm[d.valid.len()..]) {
            assert!(similarity(&p.source, &sib.source).unwrap() >= 0.6);
            let hit = index.retrieve_best(&p.source, 0.4).unwrap();
            assert!(hit.score >= 0.6);
            // The sibling carries the same term rendering.
            let want = soft_match(&d.dictionary, p);
            assert_eq!(soft_match(&d.dictionary, sib), want);
        }
    }

    #[test]
    fn trees_yield_the_sentences() {
        let d = generate(&small()).unwrap();
        for (p, (s, t)) in d
            .train
            .iter()
            .zip(d.trees.train.0.iter().zip(&d.trees.train.1))
        {
            assert_eq!(s.leaves(), p.source);
            assert_eq!(t.leaves(), p.target);
        }
    }

    #[test]
    fn without_terms_the_mapping_is_word_for_word() {
        let d = generate(&SynthConfig {
            n_ambiguous_terms: 0,
            ..small()
        })
        .unwrap();
        assert!(d.dictionary.is_empty());
        let mut map: HashMap<&str, &str> = HashMap::new();
        for p in d.train.iter().chain(&d.test) {
            assert_eq!(p.source.len(), p.target.len());
            for (s, t) in p.source.iter().zip(&p.target) {
                assert_eq!(*map.entry(s).or_insert(t), t.as_str());
            }
        }
    }

    #[test]
    fn writes_all_files() {
        let d = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_synth(dir.path(), &d).unwrap();
        for f in ["train.src", "test.tgt", "tm.src.tree", "dict.tsv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let back = crate::corpus::load_parallel(
            &dir.path().join("test.src"),
            &dir.path().join("test.tgt"),
        )
        .unwrap();
        assert_eq!(back, d.test);
    }
}

//! Bilingual terminology dictionaries and soft matching.
//!
//! Soft matching keeps every dictionary entry whose source side occurs in the
//! source sentence and whose target side occurs in the target sentence, even
//! when matches overlap. Disambiguation is left to the translation model.

use std::collections::HashSet;
use std::path::Path;

use aho_corasick::{AhoCorasick, AhoCorasickBuilder, MatchKind};
use serde::{Deserialize, Serialize};

use crate::corpus::{detokenize, read_to_string, tokenize, SentencePair, Token};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TermEntry {
    pub source_terms: Vec<Token>,
    pub target_terms: Vec<Token>,
}

impl TermEntry {
    pub fn new(source_terms: Vec<Token>, target_terms: Vec<Token>) -> Result<Self> {
        if source_terms.is_empty() || target_terms.is_empty() {
            return Err(Error::invalid("term entry sides must be non-empty"));
        }
        Ok(TermEntry {
            source_terms,
            target_terms,
        })
    }

    pub fn from_text(source: &str, target: &str) -> Result<Self> {
        Self::new(tokenize(source), tokenize(target))
    }
}

/// Matched entries ordered by first source occurrence, then shorter source
/// term, then lexicographically.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermMatchSet {
    pub matches: Vec<TermEntry>,
}

impl TermMatchSet {
    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }
}

pub fn parse_dictionary(text: &str, name: &str) -> Result<Vec<TermEntry>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::format(
                name,
                i + 1,
                format!("expected 2 tab-separated fields, found {}", fields.len()),
            ));
        }
        let entry = TermEntry::new(tokenize(fields[0]), tokenize(fields[1]))
            .map_err(|_| Error::format(name, i + 1, "empty term"))?;
        if seen.insert(entry.clone()) {
            out.push(entry);
        }
    }
    Ok(out)
}

pub fn load_dictionary(path: &Path) -> Result<Vec<TermEntry>> {
    parse_dictionary(&read_to_string(path)?, &path.display().to_string())
}

pub fn dictionary_to_tsv(entries: &[TermEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        s.push_str(&detokenize(&e.source_terms));
        s.push('\t');
        s.push_str(&detokenize(&e.target_terms));
        s.push('\n');
    }
    s
}

/// Tokens joined with a separator that cannot occur inside a token, padded
/// on both sides so that a pattern match always lines up with token
/// boundaries.
fn boundary_text<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut s = String::from(" ");
    for t in tokens {
        s.push_str(t.as_ref());
        s.push(' ');
    }
    s
}

pub(crate) fn contains_run<S: AsRef<str>, T: AsRef<str>>(haystack: &[S], needle: &[T]) -> bool {
    !needle.is_empty()
        && needle.len() <= haystack.len()
        && haystack
            .windows(needle.len())
            .any(|w| w.iter().zip(needle).all(|(a, b)| a.as_ref() == b.as_ref()))
}

/// A dictionary compiled into a multi-pattern automaton over source phrases.
#[derive(Debug, Clone)]
pub struct TermMatcher {
    entries: Vec<TermEntry>,
    automaton: AhoCorasick,
    /// Entry indices sharing each distinct source phrase (pattern id).
    by_pattern: Vec<Vec<usize>>,
}

impl TermMatcher {
    pub fn new(dict: &[TermEntry]) -> Self {
        let mut patterns: Vec<String> = Vec::new();
        let mut by_pattern: Vec<Vec<usize>> = Vec::new();
        let mut pattern_of = std::collections::HashMap::new();
        let mut seen = HashSet::new();
        let entries: Vec<TermEntry> = dict.iter().filter(|e| seen.insert(*e)).cloned().collect();
        for (i, e) in entries.iter().enumerate() {
            let p = boundary_text(&e.source_terms);
            let pid = *pattern_of.entry(p.clone()).or_insert_with(|| {
                patterns.push(p);
                by_pattern.push(Vec::new());
                patterns.len() - 1
            });
            by_pattern[pid].push(i);
        }
        let automaton = AhoCorasickBuilder::new()
            .match_kind(MatchKind::Standard)
            .build(&patterns)
            .expect("term patterns are plain strings");
        TermMatcher {
            entries,
            automaton,
            by_pattern,
        }
    }

    pub fn entries(&self) -> &[TermEntry] {
        &self.entries
    }

    pub fn soft_match(&self, pair: &SentencePair) -> TermMatchSet {
        if self.entries.is_empty() {
            return TermMatchSet::default();
        }
        let text = boundary_text(&pair.source);
        // Token index of every separator position, so byte offsets can be
        // mapped back to token positions.
        let mut token_at = vec![0usize; text.len() + 1];
        let mut tok = 0;
        for (b, ch) in text.char_indices() {
            if ch == ' ' {
                token_at[b] = tok;
                tok += 1;
            }
        }
        let mut first_pos: Vec<Option<usize>> = vec![None; self.entries.len()];
        for m in self.automaton.find_overlapping_iter(&text) {
            let pos = token_at[m.start()];
            for &ei in &self.by_pattern[m.pattern().as_usize()] {
                if first_pos[ei].is_none_or(|p| pos < p) {
                    first_pos[ei] = Some(pos);
                }
            }
        }
        let mut hits: Vec<(usize, &TermEntry)> = first_pos
            .iter()
            .enumerate()
            .filter_map(|(ei, p)| p.map(|p| (p, &self.entries[ei])))
            .filter(|(_, e)| contains_run(&pair.target, &e.target_terms))
            .collect();
        sort_matches(&mut hits);
        TermMatchSet {
            matches: hits.into_iter().map(|(_, e)| e.clone()).collect(),
        }
    }
}

fn sort_matches(hits: &mut [(usize, &TermEntry)]) {
    hits.sort_by(|(pa, a), (pb, b)| {
        pa.cmp(pb)
            .then(a.source_terms.len().cmp(&b.source_terms.len()))
            .then_with(|| a.cmp(b))
    });
}

/// One-shot soft match. Build a [`TermMatcher`] once when matching many pairs.
pub fn soft_match(dict: &[TermEntry], pair: &SentencePair) -> TermMatchSet {
    TermMatcher::new(dict).soft_match(pair)
}

/// Linear scan over the dictionary; reference implementation of
/// [`TermMatcher::soft_match`].
pub fn soft_match_exhaustive(dict: &[TermEntry], pair: &SentencePair) -> TermMatchSet {
    let mut seen = HashSet::new();
    let mut hits = Vec::new();
    for e in dict {
        if !seen.insert(e) {
            continue;
        }
        let n = e.source_terms.len();
        let first = (0..pair.source.len().saturating_sub(n - 1))
            .find(|&i| pair.source[i..i + n] == e.source_terms[..]);
        if let Some(p) = first {
            if contains_run(&pair.target, &e.target_terms) {
                hits.push((p, e));
            }
        }
    }
    sort_matches(&mut hits);
    TermMatchSet {
        matches: hits.into_iter().map(|(_, e)| e.clone()).collect(),
    }
}

/// JSONL record emitted per sentence pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermMatchRecord {
    pub id: usize,
    pub terms: Vec<(String, String)>,
}

impl TermMatchRecord {
    pub fn new(id: usize, set: &TermMatchSet) -> Self {
        TermMatchRecord {
            id,
            terms: set
                .matches
                .iter()
                .map(|e| (detokenize(&e.source_terms), detokenize(&e.target_terms)))
                .collect(),
        }
    }

    pub fn to_match_set(&self) -> Result<TermMatchSet> {
        let matches = self
            .terms
            .iter()
            .map(|(s, t)| TermEntry::from_text(s, t))
            .collect::<Result<_>>()
            .map_err(|e| Error::Record {
                id: self.id,
                message: e.to_string(),
            })?;
        Ok(TermMatchSet { matches })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(s: &str, t: &str) -> TermEntry {
        TermEntry::from_text(s, t).unwrap()
    }

    fn pair(s: &str, t: &str) -> SentencePair {
        SentencePair::from_text(0, s, t).unwrap()
    }

    #[test]
    fn parses_tsv_and_dedups() {
        let d = parse_dictionary(
            "red cat\trote Katze\nred cat\trote Katze\ncat\tKatze\n",
            "d",
        )
        .unwrap();
        assert_eq!(
            d,
            vec![entry("red cat", "rote Katze"), entry("cat", "Katze")]
        );
    }

    #[test]
    fn malformed_line_reports_number() {
        let err = parse_dictionary("a\tb\nx\ty\tz\n", "d.tsv").unwrap_err();
        match err {
            Error::Format { line, .. } => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(parse_dictionary("a\t \n", "d").is_err());
    }

    #[test]
    fn overlapping_matches_are_kept() {
        let dict = vec![entry("cat", "Katze"), entry("red cat", "rote Katze")];
        let p = pair("the red cat sat", "die rote Katze saß");
        let m = soft_match(&dict, &p);
        assert_eq!(
            m.matches,
            vec![entry("red cat", "rote Katze"), entry("cat", "Katze")]
        );
        assert_eq!(m, soft_match_exhaustive(&dict, &p));
    }

    #[test]
    fn target_side_must_be_present() {
        let dict = vec![entry("red cat", "rote Katze")];
        let m = soft_match(&dict, &pair("the red cat sat", "die blaue Katze saß"));
        assert!(m.is_empty());
        assert!(soft_match(&[], &pair("a", "b")).is_empty());
    }

    #[test]
    fn matches_respect_token_boundaries() {
        let dict = vec![entry("at", "x"), entry("c a", "y")];
        let m = soft_match(&dict, &pair("cat c at", "x z"));
        assert_eq!(m.matches, vec![entry("at", "x")]);
    }

    #[test]
    fn ambiguous_sources_resolved_by_target() {
        let dict = vec![entry("bank", "Bank"), entry("bank", "Ufer")];
        let m = soft_match(&dict, &pair("the bank", "das Ufer"));
        assert_eq!(m.matches, vec![entry("bank", "Ufer")]);
    }

    #[test]
    fn record_roundtrip() {
        let set = TermMatchSet {
            matches: vec![entry("red cat", "rote Katze")],
        };
        let rec = TermMatchRecord::new(3, &set);
        let json = serde_json::to_string(&rec).unwrap();
        assert_eq!(json, r#"{"id":3,"terms":[["red cat","rote Katze"]]}"#);
        assert_eq!(rec.to_match_set().unwrap(), set);
    }
}

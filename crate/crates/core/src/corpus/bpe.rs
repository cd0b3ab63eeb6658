use std::collections::HashMap;
use std::path::Path;

use super::special;
use crate::error::{Error, Result};

/// Appended to the last subword of every token so that a subword sequence
/// can be split back into tokens.
pub const END_OF_WORD: char = '‸';

/// An ordered list of learned symbol merges.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>) -> Result<Self> {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, m) in merges.iter().enumerate() {
            if ranks.insert(m.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate merge {} {}", m.0, m.1)));
            }
        }
        Ok(BpeModel { merges, ranks })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Learns up to `num_merges` merges by repeatedly merging the most
    /// frequent adjacent symbol pair. Equal counts go to the
    /// lexicographically smallest pair. Training stops early once no word
    /// has two symbols left.
    pub fn train<S: AsRef<str>>(corpus: &[Vec<S>], num_merges: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("cannot train BPE on an empty corpus"));
        }
        let mut word_counts: HashMap<&str, usize> = HashMap::new();
        for sentence in corpus {
            for tok in sentence {
                let tok = tok.as_ref();
                if !special::is_reserved(tok) {
                    *word_counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut words: Vec<(Vec<String>, usize)> = word_counts
            .into_iter()
            .map(|(w, c)| (w.chars().map(String::from).collect(), c))
            .collect();
        // HashMap order is random; the merge result does not depend on it,
        // but sort anyway so that debugging output is stable.
        words.sort();

        let mut merges = Vec::with_capacity(num_merges);
        while merges.len() < num_merges {
            let mut pair_counts: HashMap<(&str, &str), usize> = HashMap::new();
            for (syms, count) in &words {
                for w in syms.windows(2) {
                    *pair_counts
                        .entry((w[0].as_str(), w[1].as_str()))
                        .or_default() += count;
                }
            }
            let best = pair_counts
                .into_iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
            let Some(((left, right), _)) = best else {
                break;
            };
            let pair = (left.to_owned(), right.to_owned());
            for (syms, _) in &mut words {
                merge_pair(syms, &pair.0, &pair.1);
            }
            merges.push(pair);
        }
        Self::from_merges(merges)
    }

    /// Splits one token into subword units. Reserved tokens are returned
    /// unchanged; for everything else the last unit carries [`END_OF_WORD`].
    pub fn encode(&self, token: &str) -> Vec<String> {
        if special::is_reserved(token) {
            return vec![token.to_owned()];
        }
        let mut syms: Vec<String> = token.chars().map(String::from).collect();
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).copied())
                .min();
            let Some(rank) = best else { break };
            let (l, r) = &self.merges[rank];
            merge_pair(&mut syms, l, r);
        }
        if let Some(last) = syms.last_mut() {
            last.push(END_OF_WORD);
        }
        syms
    }

    pub fn encode_sequence<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<String> {
        tokens
            .iter()
            .flat_map(|t| self.encode(t.as_ref()))
            .collect()
    }

    /// Joins the subwords of a single token.
    pub fn decode<S: AsRef<str>>(subwords: &[S]) -> String {
        let mut s: String = subwords.iter().map(AsRef::as_ref).collect();
        if s.ends_with(END_OF_WORD) && !special::is_reserved(&s) {
            s.pop();
        }
        s
    }

    /// Regroups a unit sequence into tokens. A token ends at a unit carrying
    /// the end-of-word marker; reserved tokens stand alone. A trailing
    /// incomplete token is kept as-is.
    pub fn decode_sequence<S: AsRef<str>>(units: &[S]) -> Vec<String> {
        let mut out = Vec::new();
        let mut cur = String::new();
        for u in units {
            let u = u.as_ref();
            if special::is_reserved(u) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(u.to_owned());
                continue;
            }
            cur.push_str(u);
            if cur.ends_with(END_OF_WORD) {
                cur.pop();
                out.push(std::mem::take(&mut cur));
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (l, r) in &self.merges {
            s.push_str(l);
            s.push(' ');
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, name: &str) -> Result<Self> {
        let mut merges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
                return Err(Error::format(name, i + 1, "expected \"left right\""));
            }
            merges.push((parts[0].to_owned(), parts[1].to_owned()));
        }
        Self::from_merges(merges).map_err(|e| Error::format(name, 0, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_string(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&super::read_to_string(path)?, &path.display().to_string())
    }
}

fn merge_pair(syms: &mut Vec<String>, left: &str, right: &str) {
    if syms.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(std::mem::take(&mut syms[i]));
            i += 1;
        }
    }
    *syms = out;
}

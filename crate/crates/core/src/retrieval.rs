//! Fuzzy translation-memory retrieval with token-level edit distance.
//!
//! `sim(x, x_s) = 1 - ED(x, x_s) / max(|x|, |x_s|)`. For every query the
//! single best non-identical entry is returned when its similarity is
//! strictly above the threshold. The index groups entries by source length
//! so that whole length classes can be skipped with the bound
//! `ED >= |len(x) - len(x_s)|`, and the remaining candidates are scored with
//! a banded edit distance that gives up as soon as the distance provably
//! exceeds what could still win.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::SentencePair;
use crate::error::{Error, Result};

pub fn token_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance if it is at most `max_dist`, computed only inside the
/// diagonal band of width `max_dist`.
pub fn bounded_edit_distance<A: PartialEq<B>, B>(
    a: &[A],
    b: &[B],
    max_dist: usize,
) -> Option<usize> {
    let (n, m) = (a.len(), b.len());
    if n.abs_diff(m) > max_dist {
        return None;
    }
    if n == 0 || m == 0 {
        return Some(n.max(m));
    }
    let inf = usize::MAX / 2;
    let mut prev = vec![inf; m + 1];
    let mut cur = vec![inf; m + 1];
    for (j, p) in prev.iter_mut().enumerate().take(max_dist.min(m) + 1) {
        *p = j;
    }
    for i in 1..=n {
        let lo = i.saturating_sub(max_dist).max(1);
        let hi = (i + max_dist).min(m);
        cur.fill(inf);
        if i <= max_dist {
            cur[0] = i;
        }
        let mut row_min = cur[0];
        for j in lo..=hi {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            let v = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
            cur[j] = v;
            row_min = row_min.min(v);
        }
        if row_min > max_dist {
            return None;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let d = prev[m];
    (d <= max_dist).then_some(d)
}

fn score_from_distance(dist: usize, max_len: usize) -> f64 {
    1.0 - dist as f64 / max_len as f64
}

pub fn similarity<T: PartialEq>(x: &[T], x_s: &[T]) -> Result<f64> {
    let max_len = x.len().max(x_s.len());
    if max_len == 0 {
        return Err(Error::invalid(
            "similarity of two empty sequences is undefined",
        ));
    }
    Ok(score_from_distance(token_edit_distance(x, x_s), max_len))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub pair: SentencePair,
    pub score: f64,
}

/// Immutable retrieval structure over a translation memory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TmIndex {
    entries: Vec<SentencePair>,
    length_buckets: BTreeMap<usize, Vec<usize>>,
}

impl TmIndex {
    pub fn build(tm: Vec<SentencePair>) -> Self {
        let mut length_buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, p) in tm.iter().enumerate() {
            length_buckets.entry(p.source.len()).or_default().push(i);
        }
        TmIndex {
            entries: tm,
            length_buckets,
        }
    }

    pub fn entries(&self) -> &[SentencePair] {
        &self.entries
    }

    /// Source length to entry positions, positions ascending.
    pub fn length_buckets(&self) -> &BTreeMap<usize, Vec<usize>> {
        &self.length_buckets
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Best non-identical entry with similarity strictly above `lambda`.
    /// Ties go to the lowest entry position.
    pub fn retrieve_best<T: AsRef<str>>(&self, query: &[T], lambda: f64) -> Option<RetrievalHit> {
        let n = query.len();
        if n == 0 {
            return None;
        }
        let query: Vec<&str> = query.iter().map(AsRef::as_ref).collect();

        // Visit length classes closest to the query first so a strong hit
        // tightens the distance cap early.
        let mut lengths: Vec<usize> = self.length_buckets.keys().copied().collect();
        lengths.sort_by_key(|&l| (l.abs_diff(n), l));

        let mut best: Option<(f64, usize)> = None;
        for len in lengths {
            let max_len = n.max(len);
            let upper = score_from_distance(n.abs_diff(len), max_len);
            if upper <= lambda {
                continue;
            }
            if let Some((s, _)) = best {
                if upper < s {
                    continue;
                }
            }
            for &idx in &self.length_buckets[&len] {
                let Some(cap) = distance_cap(max_len, lambda, best.map(|b| b.0)) else {
                    break;
                };
                let source = &self.entries[idx].source;
                if len == n && source.iter().zip(&query).all(|(a, b)| a == b) {
                    continue;
                }
                let Some(dist) = bounded_edit_distance(source, &query, cap) else {
                    continue;
                };
                let score = score_from_distance(dist, max_len);
                let better = match best {
                    None => true,
                    Some((s, i)) => score > s || (score == s && idx < i),
                };
                if better {
                    best = Some((score, idx));
                }
            }
        }
        best.map(|(score, idx)| RetrievalHit {
            pair: self.entries[idx].clone(),
            score,
        })
    }

    /// Brute-force scan computing the full edit distance for every entry.
    pub fn retrieve_best_exhaustive<T: AsRef<str>>(
        &self,
        query: &[T],
        lambda: f64,
    ) -> Option<RetrievalHit> {
        let query: Vec<&str> = query.iter().map(AsRef::as_ref).collect();
        let mut best: Option<(f64, usize)> = None;
        for (idx, e) in self.entries.iter().enumerate() {
            let src: Vec<&str> = e.source.iter().map(String::as_str).collect();
            if src == query {
                continue;
            }
            let Ok(score) = similarity(&src, &query) else {
                continue;
            };
            if score > lambda && best.is_none_or(|(s, _)| score > s) {
                best = Some((score, idx));
            }
        }
        best.map(|(score, idx)| RetrievalHit {
            pair: self.entries[idx].clone(),
            score,
        })
    }

    /// Retrieves for many queries in parallel; output order follows input.
    pub fn retrieve_all<T: AsRef<str> + Sync>(
        &self,
        queries: &[Vec<T>],
        lambda: f64,
    ) -> Vec<Option<RetrievalHit>> {
        queries
            .par_iter()
            .map(|q| self.retrieve_best(q, lambda))
            .collect()
    }
}

/// Largest distance that still yields a score above `lambda` and at least
/// the current best score. Computed with the same float expression as the
/// final score so that pruning never disagrees with the exhaustive scan.
fn distance_cap(max_len: usize, lambda: f64, best: Option<f64>) -> Option<usize> {
    (0..=max_len).rev().find(|&d| {
        let s = score_from_distance(d, max_len);
        s > lambda && best.is_none_or(|b| s >= b)
    })
}

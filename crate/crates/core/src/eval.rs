//! Corpus BLEU and terminology exact-match accuracy.
//!
//! Both metrics are case-insensitive: lines are detokenized, lowercased and
//! re-split on whitespace before counting. Scores are only comparable with
//! other scores from this module.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::detokenize;
use crate::error::{Error, Result};
use crate::terminology::{contains_run, TermMatchSet};

const MAX_ORDER: usize = 4;

fn eval_tokens<S: AsRef<str>>(line: &[S]) -> Vec<String> {
    detokenize(line)
        .to_lowercase()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if n <= tokens.len() {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level statistics; summing them over lines is what makes the score
/// independent of line order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn of_line<S: AsRef<str>, T: AsRef<str>>(hyp: &[S], reference: &[T]) -> Self {
        let h = eval_tokens(hyp);
        let r = eval_tokens(reference);
        let mut s = BleuStats {
            hyp_len: h.len(),
            ref_len: r.len(),
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            let rc = ngram_counts(&r, n);
            for (g, c) in ngram_counts(&h, n) {
                s.matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            s.totals[n - 1] = h.len().saturating_sub(n - 1);
        }
        s
    }

    fn add(&mut self, o: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }

    /// BLEU-4 in [0, 100]. Smoothing adds one to the numerator and
    /// denominator of every order above one.
    pub fn score(&self, smooth: bool) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..MAX_ORDER {
            let (m, t) = if smooth && n > 0 {
                (self.matches[n] + 1, self.totals[n] + 1)
            } else {
                (self.matches[n], self.totals[n])
            };
            if m == 0 || t == 0 {
                return 0.0;
            }
            log_sum += (m as f64 / t as f64).ln();
        }
        let bp = if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        };
        (bp * (log_sum / MAX_ORDER as f64).exp() * 100.0).clamp(0.0, 100.0)
    }
}

pub fn corpus_bleu<S: AsRef<str>, T: AsRef<str>>(
    hyps: &[Vec<S>],
    refs: &[Vec<T>],
    smooth: bool,
) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::invalid(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut total = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        total.add(&BleuStats::of_line(h, r));
    }
    Ok(total.score(smooth))
}

/// Returns `(accuracy, n_matched, n_terms)`. A term is matched when its
/// target side occurs contiguously in the case-folded hypothesis; with no
/// terms at all the accuracy is 1.
pub fn exact_match_accuracy<S: AsRef<str>>(
    hyps: &[Vec<S>],
    terms: &[TermMatchSet],
) -> Result<(f64, usize, usize)> {
    if hyps.len() != terms.len() {
        return Err(Error::invalid(format!(
            "{} hypotheses for {} term sets",
            hyps.len(),
            terms.len()
        )));
    }
    let (mut matched, mut total) = (0, 0);
    for (h, set) in hyps.iter().zip(terms) {
        let h = eval_tokens(h);
        for e in &set.matches {
            total += 1;
            if contains_run(&h, &eval_tokens(&e.target_terms)) {
                matched += 1;
            }
        }
    }
    let acc = if total == 0 {
        1.0
    } else {
        matched as f64 / total as f64
    };
    Ok((acc, matched, total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub exact_match: f64,
    pub n_terms: usize,
    pub n_matched: usize,
}

pub fn evaluate<S: AsRef<str>, T: AsRef<str>>(
    hyps: &[Vec<S>],
    refs: &[Vec<T>],
    terms: Option<&[TermMatchSet]>,
    smooth: bool,
) -> Result<EvalReport> {
    let bleu = corpus_bleu(hyps, refs, smooth)?;
    let (exact_match, n_matched, n_terms) = match terms {
        Some(t) => exact_match_accuracy(hyps, t)?,
        None => (1.0, 0, 0),
    };
    Ok(EvalReport {
        bleu,
        exact_match,
        n_terms,
        n_matched,
    })
}

/// One row per test set: BLEU and exact match (as a percentage).
pub fn report_table(rows: &[(&str, &EvalReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(8);
    let mut s = format!(
        "{:<width$}  {:>6}  {:>11}\n",
        "Test set", "BLEU", "Exact Match"
    );
    for (name, r) in rows {
        let em = if r.n_terms == 0 {
            "-".to_owned()
        } else {
            format!("{:.2}", r.exact_match * 100.0)
        };
        let _ = writeln!(s, "{name:<width$}  {:>6.2}  {em:>11}", r.bleu);
    }
    s
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::corpus::tokenize;
    use crate::terminology::TermEntry;

    fn lines(v: &[&str]) -> Vec<Vec<String>> {
        v.iter().map(|l| tokenize(l)).collect()
    }

    #[test]
    fn clipped_unigrams_and_smoothing() {
        let h = lines(&["the the the the"]);
        let r = lines(&["the cat sat down"]);
        let s = BleuStats::of_line(&h[0], &r[0]);
        assert_eq!(s.matches, [1, 0, 0, 0]);
        assert_eq!(s.totals, [4, 3, 2, 1]);
        assert_eq!(corpus_bleu(&h, &r, false).unwrap(), 0.0);
        let expected = (1.0f64 / 4.0 * 1.0 / 4.0 * 1.0 / 3.0 * 1.0 / 2.0).powf(0.25) * 100.0;
        assert!((corpus_bleu(&h, &r, true).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 31.95).abs() < 0.01);
    }

    #[test]
    fn identity_case_and_degenerate_lines() {
        let h = lines(&["The cat sat on the mat", "a b c d e"]);
        let r = lines(&["the cat sat on the mat", "A B C D E"]);
        assert!((corpus_bleu(&h, &r, false).unwrap() - 100.0).abs() < 1e-9);
        assert!((corpus_bleu(&h, &r, true).unwrap() - 100.0).abs() < 1e-9);
        let empty = lines(&[""]);
        assert_eq!(corpus_bleu(&empty, &lines(&["x y"]), true).unwrap(), 0.0);
        assert!(corpus_bleu(&empty, &r, true).is_err());
    }

    #[test]
    fn brevity_penalty() {
        let h = lines(&["a b c d"]);
        let r = lines(&["a b c d e f g h"]);
        let got = corpus_bleu(&h, &r, false).unwrap();
        assert!((got - (1.0f64 - 2.0).exp() * 100.0).abs() < 1e-9);
    }

    fn terms(pairs: &[(&str, &str)]) -> TermMatchSet {
        TermMatchSet {
            matches: pairs
                .iter()
                .map(|(s, t)| TermEntry::from_text(s, t).unwrap())
                .collect(),
        }
    }

    #[test]
    fn exact_match_examples() {
        let t = terms(&[("red cat", "rote Katze"), ("cat", "Katze")]);
        let (a, m, n) =
            exact_match_accuracy(&lines(&["die rote Katze saß"]), std::slice::from_ref(&t))
                .unwrap();
        assert_eq!((a, m, n), (1.0, 2, 2));
        let (a, m, n) = exact_match_accuracy(&lines(&["die blaue Katze saß"]), &[t]).unwrap();
        assert_eq!((a, m, n), (0.5, 1, 2));
        let (a, _, n) = exact_match_accuracy(&lines(&["x"]), &[TermMatchSet::default()]).unwrap();
        assert_eq!((a, n), (1.0, 0));
        let (a, _, _) = exact_match_accuracy(
            &lines(&["DIE ROTE KATZE"]),
            &[terms(&[("red cat", "rote Katze")])],
        )
        .unwrap();
        assert_eq!(a, 1.0);
    }

    #[test]
    fn table_layout() {
        let r = EvalReport {
            bleu: 36.6249,
            exact_match: 0.8453,
            n_terms: 10,
            n_matched: 8,
        };
        let t = report_table(&[("synth", &r)]);
        assert!(t.lines().nth(1).unwrap().contains("36.62"));
        assert!(t.lines().nth(1).unwrap().contains("84.53"));
    }

    fn corpus() -> impl Strategy<Value = Vec<(Vec<String>, Vec<String>)>> {
        let line = prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "E"]), 0..8)
            .prop_map(|v| v.into_iter().map(String::from).collect::<Vec<_>>());
        prop::collection::vec((line.clone(), line), 1..6)
    }

    proptest! {
        #[test]
        fn bleu_is_bounded_and_order_free(c in corpus(), rot in 0usize..6, smooth: bool) {
            let (h, r): (Vec<_>, Vec<_>) = c.iter().cloned().unzip();
            let b = corpus_bleu(&h, &r, smooth).unwrap();
            prop_assert!((0.0..=100.0).contains(&b));
            let mut c2 = c.clone();
            let k = rot % c2.len();
            c2.rotate_left(k);
            let (h2, r2): (Vec<_>, Vec<_>) = c2.into_iter().unzip();
            prop_assert_eq!(b, corpus_bleu(&h2, &r2, smooth).unwrap());
            // Unsmoothed, a corpus without any 4-gram scores 0 even against itself.
            if h.iter().any(|l| l.len() >= if smooth { 1 } else { MAX_ORDER }) {
                prop_assert!((corpus_bleu(&h, &h, smooth).unwrap() - 100.0).abs() < 1e-9);
            }
        }

        #[test]
        fn appending_a_term_never_lowers_accuracy(
            hyp in prop::collection::vec(prop::sample::select(vec!["x", "y", "z"]), 0..6),
            targets in prop::collection::vec(prop::collection::vec(prop::sample::select(vec!["x", "y", "z"]), 1..3), 1..4),
            pick in 0usize..4,
        ) {
            let hyp: Vec<String> = hyp.into_iter().map(String::from).collect();
            let set = TermMatchSet {
                matches: targets
                    .iter()
                    .map(|t| TermEntry::new(vec!["s".into()], t.iter().map(|w| w.to_string()).collect()).unwrap())
                    .collect(),
            };
            let (before, _, _) = exact_match_accuracy(std::slice::from_ref(&hyp), std::slice::from_ref(&set)).unwrap();
            let mut longer = hyp.clone();
            longer.extend(set.matches[pick % set.matches.len()].target_terms.iter().cloned());
            let (after, _, _) = exact_match_accuracy(&[longer], &[set]).unwrap();
            prop_assert!(after >= before);
            prop_assert!((0.0..=1.0).contains(&after));
        }
    }
}

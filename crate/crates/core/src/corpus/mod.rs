//! Tokenized parallel corpora, the shared vocabulary and joint BPE.
//!
//! Parallel text is UTF-8 with one sentence per line and tokens separated by
//! whitespace. Line `i` of the source file is aligned with line `i` of the
//! target file.

mod bpe;
mod vocab;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bpe::{BpeModel, END_OF_WORD};
pub use vocab::{special, Vocab};

pub type Token = String;

/// An aligned pair of tokenized sentences.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SentencePair {
    pub id: usize,
    pub source: Vec<Token>,
    pub target: Vec<Token>,
}

impl SentencePair {
    pub fn new(id: usize, source: Vec<Token>, target: Vec<Token>) -> Result<Self> {
        check_side(&source, id, "source")?;
        check_side(&target, id, "target")?;
        Ok(SentencePair { id, source, target })
    }

    /// Builds a pair from whitespace-separated strings.
    pub fn from_text(id: usize, source: &str, target: &str) -> Result<Self> {
        Self::new(id, tokenize(source), tokenize(target))
    }
}

fn check_side(tokens: &[Token], id: usize, side: &str) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Record {
            id,
            message: format!("empty {side} sentence"),
        });
    }
    for tok in tokens {
        if tok.is_empty() || tok.chars().any(char::is_whitespace) {
            return Err(Error::Record {
                id,
                message: format!("{side} token {tok:?} is empty or contains whitespace"),
            });
        }
        if special::is_reserved(tok) {
            return Err(Error::Record {
                id,
                message: format!("{side} contains reserved token {tok}"),
            });
        }
    }
    Ok(())
}

pub fn tokenize(line: &str) -> Vec<Token> {
    line.split_whitespace().map(str::to_owned).collect()
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_ref());
    }
    out
}

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_string(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes one whitespace-joined token line per sentence.
pub fn write_token_lines<S: AsRef<str>>(path: &Path, lines: &[Vec<S>]) -> Result<()> {
    let mut out = String::new();
    for line in lines {
        out.push_str(&detokenize(line));
        out.push('\n');
    }
    write_string(path, &out)
}

/// Reads a whitespace-tokenized file, one sentence per line. Blank lines are
/// rejected with their 1-based line number.
pub fn read_token_lines(path: &Path) -> Result<Vec<Vec<Token>>> {
    let text = read_to_string(path)?;
    let name = path.display().to_string();
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let toks = tokenize(line);
            if toks.is_empty() {
                Err(Error::format(&name, i + 1, "empty line"))
            } else {
                Ok(toks)
            }
        })
        .collect()
}

pub fn load_parallel(source_path: &Path, target_path: &Path) -> Result<Vec<SentencePair>> {
    let source = read_to_string(source_path)?;
    let target = read_to_string(target_path)?;
    parse_parallel(
        &source,
        &target,
        &source_path.display().to_string(),
        &target_path.display().to_string(),
    )
}

/// Pairs the lines of two in-memory documents. The names are only used in
/// error messages.
pub fn parse_parallel(
    source: &str,
    target: &str,
    source_name: &str,
    target_name: &str,
) -> Result<Vec<SentencePair>> {
    let src_lines: Vec<&str> = source.lines().collect();
    let tgt_lines: Vec<&str> = target.lines().collect();
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::LineCountMismatch {
            left_path: source_name.to_owned(),
            left: src_lines.len(),
            right_path: target_name.to_owned(),
            right: tgt_lines.len(),
        });
    }
    let mut pairs = Vec::with_capacity(src_lines.len());
    for (i, (s, t)) in src_lines.iter().zip(&tgt_lines).enumerate() {
        let src = tokenize(s);
        let tgt = tokenize(t);
        if src.is_empty() {
            return Err(Error::format(source_name, i + 1, "empty line"));
        }
        if tgt.is_empty() {
            return Err(Error::format(target_name, i + 1, "empty line"));
        }
        for (name, toks) in [(source_name, &src), (target_name, &tgt)] {
            if let Some(tok) = toks.iter().find(|t| special::is_reserved(t)) {
                return Err(Error::format(
                    name,
                    i + 1,
                    format!("reserved token {tok} in corpus text"),
                ));
            }
        }
        pairs.push(SentencePair {
            id: i,
            source: src,
            target: tgt,
        });
    }
    Ok(pairs)
}

pub fn write_parallel(
    source_path: &Path,
    target_path: &Path,
    pairs: &[SentencePair],
) -> Result<()> {
    let src: Vec<_> = pairs.iter().map(|p| p.source.clone()).collect();
    let tgt: Vec<_> = pairs.iter().map(|p| p.target.clone()).collect();
    write_token_lines(source_path, &src)?;
    write_token_lines(target_path, &tgt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<Token> {
        tokenize(s)
    }

    #[test]
    fn pairs_lines_in_order() {
        let pairs = parse_parallel("a b\nc", "x y\nz", "s", "t").unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(
            pairs[0],
            SentencePair {
                id: 0,
                source: toks("a b"),
                target: toks("x y")
            }
        );
        assert_eq!(
            pairs[1],
            SentencePair {
                id: 1,
                source: toks("c"),
                target: toks("z")
            }
        );
    }

    #[test]
    fn line_count_mismatch_names_both_counts() {
        let err = parse_parallel("a\nb\nc", "x\ny", "src.txt", "tgt.txt").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("src.txt has 3"), "{msg}");
        assert!(msg.contains("tgt.txt has 2"), "{msg}");
    }

    #[test]
    fn blank_line_reports_line_number() {
        let err = parse_parallel("a\nb\n\nd", "w\nx\ny\nz", "src.txt", "tgt.txt").unwrap_err();
        match err {
            Error::Format { path, line, .. } => {
                assert_eq!(path, "src.txt");
                assert_eq!(line, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reserved_tokens_rejected() {
        assert!(parse_parallel("a [Term]", "x", "s", "t").is_err());
        assert!(SentencePair::from_text(0, "a", "<eos>").is_err());
        assert!(SentencePair::from_text(0, "", "x").is_err());
    }

    #[test]
    fn load_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let s = dir.path().join("a.src");
        let t = dir.path().join("a.tgt");
        let pairs = vec![
            SentencePair::from_text(0, "the cat", "die Katze").unwrap(),
            SentencePair::from_text(1, "sat", "saß").unwrap(),
        ];
        write_parallel(&s, &t, &pairs).unwrap();
        assert_eq!(load_parallel(&s, &t).unwrap(), pairs);
    }
}

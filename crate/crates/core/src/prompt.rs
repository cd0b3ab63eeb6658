//! Prefix-prompt assembly.
//!
//! The encoder input is the source knowledge followed by `[Input]` and the
//! source sentence; the decoder output is the target knowledge followed by
//! `[Output]`, the target sentence and `<eos>`. Each knowledge block opens
//! with its own special token, in the fixed order `[Sentence]`, `[Term]`,
//! `[Template]`, and every matched term gets its own `[Term]` marker so that
//! the k-th term on the input side lines up with the k-th on the output side.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{special, BpeModel, SentencePair, Token};
use crate::error::{Error, Result};
use crate::template::Template;
use crate::terminology::TermMatchSet;

/// Knowledge attached to one sentence pair. Every part may be absent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeBundle {
    pub similar: Option<SentencePair>,
    pub terms: TermMatchSet,
    /// Source and target template.
    pub template: Option<(Template, Template)>,
}

impl KnowledgeBundle {
    pub fn is_empty(&self) -> bool {
        self.similar.is_none() && self.terms.is_empty() && self.template_block().is_none()
    }

    fn template_block(&self) -> Option<(&Template, &Template)> {
        match &self.template {
            Some((s, t)) if !s.units.is_empty() && !t.units.is_empty() => Some((s, t)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Block {
    Sentence,
    Term,
    Template,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptedExample {
    pub id: usize,
    #[serde(rename = "input")]
    pub input_tokens: Vec<Token>,
    #[serde(rename = "output")]
    pub output_tokens: Vec<Token>,
    #[serde(rename = "mask")]
    pub loss_mask: Vec<u8>,
}

fn mask_after_output(output: &[Token]) -> Vec<u8> {
    let mut after = false;
    output
        .iter()
        .map(|t| {
            let bit = u8::from(after);
            if t == special::OUTPUT {
                after = true;
            }
            bit
        })
        .collect()
}

fn assemble_blocks(pair: &SentencePair, k: &KnowledgeBundle, blocks: &[Block]) -> PromptedExample {
    let mut input = Vec::new();
    let mut output = Vec::new();
    for b in blocks {
        match b {
            Block::Sentence => {
                if let Some(s) = &k.similar {
                    input.push(special::SENTENCE.to_owned());
                    input.extend(s.source.iter().cloned());
                    output.push(special::SENTENCE.to_owned());
                    output.extend(s.target.iter().cloned());
                }
            }
            Block::Term => {
                for e in &k.terms.matches {
                    input.push(special::TERM.to_owned());
                    input.extend(e.source_terms.iter().cloned());
                    output.push(special::TERM.to_owned());
                    output.extend(e.target_terms.iter().cloned());
                }
            }
            Block::Template => {
                if let Some((s, t)) = k.template_block() {
                    input.push(special::TEMPLATE.to_owned());
                    input.extend(s.units.iter().cloned());
                    output.push(special::TEMPLATE.to_owned());
                    output.extend(t.units.iter().cloned());
                }
            }
        }
    }
    input.push(special::INPUT.to_owned());
    input.extend(pair.source.iter().cloned());
    output.push(special::OUTPUT.to_owned());
    output.extend(pair.target.iter().cloned());
    output.push(special::EOS.to_owned());
    let loss_mask = mask_after_output(&output);
    PromptedExample {
        id: pair.id,
        input_tokens: input,
        output_tokens: output,
        loss_mask,
    }
}

const ALL_BLOCKS: [Block; 3] = [Block::Sentence, Block::Term, Block::Template];

pub fn assemble(pair: &SentencePair, k: &KnowledgeBundle) -> PromptedExample {
    assemble_blocks(pair, k, &ALL_BLOCKS)
}

/// Like [`assemble`], but drops whole knowledge blocks (template first,
/// then similar sentence, then terms) while the BPE-encoded input is longer
/// than `max_input_units`.
pub fn assemble_capped(
    pair: &SentencePair,
    k: &KnowledgeBundle,
    bpe: &BpeModel,
    max_input_units: usize,
) -> PromptedExample {
    let mut blocks = ALL_BLOCKS.to_vec();
    let mut ex = assemble_blocks(pair, k, &blocks);
    for drop in [Block::Template, Block::Sentence, Block::Term] {
        if bpe.encode_sequence(&ex.input_tokens).len() <= max_input_units {
            break;
        }
        blocks.retain(|b| *b != drop);
        ex = assemble_blocks(pair, k, &blocks);
    }
    ex
}

/// Splits decoder tokens at the single `[Output]` separator into the
/// knowledge prefix and the translation.
pub fn split_output<S: AsRef<str> + Clone>(tokens: &[S]) -> Result<(Vec<S>, Vec<S>)> {
    let positions: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.as_ref() == special::OUTPUT)
        .map(|(i, _)| i)
        .collect();
    match positions.as_slice() {
        [p] => Ok((tokens[..*p].to_vec(), tokens[p + 1..].to_vec())),
        [] => Err(Error::invalid("no [Output] separator")),
        _ => Err(Error::invalid(format!(
            "{} [Output] separators, expected one",
            positions.len()
        ))),
    }
}

impl PromptedExample {
    /// Applies BPE to every non-special token and recomputes the mask.
    pub fn apply_bpe(&self, bpe: &BpeModel) -> PromptedExample {
        let output_tokens = bpe.encode_sequence(&self.output_tokens);
        PromptedExample {
            id: self.id,
            input_tokens: bpe.encode_sequence(&self.input_tokens),
            loss_mask: mask_after_output(&output_tokens),
            output_tokens,
        }
    }

    /// Decoder tokens before `[Output]`, i.e. the target knowledge prefix.
    /// When no separator is present the whole output is the prefix.
    pub fn knowledge_prefix(&self) -> &[Token] {
        let end = self
            .output_tokens
            .iter()
            .position(|t| t == special::OUTPUT)
            .unwrap_or(self.output_tokens.len());
        &self.output_tokens[..end]
    }

    /// Checks the record invariants: one `[Input]`, one `[Output]`, and a
    /// mask that is set exactly after `[Output]`.
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Error::Record {
            id: self.id,
            message: m.to_owned(),
        };
        if self
            .input_tokens
            .iter()
            .filter(|t| *t == special::INPUT)
            .count()
            != 1
        {
            return Err(err("input must contain exactly one [Input]"));
        }
        if self
            .output_tokens
            .iter()
            .filter(|t| *t == special::OUTPUT)
            .count()
            != 1
        {
            return Err(err("output must contain exactly one [Output]"));
        }
        if self.loss_mask != mask_after_output(&self.output_tokens) {
            return Err(err("mask must be 1 exactly after [Output]"));
        }
        Ok(())
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec =
            serde_json::from_str(&line).map_err(|e| Error::format(&name, i + 1, e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use crate::terminology::TermEntry;

    fn pair() -> SentencePair {
        SentencePair::from_text(7, "the cat sat", "die Katze saß").unwrap()
    }

    fn t(s: &str) -> Vec<Token> {
        tokenize(s)
    }

    #[test]
    fn empty_bundle() {
        let ex = assemble(&pair(), &KnowledgeBundle::default());
        assert_eq!(ex.input_tokens, t("[Input] the cat sat"));
        assert_eq!(ex.output_tokens, t("[Output] die Katze saß <eos>"));
        assert_eq!(ex.loss_mask, vec![0, 1, 1, 1, 1]);
        assert_eq!(ex.id, 7);
        ex.validate().unwrap();
    }

    #[test]
    fn terms_only() {
        let k = KnowledgeBundle {
            terms: TermMatchSet {
                matches: vec![TermEntry::from_text("cat", "Katze").unwrap()],
            },
            ..Default::default()
        };
        let ex = assemble(&pair(), &k);
        assert_eq!(ex.input_tokens, t("[Term] cat [Input] the cat sat"));
        assert_eq!(
            ex.output_tokens,
            t("[Term] Katze [Output] die Katze saß <eos>")
        );
        assert_eq!(ex.loss_mask, vec![0, 0, 0, 1, 1, 1, 1]);
    }

    fn full_bundle() -> KnowledgeBundle {
        KnowledgeBundle {
            similar: Some(SentencePair::from_text(1, "the dog sat", "der Hund saß").unwrap()),
            terms: TermMatchSet {
                matches: vec![
                    TermEntry::from_text("red cat", "rote Katze").unwrap(),
                    TermEntry::from_text("cat", "Katze").unwrap(),
                ],
            },
            template: Some((
                Template { units: t("NP VP") },
                Template { units: t("NP VP") },
            )),
        }
    }

    #[test]
    fn full_bundle_golden() {
        let ex = assemble(&pair(), &full_bundle());
        assert_eq!(
            ex.input_tokens,
            t("[Sentence] the dog sat [Term] red cat [Term] cat [Template] NP VP [Input] the cat sat")
        );
        assert_eq!(
            ex.output_tokens,
            t("[Sentence] der Hund saß [Term] rote Katze [Term] Katze [Template] NP VP [Output] die Katze saß <eos>")
        );
        assert_eq!(ex.loss_mask.iter().map(|&b| b as usize).sum::<usize>(), 4);
        assert_eq!(assemble(&pair(), &full_bundle()), ex);
    }

    #[test]
    fn empty_template_is_omitted() {
        let k = KnowledgeBundle {
            template: Some((Template { units: vec![] }, Template { units: t("NP") })),
            ..Default::default()
        };
        assert!(k.is_empty());
        assert_eq!(assemble(&pair(), &k).input_tokens, t("[Input] the cat sat"));
    }

    #[test]
    fn cap_drops_template_then_sentence_then_terms() {
        let bpe = BpeModel::default();
        let k = full_bundle();
        let full = assemble(&pair(), &k);
        let full_units = bpe.encode_sequence(&full.input_tokens).len();
        let capped = assemble_capped(&pair(), &k, &bpe, full_units);
        assert_eq!(capped, full);

        let capped = assemble_capped(&pair(), &k, &bpe, full_units - 1);
        assert!(!capped.input_tokens.contains(&"[Template]".to_owned()));
        assert!(capped.input_tokens.contains(&"[Sentence]".to_owned()));

        let capped = assemble_capped(&pair(), &k, &bpe, 30);
        assert!(!capped.input_tokens.contains(&"[Sentence]".to_owned()));
        assert!(capped.input_tokens.contains(&"[Term]".to_owned()));

        let capped = assemble_capped(&pair(), &k, &bpe, 1);
        assert_eq!(capped, assemble(&pair(), &KnowledgeBundle::default()));
    }

    #[test]
    fn split_output_cases() {
        let (p, y) = split_output(&t("[Output] a b")).unwrap();
        assert!(p.is_empty());
        assert_eq!(y, t("a b"));
        let (p, y) = split_output(&t("[Term] Katze [Output] die Katze")).unwrap();
        assert_eq!((p, y), (t("[Term] Katze"), t("die Katze")));
        assert!(split_output(&t("a b")).is_err());
        assert!(split_output(&t("[Output] a [Output]")).is_err());
    }

    #[test]
    fn bpe_keeps_mask_on_target_units() {
        let bpe = BpeModel::train(&[t("die Katze saß")], 2).unwrap();
        let k = KnowledgeBundle {
            terms: TermMatchSet {
                matches: vec![TermEntry::from_text("cat", "Katze").unwrap()],
            },
            ..Default::default()
        };
        let ex = assemble(&pair(), &k).apply_bpe(&bpe);
        ex.validate().unwrap();
        let (_, y) = split_output(&ex.output_tokens).unwrap();
        assert_eq!(ex.loss_mask.iter().filter(|&&b| b == 1).count(), y.len());
        assert_eq!(BpeModel::decode_sequence(&y), t("die Katze saß <eos>"));
    }

    #[test]
    fn jsonl_schema() {
        let ex = assemble(&pair(), &KnowledgeBundle::default());
        let json = serde_json::to_string(&ex).unwrap();
        assert_eq!(
            json,
            r#"{"id":7,"input":["[Input]","the","cat","sat"],"output":["[Output]","die","Katze","saß","<eos>"],"mask":[0,1,1,1,1]}"#
        );
    }
}

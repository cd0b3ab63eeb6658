//! Bracketed constituency trees and depth-pruned translation templates.

use std::fmt;

use crate::corpus::special;
use crate::corpus::{SentencePair, Token};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseTree {
    pub label: Token,
    /// Empty for word leaves.
    pub children: Vec<ParseTree>,
}

impl ParseTree {
    pub fn leaf(word: impl Into<Token>) -> Self {
        ParseTree {
            label: word.into(),
            children: Vec::new(),
        }
    }

    pub fn node(label: impl Into<Token>, children: Vec<ParseTree>) -> Self {
        ParseTree {
            label: label.into(),
            children,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Depth of the deepest leaf, with the root at depth 0.
    pub fn height(&self) -> usize {
        self.children
            .iter()
            .map(|c| c.height() + 1)
            .max()
            .unwrap_or(0)
    }

    /// Words at the leaves, left to right.
    pub fn leaves(&self) -> Vec<Token> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves(&self, out: &mut Vec<Token>) {
        if self.is_leaf() {
            out.push(self.label.clone());
        } else {
            for c in &self.children {
                c.collect_leaves(out);
            }
        }
    }

    pub fn internal_count(&self) -> usize {
        if self.is_leaf() {
            0
        } else {
            1 + self
                .children
                .iter()
                .map(Self::internal_count)
                .sum::<usize>()
        }
    }
}

impl fmt::Display for ParseTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_leaf() {
            return f.write_str(&self.label);
        }
        write!(f, "({}", self.label)?;
        for c in &self.children {
            write!(f, " {c}")?;
        }
        f.write_str(")")
    }
}

pub fn parse_ptb(text: &str) -> Result<ParseTree> {
    let mut p = PtbParser {
        src: text.as_bytes(),
        pos: 0,
    };
    p.skip_ws();
    let tree = p.node()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.error("trailing input after tree"));
    }
    Ok(tree)
}

struct PtbParser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl PtbParser<'_> {
    fn error(&self, message: &str) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.to_owned(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn atom(&mut self) -> &str {
        let start = self.pos;
        while self.pos < self.src.len() {
            let b = self.src[self.pos];
            if b.is_ascii_whitespace() || b == b'(' || b == b')' {
                break;
            }
            self.pos += 1;
        }
        // Atoms end on ASCII delimiters, so the slice stays on char boundaries.
        std::str::from_utf8(&self.src[start..self.pos]).expect("input was a str")
    }

    fn node(&mut self) -> Result<ParseTree> {
        if self.src.get(self.pos) != Some(&b'(') {
            return Err(self.error("expected '('"));
        }
        self.pos += 1;
        self.skip_ws();
        let label = self.atom().to_owned();
        if label.is_empty() {
            return Err(self.error("node without a label"));
        }
        let mut children = Vec::new();
        loop {
            self.skip_ws();
            match self.src.get(self.pos) {
                None => return Err(self.error("unbalanced parentheses")),
                Some(b')') => {
                    self.pos += 1;
                    break;
                }
                Some(b'(') => children.push(self.node()?),
                Some(_) => children.push(ParseTree::leaf(self.atom())),
            }
        }
        if children.is_empty() {
            return Err(self.error("empty node"));
        }
        Ok(ParseTree::node(label, children))
    }
}

/// A sentence skeleton of surface words and constituent labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub units: Vec<Token>,
}

/// Frontier of the tree cut at `depth`: nodes above the cut expand into
/// their children, internal nodes exactly at the cut emit their label, and
/// words at or above the cut emit themselves.
pub fn extract_template(tree: &ParseTree, depth: usize) -> Template {
    let mut units = Vec::new();
    frontier(tree, 0, depth, &mut units);
    Template { units }
}

fn frontier(node: &ParseTree, at: usize, depth: usize, out: &mut Vec<Token>) {
    if node.is_leaf() || at >= depth {
        out.push(node.label.clone());
    } else {
        for c in &node.children {
            frontier(c, at + 1, depth, out);
        }
    }
}

/// Template for each line of a tree file; unparsable lines give `None`.
pub fn templates_from_lines(text: &str, depth: usize) -> Vec<Option<Template>> {
    text.lines()
        .map(|l| parse_ptb(l).ok().map(|t| extract_template(&t, depth)))
        .collect()
}

/// Template-prediction training data: the source sentence and its template
/// on the input side, the target template on the output side.
pub fn build_template_dataset(
    pairs: &[SentencePair],
    src_trees: &[ParseTree],
    tgt_trees: &[ParseTree],
    depth: usize,
) -> Result<Vec<(Vec<Token>, Vec<Token>)>> {
    if src_trees.len() != pairs.len() || tgt_trees.len() != pairs.len() {
        return Err(Error::invalid(format!(
            "{} pairs but {} source and {} target trees",
            pairs.len(),
            src_trees.len(),
            tgt_trees.len()
        )));
    }
    let mut out = Vec::with_capacity(pairs.len());
    for ((p, st), tt) in pairs.iter().zip(src_trees).zip(tgt_trees) {
        if st.leaves() != p.source {
            return Err(Error::Record {
                id: p.id,
                message: "source tree yield differs from the source sentence".into(),
            });
        }
        if tt.leaves() != p.target {
            return Err(Error::Record {
                id: p.id,
                message: "target tree yield differs from the target sentence".into(),
            });
        }
        let mut input = p.source.clone();
        input.push(special::TEMPLATE.to_owned());
        input.extend(extract_template(st, depth).units);
        out.push((input, extract_template(tt, depth).units));
    }
    Ok(out)
}

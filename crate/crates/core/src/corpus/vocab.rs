use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Reserved tokens. They occupy ids `0..special::ALL.len()` in this order.
pub mod special {
    pub const PAD: &str = "<pad>";
    pub const UNK: &str = "<unk>";
    pub const BOS: &str = "<bos>";
    pub const EOS: &str = "<eos>";
    pub const SENTENCE: &str = "[Sentence]";
    pub const TERM: &str = "[Term]";
    pub const TEMPLATE: &str = "[Template]";
    pub const INPUT: &str = "[Input]";
    pub const OUTPUT: &str = "[Output]";

    pub const ALL: [&str; 9] = [PAD, UNK, BOS, EOS, SENTENCE, TERM, TEMPLATE, INPUT, OUTPUT];

    pub const PAD_ID: u32 = 0;
    pub const UNK_ID: u32 = 1;
    pub const BOS_ID: u32 = 2;
    pub const EOS_ID: u32 = 3;
    pub const SENTENCE_ID: u32 = 4;
    pub const TERM_ID: u32 = 5;
    pub const TEMPLATE_ID: u32 = 6;
    pub const INPUT_ID: u32 = 7;
    pub const OUTPUT_ID: u32 = 8;

    pub fn is_reserved(token: &str) -> bool {
        ALL.contains(&token)
    }
}

/// Bijection between tokens and dense integer ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_of: Vec<String>,
    id_of: HashMap<String, u32>,
}

impl Vocab {
    /// Specials first, then the distinct remaining tokens in lexicographic order.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let rest: BTreeSet<String> = tokens
            .into_iter()
            .filter(|t| !special::is_reserved(t.as_ref()))
            .map(|t| t.as_ref().to_owned())
            .collect();
        let token_of: Vec<String> = special::ALL
            .iter()
            .map(|s| s.to_string())
            .chain(rest)
            .collect();
        Self::from_list(token_of)
    }

    fn from_list(token_of: Vec<String>) -> Self {
        let id_of = token_of
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { token_of, id_of }
    }

    pub fn len(&self) -> usize {
        self.token_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_of.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.id_of.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.token_of.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.token_of
    }

    /// Maps tokens to ids; unknown tokens become `<unk>`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens
            .iter()
            .map(|t| self.id_of(t.as_ref()).unwrap_or(special::UNK_ID))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token_of(i).unwrap_or(special::UNK).to_owned())
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.token_of {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    /// Hex SHA-256 of the serialized vocabulary.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        format!("{digest:x}")
    }

    pub fn parse(text: &str, name: &str) -> Result<Self> {
        let token_of: Vec<String> = text.lines().map(str::to_owned).collect();
        for (i, s) in special::ALL.iter().enumerate() {
            if token_of.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::format(
                    name,
                    i + 1,
                    format!("expected special token {s}"),
                ));
            }
        }
        let mut seen = BTreeSet::new();
        for (i, t) in token_of.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::format(name, i + 1, "invalid vocabulary token"));
            }
            if !seen.insert(t.as_str()) {
                return Err(Error::format(name, i + 1, format!("duplicate token {t}")));
            }
        }
        Ok(Self::from_list(token_of))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_string(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&super::read_to_string(path)?, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_take_lowest_ids() {
        let v = Vocab::from_tokens(["b", "a", "[Term]", "a"]);
        for (i, s) in special::ALL.iter().enumerate() {
            assert_eq!(v.id_of(s), Some(i as u32));
        }
        assert_eq!(v.id_of("a"), Some(9));
        assert_eq!(v.id_of("b"), Some(10));
        assert_eq!(v.len(), 11);
        assert_eq!(v.id_of(special::OUTPUT), Some(special::OUTPUT_ID));
        assert_eq!(v.id_of(special::EOS), Some(special::EOS_ID));
    }

    #[test]
    fn bijective_and_roundtrips_through_text() {
        let v = Vocab::from_tokens(["x‸", "y", "zz‸"]);
        for id in 0..v.len() as u32 {
            let t = v.token_of(id).unwrap();
            assert_eq!(v.id_of(t), Some(id));
        }
        let back = Vocab::parse(&v.to_text(), "v").unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
    }

    #[test]
    fn unknown_maps_to_unk() {
        let v = Vocab::from_tokens(["a"]);
        assert_eq!(v.encode(&["a", "zzz"]), vec![9, special::UNK_ID]);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(Vocab::parse("a\nb\n", "v").is_err());
        let mut text = Vocab::from_tokens(["a"]).to_text();
        text.push_str("a\n");
        assert!(Vocab::parse(&text, "v").is_err());
    }
}

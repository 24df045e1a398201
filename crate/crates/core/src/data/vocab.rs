//! Token vocabulary with four reserved ids.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::TokenId;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const MASK: TokenId = 3;
pub const NUM_RESERVED: usize = 4;

pub const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<s>", "</s>", "<mask>"];

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < NUM_RESERVED
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from content tokens; reserved tokens are prepended.
    pub fn new<S: AsRef<str>>(content: &[S]) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(content.iter().map(|s| s.as_ref().to_string()));
        Self::from_tokens(tokens)
    }

    /// Synthetic vocabulary `w0 .. w{n-1}`.
    pub fn synthetic(content: usize) -> Self {
        let names: Vec<String> = (0..content).map(|i| format!("w{i}")).collect();
        Self::new(&names).expect("distinct names")
    }

    /// Full token list, reserved tokens first.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Data(format!("vocabulary must start with {RESERVED:?}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid token {t:?} at line {}", i + 1)));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Data(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// One token per line, reserved tokens first.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Whitespace-separated text to ids.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|t| {
                self.id(t)
                    .ok_or_else(|| Error::Data(format!("unknown token {t:?}")))
            })
            .collect()
    }

    /// Ids to text, dropping special tokens.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&i| !is_special(i))
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_layout() {
        let v = Vocab::synthetic(5);
        assert_eq!(v.len(), 9);
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<mask>"), Some(MASK));
        assert_eq!(v.id("w0"), Some(4));
        assert!(is_special(EOS) && !is_special(4));
    }

    #[test]
    fn encode_decode() {
        let v = Vocab::synthetic(5);
        let ids = v.encode("w1 w4  w0").unwrap();
        assert_eq!(ids, vec![5, 8, 4]);
        assert_eq!(v.decode(&[BOS, 5, 8, EOS]), "w1 w4");
        assert!(v.encode("w9").is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = Vocab::synthetic(3);
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
        std::fs::write(&p, "a\nb\n").unwrap();
        assert!(matches!(Vocab::load(&p), Err(Error::Data(_))));
        assert!(matches!(Vocab::load(&dir.path().join("nope")), Err(Error::MissingInput(_))));
    }
}

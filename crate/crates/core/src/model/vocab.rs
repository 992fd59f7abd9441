use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const MASK: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["[PAD]", "[CLS]", "[MASK]", "[UNK]"];
/// First id available to ordinary tokens.
pub const FIRST_REGULAR: usize = SPECIALS.len();

/// Character-level vocabulary. The four reserved tokens always occupy
/// ids 0..4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, special) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::invalid(format!(
                    "vocabulary line {} must be {special}",
                    i + 1
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Specials followed by `chars` in order.
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(chars.into_iter().map(String::from));
        Vocab::from_tokens(tokens)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Vocab::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::file(path, e))
    }

    /// One token per line.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `[CLS]` followed by one id per character; unknown characters map to
    /// `[UNK]`.
    pub fn encode_line(&self, line: &str) -> Vec<usize> {
        let mut buf = [0u8; 4];
        std::iter::once(CLS)
            .chain(line.chars().map(|c| self.id(c.encode_utf8(&mut buf)).unwrap_or(UNK)))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= FIRST_REGULAR)
            .filter_map(|&i| self.token(i))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocab::from_chars("ab".chars()).unwrap();
        assert_eq!(v.id("[PAD]"), Some(PAD));
        assert_eq!(v.id("[CLS]"), Some(CLS));
        assert_eq!(v.id("[MASK]"), Some(MASK));
        assert_eq!(v.id("[UNK]"), Some(UNK));
        assert_eq!(v.encode_line("abz"), vec![CLS, 4, 5, UNK]);
        assert_eq!(v.decode(&v.encode_line("ba")), "ba");
    }

    #[test]
    fn malformed_vocabularies_are_rejected() {
        assert!(Vocab::from_tokens(vec!["[CLS]".into()]).is_err());
        assert!(Vocab::from_chars("aa".chars()).is_err());
        let text = Vocab::from_chars("xy".chars()).unwrap().to_text();
        let back = Vocab::from_tokens(text.lines().map(String::from).collect()).unwrap();
        assert_eq!(back.len(), 6);
    }
}

//! Tokenization and vocabularies.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases and splits on whitespace, dropping punctuation other than apostrophes.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c == '\'' {
                c.to_ascii_lowercase()
            } else {
                ' '
            }
        })
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Specials followed by every distinct token of `texts`, sorted.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(tokenize).collect();
        Self::from_tokens(
            SPECIALS
                .iter()
                .map(|s| s.to_string())
                .chain(words.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())))
                .collect(),
        )
        .expect("specials present")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Data(format!("vocabulary slot {i} must be {s}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// One token per line; the line number is the id.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
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

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Token ids, mapping unknown words to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    /// `<bos> tokens <eos>`, keeping at most `max_len` tokens between the markers.
    pub fn encode_question(&self, text: &str, max_len: usize) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(text).into_iter().take(max_len));
        ids.push(EOS);
        ids
    }

    /// Joins tokens with spaces, skipping specials.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i > UNK)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

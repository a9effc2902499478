//! Lowercasing whitespace/punctuation tokenizer and its vocabulary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

/// Token → id table. Ids 0 and 1 are reserved for padding and unknown words.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, u32>", into = "BTreeMap<String, u32>")]
pub struct Vocab {
    ids: BTreeMap<String, u32>,
    tokens: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self {
            ids: BTreeMap::from([(PAD_TOKEN.to_string(), PAD_ID), (UNK_TOKEN.to_string(), UNK_ID)]),
            tokens: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()],
        }
    }
}

impl TryFrom<BTreeMap<String, u32>> for Vocab {
    type Error = Error;

    fn try_from(ids: BTreeMap<String, u32>) -> Result<Self> {
        if ids.get(PAD_TOKEN) != Some(&PAD_ID) || ids.get(UNK_TOKEN) != Some(&UNK_ID) {
            return Err(Error::Tokenize(format!(
                "vocabulary must map {PAD_TOKEN} to {PAD_ID} and {UNK_TOKEN} to {UNK_ID}"
            )));
        }
        let mut tokens = vec![String::new(); ids.len()];
        for (tok, &id) in &ids {
            let slot = tokens
                .get_mut(id as usize)
                .ok_or_else(|| Error::Tokenize(format!("token id {id} for `{tok}` is not dense")))?;
            if !slot.is_empty() {
                return Err(Error::Tokenize(format!("token id {id} assigned twice")));
            }
            *slot = tok.clone();
        }
        Ok(Self { ids, tokens })
    }
}

impl From<Vocab> for BTreeMap<String, u32> {
    fn from(v: Vocab) -> Self {
        v.ids
    }
}

impl Vocab {
    /// Vocabulary over the given words, ids assigned in sorted order.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut sorted: Vec<String> = words.into_iter().map(|w| w.as_ref().to_lowercase()).collect();
        sorted.sort();
        sorted.dedup();
        let mut vocab = Vocab::default();
        for w in sorted {
            vocab.insert(&w);
        }
        vocab
    }

    pub fn insert(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.ids.insert(token.to_string(), id);
        self.tokens.push(token.to_string());
        id
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Lowercased words, split on whitespace and punctuation (which is dropped).
pub fn split_words(sentence: &str) -> Vec<String> {
    sentence
        .split(|c: char| c.is_whitespace() || (c.is_ascii_punctuation() && c != '\'' && c != '-'))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn tokenize(sentence: &str, vocab: &Vocab) -> Result<Vec<u32>> {
    let words = split_words(sentence);
    if words.is_empty() {
        return Err(Error::Tokenize(format!("sentence `{sentence}` has no tokens")));
    }
    Ok(words.iter().map(|w| vocab.id(w).unwrap_or(UNK_ID)).collect())
}

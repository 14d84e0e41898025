use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::token::tokenize;
use super::SmilesError;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token text to contiguous integer ids. `PAD = 0`, `UNK = 1`, corpus tokens
/// follow in sorted order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(corpus_tokens: impl IntoIterator<Item = String>) -> Self {
        let distinct: BTreeSet<String> = corpus_tokens.into_iter().collect();
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(distinct.into_iter().filter(|t| t != PAD_TOKEN && t != UNK_TOKEN));
        Self::with_index(tokens)
    }

    fn with_index(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindexed(self) -> Self {
        Self::with_index(self.tokens)
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

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

pub fn build_vocabulary<S: AsRef<str>>(corpus: &[S]) -> Result<Vocabulary, SmilesError> {
    let mut all = Vec::new();
    for (index, s) in corpus.iter().enumerate() {
        let toks = tokenize(s.as_ref()).map_err(|e| SmilesError::Corpus {
            index,
            source: Box::new(e),
        })?;
        all.extend(toks.into_iter().map(|t| t.text));
    }
    Ok(Vocabulary::from_tokens(all))
}

/// Token ids padded with PAD or truncated to exactly `max_len`.
pub fn encode_tokens(smiles: &str, vocab: &Vocabulary, max_len: usize) -> Result<Vec<usize>, SmilesError> {
    assert!(max_len >= 1, "max_len must be at least 1");
    let mut ids: Vec<usize> = tokenize(smiles)?
        .iter()
        .take(max_len)
        .map(|t| vocab.id(&t.text).unwrap_or(UNK_ID))
        .collect();
    ids.resize(max_len, PAD_ID);
    Ok(ids)
}

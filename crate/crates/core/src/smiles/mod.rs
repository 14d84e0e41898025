//! SMILES handling: lexing, graph parsing, canonical writing and the token
//! vocabulary used by the molecule encoder.
//!
//! Only the stereo-free subset of SMILES is accepted. Directional bonds
//! (`/`, `\`), chirality marks (`@`) and isotopes are rejected with
//! [`SmilesError::StereoUnsupported`]. No valence checking is done.

mod canon;
mod elements;
mod graph;
mod pool;
mod token;
mod vocab;

pub use canon::{canonical_ranks, canonicalize, canonicalize_str, write_with_priority};
pub use graph::{parse, Atom, Bond, BondOrder, MolGraph};
pub use pool::builtin_pool;
pub use token::{join_tokens, tokenize, Token, TokenKind};
pub use vocab::{build_vocabulary, encode_tokens, Vocabulary, PAD_ID, PAD_TOKEN, UNK_ID, UNK_TOKEN};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SmilesError {
    #[error("empty SMILES string")]
    Empty,
    #[error("non-ASCII input at column {}", position + 1)]
    NonAscii { position: usize },
    #[error("unexpected character {ch:?} at column {}", position + 1)]
    UnexpectedCharacter { position: usize, ch: char },
    #[error("unterminated bracket atom starting at column {}", position + 1)]
    UnterminatedBracket { position: usize },
    #[error("malformed bracket atom at column {}", position + 1)]
    InvalidBracketAtom { position: usize },
    #[error("unclosed branch opened at column {}", position + 1)]
    UnclosedBranch { position: usize },
    #[error("unmatched ')' at column {}", position + 1)]
    UnmatchedBranchClose { position: usize },
    #[error("ring bond {digit} opened but never closed")]
    UnmatchedRingBond { digit: u32 },
    #[error("stereochemistry or isotope marker at column {} is not supported", position + 1)]
    StereoUnsupported { position: usize },
    #[error("invalid bond at column {}", position + 1)]
    InvalidBond { position: usize },
    #[error("corpus entry {index}: {source}")]
    Corpus {
        index: usize,
        #[source]
        source: Box<SmilesError>,
    },
}

impl SmilesError {
    /// Zero-based column of the offending character, when the error has one.
    pub fn position(&self) -> Option<usize> {
        match self {
            SmilesError::NonAscii { position }
            | SmilesError::UnexpectedCharacter { position, .. }
            | SmilesError::UnterminatedBracket { position }
            | SmilesError::InvalidBracketAtom { position }
            | SmilesError::UnclosedBranch { position }
            | SmilesError::UnmatchedBranchClose { position }
            | SmilesError::StereoUnsupported { position }
            | SmilesError::InvalidBond { position } => Some(*position),
            SmilesError::Corpus { source, .. } => source.position(),
            SmilesError::Empty | SmilesError::UnmatchedRingBond { .. } => None,
        }
    }
}

//! Text normalization, tokenization and vocabularies.
//!
//! Training and evaluation share the same tokenizers: Chinese is split into
//! characters, Malay and Indonesian on whitespace, always case-sensitive.

mod normalize;
mod vocab;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use normalize::{
    normalize_entities, strip_controls, to_halfwidth, traditional_to_simplified, EntityDirection,
    SimplificationTable,
};
pub use vocab::{build_vocab, build_vocab_with_reserved, TokenId, TokenIds, Vocabulary};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TextError {
    #[error("cannot load simplification table {path}: {reason}")]
    MissingTable { path: String, reason: String },
    #[error("no token reaches the frequency threshold")]
    EmptyCorpus,
    #[error("token id {id} out of range for vocabulary of size {size}")]
    InvalidId { id: TokenId, size: usize },
    #[error("invalid vocabulary parameters: {0}")]
    InvalidConfig(String),
    #[error("unknown language tag {0:?}")]
    UnknownLang(String),
    #[error("malformed vocabulary file: {0}")]
    MalformedVocab(String),
}

/// Language tag of a sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lang {
    Zh,
    Ms,
    Id,
    Synthetic,
}

impl Lang {
    /// Tokenizer used both for training and for scoring text in this language.
    pub fn tokenizer_mode(self) -> TokenizerMode {
        match self {
            Lang::Zh => TokenizerMode::Char,
            Lang::Ms | Lang::Id | Lang::Synthetic => TokenizerMode::Word,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Lang::Zh => "zh",
            Lang::Ms => "ms",
            Lang::Id => "id",
            Lang::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Lang {
    type Err = TextError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zh" => Ok(Lang::Zh),
            "ms" => Ok(Lang::Ms),
            "id" => Ok(Lang::Id),
            "synthetic" => Ok(Lang::Synthetic),
            other => Err(TextError::UnknownLang(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    Word,
    Char,
}

impl FromStr for TokenizerMode {
    type Err = TextError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "word" => Ok(TokenizerMode::Word),
            "char" => Ok(TokenizerMode::Char),
            other => Err(TextError::InvalidConfig(format!(
                "tokenizer mode {other:?}"
            ))),
        }
    }
}

/// A normalized sentence with its language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub text: String,
    pub lang: Lang,
}

impl Sentence {
    pub fn new(text: impl Into<String>, lang: Lang) -> Self {
        Self {
            text: text.into(),
            lang,
        }
    }

    /// Apply the full preprocessing chain to raw (crawled) text: entity
    /// decoding and control stripping everywhere; for Chinese additionally
    /// traditional-to-simplified conversion and half-width folding.
    pub fn normalized(raw: &str, lang: Lang, table: Option<&SimplificationTable>) -> Self {
        let mut text = strip_controls(&normalize_entities(raw, EntityDirection::Decode));
        if lang == Lang::Zh {
            if let Some(table) = table {
                text = table.convert(&text);
            }
            text = to_halfwidth(&text);
        }
        Self {
            text: text.trim().to_string(),
            lang,
        }
    }

    pub fn tokens(&self) -> Vec<String> {
        tokenize(&self.text, self.lang.tokenizer_mode())
    }
}

/// Split text into tokens. Word mode splits on Unicode whitespace; char mode
/// yields every non-whitespace scalar value.
pub fn tokenize(text: &str, mode: TokenizerMode) -> Vec<String> {
    match mode {
        TokenizerMode::Word => text.split_whitespace().map(str::to_string).collect(),
        TokenizerMode::Char => text
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(String::from)
            .collect(),
    }
}

/// Inverse of [`tokenize`] up to whitespace.
pub fn detokenize(tokens: &[String], mode: TokenizerMode) -> String {
    match mode {
        TokenizerMode::Word => tokens.join(" "),
        TokenizerMode::Char => tokens.concat(),
    }
}

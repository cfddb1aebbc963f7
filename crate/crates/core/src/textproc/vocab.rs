use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::TextError;

pub type TokenId = u32;
pub type TokenIds = Vec<TokenId>;

/// Token ↔ id mapping with the four specials at ids 0–3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub const PAD: TokenId = 0;
    pub const BOS: TokenId = 1;
    pub const EOS: TokenId = 2;
    pub const UNK: TokenId = 3;
    pub const SPECIALS: [&'static str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
    pub const NUM_SPECIALS: usize = 4;

    /// Build from regular tokens in id order; specials are prepended and
    /// duplicates (including special strings) are dropped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = Self::SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, TokenId> = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        for tok in tokens {
            let tok = tok.into();
            if index.contains_key(&tok) {
                continue;
            }
            index.insert(tok.clone(), all.len() as TokenId);
            all.push(tok);
        }
        Self { tokens: all, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= Self::NUM_SPECIALS
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

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < Self::NUM_SPECIALS
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S], add_bos_eos: bool) -> TokenIds {
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        if add_bos_eos {
            ids.push(Self::BOS);
        }
        ids.extend(
            tokens
                .iter()
                .map(|t| self.id(t.as_ref()).unwrap_or(Self::UNK)),
        );
        if add_bos_eos {
            ids.push(Self::EOS);
        }
        ids
    }

    /// Map ids back to tokens, dropping PAD/BOS/EOS/UNK.
    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<String>, TextError> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.token(id).ok_or(TextError::InvalidId {
                id,
                size: self.len(),
            })?;
            if !Self::is_special(id) {
                out.push(tok.to_string());
            }
        }
        Ok(out)
    }

    /// SHA-256 over the newline-joined token list.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().into()
    }

    /// One token per line, specials included.
    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        f.flush()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TextError> {
        let path = path.as_ref();
        let f = std::fs::File::open(path)
            .map_err(|e| TextError::MalformedVocab(format!("{}: {e}", path.display())))?;
        let mut lines = Vec::new();
        for line in std::io::BufReader::new(f).lines() {
            lines.push(line.map_err(|e| TextError::MalformedVocab(e.to_string()))?);
        }
        if lines.len() < Self::NUM_SPECIALS
            || lines[..Self::NUM_SPECIALS]
                .iter()
                .zip(Self::SPECIALS)
                .any(|(a, b)| a != b)
        {
            return Err(TextError::MalformedVocab(format!(
                "{}: missing special tokens",
                path.display()
            )));
        }
        let v = Self::from_tokens(lines.into_iter().skip(Self::NUM_SPECIALS));
        Ok(v)
    }
}

/// Frequency-ranked vocabulary: tokens with count ≥ `min_count`, sorted by
/// (count desc, token asc), truncated to `max_size - 4`.
pub fn build_vocab<S: AsRef<str>>(
    corpus: &[Vec<S>],
    min_count: usize,
    max_size: usize,
) -> Result<Vocabulary, TextError> {
    build_vocab_with_reserved(corpus, min_count, max_size, &[])
}

/// Like [`build_vocab`] but places `reserved` tokens right after the specials
/// regardless of their frequency.
pub fn build_vocab_with_reserved<S: AsRef<str>>(
    corpus: &[Vec<S>],
    min_count: usize,
    max_size: usize,
    reserved: &[&str],
) -> Result<Vocabulary, TextError> {
    if min_count < 1 {
        return Err(TextError::InvalidConfig("min_count must be >= 1".into()));
    }
    if max_size < Vocabulary::NUM_SPECIALS + 1 + reserved.len() {
        return Err(TextError::InvalidConfig(format!(
            "max_size {max_size} leaves no room for regular tokens"
        )));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for sent in corpus {
        for tok in sent {
            *counts.entry(tok.as_ref()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, c)| {
            *c >= min_count && !reserved.contains(t) && !Vocabulary::SPECIALS.contains(t)
        })
        .collect();
    if ranked.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size - Vocabulary::NUM_SPECIALS - reserved.len());
    Ok(Vocabulary::from_tokens(
        reserved
            .iter()
            .copied()
            .chain(ranked.into_iter().map(|(t, _)| t)),
    ))
}

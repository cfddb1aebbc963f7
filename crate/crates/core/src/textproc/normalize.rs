use std::collections::HashMap;
use std::path::Path;

use super::TextError;

/// Direction of `&amp;` entity handling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntityDirection {
    /// Crawled input: `&amp` and `&amp;` become `&`.
    Decode,
    /// Submission output: a bare `&` becomes `&amp;`.
    Encode,
}

const AMP_ENTITY: &str = "&amp;";
const AMP_BARE: &str = "&amp";

/// Decode or encode ampersand entities.
///
/// Decoding runs to a fixed point so doubly escaped crawl artifacts such as
/// `&amp;amp;` collapse to `&`. Encoding leaves existing `&amp;` untouched,
/// which makes both directions idempotent.
pub fn normalize_entities(text: &str, direction: EntityDirection) -> String {
    match direction {
        EntityDirection::Decode => {
            let mut cur = text.to_string();
            loop {
                if cur.contains(AMP_ENTITY) {
                    cur = cur.replace(AMP_ENTITY, "&");
                } else if cur.contains(AMP_BARE) {
                    cur = cur.replace(AMP_BARE, "&");
                } else {
                    break;
                }
            }
            cur
        }
        EntityDirection::Encode => {
            let mut out = String::with_capacity(text.len() + 8);
            let mut rest = text;
            while let Some(pos) = rest.find('&') {
                out.push_str(&rest[..pos]);
                let tail = &rest[pos..];
                out.push_str(AMP_ENTITY);
                rest = if tail.starts_with(AMP_ENTITY) {
                    &tail[AMP_ENTITY.len()..]
                } else {
                    &tail[1..]
                };
            }
            out.push_str(rest);
            out
        }
    }
}

/// Fold full-width ASCII variants (U+FF01..U+FF5E) and the ideographic space
/// to their half-width forms. This is the GB2312 row-3 folding applied before
/// character-level scoring.
pub fn to_halfwidth(text: &str) -> String {
    text.chars().map(halfwidth_char).collect()
}

#[inline]
fn halfwidth_char(c: char) -> char {
    match c as u32 {
        0x3000 => ' ',
        cp @ 0xFF01..=0xFF5E => char::from_u32(cp - 0xFEE0).unwrap_or(c),
        _ => c,
    }
}

/// Drop control characters, keeping ordinary whitespace.
pub fn strip_controls(text: &str) -> String {
    text.chars()
        .filter(|c| !c.is_control() || *c == ' ' || *c == '\t')
        .map(|c| if c == '\t' { ' ' } else { c })
        .collect()
}

static BUNDLED_T2S: &str = include_str!("../../data/t2s.tsv");

/// Per-codepoint traditional to simplified Chinese mapping.
#[derive(Debug, Clone, Default)]
pub struct SimplificationTable {
    map: HashMap<char, char>,
}

impl SimplificationTable {
    /// The table shipped with the crate (`data/t2s.tsv`).
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_T2S).expect("bundled mapping file is well formed")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TextError> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| TextError::MissingTable {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::parse(&raw).map_err(|reason| TextError::MissingTable {
            path: path.display().to_string(),
            reason,
        })
    }

    /// Parse `TRAD<TAB>SIMP` lines; `#` starts a comment line.
    pub fn parse(raw: &str) -> Result<Self, String> {
        let mut map = HashMap::new();
        for (lineno, line) in raw.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (trad, simp) = line
                .split_once('\t')
                .ok_or_else(|| format!("line {}: expected TRAD<TAB>SIMP", lineno + 1))?;
            let mut tc = trad.chars();
            let mut sc = simp.chars();
            match (tc.next(), tc.next(), sc.next(), sc.next()) {
                (Some(t), None, Some(s), None) => {
                    map.insert(t, s);
                }
                _ => {
                    return Err(format!(
                        "line {}: entries must be single characters",
                        lineno + 1
                    ))
                }
            }
        }
        Ok(Self { map })
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (char, char)>) -> Self {
        Self {
            map: pairs.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// (traditional, simplified) pairs sorted by traditional code point.
    pub fn pairs(&self) -> Vec<(char, char)> {
        let mut v: Vec<(char, char)> = self.map.iter().map(|(&t, &s)| (t, s)).collect();
        v.sort_unstable();
        v
    }

    pub fn convert(&self, text: &str) -> String {
        text.chars()
            .map(|c| *self.map.get(&c).unwrap_or(&c))
            .collect()
    }
}

/// Replace every traditional character found in `table`.
pub fn traditional_to_simplified(text: &str, table: &SimplificationTable) -> String {
    table.convert(text)
}

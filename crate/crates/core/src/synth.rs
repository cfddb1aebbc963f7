//! Deterministic toy languages that stand in for the competition corpora.
//!
//! Sentences are walks over a fixed concept graph. Two sibling source
//! languages (`ms`, `id`) share most of their lexicon; both translate into a
//! Chinese-like target written one character per concept (a few concepts use
//! two). Modifier concepts swap with the following head in the target, some
//! concepts own a rare synonym that is common only in monolingual text, and
//! raw target text mixes in traditional character forms.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::textproc::{Lang, SimplificationTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub concepts: usize,
    /// Out-degree of every concept in the sentence graph.
    pub successors: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Fraction of concepts whose `id` word differs from the `ms` word.
    pub sibling_divergence: f64,
    /// Fraction of concepts that own a synonym.
    pub synonym_fraction: f64,
    /// Probability of the synonym form in parallel training text.
    pub train_synonym_rate: f64,
    /// Probability of the synonym form in dev/test and monolingual text.
    pub eval_synonym_rate: f64,
    /// Probability that a target character is written in traditional form.
    pub traditional_rate: f64,
    pub train_pairs: usize,
    pub dev_pairs: usize,
    pub test_pairs: usize,
    pub mono_sentences: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            concepts: 40,
            successors: 3,
            min_len: 3,
            max_len: 10,
            sibling_divergence: 0.3,
            synonym_fraction: 0.25,
            train_synonym_rate: 0.0,
            eval_synonym_rate: 0.5,
            traditional_rate: 0.1,
            train_pairs: 1200,
            dev_pairs: 100,
            test_pairs: 100,
            mono_sentences: 4000,
            seed: 2022,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.concepts < 4 || self.successors == 0 || self.successors > self.concepts {
            return Err("need at least 4 concepts and 1..=concepts successors".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(format!(
                "bad length range {}..={}",
                self.min_len, self.max_len
            ));
        }
        for (name, p) in [
            ("sibling_divergence", self.sibling_divergence),
            ("synonym_fraction", self.synonym_fraction),
            ("train_synonym_rate", self.train_synonym_rate),
            ("eval_synonym_rate", self.eval_synonym_rate),
            ("traditional_rate", self.traditional_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        Ok(())
    }
}

/// The two source languages of the toy task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceLang {
    Ms,
    Id,
}

impl SourceLang {
    pub fn lang(self) -> Lang {
        match self {
            SourceLang::Ms => Lang::Ms,
            SourceLang::Id => Lang::Id,
        }
    }

    pub fn sibling(self) -> Self {
        match self {
            SourceLang::Ms => SourceLang::Id,
            SourceLang::Id => SourceLang::Ms,
        }
    }
}

/// Raw parallel text as (source, target) strings.
pub type RawPair = (String, String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<RawPair>,
    pub dev: Vec<RawPair>,
    pub test: Vec<RawPair>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub ms_zh: Splits,
    pub id_zh: Splits,
    pub mono_ms: Vec<String>,
    pub mono_id: Vec<String>,
    pub mono_zh: Vec<String>,
}

impl SyntheticCorpus {
    pub fn splits(&self, lang: SourceLang) -> &Splits {
        match lang {
            SourceLang::Ms => &self.ms_zh,
            SourceLang::Id => &self.id_zh,
        }
    }

    pub fn mono(&self, lang: SourceLang) -> &[String] {
        match lang {
            SourceLang::Ms => &self.mono_ms,
            SourceLang::Id => &self.mono_id,
        }
    }

    /// Write every split as TSV and every monolingual set as plain text.
    pub fn write(&self, dir: impl AsRef<Path>) -> std::io::Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (name, s) in [("ms-zh", &self.ms_zh), ("id-zh", &self.id_zh)] {
            for (split, pairs) in [("train", &s.train), ("dev", &s.dev), ("test", &s.test)] {
                let mut f = fs::File::create(dir.join(format!("{name}.{split}.tsv")))?;
                for (a, b) in pairs {
                    writeln!(f, "{a}\t{b}")?;
                }
            }
        }
        for (name, lines) in [
            ("ms", &self.mono_ms),
            ("id", &self.mono_id),
            ("zh", &self.mono_zh),
        ] {
            let mut f = fs::File::create(dir.join(format!("mono.{name}.txt")))?;
            for l in lines.iter() {
                writeln!(f, "{l}")?;
            }
        }
        Ok(())
    }
}

/// Fixed lexicon, grammar and target script of one toy task.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub cfg: SynthConfig,
    ms_words: Vec<String>,
    id_words: Vec<String>,
    ms_synonyms: Vec<Option<String>>,
    id_synonyms: Vec<Option<String>>,
    target: Vec<Vec<char>>,
    modifier: Vec<bool>,
    successors: Vec<Vec<usize>>,
    traditional: HashMap<char, char>,
}

const CONSONANTS: &[char] = &['b', 'd', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't'];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];

fn syllable<R: Rng>(rng: &mut R) -> String {
    format!(
        "{}{}",
        CONSONANTS.choose(rng).unwrap(),
        VOWELS.choose(rng).unwrap()
    )
}

fn fresh_word<R: Rng>(rng: &mut R, used: &mut HashSet<String>, first: Option<&str>) -> String {
    loop {
        let head = first.map_or_else(|| syllable(rng), str::to_string);
        let w = format!("{head}{}", syllable(rng));
        if used.insert(w.clone()) {
            return w;
        }
    }
}

fn is_cjk(c: char) -> bool {
    ('\u{4E00}'..='\u{9FFF}').contains(&c)
}

impl SyntheticTask {
    pub fn new(cfg: SynthConfig) -> Result<Self, String> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n = cfg.concepts;
        let mut used = HashSet::new();
        let ms_words: Vec<String> = (0..n)
            .map(|_| fresh_word(&mut rng, &mut used, None))
            .collect();
        let id_words: Vec<String> = ms_words
            .iter()
            .map(|w| {
                if rng.gen_bool(cfg.sibling_divergence) {
                    fresh_word(&mut rng, &mut used, Some(&w[..2]))
                } else {
                    w.clone()
                }
            })
            .collect();
        let has_synonym: Vec<bool> = (0..n).map(|_| rng.gen_bool(cfg.synonym_fraction)).collect();
        let ms_synonyms: Vec<Option<String>> = has_synonym
            .iter()
            .map(|&s| s.then(|| fresh_word(&mut rng, &mut used, None)))
            .collect();
        let id_synonyms: Vec<Option<String>> = has_synonym
            .iter()
            .zip(&ms_synonyms)
            .map(|(&s, ms)| {
                s.then(|| {
                    if rng.gen_bool(cfg.sibling_divergence) {
                        fresh_word(&mut rng, &mut used, None)
                    } else {
                        ms.clone().expect("synonym exists")
                    }
                })
            })
            .collect();

        let table = SimplificationTable::bundled();
        let mut traditional: HashMap<char, char> = HashMap::new();
        for (t, s) in table.pairs() {
            if is_cjk(t) && is_cjk(s) && t != s {
                traditional.entry(s).or_insert(t);
            }
        }
        let mut script: Vec<char> = traditional.keys().copied().collect();
        script.sort_unstable();
        script.shuffle(&mut rng);
        let mut script = script.into_iter();
        let target: Vec<Vec<char>> = (0..n)
            .map(|_| {
                let k = if rng.gen_bool(0.25) { 2 } else { 1 };
                (0..k)
                    .map(|_| script.next().expect("enough characters"))
                    .collect()
            })
            .collect();
        let modifier: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.2)).collect();
        let all: Vec<usize> = (0..n).collect();
        let successors = (0..n)
            .map(|_| {
                let mut s: Vec<usize> = all
                    .choose_multiple(&mut rng, cfg.successors)
                    .copied()
                    .collect();
                s.sort_unstable();
                s
            })
            .collect();
        Ok(Self {
            cfg,
            ms_words,
            id_words,
            ms_synonyms,
            id_synonyms,
            target,
            modifier,
            successors,
            traditional,
        })
    }

    /// A random walk over the concept graph.
    pub fn sample_concepts<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let len = rng.gen_range(self.cfg.min_len..=self.cfg.max_len);
        let mut c = rng.gen_range(0..self.cfg.concepts);
        let mut out = vec![c];
        while out.len() < len {
            c = *self.successors[c].choose(rng).unwrap();
            out.push(c);
        }
        out
    }

    pub fn realize_source<R: Rng>(
        &self,
        concepts: &[usize],
        lang: SourceLang,
        synonym_rate: f64,
        rng: &mut R,
    ) -> String {
        let (words, syns) = match lang {
            SourceLang::Ms => (&self.ms_words, &self.ms_synonyms),
            SourceLang::Id => (&self.id_words, &self.id_synonyms),
        };
        concepts
            .iter()
            .map(|&c| match &syns[c] {
                Some(s) if rng.gen_bool(synonym_rate) => s.as_str(),
                _ => words[c].as_str(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Target concept order: a modifier followed by a non-modifier swaps
    /// with it.
    pub fn target_order(&self, concepts: &[usize]) -> Vec<usize> {
        let mut out = Vec::with_capacity(concepts.len());
        let mut i = 0;
        while i < concepts.len() {
            if i + 1 < concepts.len()
                && self.modifier[concepts[i]]
                && !self.modifier[concepts[i + 1]]
            {
                out.push(concepts[i + 1]);
                out.push(concepts[i]);
                i += 2;
            } else {
                out.push(concepts[i]);
                i += 1;
            }
        }
        out
    }

    pub fn realize_target<R: Rng>(&self, concepts: &[usize], rng: &mut R) -> String {
        let p = self.cfg.traditional_rate;
        self.target_order(concepts)
            .into_iter()
            .flat_map(|c| self.target[c].iter().copied())
            .map(|ch| {
                if p > 0.0 && rng.gen_bool(p) {
                    self.traditional[&ch]
                } else {
                    ch
                }
            })
            .collect()
    }

    /// Simplified target characters, in concept order.
    pub fn target_script(&self) -> Vec<char> {
        self.target.iter().flatten().copied().collect()
    }

    fn pairs<R: Rng>(
        &self,
        n: usize,
        lang: SourceLang,
        synonym_rate: f64,
        rng: &mut R,
    ) -> Vec<RawPair> {
        (0..n)
            .map(|_| {
                let c = self.sample_concepts(rng);
                (
                    self.realize_source(&c, lang, synonym_rate, rng),
                    self.realize_target(&c, rng),
                )
            })
            .collect()
    }

    /// Generate every split. Each language and split draws from its own
    /// stream so sizes can change without disturbing the others.
    pub fn generate(&self) -> SyntheticCorpus {
        let stream = |k: u64| {
            ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_mul(1_000_003).wrapping_add(k))
        };
        let cfg = &self.cfg;
        let splits = |lang: SourceLang, base: u64| Splits {
            train: self.pairs(
                cfg.train_pairs,
                lang,
                cfg.train_synonym_rate,
                &mut stream(base),
            ),
            dev: self.pairs(
                cfg.dev_pairs,
                lang,
                cfg.eval_synonym_rate,
                &mut stream(base + 1),
            ),
            test: self.pairs(
                cfg.test_pairs,
                lang,
                cfg.eval_synonym_rate,
                &mut stream(base + 2),
            ),
        };
        let mono = |lang: SourceLang, k: u64| {
            let mut rng = stream(k);
            (0..cfg.mono_sentences)
                .map(|_| {
                    let c = self.sample_concepts(&mut rng);
                    self.realize_source(&c, lang, cfg.eval_synonym_rate, &mut rng)
                })
                .collect()
        };
        let mut zr = stream(20);
        SyntheticCorpus {
            ms_zh: splits(SourceLang::Ms, 0),
            id_zh: splits(SourceLang::Id, 10),
            mono_ms: mono(SourceLang::Ms, 30),
            mono_id: mono(SourceLang::Id, 31),
            mono_zh: (0..cfg.mono_sentences)
                .map(|_| {
                    let c = self.sample_concepts(&mut zr);
                    self.realize_target(&c, &mut zr)
                })
                .collect(),
        }
    }
}

/// Replace each target token by a uniformly drawn token from `pool` with
/// probability `rate`. Sources are untouched.
pub fn inject_target_noise<S: Clone>(
    pairs: &[(Vec<S>, Vec<S>)],
    rate: f64,
    pool: &[S],
    seed: u64,
) -> Vec<(Vec<S>, Vec<S>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs
        .iter()
        .map(|(s, t)| {
            let t = t
                .iter()
                .map(|tok| {
                    if rng.gen_bool(rate) {
                        pool.choose(&mut rng).unwrap().clone()
                    } else {
                        tok.clone()
                    }
                })
                .collect();
            (s.clone(), t)
        })
        .collect()
}

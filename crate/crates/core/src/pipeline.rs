//! Experiment driver: configuration, corpus ingestion, the per-direction
//! train, decode, rerank and score pipeline, submission files and the run
//! report with its artifact manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::curriculum::{
    build_schedule, run_curriculum, to_encoded, CurriculumConfig, CurriculumError, CurriculumRun,
    Pair, StageName, StageOutput, SEP,
};
use crate::decoding::{
    content_ids, dedup_candidates, diverse_beam_search, DecodeConfig, DecodeError, Hypothesis,
};
use crate::embeddings::{
    augment_by_substitution, train_skipgram, AugmentConfig, EmbedError, EmbeddingTable,
    SkipgramConfig,
};
use crate::losses::LossKind;
use crate::metrics::{corpus_bleu, leaderboard_average, BleuConfig};
use crate::nnet::{fit, save_checkpoint, ModelHyper, NnetError, Seq2SeqModel, TrainConfig};
use crate::reranker::{rerank, save_reranker, train_reranker, RerankConfig, RerankError};
use crate::scalar::Scalar;
use crate::textproc::{
    build_vocab_with_reserved, detokenize, normalize_entities, EntityDirection, Lang, Sentence,
    SimplificationTable, TokenId, TokenIds, Vocabulary,
};

/// Which exit status a failure maps to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
#[error("{component}{}: {message}", direction.as_ref().map(|d| format!(" [{d}]")).unwrap_or_default())]
pub struct PipelineError {
    pub kind: FailureKind,
    pub component: String,
    pub direction: Option<String>,
    pub message: String,
}

impl PipelineError {
    pub fn new(kind: FailureKind, component: &str, message: impl Into<String>) -> Self {
        Self {
            kind,
            component: component.into(),
            direction: None,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(FailureKind::Config, "config", message)
    }

    fn in_direction(mut self, d: Direction) -> Self {
        self.direction.get_or_insert_with(|| d.to_string());
        self
    }

    /// 2 for configuration errors, 3 for data errors, 4 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self.kind {
            FailureKind::Config => 2,
            FailureKind::Data => 3,
            FailureKind::Numeric => 4,
        }
    }
}

/// Classify a module error for the exit status.
pub trait Classify: fmt::Display {
    fn kind(&self) -> FailureKind;

    fn at(&self, component: &str) -> PipelineError {
        PipelineError::new(self.kind(), component, self.to_string())
    }
}

impl Classify for NnetError {
    fn kind(&self) -> FailureKind {
        match self {
            NnetError::NonFiniteLoss { .. } => FailureKind::Numeric,
            NnetError::InvalidConfig(_) => FailureKind::Config,
            _ => FailureKind::Data,
        }
    }
}

impl Classify for CurriculumError {
    fn kind(&self) -> FailureKind {
        match self {
            CurriculumError::NonFiniteLoss { .. } => FailureKind::Numeric,
            CurriculumError::InvalidConfig(_) => FailureKind::Config,
            CurriculumError::Model { source, .. } => source.kind(),
            _ => FailureKind::Data,
        }
    }
}

impl Classify for RerankError {
    fn kind(&self) -> FailureKind {
        match self {
            RerankError::NonFiniteLoss { .. } | RerankError::ZeroVector => FailureKind::Numeric,
            RerankError::InvalidConfig(_) => FailureKind::Config,
            RerankError::Model(e) => e.kind(),
            RerankError::Decode(e) => e.kind(),
            _ => FailureKind::Data,
        }
    }
}

impl Classify for DecodeError {
    fn kind(&self) -> FailureKind {
        FailureKind::Config
    }
}

impl Classify for EmbedError {
    fn kind(&self) -> FailureKind {
        match self {
            EmbedError::InvalidConfig(_) => FailureKind::Config,
            _ => FailureKind::Data,
        }
    }
}

impl Classify for std::io::Error {
    fn kind(&self) -> FailureKind {
        FailureKind::Data
    }
}

/// A translation direction, written `src-tgt`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Direction {
    pub src: Lang,
    pub tgt: Lang,
}

impl Direction {
    pub fn new(src: Lang, tgt: Lang) -> Self {
        Self { src, tgt }
    }

    pub fn reversed(self) -> Self {
        Self {
            src: self.tgt,
            tgt: self.src,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.src, self.tgt)
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (a, b) = s
            .split_once('-')
            .ok_or_else(|| format!("direction {s:?} is not of the form src-tgt"))?;
        let src = a.parse::<Lang>().map_err(|e| e.to_string())?;
        let tgt = b.parse::<Lang>().map_err(|e| e.to_string())?;
        if src == tgt {
            return Err(format!("direction {s:?} translates a language into itself"));
        }
        Ok(Self { src, tgt })
    }
}

impl TryFrom<String> for Direction {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Direction> for String {
    fn from(d: Direction) -> String {
        d.to_string()
    }
}

/// A parallel corpus; `columns` gives the language of each TSV column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusPaths {
    pub columns: Direction,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
}

/// Translator architecture; vocabulary sizes come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub max_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let h = ModelHyper::new(0, 0);
        Self {
            d_model: h.d_model,
            heads: h.heads,
            d_ff: h.d_ff,
            enc_layers: h.enc_layers,
            dec_layers: h.dec_layers,
            max_len: h.max_len,
        }
    }
}

impl ModelShape {
    pub fn hyper(&self, src_vocab: usize, tgt_vocab: usize) -> ModelHyper {
        ModelHyper {
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            max_len: self.max_len,
            src_vocab,
            tgt_vocab,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabConfig {
    pub min_count: usize,
    pub max_size: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            min_count: 1,
            max_size: 16_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpora: Vec<CorpusPaths>,
    /// Monolingual text per language, one sentence per line.
    pub mono: BTreeMap<Lang, PathBuf>,
    pub directions: Vec<Direction>,
    /// Related-language pairs; each supplies the other's family stage.
    pub siblings: Vec<(Lang, Lang)>,
    /// Traditional-to-simplified table; the bundled one when absent.
    pub simplification_table: Option<PathBuf>,
    pub vocab: VocabConfig,
    pub skipgram: SkipgramConfig,
    pub augment: AugmentConfig,
    pub model: ModelShape,
    pub train: TrainConfig,
    pub loss: LossKind,
    pub use_curriculum: bool,
    pub curriculum: CurriculumConfig,
    pub decode: DecodeConfig,
    pub use_reranker: bool,
    pub rerank: RerankConfig,
    pub precision: Precision,
    /// Every component seed is derived from this one.
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpora: Vec::new(),
            mono: BTreeMap::new(),
            directions: vec![
                Direction::new(Lang::Ms, Lang::Zh),
                Direction::new(Lang::Zh, Lang::Ms),
                Direction::new(Lang::Id, Lang::Zh),
                Direction::new(Lang::Zh, Lang::Id),
            ],
            siblings: vec![(Lang::Ms, Lang::Id)],
            simplification_table: None,
            vocab: VocabConfig::default(),
            skipgram: SkipgramConfig::default(),
            augment: AugmentConfig::default(),
            model: ModelShape::default(),
            train: TrainConfig::default(),
            loss: LossKind::default(),
            use_curriculum: true,
            curriculum: CurriculumConfig::default(),
            decode: DecodeConfig::default(),
            use_reranker: true,
            rerank: RerankConfig::default(),
            precision: Precision::F32,
            seed: 2022,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Set one dotted key of a JSON document. Only keys that already exist may
/// be set; the value is parsed as JSON and falls back to a plain string.
pub fn apply_override(doc: &mut serde_json::Value, assignment: &str) -> Result<(), PipelineError> {
    let assignment = assignment.trim_start_matches("--");
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        PipelineError::config(format!("override {assignment:?} is not key=value"))
    })?;
    let mut slot = &mut *doc;
    for part in key.split('.') {
        slot = match slot {
            serde_json::Value::Object(map) => map.get_mut(part),
            serde_json::Value::Array(items) => part
                .parse::<usize>()
                .ok()
                .and_then(move |i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| PipelineError::config(format!("unknown config key {key:?}")))?;
    }
    *slot =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    Ok(())
}

impl ExperimentConfig {
    /// Parse JSON, apply `key=value` overrides, resolve relative paths
    /// against `base_dir` and derive component seeds.
    pub fn from_json(
        text: &str,
        overrides: &[String],
        base_dir: &Path,
    ) -> Result<Self, PipelineError> {
        let parsed: Self = serde_json::from_str(text)
            .map_err(|e| PipelineError::config(format!("config JSON: {e}")))?;
        let mut doc = serde_json::to_value(&parsed).expect("config serializes");
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: Self = serde_json::from_value(doc)
            .map_err(|e| PipelineError::config(format!("config after overrides: {e}")))?;
        cfg.resolve_paths(base_dir);
        cfg.propagate_seed();
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| {
            PipelineError::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_json(&text, overrides, path.parent().unwrap_or(Path::new(".")))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for c in &mut self.corpora {
            fix(&mut c.train);
            fix(&mut c.dev);
            fix(&mut c.test);
        }
        self.mono.values_mut().for_each(fix);
        if let Some(p) = self.simplification_table.as_mut() {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    /// Overwrite every component seed with one derived from `seed`.
    pub fn propagate_seed(&mut self) {
        let s = self.seed;
        self.skipgram.seed = s;
        self.augment.seed = s.wrapping_add(1);
        self.train.seed = s.wrapping_add(2);
        self.curriculum.seed = s.wrapping_add(3);
        self.rerank.seed = s.wrapping_add(4);
    }

    fn model_seed(&self) -> u64 {
        self.seed.wrapping_add(5)
    }

    pub fn corpus_for(&self, d: Direction) -> Option<&CorpusPaths> {
        self.corpora
            .iter()
            .find(|c| c.columns == d || c.columns == d.reversed())
    }

    pub fn sibling_of(&self, lang: Lang) -> Option<Lang> {
        self.siblings.iter().find_map(|&(a, b)| {
            if a == lang {
                Some(b)
            } else if b == lang {
                Some(a)
            } else {
                None
            }
        })
    }

    /// The related-language direction feeding the family stage: the
    /// non-Chinese side swapped for its sibling.
    pub fn family_direction(&self, d: Direction) -> Option<Direction> {
        let fam = if let Some(s) = self.sibling_of(d.src) {
            Direction::new(s, d.tgt)
        } else {
            Direction::new(d.src, self.sibling_of(d.tgt)?)
        };
        self.corpus_for(fam).map(|_| fam)
    }

    /// Every referenced file exists and every component config is sound.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let mut files: Vec<&Path> = Vec::new();
        for c in &self.corpora {
            files.extend([c.train.as_path(), c.dev.as_path(), c.test.as_path()]);
        }
        files.extend(self.mono.values().map(PathBuf::as_path));
        files.extend(self.simplification_table.as_deref());
        for f in files {
            if !f.is_file() {
                return Err(PipelineError::config(format!(
                    "missing file {}",
                    f.display()
                )));
            }
        }
        if self.directions.is_empty() {
            return Err(PipelineError::config("no directions"));
        }
        for &d in &self.directions {
            if self.corpus_for(d).is_none() {
                return Err(PipelineError::config(format!(
                    "no corpus for direction {d}"
                )));
            }
        }
        let bad = |what: &str, e: &dyn fmt::Display| PipelineError::config(format!("{what}: {e}"));
        self.skipgram.validate().map_err(|e| bad("skipgram", &e))?;
        self.augment.validate().map_err(|e| bad("augment", &e))?;
        self.train.validate().map_err(|e| bad("train", &e))?;
        self.loss.validate().map_err(|e| bad("loss", &e))?;
        self.curriculum
            .validate()
            .map_err(|e| bad("curriculum", &e))?;
        self.decode
            .validate_diverse()
            .map_err(|e| bad("decode", &e))?;
        self.model
            .hyper(8, 8)
            .validate()
            .map_err(|e| bad("model", &e))?;
        if self.use_reranker {
            self.rerank.validate().map_err(|e| bad("rerank", &e))?;
        }
        if self.model.max_len < 4 {
            return Err(PipelineError::config("model.max_len must be at least 4"));
        }
        Ok(())
    }

    pub fn table(&self) -> Result<SimplificationTable, PipelineError> {
        match &self.simplification_table {
            Some(p) => {
                SimplificationTable::load(p).map_err(|e| PipelineError::config(e.to_string()))
            }
            None => Ok(SimplificationTable::bundled()),
        }
    }
}

pub type SentencePair = (Sentence, Sentence);

#[derive(Debug, Clone, PartialEq)]
pub struct TsvLoad {
    pub pairs: Vec<SentencePair>,
    /// Lines without exactly two tab-separated fields.
    pub skipped: usize,
}

/// One normalized pair per line; lines without exactly two fields are
/// skipped and counted. CRLF and LF endings load identically.
pub fn load_parallel_tsv(
    path: impl AsRef<Path>,
    columns: Direction,
    table: &SimplificationTable,
) -> std::io::Result<TsvLoad> {
    let text = fs::read_to_string(path)?;
    let mut out = TsvLoad {
        pairs: Vec::new(),
        skipped: 0,
    };
    for line in text.lines() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            out.skipped += 1;
            continue;
        }
        out.pairs.push((
            Sentence::normalized(fields[0], columns.src, Some(table)),
            Sentence::normalized(fields[1], columns.tgt, Some(table)),
        ));
    }
    Ok(out)
}

/// Normalized monolingual sentences; blank lines are dropped.
pub fn load_mono(
    path: impl AsRef<Path>,
    lang: Lang,
    table: &SimplificationTable,
) -> std::io::Result<Vec<Sentence>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(|l| Sentence::normalized(l.strip_suffix('\r').unwrap_or(l), lang, Some(table)))
        .filter(|s| !s.text.is_empty())
        .collect())
}

/// Corpus pairs oriented for `d`.
fn orient(pairs: Vec<SentencePair>, columns: Direction, d: Direction) -> Vec<SentencePair> {
    if columns == d {
        pairs
    } else {
        pairs.into_iter().map(|(a, b)| (b, a)).collect()
    }
}

fn escape_xml(text: &str) -> String {
    normalize_entities(text, EntityDirection::Encode)
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn unescape_xml(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(pos) = rest.find('&') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        let (ch, len) = [("&amp;", '&'), ("&lt;", '<'), ("&gt;", '>')]
            .iter()
            .find(|(e, _)| tail.starts_with(e))
            .map_or(('&', 1), |(e, c)| (*c, e.len()));
        out.push(ch);
        rest = &tail[len..];
    }
    out.push_str(rest);
    out
}

/// `<translations><seg id="N">TEXT</seg>…</translations>` with 1-based ids,
/// one segment per line. Ampersands appear only as `&amp;`; angle brackets
/// are escaped too.
pub fn render_submission(hyps: &[Sentence]) -> String {
    let mut s = String::from("<translations>");
    for (i, h) in hyps.iter().enumerate() {
        s.push_str(&format!(
            "\n<seg id=\"{}\">{}</seg>",
            i + 1,
            escape_xml(&h.text)
        ));
    }
    if !hyps.is_empty() {
        s.push('\n');
    }
    s.push_str("</translations>\n");
    s
}

pub fn write_submission(hyps: &[Sentence], path: impl AsRef<Path>) -> std::io::Result<()> {
    fs::write(path, render_submission(hyps))
}

/// Segment texts of a submission file in id order.
pub fn read_submission(path: impl AsRef<Path>) -> std::io::Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
    let body = text
        .trim()
        .strip_prefix("<translations>")
        .and_then(|b| b.strip_suffix("</translations>"))
        .ok_or_else(|| bad("missing <translations> root"))?;
    let mut segs: Vec<(usize, String)> = Vec::new();
    let mut rest = body;
    while let Some(start) = rest.find("<seg id=\"") {
        let after = &rest[start + 9..];
        let q = after
            .find("\">")
            .ok_or_else(|| bad("unterminated seg tag"))?;
        let id: usize = after[..q].parse().map_err(|_| bad("non-numeric seg id"))?;
        let content = &after[q + 2..];
        let end = content
            .find("</seg>")
            .ok_or_else(|| bad("missing </seg>"))?;
        segs.push((id, unescape_xml(&content[..end])));
        rest = &content[end + 6..];
    }
    segs.sort_by_key(|s| s.0);
    Ok(segs.into_iter().map(|s| s.1).collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitScores {
    pub top1: f64,
    pub reranked: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: StageName,
    pub steps_end: usize,
    pub dev_bleu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub direction: Direction,
    pub train_pairs: usize,
    pub family_pairs: usize,
    pub augmented_pairs: usize,
    pub skipped_lines: usize,
    /// Training pairs longer than the model admits.
    pub dropped_long: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub stages: Vec<StageSummary>,
    pub rerank_losses: Vec<f64>,
    pub dev: SplitScores,
    pub test: SplitScores,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub directions: Vec<DirectionReport>,
    /// Mean reranked test BLEU when exactly four directions ran.
    pub leaderboard: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub direction: Option<Direction>,
    pub component: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub metrics: RunMetrics,
    pub timings: Vec<Timing>,
}

struct Clock<'a> {
    timings: &'a mut Vec<Timing>,
    direction: Option<Direction>,
}

impl Clock<'_> {
    fn time<R>(&mut self, component: &str, f: impl FnOnce() -> R) -> R {
        let t0 = Instant::now();
        let r = f();
        self.timings.push(Timing {
            direction: self.direction,
            component: component.into(),
            seconds: t0.elapsed().as_secs_f64(),
        });
        r
    }
}

pub type TokenPairs = Vec<(Vec<String>, Vec<String>)>;

fn tokens_of(pairs: &[SentencePair]) -> TokenPairs {
    pairs
        .iter()
        .map(|(s, t)| (s.tokens(), t.tokens()))
        .collect()
}

/// Source and target vocabularies over the given pairs, `SEP` reserved.
pub fn build_vocabs(
    pairs: &[&TokenPairs],
    cfg: &VocabConfig,
) -> Result<(Vocabulary, Vocabulary), PipelineError> {
    let side = |pick: fn(&(Vec<String>, Vec<String>)) -> &Vec<String>| {
        let corpus: Vec<Vec<String>> = pairs
            .iter()
            .flat_map(|p| p.iter().map(pick).cloned())
            .collect();
        build_vocab_with_reserved(&corpus, cfg.min_count, cfg.max_size, &[SEP])
            .map_err(|e| PipelineError::new(FailureKind::Data, "preprocess", e.to_string()))
    };
    Ok((side(|p| &p.0)?, side(|p| &p.1)?))
}

/// Content ids of the pairs that fit the model; returns the drop count.
pub fn encode_pairs(
    pairs: &TokenPairs,
    sv: &Vocabulary,
    tv: &Vocabulary,
    max_content: usize,
) -> (Vec<Pair<TokenId>>, usize) {
    let mut out = Vec::with_capacity(pairs.len());
    let mut dropped = 0;
    for (s, t) in pairs {
        if s.is_empty() || t.is_empty() || s.len() > max_content || t.len() > max_content {
            dropped += 1;
        } else {
            out.push((sv.encode(s, false), tv.encode(t, false)));
        }
    }
    (out, dropped)
}

/// Source ids with BOS/EOS, truncated to what the model accepts.
pub fn encode_source(tokens: &[String], sv: &Vocabulary, max_content: usize) -> TokenIds {
    let keep = &tokens[..tokens.len().min(max_content)];
    sv.encode(keep, true)
}

/// Detokenized text of generated ids; specials and the splice separator
/// are dropped.
pub fn render_ids(ids: &[TokenId], tv: &Vocabulary, lang: Lang) -> Sentence {
    let sep = tv.id(SEP);
    let toks: Vec<String> = content_ids(ids)
        .iter()
        .filter(|&&i| Some(i) != sep)
        .filter_map(|&i| tv.token(i).map(str::to_string))
        .collect();
    Sentence::new(detokenize(&toks, lang.tokenizer_mode()), lang)
}

fn bleu(hyps: &[Sentence], refs: &[Sentence], lang: Lang) -> Result<f64, PipelineError> {
    let pairs: Vec<SentencePair> = hyps.iter().cloned().zip(refs.iter().cloned()).collect();
    corpus_bleu::<f64>(&pairs, &BleuConfig::new(lang.tokenizer_mode()))
        .map(|r| r.bleu)
        .map_err(|e| PipelineError::new(FailureKind::Data, "score", e.to_string()))
}

/// One decoded hypothesis with its detokenized text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedHypothesis {
    #[serde(flatten)]
    pub hyp: Hypothesis,
    pub text: String,
}

/// One line of a candidates JSONL file: a source and its n-best list in
/// rank order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub index: usize,
    pub source: String,
    /// Source ids with BOS/EOS.
    pub src_ids: TokenIds,
    pub hypotheses: Vec<RenderedHypothesis>,
}

impl CandidateRecord {
    pub fn new(
        index: usize,
        source: &str,
        src_ids: TokenIds,
        hyps: Vec<Hypothesis>,
        tv: &Vocabulary,
        lang: Lang,
    ) -> Self {
        let hypotheses = hyps
            .into_iter()
            .map(|h| RenderedHypothesis {
                text: render_ids(&h.ids, tv, lang).text,
                hyp: h,
            })
            .collect();
        Self {
            index,
            source: source.into(),
            src_ids,
            hypotheses,
        }
    }

    /// Best hypothesis text, empty when the list is empty.
    pub fn best_text(&self) -> &str {
        self.hypotheses.first().map_or("", |h| h.text.as_str())
    }
}

pub fn write_candidates(
    path: impl AsRef<Path>,
    records: &[CandidateRecord],
) -> std::io::Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("candidates serialize"));
        out.push('\n');
    }
    fs::write(path, out)
}

pub fn read_candidates(path: impl AsRef<Path>) -> std::io::Result<Vec<CandidateRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
        })
        .collect()
}

/// Everything one direction needs that is shared across directions.
struct Shared {
    table: SimplificationTable,
    embeddings: BTreeMap<Lang, EmbeddingTable<f64>>,
}

fn load_corpus(
    cfg: &ExperimentConfig,
    d: Direction,
    table: &SimplificationTable,
) -> Result<[TsvLoad; 3], PipelineError> {
    let c = cfg.corpus_for(d).expect("validated");
    let load = |p: &Path| {
        load_parallel_tsv(p, c.columns, table)
            .map(|t| TsvLoad {
                pairs: orient(t.pairs, c.columns, d),
                skipped: t.skipped,
            })
            .map_err(|e| {
                PipelineError::new(
                    FailureKind::Data,
                    "preprocess",
                    format!("{}: {e}", p.display()),
                )
            })
    };
    Ok([load(&c.train)?, load(&c.dev)?, load(&c.test)?])
}

fn embeddings_for<'a>(
    shared: &'a mut Shared,
    cfg: &ExperimentConfig,
    lang: Lang,
    fallback: &TokenPairs,
) -> Result<&'a EmbeddingTable<f64>, PipelineError> {
    if !shared.embeddings.contains_key(&lang) {
        let mut corpus: Vec<Vec<String>> = match cfg.mono.get(&lang) {
            Some(p) => load_mono(p, lang, &shared.table)
                .map_err(|e| e.at("skipgram"))?
                .iter()
                .map(Sentence::tokens)
                .collect(),
            None => Vec::new(),
        };
        corpus.extend(fallback.iter().map(|p| p.0.clone()));
        let (table, _) =
            train_skipgram::<f64, _>(&corpus, &cfg.skipgram).map_err(|e| e.at("skipgram"))?;
        fs::create_dir_all(cfg.output_dir.join("embeddings")).map_err(|e| e.at("skipgram"))?;
        table
            .save(
                cfg.output_dir
                    .join("embeddings")
                    .join(format!("{lang}.vec")),
            )
            .map_err(|e| e.at("skipgram"))?;
        shared.embeddings.insert(lang, table);
    }
    Ok(&shared.embeddings[&lang])
}

fn run_direction<T: Scalar>(
    cfg: &ExperimentConfig,
    d: Direction,
    shared: &mut Shared,
    clock: &mut Clock<'_>,
) -> Result<DirectionReport, PipelineError> {
    let dir = cfg.output_dir.join(d.to_string());
    fs::create_dir_all(&dir).map_err(|e| e.at("preprocess"))?;
    let max_content = cfg.model.max_len - 2;

    let ([train, dev, test], family) =
        clock.time("preprocess", || -> Result<_, PipelineError> {
            let splits = load_corpus(cfg, d, &shared.table)?;
            let family = match cfg.family_direction(d) {
                Some(f) => {
                    let [t, _, _] = load_corpus(cfg, f, &shared.table)?;
                    t.pairs
                }
                None => Vec::new(),
            };
            Ok((splits, family))
        })?;
    if train.pairs.is_empty() {
        return Err(PipelineError::new(
            FailureKind::Data,
            "preprocess",
            "no training pairs",
        ));
    }
    let skipped_lines = train.skipped + dev.skipped + test.skipped;
    let task_tokens = tokens_of(&train.pairs);
    let family_tokens = tokens_of(&family);

    let emb = clock.time("skipgram", || {
        embeddings_for(shared, cfg, d.src, &task_tokens)
    })?;
    let augmented = clock
        .time("augment", || {
            augment_by_substitution(&task_tokens, emb, &cfg.augment)
        })
        .map_err(|e| e.at("augment"))?;

    let (sv, tv) = build_vocabs(&[&augmented, &family_tokens], &cfg.vocab)?;
    let (task_ids, dropped_task) = encode_pairs(&augmented, &sv, &tv, max_content);
    let (family_ids, dropped_family) = encode_pairs(&family_tokens, &sv, &tv, max_content);
    let (plain_ids, _) = encode_pairs(&task_tokens, &sv, &tv, max_content);
    let dev_src: Vec<TokenIds> = dev
        .pairs
        .iter()
        .map(|p| encode_source(&p.0.tokens(), &sv, max_content))
        .collect();
    let test_src: Vec<TokenIds> = test
        .pairs
        .iter()
        .map(|p| encode_source(&p.0.tokens(), &sv, max_content))
        .collect();
    let (dev_ids, _) = encode_pairs(&tokens_of(&dev.pairs), &sv, &tv, max_content);
    let dev_encoded = to_encoded(&dev_ids);

    let mut model: Seq2SeqModel<T> =
        Seq2SeqModel::new(cfg.model.hyper(sv.len(), tv.len()), cfg.model_seed())
            .map_err(|e| e.at("train"))?;
    let stages = clock.time("train", || -> Result<Vec<StageSummary>, PipelineError> {
        if cfg.use_curriculum {
            let sep = sv.id(SEP).expect("reserved");
            debug_assert_eq!(Some(sep), tv.id(SEP));
            let schedule = build_schedule(&family_ids, &task_ids, &cfg.curriculum, &sep)
                .map_err(|e| e.at("curriculum"))?;
            let run = CurriculumRun {
                dev: &dev_encoded,
                dev_max_len: cfg.decode.max_len,
                output: Some(StageOutput {
                    dir: &dir.join("curriculum"),
                    src_vocab: &sv,
                    tgt_vocab: &tv,
                }),
            };
            let report = run_curriculum(&mut model, &schedule, &cfg.train, &cfg.loss, &run)
                .map_err(|e| e.at("curriculum"))?;
            Ok(report
                .stages
                .iter()
                .map(|s| StageSummary {
                    stage: s.stage,
                    steps_end: s.steps_end,
                    dev_bleu: s.dev_bleu,
                })
                .collect())
        } else {
            let mut data = to_encoded(&family_ids);
            data.extend(to_encoded(&task_ids));
            fit(&mut model, &data, &cfg.train, &cfg.loss).map_err(|e| e.at("train"))?;
            Ok(Vec::new())
        }
    })?;
    save_checkpoint(&model, &sv, &tv, dir.join("translator.ckpt")).map_err(|e| e.at("train"))?;

    let decode_all = |srcs: &[TokenIds]| -> Result<Vec<Vec<Hypothesis>>, PipelineError> {
        srcs.iter()
            .map(|s| {
                Ok(dedup_candidates(
                    diverse_beam_search(&model, s, &cfg.decode).map_err(|e| e.at("decode"))?,
                ))
            })
            .collect()
    };
    let (dev_cands, test_cands) = clock.time("decode", || -> Result<_, PipelineError> {
        Ok((decode_all(&dev_src)?, decode_all(&test_src)?))
    })?;

    let (dev_best, test_best, rerank_losses) = if cfg.use_reranker {
        let (enc, report) = clock.time("rerank_train", || {
            train_reranker::<T, T>(&to_encoded(&plain_ids), &model, &cfg.rerank)
                .map_err(|e| e.at("rerank_train"))
        })?;
        save_reranker(&enc, &sv, &tv, dir.join("reranker.ckpt"))
            .map_err(|e| e.at("rerank_train"))?;
        let apply = |srcs: &[TokenIds],
                     lists: &[Vec<Hypothesis>]|
         -> Result<Vec<Vec<Hypothesis>>, PipelineError> {
            srcs.iter()
                .zip(lists)
                .map(|(s, l)| rerank(&enc, content_ids(s), l.clone()).map_err(|e| e.at("rerank")))
                .collect()
        };
        let (dr, tr) = clock.time("rerank", || -> Result<_, PipelineError> {
            Ok((apply(&dev_src, &dev_cands)?, apply(&test_src, &test_cands)?))
        })?;
        (dr, tr, report.epoch_losses)
    } else {
        (dev_cands.clone(), test_cands.clone(), Vec::new())
    };
    let records = |pairs: &[SentencePair],
                   srcs: &[TokenIds],
                   lists: &[Vec<Hypothesis>]|
     -> Vec<CandidateRecord> {
        pairs
            .iter()
            .zip(srcs)
            .zip(lists)
            .enumerate()
            .map(|(i, ((p, s), l))| {
                CandidateRecord::new(i, &p.0.text, s.clone(), l.clone(), &tv, d.tgt)
            })
            .collect()
    };
    write_candidates(
        dir.join("candidates.dev.jsonl"),
        &records(&dev.pairs, &dev_src, &dev_best),
    )
    .map_err(|e| e.at("decode"))?;
    write_candidates(
        dir.join("candidates.test.jsonl"),
        &records(&test.pairs, &test_src, &test_best),
    )
    .map_err(|e| e.at("decode"))?;

    let (dev_scores, test_scores) = clock.time("score", || -> Result<_, PipelineError> {
        let first = |lists: &[Vec<Hypothesis>]| -> Vec<Sentence> {
            lists
                .iter()
                .map(|l| {
                    l.first().map_or_else(
                        || Sentence::new("", d.tgt),
                        |h| render_ids(&h.ids, &tv, d.tgt),
                    )
                })
                .collect()
        };
        let refs = |pairs: &[SentencePair]| -> Vec<Sentence> {
            pairs.iter().map(|p| p.1.clone()).collect()
        };
        let (dr, tr) = (refs(&dev.pairs), refs(&test.pairs));
        let test_hyps = first(&test_best);
        write_submission(&test_hyps, dir.join("submission.xml")).map_err(|e| e.at("submit"))?;
        Ok((
            SplitScores {
                top1: bleu(&first(&dev_cands), &dr, d.tgt)?,
                reranked: bleu(&first(&dev_best), &dr, d.tgt)?,
            },
            SplitScores {
                top1: bleu(&first(&test_cands), &tr, d.tgt)?,
                reranked: bleu(&test_hyps, &tr, d.tgt)?,
            },
        ))
    })?;
    log::info!("{d}: dev {dev_scores:?} test {test_scores:?}");

    Ok(DirectionReport {
        direction: d,
        train_pairs: train.pairs.len(),
        family_pairs: family_ids.len(),
        augmented_pairs: task_ids.len(),
        skipped_lines,
        dropped_long: dropped_task + dropped_family,
        src_vocab: sv.len(),
        tgt_vocab: tv.len(),
        stages,
        rerank_losses,
        dev: dev_scores,
        test: test_scores,
    })
}

/// sha256 of every file under `root` except the manifest itself, keyed by
/// slash-separated relative path.
pub fn hash_tree(root: &Path) -> std::io::Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> std::io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("under root");
                let key = rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/");
                if key != "manifest.json" {
                    out.insert(key, format!("{:x}", Sha256::digest(fs::read(&path)?)));
                }
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out)?;
    Ok(out)
}

fn run_with<T: Scalar>(cfg: &ExperimentConfig) -> Result<RunReport, PipelineError> {
    let mut report = RunReport::default();
    let mut shared = Shared {
        table: cfg.table()?,
        embeddings: BTreeMap::new(),
    };
    for &d in &cfg.directions {
        let mut clock = Clock {
            timings: &mut report.timings,
            direction: Some(d),
        };
        let r =
            run_direction::<T>(cfg, d, &mut shared, &mut clock).map_err(|e| e.in_direction(d))?;
        report.metrics.directions.push(r);
    }
    if report.metrics.directions.len() == 4 {
        let scores: Vec<f64> = report
            .metrics
            .directions
            .iter()
            .map(|r| r.test.reranked)
            .collect();
        report.metrics.leaderboard = leaderboard_average(&scores).ok();
    }
    Ok(report)
}

/// Run every configured direction and write `report.json` plus
/// `manifest.json` under the output directory.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunReport, PipelineError> {
    cfg.validate()?;
    let io = |e: std::io::Error| e.at("report");
    fs::create_dir_all(&cfg.output_dir).map_err(io)?;
    fs::write(
        cfg.output_dir.join("config.json"),
        serde_json::to_string_pretty(cfg).expect("config serializes"),
    )
    .map_err(io)?;
    let t0 = Instant::now();
    let mut report = match cfg.precision {
        Precision::F32 => run_with::<f32>(cfg)?,
        Precision::F64 => run_with::<f64>(cfg)?,
    };
    report.timings.push(Timing {
        direction: None,
        component: "total".into(),
        seconds: t0.elapsed().as_secs_f64(),
    });
    fs::write(
        cfg.output_dir.join("report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(io)?;
    let manifest = hash_tree(&cfg.output_dir).map_err(io)?;
    fs::write(
        cfg.output_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(io)?;
    Ok(report)
}

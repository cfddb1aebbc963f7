//! Three-stage bilingual curriculum (language family, short task texts,
//! spliced long texts) and back-translation data generation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use log::warn;
use rand::seq::{IteratorRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoding::greedy_decode_batch;
use crate::losses::TokenLoss;
use crate::metrics::{corpus_bleu_tokens, BleuConfig};
use crate::nnet::{
    save_checkpoint, EncodedPair, NnetError, Order, Seq2SeqModel, TrainConfig, Trainer,
};
use crate::scalar::Scalar;
use crate::textproc::{detokenize, Lang, Sentence, TokenId, TokenIds, TokenizerMode, Vocabulary};

/// Separator spliced between segments of a long text; reserved in both
/// vocabularies.
pub const SEP: &str = "<sep>";

/// Source and target content tokens, without BOS or EOS.
pub type Pair<K> = (Vec<K>, Vec<K>);

#[derive(Debug, Error)]
pub enum CurriculumError {
    #[error("no task pairs for the curriculum")]
    EmptyTaskData,
    #[error("curriculum stage {0} has no data")]
    EmptyStage(StageName),
    #[error("invalid curriculum config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss in stage {stage}, epoch {epoch}, batch {batch_index}")]
    NonFiniteLoss {
        stage: StageName,
        epoch: usize,
        batch_index: usize,
    },
    #[error("translation provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("stage {stage}: {source}")]
    Model { stage: StageName, source: NnetError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageName {
    Family,
    Short,
    Long,
}

impl StageName {
    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Family => "family",
            StageName::Short => "short",
            StageName::Long => "long",
        }
    }
}

impl std::fmt::Display for StageName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumStage<K> {
    pub name: StageName,
    pub data: Vec<Pair<K>>,
    pub epochs: usize,
    /// Visiting order within an epoch; `order_key` says what it follows.
    pub order: Order,
    pub order_key: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurriculumConfig {
    /// Longest source (in tokens) admitted to the short stage.
    pub short_threshold: usize,
    /// A spliced group closes once its source reaches this length.
    pub target_len: usize,
    /// Hard cap on either side of a spliced pair; a group closes early
    /// rather than exceed it.
    pub max_tokens: Option<usize>,
    pub family_epochs: usize,
    pub short_epochs: usize,
    pub long_epochs: usize,
    pub seed: u64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            short_threshold: 24,
            target_len: 48,
            max_tokens: Some(62),
            family_epochs: 2,
            short_epochs: 4,
            long_epochs: 2,
            seed: 7,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<(), CurriculumError> {
        if self.short_threshold == 0 || self.target_len == 0 {
            return Err(CurriculumError::InvalidConfig(
                "short_threshold and target_len must be positive".into(),
            ));
        }
        if let Some(cap) = self.max_tokens {
            if cap < self.short_threshold {
                return Err(CurriculumError::InvalidConfig(format!(
                    "max_tokens {cap} below short_threshold {}",
                    self.short_threshold
                )));
            }
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.family_epochs + self.short_epochs + self.long_epochs
    }
}

/// Greedily splice consecutive pairs, source with source and target with
/// target, one `sep` between segments. A group closes once its source
/// reaches `target_len`, or before adding a pair would push either side
/// past `max_tokens`. Every input pair lands in exactly one group, in order.
pub fn concat_long_texts<K: Clone>(
    pairs: &[Pair<K>],
    target_len: usize,
    max_tokens: Option<usize>,
    sep: &K,
) -> Vec<Pair<K>> {
    let cap = max_tokens.unwrap_or(usize::MAX);
    let mut out: Vec<Pair<K>> = Vec::new();
    let mut open: Option<Pair<K>> = None;
    for (s, t) in pairs {
        if let Some((gs, gt)) = open.as_mut() {
            if gs.len() + 1 + s.len() > cap || gt.len() + 1 + t.len() > cap {
                out.extend(open.take());
            } else {
                gs.push(sep.clone());
                gs.extend(s.iter().cloned());
                gt.push(sep.clone());
                gt.extend(t.iter().cloned());
            }
        }
        if open.is_none() {
            open = Some((s.clone(), t.clone()));
        }
        if open.as_ref().is_some_and(|(gs, _)| gs.len() >= target_len) {
            out.extend(open.take());
        }
    }
    out.extend(open);
    out
}

/// Family stage on the related-language pairs mixed with the task pairs,
/// short stage on task pairs within `short_threshold` sorted by source
/// length, long stage spliced from the short material after a seeded
/// shuffle. An empty family set drops the first stage with a warning.
pub fn build_schedule<K: Clone>(
    family_pairs: &[Pair<K>],
    task_pairs: &[Pair<K>],
    cfg: &CurriculumConfig,
    sep: &K,
) -> Result<Vec<CurriculumStage<K>>, CurriculumError> {
    cfg.validate()?;
    if task_pairs.is_empty() {
        return Err(CurriculumError::EmptyTaskData);
    }
    let mut stages = Vec::with_capacity(3);
    if family_pairs.is_empty() {
        warn!("no language-family pairs; curriculum starts at the short stage");
    } else {
        let mut data = family_pairs.to_vec();
        data.extend_from_slice(task_pairs);
        stages.push(CurriculumStage {
            name: StageName::Family,
            data,
            epochs: cfg.family_epochs,
            order: Order::Shuffled,
            order_key: "shuffled".into(),
        });
    }
    let mut short: Vec<Pair<K>> = task_pairs
        .iter()
        .filter(|p| p.0.len() <= cfg.short_threshold)
        .cloned()
        .collect();
    if short.is_empty() {
        return Err(CurriculumError::EmptyStage(StageName::Short));
    }
    short.sort_by_key(|p| p.0.len());
    let mut material = short.clone();
    material.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let long = concat_long_texts(&material, cfg.target_len, cfg.max_tokens, sep);
    stages.push(CurriculumStage {
        name: StageName::Short,
        data: short,
        epochs: cfg.short_epochs,
        order: Order::Sequential,
        order_key: "source length ascending".into(),
    });
    stages.push(CurriculumStage {
        name: StageName::Long,
        data: long,
        epochs: cfg.long_epochs,
        order: Order::Shuffled,
        order_key: "shuffled".into(),
    });
    Ok(stages)
}

/// Wrap content ids with BOS and EOS for the translator.
pub fn to_encoded(pairs: &[Pair<TokenId>]) -> Vec<EncodedPair> {
    let wrap = |v: &[TokenId]| {
        let mut out = Vec::with_capacity(v.len() + 2);
        out.push(Vocabulary::BOS);
        out.extend_from_slice(v);
        out.push(Vocabulary::EOS);
        out
    };
    pairs.iter().map(|(s, t)| (wrap(s), wrap(t))).collect()
}

/// Optimizer steps one epoch over `n` examples takes.
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size.max(1))
}

pub fn schedule_steps<K>(schedule: &[CurriculumStage<K>], batch_size: usize) -> usize {
    schedule
        .iter()
        .map(|s| s.epochs * steps_per_epoch(s.data.len(), batch_size))
        .sum()
}

/// Corpus BLEU of greedy decodes against references, computed on ids.
pub fn dev_bleu<T: Scalar>(
    model: &Seq2SeqModel<T>,
    dev: &[EncodedPair],
    max_len: usize,
) -> Option<f64> {
    if dev.is_empty() {
        return None;
    }
    let srcs: Vec<TokenIds> = dev.iter().map(|p| p.0.clone()).collect();
    let hyps = greedy_decode_batch(model, &srcs, max_len);
    let pairs: Vec<(TokenIds, TokenIds)> = hyps
        .into_iter()
        .zip(dev)
        .map(|(h, (_, t))| (h, crate::decoding::content_ids(t).to_vec()))
        .collect();
    corpus_bleu_tokens::<f64, _, _, _>(&pairs, &BleuConfig::new(TokenizerMode::Char))
        .ok()
        .map(|r| r.bleu)
}

/// Where per-stage artifacts go.
#[derive(Debug, Clone, Copy)]
pub struct StageOutput<'a> {
    pub dir: &'a Path,
    pub src_vocab: &'a Vocabulary,
    pub tgt_vocab: &'a Vocabulary,
}

#[derive(Debug, Clone, Copy)]
pub struct CurriculumRun<'a> {
    pub dev: &'a [EncodedPair],
    pub dev_max_len: usize,
    pub output: Option<StageOutput<'a>>,
}

/// One line of the stage metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: StageName,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub dev_bleu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: StageName,
    pub examples: usize,
    pub steps_end: usize,
    pub dev_bleu: Option<f64>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurriculumReport {
    pub epochs: Vec<EpochMetrics>,
    pub stages: Vec<StageReport>,
}

/// Train stage by stage with one optimizer and one learning-rate schedule
/// spanning the whole curriculum. Writes `stages.jsonl` and a checkpoint
/// per stage when an output is given.
pub fn run_curriculum<T: Scalar, L: TokenLoss<T> + ?Sized>(
    model: &mut Seq2SeqModel<T>,
    schedule: &[CurriculumStage<TokenId>],
    train_cfg: &TrainConfig,
    loss: &L,
    run: &CurriculumRun<'_>,
) -> Result<CurriculumReport, CurriculumError> {
    for w in schedule.windows(2) {
        if w[0].name as u8 >= w[1].name as u8 {
            return Err(CurriculumError::InvalidConfig(format!(
                "stage {} after {}",
                w[1].name, w[0].name
            )));
        }
    }
    let first = schedule.first().map_or(StageName::Family, |s| s.name);
    let total = schedule_steps(schedule, train_cfg.batch_size);
    let per_epoch = schedule
        .iter()
        .find(|s| s.epochs > 0)
        .map_or(1, |s| steps_per_epoch(s.data.len(), train_cfg.batch_size));
    let mut trainer =
        Trainer::new(&model.params, train_cfg.clone(), total, per_epoch).map_err(|source| {
            CurriculumError::Model {
                stage: first,
                source,
            }
        })?;
    let mut metrics_file = match run.output {
        Some(o) => {
            std::fs::create_dir_all(o.dir)?;
            Some(BufWriter::new(File::create(o.dir.join("stages.jsonl"))?))
        }
        None => None,
    };
    let mut report = CurriculumReport::default();
    for stage in schedule {
        let data = to_encoded(&stage.data);
        let mut bleu = None;
        for epoch in 0..stage.epochs {
            let before = trainer.steps_taken();
            let value =
                trainer
                    .run_epoch(model, &data, loss, stage.order)
                    .map_err(|e| match e {
                        NnetError::NonFiniteLoss { .. } => CurriculumError::NonFiniteLoss {
                            stage: stage.name,
                            epoch,
                            batch_index: trainer.steps_taken() - before,
                        },
                        source => CurriculumError::Model {
                            stage: stage.name,
                            source,
                        },
                    })?;
            bleu = dev_bleu(model, run.dev, run.dev_max_len);
            let m = EpochMetrics {
                stage: stage.name,
                epoch,
                step: trainer.steps_taken(),
                loss: value,
                dev_bleu: bleu,
            };
            if let Some(f) = metrics_file.as_mut() {
                writeln!(
                    f,
                    "{}",
                    serde_json::to_string(&m).expect("metrics serialize")
                )?;
            }
            log::info!(
                "stage {} epoch {epoch}: loss {value:.4} dev bleu {bleu:?}",
                stage.name
            );
            report.epochs.push(m);
        }
        if stage.epochs == 0 {
            bleu = dev_bleu(model, run.dev, run.dev_max_len);
        }
        let checkpoint = match run.output {
            Some(o) => {
                let path = o.dir.join(format!("stage-{}.ckpt", stage.name));
                save_checkpoint(model, o.src_vocab, o.tgt_vocab, &path).map_err(|source| {
                    CurriculumError::Model {
                        stage: stage.name,
                        source,
                    }
                })?;
                Some(path)
            }
            None => None,
        };
        report.stages.push(StageReport {
            stage: stage.name,
            examples: data.len(),
            steps_end: trainer.steps_taken(),
            dev_bleu: bleu,
            checkpoint,
        });
    }
    if let Some(mut f) = metrics_file {
        f.flush()?;
    }
    Ok(report)
}

/// Train on `pool` in shuffled order for exactly `steps` optimizer steps;
/// the schedule-matched control for a curriculum run.
pub fn train_shuffled_for_steps<T: Scalar, L: TokenLoss<T> + ?Sized>(
    model: &mut Seq2SeqModel<T>,
    pool: &[EncodedPair],
    train_cfg: &TrainConfig,
    loss: &L,
    steps: usize,
) -> Result<Vec<f64>, NnetError> {
    if pool.is_empty() {
        return Err(NnetError::InvalidConfig("empty training pool".into()));
    }
    let per_epoch = steps_per_epoch(pool.len(), train_cfg.batch_size);
    let mut trainer = Trainer::new(&model.params, train_cfg.clone(), steps, per_epoch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut losses = Vec::with_capacity(steps);
    let mut order: Vec<usize> = Vec::new();
    let mut pos = 0;
    while losses.len() < steps {
        if pos == order.len() {
            order = (0..pool.len()).collect();
            order.shuffle(&mut rng);
            pos = 0;
        }
        let end = (pos + train_cfg.batch_size).min(order.len());
        let batch: Vec<EncodedPair> = order[pos..end].iter().map(|&i| pool[i].clone()).collect();
        pos = end;
        losses.push(trainer.train_step(model, &batch, loss)?.f64());
    }
    Ok(losses)
}

/// Whether a pair came from the corpus or was generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Authentic,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedPair {
    pub src: Sentence,
    pub tgt: Sentence,
    pub origin: Origin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Internal,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BacktransConfig {
    pub provider: ProviderKind,
    pub sample_size: usize,
    /// Longest monolingual sentence (tokens) sent for translation, also the
    /// decode bound.
    pub max_len: usize,
    pub seed: u64,
    /// Base URL of the external provider.
    pub url: String,
    pub timeout_secs: f64,
    pub retries: u32,
}

impl Default for BacktransConfig {
    fn default() -> Self {
        Self {
            provider: ProviderKind::Internal,
            sample_size: 1000,
            max_len: 60,
            seed: 11,
            url: "http://127.0.0.1:8080".into(),
            timeout_secs: 10.0,
            retries: 2,
        }
    }
}

/// Translates text from one language into another.
pub trait TranslationProvider {
    /// `None` marks a sentence the provider could not translate; an error
    /// means the provider itself is unusable.
    fn translate_batch(
        &self,
        texts: &[Sentence],
        to: Lang,
    ) -> Result<Vec<Option<Sentence>>, CurriculumError>;
}

/// The toolkit's own reverse-direction model: its source side is the
/// monolingual language.
pub struct InternalProvider<'a, T> {
    pub model: &'a Seq2SeqModel<T>,
    pub src_vocab: &'a Vocabulary,
    pub tgt_vocab: &'a Vocabulary,
    pub max_len: usize,
}

impl<T: Scalar> TranslationProvider for InternalProvider<'_, T> {
    fn translate_batch(
        &self,
        texts: &[Sentence],
        to: Lang,
    ) -> Result<Vec<Option<Sentence>>, CurriculumError> {
        let limit = self.max_len.min(self.model.hyper.max_len.saturating_sub(2));
        let mut out = vec![None; texts.len()];
        let mut idx = Vec::new();
        let mut srcs = Vec::new();
        for (i, s) in texts.iter().enumerate() {
            let toks = s.tokens();
            if !toks.is_empty() && toks.len() <= limit {
                idx.push(i);
                srcs.push(self.src_vocab.encode(&toks, true));
            }
        }
        for (i, ids) in
            idx.into_iter()
                .zip(greedy_decode_batch(self.model, &srcs, self.max_len + 1))
        {
            let toks = match self.tgt_vocab.decode(&ids) {
                Ok(t) if !t.is_empty() => t,
                _ => continue,
            };
            out[i] = Some(Sentence::new(detokenize(&toks, to.tokenizer_mode()), to));
        }
        Ok(out)
    }
}

/// HTTP provider: POST {url}/translate with {src_lang, tgt_lang, text},
/// answered by {text}.
pub struct HttpProvider {
    agent: ureq::Agent,
    endpoint: String,
    retries: u32,
}

impl HttpProvider {
    pub fn new(cfg: &BacktransConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs.max(0.001)))
            .build();
        Self {
            agent,
            endpoint: format!("{}/translate", cfg.url.trim_end_matches('/')),
            retries: cfg.retries,
        }
    }

    fn request(&self, text: &Sentence, to: Lang) -> Result<Option<Sentence>, CurriculumError> {
        let body = serde_json::json!({ "src_lang": text.lang, "tgt_lang": to, "text": text.text });
        let mut last = String::new();
        for _ in 0..=self.retries {
            match self.agent.post(&self.endpoint).send_json(body.clone()) {
                Ok(resp) => {
                    let reply: Option<serde_json::Value> = resp.into_json().ok();
                    let text = reply
                        .as_ref()
                        .and_then(|v| v.get("text"))
                        .and_then(|t| t.as_str());
                    return Ok(text.map(|t| Sentence::new(t, to)));
                }
                // The server answered, so the provider is up; this sentence failed.
                Err(ureq::Error::Status(code, _)) if code < 500 => return Ok(None),
                Err(e) => last = e.to_string(),
            }
        }
        Err(CurriculumError::ProviderUnavailable(format!(
            "{}: {last}",
            self.endpoint
        )))
    }
}

impl TranslationProvider for HttpProvider {
    fn translate_batch(
        &self,
        texts: &[Sentence],
        to: Lang,
    ) -> Result<Vec<Option<Sentence>>, CurriculumError> {
        texts.iter().map(|t| self.request(t, to)).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BacktransOutput {
    pub pairs: Vec<FlaggedPair>,
    pub skipped: usize,
}

/// Translate a seeded sample of `min(sample_size, |mono|)` monolingual
/// target sentences into `synthetic_lang`, keeping corpus order. Each
/// result pairs the synthetic source with its original target, flagged
/// synthetic; untranslatable sentences are counted in `skipped`.
pub fn back_translate(
    provider: &dyn TranslationProvider,
    mono: &[Sentence],
    synthetic_lang: Lang,
    cfg: &BacktransConfig,
) -> Result<BacktransOutput, CurriculumError> {
    let n = cfg.sample_size.min(mono.len());
    let mut chosen = (0..mono.len()).choose_multiple(&mut ChaCha8Rng::seed_from_u64(cfg.seed), n);
    chosen.sort_unstable();
    let texts: Vec<Sentence> = chosen.iter().map(|&i| mono[i].clone()).collect();
    let translated = if texts.is_empty() {
        Vec::new()
    } else {
        provider.translate_batch(&texts, synthetic_lang)?
    };
    let mut out = BacktransOutput::default();
    for (tgt, src) in texts.into_iter().zip(translated) {
        match src {
            Some(src) if !src.text.trim().is_empty() => out.pairs.push(FlaggedPair {
                src,
                tgt,
                origin: Origin::Synthetic,
            }),
            _ => out.skipped += 1,
        }
    }
    Ok(out)
}

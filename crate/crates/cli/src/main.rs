//! Command-line driver for the low-resource translation lab.
//!
//! Exit status: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure. Any `--key=value` argument whose key is not a declared flag is a
//! dotted-path override of the experiment config.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use lrnmt::curriculum::{build_schedule, run_curriculum, to_encoded, CurriculumRun, SEP};
use lrnmt::decoding::{beam_search, dedup_candidates, diverse_beam_search, DecodeConfig};
use lrnmt::embeddings::{
    augment_by_substitution, nearest_neighbors, train_skipgram, EmbeddingTable, SkipgramConfig,
};
use lrnmt::metrics::{corpus_bleu, BleuConfig};
use lrnmt::nnet::{fit, load_with_vocabs, save_checkpoint, Seq2SeqModel};
use lrnmt::pipeline::{
    build_vocabs, encode_pairs, encode_source, load_mono, load_parallel_tsv, read_candidates,
    run_pipeline, write_candidates, write_submission, CandidateRecord, Classify, Direction,
    ExperimentConfig, FailureKind, PipelineError, TokenPairs,
};
use lrnmt::reranker::{load_reranker_with_vocabs, rerank, save_reranker, train_reranker};
use lrnmt::synth::{SynthConfig, SyntheticTask};
use lrnmt::textproc::{Lang, Sentence, SimplificationTable, TokenizerMode};

type CliResult<T = ()> = Result<T, PipelineError>;

#[derive(Parser, Debug)]
#[command(name = "lrnmt", version, about = "Desk-scale low-resource NMT lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalize every configured corpus and write clean TSV files.
    Prep {
        /// Experiment config naming the corpora.
        #[arg(long)]
        config: PathBuf,
        /// Directory for the normalized TSV files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Skip-gram embeddings.
    #[command(subcommand)]
    Embed(EmbedCmd),
    /// Expand a parallel TSV by embedding-neighbour substitution.
    Augment {
        /// Parallel TSV to expand.
        #[arg(long)]
        pairs: PathBuf,
        /// Languages of the two TSV columns, e.g. ms-zh.
        #[arg(long)]
        columns: Direction,
        /// Embedding table for the source language.
        #[arg(long)]
        table: PathBuf,
        /// Output TSV.
        #[arg(long)]
        out: PathBuf,
        /// Experiment config supplying augmentation settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a translator on a parallel TSV.
    Train {
        /// Parallel TSV to train on.
        #[arg(long)]
        pairs: PathBuf,
        /// Languages of the two TSV columns, e.g. ms-zh.
        #[arg(long)]
        columns: Direction,
        /// Output checkpoint; vocabularies are written beside it.
        #[arg(long)]
        out: PathBuf,
        /// Experiment config supplying model, training and loss settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Decode one source sentence per line into a candidates JSONL file.
    Decode {
        /// Translator checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Source text, one sentence per line.
        #[arg(long)]
        input: PathBuf,
        /// Translation direction, e.g. ms-zh.
        #[arg(long)]
        columns: Direction,
        /// Plain beam search or diverse beam search.
        #[arg(long, value_enum, default_value_t = Mode::Diverse)]
        mode: Mode,
        /// Total beam width.
        #[arg(long, default_value_t = 8)]
        nbest: usize,
        /// Diversity groups; must divide the beam width.
        #[arg(long, default_value_t = 4)]
        groups: usize,
        /// Maximum generated tokens, EOS included.
        #[arg(long, default_value_t = 60)]
        max_len: usize,
        /// Output candidates JSONL.
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastive reranker.
    #[command(subcommand)]
    Rerank(RerankCmd),
    /// Corpus BLEU of a hypothesis file against a reference file.
    Bleu {
        /// Hypotheses, one per line.
        #[arg(long)]
        hyp: PathBuf,
        /// References, one per line, aligned with the hypotheses.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Word tokens (ms, id) or characters (zh).
        #[arg(long, value_enum)]
        mode: BleuMode,
        /// Multiplier applied to the score.
        #[arg(long, default_value_t = 100.0)]
        scale: f64,
    },
    /// Run the full experiment described by a config file.
    Pipeline {
        /// Experiment config JSON.
        #[arg(long)]
        config: PathBuf,
    },
    /// Write a submission XML from a candidates JSONL or plain text file.
    Submit {
        /// Candidates JSONL (best hypothesis per line) or plain text.
        #[arg(long)]
        input: PathBuf,
        /// Output submission XML.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic toy task to a directory.
    Synth {
        /// Directory for the TSV splits and monolingual files.
        #[arg(long)]
        out: PathBuf,
        /// Generator settings JSON.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum EmbedCmd {
    /// Train skip-gram embeddings on monolingual text.
    Train {
        /// Monolingual text, one sentence per line.
        #[arg(long)]
        mono: PathBuf,
        /// Language of the text; selects the tokenizer.
        #[arg(long, default_value = "synthetic")]
        lang: Lang,
        /// Output embedding table.
        #[arg(long)]
        out: PathBuf,
        /// Experiment config supplying skip-gram settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the nearest neighbours of a token.
    Nn {
        /// Embedding table.
        #[arg(long)]
        table: PathBuf,
        /// Query token.
        #[arg(long)]
        word: String,
        /// Number of neighbours.
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
}

#[derive(Subcommand, Debug)]
enum RerankCmd {
    /// Mine negatives with a translator and train the reranker.
    Train {
        /// Parallel TSV the negatives are mined from.
        #[arg(long)]
        pairs: PathBuf,
        /// Languages of the two TSV columns, e.g. ms-zh.
        #[arg(long)]
        columns: Direction,
        /// Translator checkpoint used to mine negatives and initialize embeddings.
        #[arg(long)]
        translator: PathBuf,
        /// Output reranker checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Experiment config supplying reranker settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Re-score and reorder a candidates file.
    Apply {
        /// Reranker checkpoint.
        #[arg(long)]
        encoder: PathBuf,
        /// Candidates JSONL from decode.
        #[arg(long)]
        candidates: PathBuf,
        /// Reranked candidates JSONL.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Beam,
    Diverse,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BleuMode {
    Word,
    Char,
}

/// Split argv into clap arguments and config overrides.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    fn longs(cmd: &clap::Command, out: &mut BTreeSet<String>) {
        out.extend(
            cmd.get_arguments()
                .filter_map(|a| a.get_long().map(str::to_string)),
        );
        cmd.get_subcommands().for_each(|s| longs(s, out));
    }
    let mut known = BTreeSet::new();
    longs(&Cli::command(), &mut known);
    known.extend(["help".to_string(), "version".to_string()]);
    args.into_iter().partition(
        |a| match a.strip_prefix("--").and_then(|r| r.split_once('=')) {
            Some((k, _)) => known.contains(k),
            None => true,
        },
    )
}

fn data_err(component: &str, path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::new(
        FailureKind::Data,
        component,
        format!("{}: {e}", path.display()),
    )
}

/// Config from a file, or defaults, with overrides applied.
fn config(path: Option<&Path>, overrides: &[String]) -> CliResult<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p, overrides),
        None => ExperimentConfig::from_json("{}", overrides, Path::new(".")),
    }
}

fn tsv_tokens(
    path: &Path,
    columns: Direction,
    table: &SimplificationTable,
) -> CliResult<TokenPairs> {
    let load =
        load_parallel_tsv(path, columns, table).map_err(|e| data_err("preprocess", path, e))?;
    if load.skipped > 0 {
        log::warn!(
            "{}: skipped {} malformed lines",
            path.display(),
            load.skipped
        );
    }
    Ok(load
        .pairs
        .iter()
        .map(|(s, t)| (s.tokens(), t.tokens()))
        .collect())
}

fn write_json(value: &impl serde::Serialize) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("serializable")
    );
}

fn run(command: Command, overrides: &[String]) -> CliResult {
    match command {
        Command::Prep { config: c, out } => {
            let cfg = config(Some(&c), overrides)?;
            cfg.validate()?;
            let table = cfg.table()?;
            fs::create_dir_all(&out).map_err(|e| data_err("prep", &out, e))?;
            let mut skipped = serde_json::Map::new();
            for corpus in &cfg.corpora {
                for (split, path) in [
                    ("train", &corpus.train),
                    ("dev", &corpus.dev),
                    ("test", &corpus.test),
                ] {
                    let load = load_parallel_tsv(path, corpus.columns, &table)
                        .map_err(|e| data_err("prep", path, e))?;
                    let text: String = load
                        .pairs
                        .iter()
                        .map(|(a, b)| format!("{}\t{}\n", a.text, b.text))
                        .collect();
                    let dest = out.join(format!("{}.{split}.tsv", corpus.columns));
                    fs::write(&dest, text).map_err(|e| data_err("prep", &dest, e))?;
                    skipped.insert(format!("{}.{split}", corpus.columns), load.skipped.into());
                }
            }
            write_json(&serde_json::json!({ "skipped": skipped }));
        }
        Command::Embed(EmbedCmd::Train {
            mono,
            lang,
            out,
            config: c,
        }) => {
            let cfg = config(c.as_deref(), overrides)?;
            let corpus: Vec<Vec<String>> = load_mono(&mono, lang, &cfg.table()?)
                .map_err(|e| data_err("skipgram", &mono, e))?
                .iter()
                .map(Sentence::tokens)
                .collect();
            let sg: &SkipgramConfig = &cfg.skipgram;
            let (table, report) =
                train_skipgram::<f32, _>(&corpus, sg).map_err(|e| e.at("skipgram"))?;
            table.save(&out).map_err(|e| e.at("skipgram"))?;
            write_json(
                &serde_json::json!({ "tokens": table.vocab.len(), "epoch_losses": report.epoch_losses }),
            );
        }
        Command::Embed(EmbedCmd::Nn { table, word, k }) => {
            let t: EmbeddingTable<f32> = EmbeddingTable::load(&table).map_err(|e| e.at("embed"))?;
            let nn = nearest_neighbors(&t, &word, k).map_err(|e| e.at("embed"))?;
            for (tok, sim) in nn {
                println!("{tok}\t{sim:.6}");
            }
        }
        Command::Augment {
            pairs,
            columns,
            table,
            out,
            config: c,
        } => {
            let cfg = config(c.as_deref(), overrides)?;
            let tokens = tsv_tokens(&pairs, columns, &cfg.table()?)?;
            let emb: EmbeddingTable<f32> =
                EmbeddingTable::load(&table).map_err(|e| e.at("augment"))?;
            let aug = augment_by_substitution(&tokens, &emb, &cfg.augment)
                .map_err(|e| e.at("augment"))?;
            let text: String = aug
                .iter()
                .map(|(s, t)| {
                    let src = lrnmt::textproc::detokenize(s, columns.src.tokenizer_mode());
                    let tgt = lrnmt::textproc::detokenize(t, columns.tgt.tokenizer_mode());
                    format!("{src}\t{tgt}\n")
                })
                .collect();
            fs::write(&out, text).map_err(|e| data_err("augment", &out, e))?;
            write_json(&serde_json::json!({ "input": tokens.len(), "output": aug.len() }));
        }
        Command::Train {
            pairs,
            columns,
            out,
            config: c,
        } => {
            let cfg = config(c.as_deref(), overrides)?;
            cfg.train.validate().map_err(|e| e.at("train"))?;
            let tokens = tsv_tokens(&pairs, columns, &cfg.table()?)?;
            let (sv, tv) = build_vocabs(&[&tokens], &cfg.vocab)?;
            let (ids, dropped) =
                encode_pairs(&tokens, &sv, &tv, cfg.model.max_len.saturating_sub(2));
            if dropped > 0 {
                log::warn!("dropped {dropped} empty or over-long pairs");
            }
            let mut model: Seq2SeqModel<f32> = Seq2SeqModel::new(
                cfg.model.hyper(sv.len(), tv.len()),
                cfg.seed.wrapping_add(5),
            )
            .map_err(|e| e.at("train"))?;
            let losses = if cfg.use_curriculum {
                let sep = sv.id(SEP).expect("reserved");
                let schedule = build_schedule(&[], &ids, &cfg.curriculum, &sep)
                    .map_err(|e| e.at("curriculum"))?;
                let run = CurriculumRun {
                    dev: &[],
                    dev_max_len: cfg.decode.max_len,
                    output: None,
                };
                let report = run_curriculum(&mut model, &schedule, &cfg.train, &cfg.loss, &run)
                    .map_err(|e| e.at("curriculum"))?;
                report.epochs.iter().map(|e| e.loss).collect()
            } else {
                fit(&mut model, &to_encoded(&ids), &cfg.train, &cfg.loss)
                    .map_err(|e| e.at("train"))?
            };
            save_checkpoint(&model, &sv, &tv, &out).map_err(|e| e.at("train"))?;
            write_json(&serde_json::json!({ "pairs": ids.len(), "epoch_losses": losses }));
        }
        Command::Decode {
            model,
            input,
            columns,
            mode,
            nbest,
            groups,
            max_len,
            out,
        } => {
            let (m, sv, tv) = load_with_vocabs::<f32>(&model).map_err(|e| e.at("decode"))?;
            let table = SimplificationTable::bundled();
            let lines = load_mono(&input, columns.src, &table)
                .map_err(|e| data_err("decode", &input, e))?;
            let max_content = m.hyper.max_len - 2;
            let mut records = Vec::with_capacity(lines.len());
            for (i, s) in lines.iter().enumerate() {
                let src = encode_source(&s.tokens(), &sv, max_content);
                let hyps = match mode {
                    Mode::Beam => beam_search(
                        &m,
                        &src,
                        nbest,
                        max_len,
                        DecodeConfig::default().length_norm,
                    ),
                    Mode::Diverse => {
                        if groups == 0 || nbest % groups != 0 {
                            return Err(PipelineError::config(
                                "--nbest must be a positive multiple of --groups",
                            ));
                        }
                        let cfg = DecodeConfig {
                            beam: nbest,
                            groups,
                            beam_per_group: nbest / groups,
                            max_len,
                            ..DecodeConfig::default()
                        };
                        diverse_beam_search(&m, &src, &cfg)
                    }
                }
                .map_err(|e| e.at("decode"))?;
                records.push(CandidateRecord::new(
                    i,
                    &s.text,
                    src,
                    dedup_candidates(hyps),
                    &tv,
                    columns.tgt,
                ));
            }
            write_candidates(&out, &records).map_err(|e| data_err("decode", &out, e))?;
        }
        Command::Rerank(RerankCmd::Train {
            pairs,
            columns,
            translator,
            out,
            config: c,
        }) => {
            let cfg = config(c.as_deref(), overrides)?;
            let (m, sv, tv) =
                load_with_vocabs::<f32>(&translator).map_err(|e| e.at("rerank_train"))?;
            let tokens = tsv_tokens(&pairs, columns, &cfg.table()?)?;
            let (ids, _) = encode_pairs(&tokens, &sv, &tv, m.hyper.max_len - 2);
            let encoded = to_encoded(&ids);
            let (enc, report) = train_reranker::<f32, f32>(&encoded, &m, &cfg.rerank)
                .map_err(|e| e.at("rerank_train"))?;
            save_reranker(&enc, &sv, &tv, &out).map_err(|e| e.at("rerank_train"))?;
            write_json(&report);
        }
        Command::Rerank(RerankCmd::Apply {
            encoder,
            candidates,
            out,
        }) => {
            let (enc, _, _) =
                load_reranker_with_vocabs::<f32>(&encoder).map_err(|e| e.at("rerank"))?;
            let mut records =
                read_candidates(&candidates).map_err(|e| data_err("rerank", &candidates, e))?;
            for r in &mut records {
                if r.hypotheses.is_empty() {
                    continue;
                }
                let hyps: Vec<_> = r.hypotheses.iter().map(|h| h.hyp.clone()).collect();
                let ranked = rerank(&enc, &r.src_ids, hyps).map_err(|e| e.at("rerank"))?;
                let mut texts: Vec<_> = r.hypotheses.drain(..).collect();
                for h in ranked {
                    let pos = texts
                        .iter()
                        .position(|t| t.hyp.ids == h.ids)
                        .expect("reranked ids come from the input");
                    let mut t = texts.swap_remove(pos);
                    t.hyp.score = h.score;
                    r.hypotheses.push(t);
                }
            }
            write_candidates(&out, &records).map_err(|e| data_err("rerank", &out, e))?;
        }
        Command::Bleu {
            hyp,
            reference,
            mode,
            scale,
        } => {
            let mode = match mode {
                BleuMode::Word => TokenizerMode::Word,
                BleuMode::Char => TokenizerMode::Char,
            };
            let lang = if matches!(mode, TokenizerMode::Char) {
                Lang::Zh
            } else {
                Lang::Synthetic
            };
            let read = |p: &Path| -> CliResult<Vec<Sentence>> {
                Ok(fs::read_to_string(p)
                    .map_err(|e| data_err("bleu", p, e))?
                    .lines()
                    .map(|l| Sentence::normalized(l, lang, None))
                    .collect())
            };
            let (h, r) = (read(&hyp)?, read(&reference)?);
            if h.len() != r.len() {
                return Err(PipelineError::new(
                    FailureKind::Data,
                    "bleu",
                    format!("{} hypotheses but {} references", h.len(), r.len()),
                ));
            }
            let pairs: Vec<_> = h.into_iter().zip(r).collect();
            let cfg = BleuConfig {
                scale,
                ..BleuConfig::new(mode)
            };
            let report = corpus_bleu::<f64>(&pairs, &cfg)
                .map_err(|e| PipelineError::new(FailureKind::Data, "bleu", e.to_string()))?;
            write_json(&report);
        }
        Command::Pipeline { config: c } => {
            let cfg = config(Some(&c), overrides)?;
            let report = run_pipeline(&cfg)?;
            write_json(&report.metrics);
        }
        Command::Submit { input, out } => {
            let text = fs::read_to_string(&input).map_err(|e| data_err("submit", &input, e))?;
            let is_jsonl = text.trim_start().starts_with('{');
            let hyps: Vec<Sentence> = if is_jsonl {
                read_candidates(&input)
                    .map_err(|e| data_err("submit", &input, e))?
                    .iter()
                    .map(|r| Sentence::new(r.best_text(), Lang::Synthetic))
                    .collect()
            } else {
                text.lines()
                    .map(|l| Sentence::new(l, Lang::Synthetic))
                    .collect()
            };
            write_submission(&hyps, &out).map_err(|e| data_err("submit", &out, e))?;
        }
        Command::Synth { out, config: c } => {
            let cfg: SynthConfig = match c {
                Some(p) => {
                    let text = fs::read_to_string(&p)
                        .map_err(|e| PipelineError::config(format!("{}: {e}", p.display())))?;
                    serde_json::from_str(&text)
                        .map_err(|e| PipelineError::config(format!("{}: {e}", p.display())))?
                }
                None => SynthConfig::default(),
            };
            let mut doc = serde_json::to_value(&cfg).expect("serializable");
            for o in overrides {
                lrnmt::pipeline::apply_override(&mut doc, o)?;
            }
            let cfg: SynthConfig =
                serde_json::from_value(doc).map_err(|e| PipelineError::config(e.to_string()))?;
            let task = SyntheticTask::new(cfg).map_err(PipelineError::config)?;
            task.generate()
                .write(&out)
                .map_err(|e| data_err("synth", &out, e))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match run(cli.command, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

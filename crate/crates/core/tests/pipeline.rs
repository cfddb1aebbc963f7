use std::fs;
use std::path::{Path, PathBuf};

use lrnmt::pipeline::{
    load_parallel_tsv, read_candidates, read_submission, render_submission, write_candidates,
    write_submission, CandidateRecord, Direction, ExperimentConfig, FailureKind,
};
use lrnmt::synth::{SynthConfig, SyntheticTask};
use lrnmt::textproc::{Lang, Sentence, SimplificationTable, Vocabulary};
use proptest::prelude::*;

fn ms_zh() -> Direction {
    "ms-zh".parse().unwrap()
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

#[test]
fn tsv_loads_one_pair_per_valid_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.tsv");
    fs::write(&p, "saya\t我\nmakan nasi\t吃饭\nkamu\t你\n").unwrap();
    let t = load_parallel_tsv(&p, ms_zh(), &SimplificationTable::bundled()).unwrap();
    assert_eq!(t.pairs.len(), 3);
    assert_eq!(t.skipped, 0);
    assert_eq!(t.pairs[1].0, Sentence::new("makan nasi", Lang::Ms));
    assert_eq!(t.pairs[1].1, Sentence::new("吃饭", Lang::Zh));
}

#[test]
fn tsv_skips_lines_without_two_fields() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.tsv");
    fs::write(&p, "saya\t我\nno tab here\nkamu\t你\na\tb\tc\n").unwrap();
    let t = load_parallel_tsv(&p, ms_zh(), &SimplificationTable::bundled()).unwrap();
    assert_eq!(t.pairs.len(), 2);
    assert_eq!(t.skipped, 2);
}

#[test]
fn tsv_crlf_matches_lf() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("lf.tsv"), dir.path().join("crlf.tsv"));
    fs::write(&a, "saya &amp; kamu\t我\nmakan\t吃飯\n").unwrap();
    fs::write(&b, "saya &amp; kamu\t我\r\nmakan\t吃飯\r\n").unwrap();
    let table = SimplificationTable::bundled();
    let (la, lb) = (
        load_parallel_tsv(&a, ms_zh(), &table).unwrap(),
        load_parallel_tsv(&b, ms_zh(), &table).unwrap(),
    );
    assert_eq!(la, lb);
    assert_eq!(la.pairs[0].0.text, "saya & kamu");
}

#[test]
fn tsv_missing_file_is_an_io_error() {
    let err = load_parallel_tsv(
        "/nonexistent/x.tsv",
        ms_zh(),
        &SimplificationTable::bundled(),
    )
    .unwrap_err();
    assert_eq!(err.kind(), std::io::ErrorKind::NotFound);
}

#[test]
fn submission_escapes_ampersands() {
    let xml = render_submission(&[Sentence::new("a & b", Lang::Zh)]);
    assert!(xml.contains("<seg id=\"1\">a &amp; b</seg>"), "{xml}");
}

#[test]
fn empty_submission_is_a_bare_root() {
    assert_eq!(
        render_submission(&[]).trim(),
        "<translations></translations>"
    );
}

#[test]
fn submission_ids_are_one_based_and_ordered() {
    let hyps: Vec<Sentence> = ["x", "y", "z"]
        .iter()
        .map(|t| Sentence::new(*t, Lang::Ms))
        .collect();
    let xml = render_submission(&hyps);
    let ids: Vec<&str> = xml
        .match_indices("id=\"")
        .map(|(i, _)| &xml[i + 4..i + 5])
        .collect();
    assert_eq!(ids, ["1", "2", "3"]);
}

fn submission_text() -> impl Strategy<Value = String> {
    let atoms = prop::sample::select(vec![
        "a", "m", "p", ";", "&", "<", ">", "l", "t", "g", "汉", "字", " ", "\"", "'",
    ]);
    prop::collection::vec(atoms, 0..30).prop_map(|v| v.concat())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn submission_round_trips_exactly(texts in prop::collection::vec(submission_text(), 100)) {
        let hyps: Vec<Sentence> = texts.iter().map(|t| Sentence::normalized(t, Lang::Zh, None)).collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub.xml");
        write_submission(&hyps, &p).unwrap();
        let raw = fs::read_to_string(&p).unwrap();
        let body = raw.replace("&amp;", "").replace("&lt;", "").replace("&gt;", "");
        prop_assert!(!body.contains('&'));
        let back = read_submission(&p).unwrap();
        let want: Vec<String> = hyps.iter().map(|h| h.text.clone()).collect();
        prop_assert_eq!(back, want);
    }
}

#[test]
fn candidates_round_trip_through_jsonl() {
    let tv = Vocabulary::from_tokens(["a", "b"]);
    let h = lrnmt::decoding::Hypothesis {
        ids: vec![1, 4, 5, 2],
        logprob: -1.5,
        group: 1,
        score: None,
    };
    let rec = CandidateRecord::new(0, "src", vec![1, 4, 2], vec![h], &tv, Lang::Ms);
    assert_eq!(rec.best_text(), "a b");
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.jsonl");
    write_candidates(&p, &[rec.clone()]).unwrap();
    assert_eq!(read_candidates(&p).unwrap(), vec![rec]);
}

#[test]
fn overrides_reach_nested_fields_and_seeds_propagate() {
    let cfg = ExperimentConfig::from_json(
        r#"{ "seed": 5, "train": { "epochs": 3 } }"#,
        &[
            "--train.batch_size=4".into(),
            "model.d_model=16".into(),
            "seed=9".into(),
        ],
        Path::new("/base"),
    )
    .unwrap();
    assert_eq!(cfg.train.epochs, 3);
    assert_eq!(cfg.train.batch_size, 4);
    assert_eq!(cfg.model.d_model, 16);
    assert_eq!(cfg.seed, 9);
    let seeds = [
        cfg.skipgram.seed,
        cfg.augment.seed,
        cfg.train.seed,
        cfg.curriculum.seed,
        cfg.rerank.seed,
    ];
    assert!(seeds.iter().all(|s| (9..20).contains(s)), "{seeds:?}");
    let distinct: std::collections::BTreeSet<u64> = seeds.iter().copied().collect();
    assert_eq!(distinct.len(), seeds.len());
    assert_eq!(cfg.output_dir, Path::new("/base/runs/default"));
}

#[test]
fn unknown_override_key_is_a_config_error() {
    let err =
        ExperimentConfig::from_json("{}", &["train.nope=1".into()], Path::new(".")).unwrap_err();
    assert_eq!(err.kind, FailureKind::Config);
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("train.nope"));
}

#[test]
fn malformed_json_is_a_config_error() {
    let err = ExperimentConfig::from_json("{ nope", &[], Path::new(".")).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn validation_names_the_missing_path() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("ok.tsv");
    fs::write(&good, "a\tb\n").unwrap();
    let json = format!(
        r#"{{ "corpora": [{{ "columns": "ms-zh", "train": "{}", "dev": "missing-dev.tsv", "test": "{}" }}],
             "directions": ["ms-zh"] }}"#,
        good.display(),
        good.display()
    );
    let cfg = ExperimentConfig::from_json(&json, &[], dir.path()).unwrap();
    let err = cfg.validate().unwrap_err();
    assert_eq!(err.kind, FailureKind::Config);
    assert!(err.to_string().contains("missing-dev.tsv"), "{err}");
}

#[test]
fn direction_without_corpus_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("ok.tsv");
    fs::write(&good, "a\tb\n").unwrap();
    let g = good.display();
    let json = format!(
        r#"{{ "corpora": [{{ "columns": "ms-zh", "train": "{g}", "dev": "{g}", "test": "{g}" }}],
             "directions": ["ms-zh", "id-zh"] }}"#
    );
    let err = ExperimentConfig::from_json(&json, &[], dir.path())
        .unwrap()
        .validate()
        .unwrap_err();
    assert!(err.to_string().contains("id-zh"), "{err}");
}

#[test]
fn shipped_toy_config_validates() {
    let cfg = ExperimentConfig::load(repo_root().join("configs/toy.json"), &[]).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.directions.len(), 4);
    assert_eq!(
        cfg.family_direction(ms_zh()),
        Some("id-zh".parse().unwrap())
    );
}

#[test]
fn shipped_toy_data_matches_the_generator() {
    let root = repo_root();
    let cfg: SynthConfig =
        serde_json::from_str(&fs::read_to_string(root.join("configs/toy-synth.json")).unwrap())
            .unwrap();
    let dir = tempfile::tempdir().unwrap();
    SyntheticTask::new(cfg)
        .unwrap()
        .generate()
        .write(dir.path())
        .unwrap();
    let mut names: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 9);
    for n in names {
        let fresh = fs::read(dir.path().join(&n)).unwrap();
        let shipped = fs::read(root.join("data/toy").join(&n)).unwrap();
        assert!(fresh == shipped, "{n:?} differs from the generator output");
    }
}

/// A two-direction experiment small enough to run in seconds.
fn tiny_experiment(root: &Path, out: &str) -> ExperimentConfig {
    let data = root.join("data");
    if !data.exists() {
        let synth = SynthConfig {
            train_pairs: 60,
            dev_pairs: 8,
            test_pairs: 8,
            mono_sentences: 200,
            ..SynthConfig::default()
        };
        SyntheticTask::new(synth)
            .unwrap()
            .generate()
            .write(&data)
            .unwrap();
    }
    let corpus = |c: &str| {
        format!(
            r#"{{ "columns": "{c}", "train": "data/{c}.train.tsv", "dev": "data/{c}.dev.tsv", "test": "data/{c}.test.tsv" }}"#
        )
    };
    let json = format!(
        r#"{{ "corpora": [{}, {}], "mono": {{ "ms": "data/mono.ms.txt" }}, "directions": ["ms-zh", "zh-ms"],
             "skipgram": {{ "dim": 8, "epochs": 1 }}, "augment": {{ "expansion_factor": 2 }},
             "model": {{ "d_model": 16, "heads": 2, "d_ff": 32, "enc_layers": 1, "dec_layers": 1, "max_len": 32 }},
             "train": {{ "batch_size": 16, "lr_init": 0.003 }},
             "curriculum": {{ "short_threshold": 6, "target_len": 12, "max_tokens": 30,
                             "family_epochs": 1, "short_epochs": 1, "long_epochs": 1 }},
             "decode": {{ "beam": 4, "groups": 2, "beam_per_group": 2, "max_len": 20 }},
             "rerank": {{ "epochs": 1, "negative_pool": 3, "negatives": 2,
                         "decode": {{ "beam": 4, "groups": 2, "beam_per_group": 2, "max_len": 20 }} }},
             "output_dir": "{out}" }}"#,
        corpus("ms-zh"),
        corpus("id-zh"),
    );
    ExperimentConfig::from_json(&json, &[], root).unwrap()
}

#[test]
fn tiny_pipeline_is_deterministic_and_hashes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (
        tiny_experiment(dir.path(), "run-a"),
        tiny_experiment(dir.path(), "run-b"),
    );
    let ra = lrnmt::pipeline::run_pipeline(&a).unwrap();
    let rb = lrnmt::pipeline::run_pipeline(&b).unwrap();
    assert_eq!(ra.metrics, rb.metrics);
    assert_eq!(ra.metrics.directions.len(), 2);
    assert!(ra.metrics.leaderboard.is_none());
    let d = &ra.metrics.directions[0];
    assert_eq!(d.train_pairs, 60);
    assert_eq!(d.family_pairs, 60);
    assert_eq!(d.stages.len(), 3);
    for r in &ra.metrics.directions {
        for s in [r.dev.top1, r.dev.reranked, r.test.top1, r.test.reranked] {
            assert!((0.0..=100.0).contains(&s));
        }
    }
    let components: std::collections::BTreeSet<&str> =
        ra.timings.iter().map(|t| t.component.as_str()).collect();
    for c in [
        "preprocess",
        "skipgram",
        "augment",
        "train",
        "decode",
        "rerank_train",
        "rerank",
        "score",
        "total",
    ] {
        assert!(components.contains(c), "no timing for {c}");
    }

    let manifest: std::collections::BTreeMap<String, String> =
        serde_json::from_str(&fs::read_to_string(a.output_dir.join("manifest.json")).unwrap())
            .unwrap();
    for f in [
        "report.json",
        "ms-zh/submission.xml",
        "ms-zh/translator.ckpt",
        "ms-zh/reranker.ckpt",
        "embeddings/ms.vec",
    ] {
        assert!(manifest.contains_key(f), "manifest lacks {f}");
    }
    let fresh = lrnmt::pipeline::hash_tree(&a.output_dir).unwrap();
    assert_eq!(fresh, manifest);
    let mb: std::collections::BTreeMap<String, String> =
        serde_json::from_str(&fs::read_to_string(b.output_dir.join("manifest.json")).unwrap())
            .unwrap();
    for (k, v) in &manifest {
        if k.ends_with(".ckpt")
            || k.ends_with(".jsonl")
            || k.ends_with(".xml")
            || k.ends_with(".vec")
        {
            assert_eq!(mb.get(k), Some(v), "{k} differs between same-seed runs");
        }
    }
    assert_eq!(
        read_submission(a.output_dir.join("ms-zh/submission.xml"))
            .unwrap()
            .len(),
        8
    );
}

//! End-to-end command tests on a tiny configuration.

use std::path::{Path, PathBuf};
use std::process::Command;

use tcvn::datagen::{read_dataset, Split};
use tcvn::interpret::EventScores;
use tcvn::io::{write_predictions, Document, RunConfig, RunPaths};
use tcvn::model::{collapse_prong, ProngClass};
use tcvn::sparse::CnnConfig;
use tcvn::transformer::TransformerConfig;
use tcvn_cli::{cmd_evaluate, cmd_generate, cmd_interpret, cmd_train, Analysis, Overrides};

fn tiny(dir: &Path) -> RunConfig {
    let mut c = RunConfig {
        dataset: dir.join("data"),
        output: dir.join("run"),
        ..Default::default()
    };
    c.data.seed = 5;
    c.data.train = 40;
    c.data.val = 10;
    c.data.test = 12;
    c.model.cnn = CnnConfig {
        stem_channels: 4,
        blocks: 1,
        layers_per_block: 1,
        growth: 4,
        embedding_dim: 8,
        ..Default::default()
    };
    c.model.transformer = TransformerConfig {
        model_dim: 8,
        layers: 1,
        heads: 2,
        type_dim: 4,
        ff_mult: 2,
    };
    c.model.head_hidden = 8;
    c.train.learning_rate = 1e-3;
    c.train.annealing_epochs = 2.0;
    c.train.annealing_cycles = 1;
    c.train.batch_size = 8;
    c.train.chunk_size = 4;
    c.train.epochs = 2;
    c.interpret.smoothing.samples = 2;
    c
}

fn write_config(dir: &Path, c: &RunConfig) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, c.to_toml().unwrap()).unwrap();
    p
}

fn tcvn(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tcvn")).args(args).output().unwrap()
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn generate_is_deterministic_and_seeded() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), &tiny(t.path()));
    let cfg = cfg.to_str().unwrap();
    let a = t.path().join("a");
    let b = t.path().join("b");
    let c = t.path().join("c");
    for (dir, seed) in [(&a, "3"), (&b, "3"), (&c, "4")] {
        let out = tcvn(&["generate", "--config", cfg, "--seed", seed, "--output", dir.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(read_dir_bytes(&a), read_dir_bytes(&b));
    assert_ne!(read_dir_bytes(&a), read_dir_bytes(&c));
}

#[test]
fn unknown_config_key_is_rejected_by_name() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path().join("bad.toml");
    std::fs::write(&p, "[train]\nlearning_rat = 0.1\n").unwrap();
    let out = tcvn(&["generate", "--config", p.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn commands_fail_cleanly_without_a_dataset() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), &tiny(t.path()));
    let out = tcvn(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:"), "{err}");
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let t = tempfile::tempdir().unwrap();
    let mut c = tiny(t.path());
    cmd_generate(&c, &Overrides::default()).unwrap();

    let straight = Overrides {
        output: Some(t.path().join("straight")),
        ..Default::default()
    };
    cmd_train(&c, &straight, None, |_| {}).unwrap();

    let split = Overrides {
        output: Some(t.path().join("split")),
        ..Default::default()
    };
    c.train.epochs = 1;
    cmd_train(&c, &split, None, |_| {}).unwrap();
    c.train.epochs = 2;
    let ck = RunPaths::new(t.path().join("split")).checkpoint();
    cmd_train(&c, &split, Some(&ck), |_| {}).unwrap();

    assert_eq!(read_dir_bytes(&t.path().join("straight")), read_dir_bytes(&t.path().join("split")));
}

#[test]
fn resume_rejects_a_different_model() {
    let t = tempfile::tempdir().unwrap();
    let mut c = tiny(t.path());
    c.train.epochs = 1;
    cmd_generate(&c, &Overrides::default()).unwrap();
    cmd_train(&c, &Overrides::default(), None, |_| {}).unwrap();
    c.model.head_hidden = 16;
    c.train.epochs = 2;
    let ck = RunPaths::new(&c.output).checkpoint();
    let e = cmd_train(&c, &Overrides::default(), Some(&ck), |_| {}).unwrap_err();
    assert!(format!("{e:#}").contains("different configuration"));
}

#[test]
fn perfect_predictions_score_perfectly() {
    let t = tempfile::tempdir().unwrap();
    let c = tiny(t.path());
    cmd_generate(&c, &Overrides::default()).unwrap();
    let (_, events) = read_dataset(&c.dataset.join(Split::Test.file_name())).unwrap();
    let onehot = |k: usize, i: usize| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let scores: Vec<EventScores> = events
        .iter()
        .map(|e| EventScores {
            event_probs: onehot(10, e.label.index()),
            prong_probs: e.prongs.iter().map(|p| onehot(9, p.truth.label.index())).collect(),
        })
        .collect();
    let p = t.path().join("perfect.jsonl");
    write_predictions(&p, &scores).unwrap();
    let r = cmd_evaluate(&c, &Overrides::default(), None, Some(&p), Split::Test).unwrap();
    for set in [&r.event, &r.prong, &r.prong_fine] {
        assert_eq!(set.metrics.accuracy, 1.0);
        assert_eq!(set.metrics.recall, 1.0);
        assert_eq!(set.metrics.precision, 1.0);
        if let Some(a) = set.metrics.auc {
            assert_eq!(a, 1.0);
        }
    }
    let retained = events
        .iter()
        .flat_map(|e| &e.prongs)
        .filter(|p| !matches!(p.truth.label, ProngClass::Other | ProngClass::Cosmic))
        .count();
    assert_eq!(r.prong.metrics.samples, retained);
    assert!(collapse_prong(&onehot(9, ProngClass::Other.index())).unwrap().is_none());
}

#[test]
fn evaluate_rejects_mismatched_predictions() {
    let t = tempfile::tempdir().unwrap();
    let c = tiny(t.path());
    cmd_generate(&c, &Overrides::default()).unwrap();
    let p = t.path().join("short.jsonl");
    write_predictions(
        &p,
        &[EventScores {
            event_probs: vec![0.1; 10],
            prong_probs: vec![],
        }],
    )
    .unwrap();
    assert!(cmd_evaluate(&c, &Overrides::default(), None, Some(&p), Split::Test).is_err());
}

fn trained(c: &RunConfig) -> PathBuf {
    cmd_generate(c, &Overrides::default()).unwrap();
    cmd_train(c, &Overrides::default(), None, |_| {}).unwrap();
    RunPaths::new(&c.output).checkpoint()
}

#[test]
fn every_analysis_runs_and_round_trips() {
    let t = tempfile::tempdir().unwrap();
    let c = tiny(t.path());
    let ck = trained(&c);
    for which in [
        Analysis::Attention,
        Analysis::AttentionPerProng,
        Analysis::EventAttention,
        Analysis::SaliencyGrid,
        Analysis::SaliencyGridMatched,
        Analysis::Integrated,
        Analysis::IntegratedGaussian,
    ] {
        let (path, doc) = cmd_interpret(&c, &Overrides::default(), &ck, Split::Test, which).unwrap();
        let back = Document::read(&path).unwrap();
        assert_eq!(back, doc, "{}", which.name());
        assert_eq!(doc.get_meta("analysis"), Some(which.name()));
    }
}

#[test]
fn attention_on_a_single_event() {
    let t = tempfile::tempdir().unwrap();
    let mut c = tiny(t.path());
    c.data.test = 1;
    let ck = trained(&c);
    let (_, doc) = cmd_interpret(&c, &Overrides::default(), &ck, Split::Test, Analysis::Attention).unwrap();
    let s = doc.section("log_attention").unwrap();
    // the event row always attends to itself
    assert!(s.value("event", "event").is_some());
    assert!(doc.section("event 0").is_some());
}

#[test]
fn empty_saliency_population_is_reported_missing() {
    let t = tempfile::tempdir().unwrap();
    let mut c = tiny(t.path());
    c.interpret.cuts.max_energy = 1e-9;
    let ck = trained(&c);
    let (path, doc) = cmd_interpret(&c, &Overrides::default(), &ck, Split::Test, Analysis::SaliencyGrid).unwrap();
    let counts = doc.section("counts").unwrap();
    assert!(counts.rows.iter().all(|(_, v)| v.iter().all(|x| *x == Some(0.0))));
    let entries = doc.section("entries").unwrap();
    assert!(entries.rows.iter().all(|(_, v)| v.iter().all(Option::is_none)));
    assert!(std::fs::read_to_string(path).unwrap().contains("NA"));
}

#[test]
fn pipeline_outputs_are_bit_identical_across_runs() {
    let runs: Vec<Vec<(String, Vec<u8>)>> = (0..2)
        .map(|_| {
            let t = tempfile::tempdir().unwrap();
            let c = tiny(t.path());
            let ck = trained(&c);
            cmd_evaluate(&c, &Overrides::default(), Some(&ck), None, Split::Test).unwrap();
            cmd_interpret(&c, &Overrides::default(), &ck, Split::Test, Analysis::Attention).unwrap();
            cmd_interpret(&c, &Overrides::default(), &ck, Split::Test, Analysis::Integrated).unwrap();
            let mut all = read_dir_bytes(&c.dataset);
            all.extend(read_dir_bytes(&c.output));
            all
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}

use std::fs;
use std::path::Path;

use dmt::autodiff::RngState;
use dmt::experiment::{collect_results, render_markdown, render_tsv, run_experiment, ExperimentConfig, ExperimentError, KeyValues};

const WORDS: [&str; 12] = [
    "ka", "lo", "mi", "nu", "pe", "ra", "si", "tu", "va", "we", "yo", "zu",
];

/// Copy-language corpus: every target line equals its source line.
fn write_copy_data(dir: &Path, n: usize, seed: u64) {
    let mut rng = RngState::new(seed);
    let lines: Vec<String> = (0..n)
        .map(|_| {
            let len = 4 + rng.below(4);
            (0..len).map(|_| WORDS[rng.below(WORDS.len())]).collect::<Vec<_>>().join(" ")
        })
        .collect();
    let text = lines.join("\n") + "\n";
    for split in ["train", "dev", "test"] {
        fs::write(dir.join(format!("{split}.src")), &text).unwrap();
        fs::write(dir.join(format!("{split}.tgt")), &text).unwrap();
    }
    fs::write(dir.join("mono.tgt"), &text).unwrap();
}

fn copy_config(extra: &str) -> KeyValues {
    KeyValues::parse(&format!(
        "# copy language
name = copy
src_lang = xa
tgt_lang = xb
train.src = train.src
train.tgt = train.tgt
dev.src = dev.src
dev.tgt = dev.tgt
test.src = test.src
test.tgt = test.tgt
bpe.merges = 40
arch = transformer
model.enc_layers = 1
model.dec_layers = 1
model.d_model = 32
model.n_heads = 2
model.d_ffn = 64
model.max_positions = 64
train.batch_size = 8
train.max_tokens = 0
train.learning_rate = 0.002
train.epochs = 300
train.patience = 3
train.stop_at_bleu = 1.0
{extra}"
    ))
    .unwrap()
}

#[test]
fn copy_language_run_is_accurate_and_idempotent() {
    let data = tempfile::tempdir().unwrap();
    let runs = tempfile::tempdir().unwrap();
    write_copy_data(data.path(), 32, 5);
    let config = ExperimentConfig::from_kv(&copy_config(""), data.path()).unwrap();

    let first = run_experiment(&config, runs.path()).unwrap();
    assert_eq!(first.executed, ["prep", "bpe", "vocab", "binarize", "train", "decode", "score"]);
    let dir = runs.path().join("copy");
    assert!(
        first.bleu >= 0.99,
        "copy-language BLEU {}\n{}\n{}\n{}",
        first.bleu,
        fs::read_to_string(dir.join("test.hyp")).unwrap(),
        fs::read_to_string(dir.join("data/test.ref")).unwrap(),
        fs::read_to_string(dir.join("train/report.tsv")).unwrap()
    );
    for file in ["config.txt", "log.txt", "manifest.tsv", "results.tsv", "test.hyp", "train/best.dmt"] {
        assert!(dir.join(file).exists(), "{file} missing");
    }
    assert!(!dir.join("lock").exists());
    let results = fs::read_to_string(dir.join("results.tsv")).unwrap();
    assert!(results.starts_with("system\tpair\tbleu\tsentences\tbest_epoch\ntransformer\txa-xb\t"));
    let manifest = fs::read_to_string(dir.join("manifest.tsv")).unwrap();
    assert!(manifest.starts_with("dmt_version\t"));

    // The snapshot alone reproduces the config.
    let snapshot = KeyValues::load(&dir.join("config.txt")).unwrap();
    assert_eq!(ExperimentConfig::from_kv(&snapshot, Path::new("/")).unwrap(), config);

    let again = run_experiment(&config, runs.path()).unwrap();
    assert!(again.executed.is_empty(), "rerun did work: {:?}", again.executed);
    assert_eq!(again.skipped.len(), 7);
    assert_eq!(again.bleu, first.bleu);

    // A lost artifact reruns only the stage that made it.
    let hyp = fs::read(dir.join("test.hyp")).unwrap();
    fs::remove_file(dir.join("test.hyp")).unwrap();
    let repaired = run_experiment(&config, runs.path()).unwrap();
    assert_eq!(repaired.executed, ["decode"]);
    assert_eq!(fs::read(dir.join("test.hyp")).unwrap(), hyp);

    let log = fs::read_to_string(dir.join("log.txt")).unwrap();
    assert!(log.lines().all(|l| l.as_bytes()[4] == b'-' && l.contains('T')));
    assert!(log.contains("stage train: running") && log.contains("stage train: fresh"));

    let rows = collect_results(&[dir]).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(render_tsv(&rows).starts_with("system\txa-xb\ntransformer\t"));
    assert!(render_markdown(&rows).starts_with("| system | xa-xb |\n|---|---|\n| transformer |"));
}

#[test]
fn missing_corpus_fails_validation() {
    let data = tempfile::tempdir().unwrap();
    write_copy_data(data.path(), 4, 1);
    fs::remove_file(data.path().join("dev.tgt")).unwrap();
    match ExperimentConfig::from_kv(&copy_config(""), data.path()) {
        Err(ExperimentError::MissingPath { key, .. }) => assert_eq!(key, "dev.tgt"),
        other => panic!("expected a missing-path error, got {other:?}"),
    }
    let mut kv = copy_config("");
    kv.set("name", "../escape");
    write_copy_data(data.path(), 4, 1);
    assert!(matches!(ExperimentConfig::from_kv(&kv, data.path()), Err(ExperimentError::Config(_))));
}

#[test]
fn run_names_and_locks_are_exclusive() {
    let data = tempfile::tempdir().unwrap();
    let runs = tempfile::tempdir().unwrap();
    write_copy_data(data.path(), 4, 1);
    let config = ExperimentConfig::from_kv(&copy_config("train.epochs = 1"), data.path()).unwrap();
    let dir = runs.path().join("copy");
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join("lock"), "1").unwrap();
    assert!(matches!(run_experiment(&config, runs.path()), Err(ExperimentError::Locked(_))));
    fs::remove_file(dir.join("lock")).unwrap();

    run_experiment(&config, runs.path()).unwrap();
    let changed = ExperimentConfig::from_kv(&copy_config("train.epochs = 2"), data.path()).unwrap();
    assert!(matches!(run_experiment(&changed, runs.path()), Err(ExperimentError::NameTaken(_))));
}

#[test]
fn stage_errors_name_the_stage() {
    let data = tempfile::tempdir().unwrap();
    let runs = tempfile::tempdir().unwrap();
    write_copy_data(data.path(), 4, 1);
    // Positions too short for the data make training fail.
    let config = ExperimentConfig::from_kv(&copy_config("model.max_positions = 2\ntrain.epochs = 1"), data.path()).unwrap();
    match run_experiment(&config, runs.path()) {
        Err(ExperimentError::Stage { stage, .. }) => assert_eq!(stage, "train"),
        other => panic!("expected a train-stage error, got {other:?}"),
    }
    let dir = runs.path().join("copy");
    assert!(dir.join("data/train.src.ids").exists(), "earlier artifacts must survive");
    assert!(!dir.join("lock").exists());
}

#[test]
fn backtranslation_stage_writes_pseudo_corpus() {
    let data = tempfile::tempdir().unwrap();
    let runs = tempfile::tempdir().unwrap();
    write_copy_data(data.path(), 12, 3);
    let extra = "train.epochs = 2\nbt.enabled = true\nbt.mono = mono.tgt\nbt.reverse.epochs = 1\nbt.upsample_real = 2";
    let config = ExperimentConfig::from_kv(&copy_config(extra), data.path()).unwrap();
    assert_eq!(config.system, "transformer+bt");
    assert_eq!(config.bt.as_ref().unwrap().reverse.epochs, 1);
    let summary = run_experiment(&config, runs.path()).unwrap();
    assert!(summary.executed.contains(&"backtranslate"));
    let dir = runs.path().join("copy");
    let pseudo = fs::read_to_string(dir.join("bt/pseudo.tgt")).unwrap();
    let prov = fs::read_to_string(dir.join("bt/pseudo.prov")).unwrap();
    assert_eq!(pseudo.lines().count(), prov.lines().count());
    let mixed = fs::read_to_string(dir.join("data/train.mixed.src.ids")).unwrap();
    assert_eq!(mixed.lines().count(), 2 * 12 + pseudo.lines().count());
    let mono: Vec<String> = fs::read_to_string(data.path().join("mono.tgt"))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect();
    for (target, record) in pseudo.lines().zip(prov.lines()) {
        let line: usize = record.split('\t').next().unwrap().parse().unwrap();
        assert_eq!(target, mono[line]);
    }
}

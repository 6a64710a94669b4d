use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn dmt(args: &[&str], stdin: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_dmt"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn identical_files_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let text = "the cat sat on the mat\nನಾನು ಮನೆಗೆ ಹೋಗುತ್ತೇನೆ ಈಗ ಬೇಗ\n";
    let file = dir.path().join("a.txt");
    fs::write(&file, text).unwrap();
    let out = dmt(&["score", "--cand", path(&file), "--ref", path(&file)], "");
    assert_eq!(stdout(&out), "1.0000\n");
}

#[test]
fn prep_bpe_round_trip_restores_text() {
    let dir = tempfile::tempdir().unwrap();
    let raw = "ನಾನು ಮನೆಗೆ ಹೋಗುತ್ತೇನೆ, ಅವನು ಶಾಲೆಗೆ ಹೋಗುತ್ತಾನೆ.\nಇದು ಒಳ್ಳೆಯ ಪುಸ್ತಕ!\n";
    let normalized = stdout(&dmt(&["prep", "normalize", "--lang", "kn"], raw));
    let tokenized = stdout(&dmt(&["prep", "tokenize"], &normalized));
    assert!(tokenized.contains(" ,") && tokenized.contains(" ."));
    let tok_file = dir.path().join("train.tok");
    fs::write(&tok_file, &tokenized).unwrap();
    let codes = dir.path().join("codes");
    stdout(&dmt(&["bpe", "learn", "--in", path(&tok_file), "--merges", "20", "--out", path(&codes)], ""));
    let segmented = stdout(&dmt(&["bpe", "apply", "--codes", path(&codes)], &tokenized));
    assert!(segmented.contains("@@"));
    let undone = stdout(&dmt(&["bpe", "undo"], &segmented));
    assert_eq!(undone, tokenized);
    let detok = stdout(&dmt(&["prep", "detok"], &undone));
    assert_eq!(detok, normalized);

    let seg_file = dir.path().join("train.bpe");
    fs::write(&seg_file, &segmented).unwrap();
    let vocab = dir.path().join("vocab");
    stdout(&dmt(&["vocab", "build", "--in", path(&seg_file), "--out", path(&vocab)], ""));
    let ids = stdout(&dmt(&["binarize", "--vocab", path(&vocab)], &segmented));
    assert_eq!(ids.lines().count(), 2);
    assert!(ids.split_whitespace().all(|t| t.parse::<u32>().is_ok()));
}

#[test]
fn transliteration_round_trips_through_devanagari() {
    let kannada = "ಕನ್ನಡ ಭಾಷೆ\n";
    let deva = stdout(&dmt(&["prep", "translit", "--from", "kannada"], kannada));
    assert_ne!(deva, kannada);
    let back = stdout(&dmt(&["prep", "translit", "--from", "devanagari", "--to", "kannada"], &deva));
    assert_eq!(back, kannada);
}

#[test]
fn help_lists_defaults() {
    let help = stdout(&dmt(&["translate", "--help"], ""));
    assert!(help.contains("[default: 5]"), "{help}");
    assert!(help.contains("[default: 1]"));
    let help = stdout(&dmt(&["bpe", "learn", "--help"], ""));
    assert!(help.contains("[default: 10000]"));
    let top = stdout(&dmt(&["--help"], ""));
    for cmd in ["prep", "bpe", "vocab", "binarize", "train", "translate", "backtranslate", "mix", "score", "report", "run"] {
        assert!(top.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn errors_are_one_line_with_nonzero_exit() {
    let out = dmt(&["score", "--cand", "/nonexistent/a", "--ref", "/nonexistent/b"], "");
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("dmt: error:"));

    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    fs::write(&a, "one two three four\n").unwrap();
    fs::write(&b, "one two three four\nfive six seven eight\n").unwrap();
    let out = dmt(&["score", "--cand", path(&a), "--ref", path(&b)], "");
    assert!(!out.status.success());
}

#[test]
fn mix_writes_synthetic_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("real.src"), "a b\nc d\n").unwrap();
    fs::write(d.join("real.tgt"), "e f\ng h\n").unwrap();
    fs::write(d.join("pseudo.src"), "x y\n").unwrap();
    fs::write(d.join("pseudo.tgt"), "z w\n").unwrap();
    fs::write(d.join("pseudo.prov"), "0\tckpt\tcfg\n").unwrap();
    let out = dmt(
        &[
            "mix",
            "--real",
            path(&d.join("real")),
            "--pseudo",
            path(&d.join("pseudo")),
            "--upsample-real",
            "2",
            "--src-lang",
            "kn",
            "--tgt-lang",
            "ml",
            "--out",
            path(&d.join("mixed")),
        ],
        "",
    );
    stdout(&out);
    let flags = fs::read_to_string(d.join("mixed.synthetic")).unwrap();
    assert_eq!(flags.lines().count(), 5);
    assert_eq!(flags.lines().filter(|l| *l == "1").count(), 1);
    let src = fs::read_to_string(d.join("mixed.src")).unwrap();
    for (line, flag) in src.lines().zip(flags.lines()) {
        assert_eq!(line == "x y", flag == "1");
    }
}

#[test]
fn run_then_report() {
    let data = tempfile::tempdir().unwrap();
    let runs = tempfile::tempdir().unwrap();
    let d = data.path();
    let text = "ka lo mi nu\npe ra si tu\nva we yo zu\nka pe va lo\n";
    for f in ["train.src", "train.tgt", "dev.src", "dev.tgt", "test.src", "test.tgt"] {
        fs::write(d.join(f), text).unwrap();
    }
    fs::write(
        d.join("exp.cfg"),
        "name = tiny\nsrc_lang = xa\ntgt_lang = xb\ntrain.src = train.src\ntrain.tgt = train.tgt\n\
         dev.src = dev.src\ndev.tgt = dev.tgt\ntest.src = test.src\ntest.tgt = test.tgt\nbpe.merges = 5\n\
         model.enc_layers = 1\nmodel.dec_layers = 1\nmodel.d_model = 16\nmodel.n_heads = 2\nmodel.d_ffn = 32\n",
    )
    .unwrap();
    let cfg = d.join("exp.cfg");
    let out = dmt(
        &["run", "--config", path(&cfg), "--set", "train.epochs=1", "--runs-dir", path(runs.path())],
        "",
    );
    let line = stdout(&out);
    assert!(line.contains("\ttransformer\t"), "{line}");
    let table = stdout(&dmt(&["report", "--runs-dir", path(runs.path()), "--format", "markdown"], ""));
    assert!(table.starts_with("| system | xa-xb |"), "{table}");
}

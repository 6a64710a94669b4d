use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use dmt::corpus::{LanguageTag, ParallelCorpus, SentencePair};
use dmt::models::{build_model, ModelConfig, TransformerConfig};
use dmt::pipeline::{PipelineOptions, TextPipeline};
use dmt::training::Checkpoint;
use dmt_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = dmt_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

unsafe fn take(p: *mut c_char) -> String {
    let s = CStr::from_ptr(p).to_str().unwrap().to_string();
    dmt_string_free(p);
    s
}

/// Writes an untrained model with its pipeline files; returns the paths.
fn artifacts(dir: &Path) -> [CString; 4] {
    let tag = |code: &str| LanguageTag::custom(code).unwrap();
    let mut corpus = ParallelCorpus::new(tag("xa"), tag("xb"));
    for i in 0..10 {
        corpus.pairs.push(SentencePair::new(format!("a{i} b c"), format!("d{i} e f")).unwrap());
    }
    let options = PipelineOptions {
        merges: 4,
        transliterate: false,
        ..PipelineOptions::default()
    };
    let pipeline = TextPipeline::learn(&corpus, &options);
    let config = ModelConfig::Transformer(TransformerConfig {
        enc_layers: 1,
        dec_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_ffn: 16,
        dropout: 0.0,
        max_positions: 32,
        allow_uneven_heads: false,
    });
    let model = build_model(&config, pipeline.src_vocab.len(), pipeline.tgt_vocab.len(), 7).unwrap();
    let (s, t) = pipeline.fingerprints();
    let paths = ["model.dmt", "codes", "src.vocab", "tgt.vocab"].map(|f| dir.join(f));
    Checkpoint::from_model(&model, (&s, &t), 0, None, Vec::new()).save(&paths[0]).unwrap();
    pipeline.bpe.save(&paths[1]).unwrap();
    pipeline.src_vocab.save(&paths[2]).unwrap();
    pipeline.tgt_vocab.save(&paths[3]).unwrap();
    paths.map(|p| c(p.to_str().unwrap()))
}

#[test]
fn translator_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let [ckpt, codes, sv, tv] = artifacts(dir.path());
    let (xa, xb) = (c("xa"), c("xb"));
    unsafe {
        let mut t = ptr::null_mut();
        let status = dmt_translator_open(
            ckpt.as_ptr(), codes.as_ptr(), sv.as_ptr(), tv.as_ptr(), xa.as_ptr(), xb.as_ptr(), false, &mut t,
        );
        assert_eq!(status, DmtStatus::Ok);
        assert!(!t.is_null());
        assert!(dmt_last_error().is_null());

        let src = c("a1 b c");
        let mut out = ptr::null_mut();
        assert_eq!(dmt_translate(t, src.as_ptr(), &mut out), DmtStatus::Ok);
        assert!(!take(out).contains("@@"));

        assert_eq!(dmt_translator_set_decode(t, 1, 1.0, 0), DmtStatus::Ok);
        assert_eq!(dmt_translate(t, src.as_ptr(), &mut out), DmtStatus::Ok);
        let greedy = take(out);
        assert_eq!(dmt_translate(t, src.as_ptr(), &mut out), DmtStatus::Ok);
        assert_eq!(take(out), greedy, "decoding is deterministic");

        assert_eq!(dmt_translator_set_decode(t, 0, 1.0, 0), DmtStatus::InvalidArgument);
        assert!(!last_error().is_empty());
        dmt_translator_free(t);
        dmt_translator_free(ptr::null_mut());
    }
}

#[test]
fn open_reports_vocab_mismatch_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let [ckpt, codes, sv, tv] = artifacts(dir.path());
    let (xa, xb) = (c("xa"), c("xb"));
    unsafe {
        let mut t = ptr::null_mut();
        // Vocabularies swapped: fingerprints disagree with the checkpoint.
        let status = dmt_translator_open(
            ckpt.as_ptr(), codes.as_ptr(), tv.as_ptr(), sv.as_ptr(), xa.as_ptr(), xb.as_ptr(), false, &mut t,
        );
        assert_eq!(status, DmtStatus::Checkpoint);
        assert!(t.is_null());
        let missing = c("/nonexistent/codes");
        let status = dmt_translator_open(
            ckpt.as_ptr(), missing.as_ptr(), sv.as_ptr(), tv.as_ptr(), xa.as_ptr(), xb.as_ptr(), false, &mut t,
        );
        assert_eq!(status, DmtStatus::Io);
        assert!(last_error().contains("nonexistent"));
        let status = dmt_translator_open(
            ptr::null(), codes.as_ptr(), sv.as_ptr(), tv.as_ptr(), xa.as_ptr(), xb.as_ptr(), false, &mut t,
        );
        assert_eq!(status, DmtStatus::NullArgument);
    }
}

#[test]
fn bleu_and_transliteration() {
    unsafe {
        let s = c("the cat sat on the mat");
        let mut score = -1.0;
        assert_eq!(dmt_sentence_bleu(s.as_ptr(), s.as_ptr(), &mut score), DmtStatus::Ok);
        assert_eq!(score, 1.0);
        let other = c("a dog ran in a park");
        assert_eq!(dmt_sentence_bleu(other.as_ptr(), s.as_ptr(), &mut score), DmtStatus::Ok);
        assert_eq!(score, 0.0);
        assert_eq!(dmt_sentence_bleu(s.as_ptr(), s.as_ptr(), ptr::null_mut()), DmtStatus::NullArgument);

        let kannada = c("ಕನ್ನಡ");
        let (kn, deva) = (c("kannada"), c("devanagari"));
        let mut out = ptr::null_mut();
        assert_eq!(dmt_transliterate(kannada.as_ptr(), kn.as_ptr(), deva.as_ptr(), &mut out), DmtStatus::Ok);
        let devanagari = take(out);
        assert_eq!(devanagari, "कन्नड");
        let back = c(&devanagari);
        assert_eq!(dmt_transliterate(back.as_ptr(), deva.as_ptr(), kn.as_ptr(), &mut out), DmtStatus::Ok);
        assert_eq!(take(out), "ಕನ್ನಡ");
        let bogus = c("klingon");
        assert_eq!(
            dmt_transliterate(kannada.as_ptr(), bogus.as_ptr(), deva.as_ptr(), &mut out),
            DmtStatus::InvalidArgument
        );
        let bad_utf8 = [0xffu8, 0];
        assert_eq!(
            dmt_transliterate(bad_utf8.as_ptr().cast(), kn.as_ptr(), deva.as_ptr(), &mut out),
            DmtStatus::InvalidUtf8
        );
    }
}

#[test]
fn version_is_set() {
    let v = unsafe { CStr::from_ptr(dmt_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/dmt.h")).unwrap();
    for name in [
        "dmt_version",
        "dmt_last_error",
        "dmt_translator_open",
        "dmt_translator_set_decode",
        "dmt_translate",
        "dmt_translator_free",
        "dmt_sentence_bleu",
        "dmt_transliterate",
        "dmt_string_free",
        "DMT_STATUS_OK = 0",
        "typedef struct DmtTranslator DmtTranslator",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

/// Compiles and runs a C program against the header and static library.
#[test]
fn c_program_links_against_header() {
    let target = Path::new(env!("CARGO_TARGET_TMPDIR")).parent().unwrap();
    let lib_dir = ["debug", "release"]
        .iter()
        .map(|p| target.join(p))
        .find(|d| d.join("libdmt_ffi.a").exists());
    let (Some(lib_dir), Ok(_)) = (lib_dir, Command::new("cc").arg("--version").output()) else {
        eprintln!("skipping: no C compiler or static library");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "dmt.h"
int main(void) {
    double score = 0.0;
    if (dmt_sentence_bleu("a b c d e", "a b c d e", &score) != DMT_STATUS_OK) return 1;
    char *out = NULL;
    if (dmt_transliterate("x", "nope", "deva", &out) != DMT_STATUS_INVALID_ARGUMENT) return 2;
    if (dmt_last_error() == NULL) return 3;
    printf("%.4f %s\n", score, dmt_version());
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(Path::new(env!("CARGO_MANIFEST_DIR")).join("include"))
        .arg(lib_dir.join("libdmt_ffi.a"))
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), format!("1.0000 {}\n", env!("CARGO_PKG_VERSION")));
}

//! C ABI for translation, scoring and transliteration.
//!
//! Every fallible call returns a [`DmtStatus`]; on failure the message is
//! available from [`dmt_last_error`] on the same thread. Strings handed out
//! by the library must be released with [`dmt_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dmt::bleu::{sentence_bleu, BleuConfig};
use dmt::corpus::LanguageTag;
use dmt::decoding::{translate_batch, DecodeConfig};
use dmt::models::SeqModel;
use dmt::pipeline::{Side, TextPipeline};
use dmt::subword::{BpeModel, Vocabulary};
use dmt::textnorm::{transliterate, ScriptId};
use dmt::training::Checkpoint;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmtStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Checkpoint = 5,
    Decode = 6,
    Bleu = 7,
    Panic = 8,
}

/// A loaded model with its text pipeline and decoding settings.
pub struct DmtTranslator {
    model: SeqModel,
    pipeline: TextPipeline,
    decode: DecodeConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

type Failure = (DmtStatus, String);

fn fail(status: DmtStatus) -> impl FnOnce(String) -> Failure {
    move |msg| (status, msg)
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DmtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DmtStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DmtStatus::Panic
        }
    }
}

/// # Safety
/// `p` is null or a NUL-terminated string valid for the call.
unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err((DmtStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (DmtStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn hand_out(s: String, out: *mut *mut c_char) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| (DmtStatus::InvalidArgument, "output contains NUL".to_string()))?;
    // SAFETY: callers check `out` for null before computing the output.
    unsafe { *out = c.into_raw() };
    Ok(())
}

fn check_out<T>(out: *mut T) -> Result<(), Failure> {
    if out.is_null() {
        Err((DmtStatus::NullArgument, "output pointer is null".into()))
    } else {
        Ok(())
    }
}

fn lang(code: &str) -> Result<LanguageTag, Failure> {
    LanguageTag::parse(code)
        .or_else(|_| LanguageTag::custom(code))
        .map_err(|e| (DmtStatus::InvalidArgument, e.to_string()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dmt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library on this thread.
#[no_mangle]
pub extern "C" fn dmt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint with its merge file and vocabularies. Decoding
/// defaults to beam 5 with length penalty 1.0.
///
/// # Safety
/// String arguments are NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dmt_translator_open(
    checkpoint: *const c_char,
    codes: *const c_char,
    src_vocab: *const c_char,
    tgt_vocab: *const c_char,
    src_lang: *const c_char,
    tgt_lang: *const c_char,
    transliterate: bool,
    out: *mut *mut DmtTranslator,
) -> DmtStatus {
    guard(|| {
        check_out(out)?;
        let path = |p, what| text(p, what).map(PathBuf::from);
        let side = |code: &str| -> Result<Side, Failure> {
            let l = lang(code)?;
            Ok(if transliterate { Side::for_lang(l) } else { Side::without_script(l) })
        };
        let pipeline = TextPipeline {
            source: side(text(src_lang, "src_lang")?)?,
            target: side(text(tgt_lang, "tgt_lang")?)?,
            bpe: BpeModel::load(&path(codes, "codes")?).map_err(|e| fail(DmtStatus::Io)(e.to_string()))?,
            src_vocab: Vocabulary::load(&path(src_vocab, "src_vocab")?).map_err(|e| fail(DmtStatus::Io)(e.to_string()))?,
            tgt_vocab: Vocabulary::load(&path(tgt_vocab, "tgt_vocab")?).map_err(|e| fail(DmtStatus::Io)(e.to_string()))?,
        };
        let ckpt_err = |e: dmt::training::CheckpointError| (DmtStatus::Checkpoint, e.to_string());
        let ckpt = Checkpoint::load(&path(checkpoint, "checkpoint")?).map_err(ckpt_err)?;
        ckpt.check_vocabs(&pipeline.src_vocab, &pipeline.tgt_vocab).map_err(ckpt_err)?;
        let model = ckpt.to_model().map_err(ckpt_err)?;
        let translator = Box::new(DmtTranslator {
            model,
            pipeline,
            decode: DecodeConfig::default(),
        });
        *out = Box::into_raw(translator);
        Ok(())
    })
}

/// Sets the beam width, length penalty and output cap (0 means automatic).
///
/// # Safety
/// `translator` comes from [`dmt_translator_open`].
#[no_mangle]
pub unsafe extern "C" fn dmt_translator_set_decode(
    translator: *mut DmtTranslator,
    beam: usize,
    length_penalty: f64,
    max_len: usize,
) -> DmtStatus {
    guard(|| {
        let t = translator
            .as_mut()
            .ok_or((DmtStatus::NullArgument, "translator is null".to_string()))?;
        let decode = DecodeConfig {
            beam,
            length_penalty,
            max_len: (max_len > 0).then_some(max_len),
        };
        decode.validate().map_err(|e| (DmtStatus::InvalidArgument, e.to_string()))?;
        t.decode = decode;
        Ok(())
    })
}

/// Translates one line; the result goes to `*out`.
///
/// # Safety
/// `translator` comes from [`dmt_translator_open`]; `source` is
/// NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dmt_translate(
    translator: *const DmtTranslator,
    source: *const c_char,
    out: *mut *mut c_char,
) -> DmtStatus {
    guard(|| {
        check_out(out)?;
        let t = translator
            .as_ref()
            .ok_or((DmtStatus::NullArgument, "translator is null".to_string()))?;
        let line = text(source, "source")?;
        let mut result = translate_batch(&t.model, &[line], &t.pipeline, &t.decode)
            .map_err(|e| (DmtStatus::Decode, e.to_string()))?;
        hand_out(result.pop().unwrap_or_default(), out)
    })
}

/// # Safety
/// `translator` is null or comes from [`dmt_translator_open`] and is not
/// used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dmt_translator_free(translator: *mut DmtTranslator) {
    if !translator.is_null() {
        drop(Box::from_raw(translator));
    }
}

/// Sentence BLEU of a whitespace-tokenized candidate against one reference.
///
/// # Safety
/// Strings are NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dmt_sentence_bleu(
    candidate: *const c_char,
    reference: *const c_char,
    out: *mut f64,
) -> DmtStatus {
    guard(|| {
        check_out(out)?;
        let cand: Vec<&str> = text(candidate, "candidate")?.split_whitespace().collect();
        let reference: Vec<&str> = text(reference, "reference")?.split_whitespace().collect();
        *out = sentence_bleu(&cand, &[reference], &BleuConfig::default())
            .map_err(|e| (DmtStatus::Bleu, e.to_string()))?;
        Ok(())
    })
}

/// Maps text between Indic scripts named like `kannada` or `deva`.
///
/// # Safety
/// Strings are NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dmt_transliterate(
    input: *const c_char,
    from: *const c_char,
    to: *const c_char,
    out: *mut *mut c_char,
) -> DmtStatus {
    guard(|| {
        check_out(out)?;
        let script = |p, what| -> Result<ScriptId, Failure> {
            text(p, what)?.parse().map_err(fail(DmtStatus::InvalidArgument))
        };
        let (from, to) = (script(from, "from")?, script(to, "to")?);
        hand_out(transliterate(text(input, "input")?, from, to).text, out)
    })
}

/// Releases a string returned by the library.
///
/// # Safety
/// `s` is null or was returned through an output pointer of this library
/// and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dmt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

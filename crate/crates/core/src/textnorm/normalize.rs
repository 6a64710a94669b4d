use unicode_normalization::UnicodeNormalization;

use crate::corpus::LanguageTag;
use crate::textnorm::ScriptId;

const ZWNJ: char = '\u{200C}';
const ZWJ: char = '\u{200D}';
const DANDA: char = '\u{0964}';
const DOUBLE_DANDA: char = '\u{0965}';

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormalizeOptions {
    /// Keep zero-width joiner / non-joiner characters.
    pub keep_joiners: bool,
}

impl Default for NormalizeOptions {
    fn default() -> Self {
        Self { keep_joiners: false }
    }
}

/// Normalizes with default options.
pub fn normalize(text: &str, lang: &LanguageTag) -> String {
    normalize_with(text, lang, NormalizeOptions::default())
}

/// Canonical composition, joiner removal, whitespace collapse and trim.
///
/// For Devanagari-script languages a standalone ASCII `|` or `||` is read
/// as a danda or double danda.
pub fn normalize_with(text: &str, lang: &LanguageTag, opts: NormalizeOptions) -> String {
    let stripped: String = if opts.keep_joiners {
        text.to_string()
    } else {
        text.chars().filter(|&c| c != ZWJ && c != ZWNJ).collect()
    };
    let composed: String = stripped.nfc().collect();
    let devanagari = lang.script() == Some(ScriptId::Devanagari);
    let mut out = String::with_capacity(composed.len());
    for word in composed.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        match word {
            "|" if devanagari => out.push(DANDA),
            "||" if devanagari => out.push(DOUBLE_DANDA),
            _ => out.push_str(word),
        }
    }
    out
}

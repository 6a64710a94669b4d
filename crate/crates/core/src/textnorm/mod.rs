//! Indic text preparation: normalization, pre-tokenization and
//! block-offset transliteration between Indic scripts and Devanagari.

mod normalize;
mod tokenize;
mod translit;

pub use normalize::{normalize, normalize_with, NormalizeOptions};
pub use tokenize::{detokenize, tokenize, TokenizedSentence};
pub use translit::{detransliterate, transliterate, ScriptId, Transliterated};

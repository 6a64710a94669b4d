//! Byte-pair-encoding subwords, vocabularies and binarization.

mod bpe;
mod vocab;

pub use bpe::{apply_bpe, learn_bpe, undo_bpe, undo_bpe_counted, word_frequencies, BpeModel, CONTINUATION, END_OF_WORD};
pub use vocab::{build_vocab, decode, encode, read_ids, write_ids, Vocabulary, BOS, EOS, PAD, SPECIAL_TOKENS, UNK};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SubwordError {
    #[error("unsupported merge file header {0:?}")]
    BadHeader(String),
    #[error("malformed line {line}: {content:?}")]
    Malformed { line: usize, content: String },
    #[error("duplicate entry on line {0}")]
    Duplicate(usize),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

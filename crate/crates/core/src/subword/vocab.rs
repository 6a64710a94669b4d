use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::SubwordError;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Token/id bijection with four reserved special ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_of: Vec<String>,
    counts: Vec<u64>,
    id_of: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_counts(Vec::new())
    }
}

impl Vocabulary {
    fn from_counts(entries: Vec<(String, u64)>) -> Self {
        let mut token_of: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0; SPECIAL_TOKENS.len()];
        for (token, count) in entries {
            token_of.push(token);
            counts.push(count);
        }
        let id_of = token_of
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            token_of,
            counts,
            id_of,
        }
    }

    pub fn len(&self) -> usize {
        self.token_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == SPECIAL_TOKENS.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.token_of.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: u32) -> Option<u64> {
        self.counts.get(id as usize).copied()
    }

    /// `token<TAB>count` per line in id order, specials omitted.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (token, count) in self.token_of.iter().zip(&self.counts).skip(SPECIAL_TOKENS.len()) {
            out.push_str(token);
            out.push('\t');
            out.push_str(&count.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, SubwordError> {
        let mut entries = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let malformed = || SubwordError::Malformed {
                line: i + 1,
                content: line.to_string(),
            };
            let (token, count) = line.split_once('\t').ok_or_else(malformed)?;
            let count: u64 = count.parse().map_err(|_| malformed())?;
            if token.is_empty() || SPECIAL_TOKENS.contains(&token) || !seen.insert(token.to_string()) {
                return Err(SubwordError::Duplicate(i + 1));
            }
            entries.push((token.to_string(), count));
        }
        Ok(Self::from_counts(entries))
    }

    pub fn save(&self, path: &Path) -> Result<(), SubwordError> {
        std::fs::write(path, self.to_text()).map_err(|source| SubwordError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, SubwordError> {
        let text = std::fs::read_to_string(path).map_err(|source| SubwordError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&text)
    }

    /// SHA-256 of the serialized vocabulary, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

/// Builds a vocabulary from subword sequences. Types are ranked by
/// descending frequency then ascending token; ids start at 4.
pub fn build_vocab<'a, I, S>(corpus: I, min_count: u64, max_size: Option<usize>) -> Vocabulary
where
    I: IntoIterator<Item = &'a [S]>,
    S: AsRef<str> + 'a,
{
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for sentence in corpus {
        for sw in sentence {
            let sw = sw.as_ref();
            if !SPECIAL_TOKENS.contains(&sw) {
                *counts.entry(sw).or_insert(0) += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    if let Some(max) = max_size {
        ranked.truncate(max);
    }
    Vocabulary::from_counts(ranked.into_iter().map(|(t, c)| (t.to_string(), c)).collect())
}

/// Maps subwords to ids (unknown ones to UNK) and appends EOS.
pub fn encode<S: AsRef<str>>(vocab: &Vocabulary, subwords: &[S]) -> Vec<u32> {
    subwords
        .iter()
        .map(|s| vocab.id(s.as_ref()).unwrap_or(UNK))
        .chain(std::iter::once(EOS))
        .collect()
}

/// Inverse of [`encode`]: drops PAD/BOS/EOS and renders UNK as `<unk>`.
pub fn decode(vocab: &Vocabulary, ids: &[u32]) -> Result<Vec<String>, SubwordError> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let token = vocab.token(id).ok_or(SubwordError::IdOutOfRange { id, size: vocab.len() })?;
        match id {
            PAD | BOS | EOS => {}
            _ => out.push(token.to_string()),
        }
    }
    Ok(out)
}

/// Binarized text: one sentence per line, ids as space-separated decimals.
pub fn write_ids(path: &Path, rows: &[Vec<u32>]) -> Result<(), SubwordError> {
    let mut text = String::new();
    for row in rows {
        let line: Vec<String> = row.iter().map(u32::to_string).collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|source| SubwordError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a file written by [`write_ids`], rejecting ids outside the vocabulary.
pub fn read_ids(path: &Path, vocab_size: usize) -> Result<Vec<Vec<u32>>, SubwordError> {
    let text = std::fs::read_to_string(path).map_err(|source| SubwordError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|tok| match tok.parse::<u32>() {
                    Ok(id) if (id as usize) < vocab_size => Ok(id),
                    Ok(id) => Err(SubwordError::IdOutOfRange { id, size: vocab_size }),
                    Err(_) => Err(SubwordError::Malformed {
                        line: i + 1,
                        content: line.to_string(),
                    }),
                })
                .collect()
        })
        .collect()
}

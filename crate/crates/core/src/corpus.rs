//! Parallel and monolingual corpora: loading, splitting and statistics.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::textnorm::ScriptId;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("unknown language tag {0:?}")]
    UnknownLanguage(String),
    #[error("source file has {src} lines but target file has {tgt}")]
    LineCountMismatch { src: usize, tgt: usize },
    #[error("{path} is not valid UTF-8 (line {line})")]
    InvalidUtf8 { path: String, line: usize },
    #[error("requested split {requested} exceeds corpus size {available}")]
    SplitTooLarge { requested: usize, available: usize },
    #[error("invalid sentence pair: {0}")]
    InvalidPair(String),
    #[error("language tags differ: {0} vs {1}")]
    TagMismatch(LanguageTag, LanguageTag),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

const REGISTERED: [&str; 6] = ["kn", "ml", "ta", "te", "tu", "sn"];

/// Short language identifier as used in the shared-task language pairs.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LanguageTag(String);

impl LanguageTag {
    /// Parses one of the registered tags. `sa` is accepted as an alias of
    /// the Sanskrit tag `sn`.
    pub fn parse(code: &str) -> Result<Self, CorpusError> {
        let code = if code == "sa" { "sn" } else { code };
        if REGISTERED.contains(&code) {
            Ok(Self(code.to_string()))
        } else {
            Err(CorpusError::UnknownLanguage(code.to_string()))
        }
    }

    /// A user extension tag: two or three lowercase ASCII letters.
    pub fn custom(code: &str) -> Result<Self, CorpusError> {
        let ok = (2..=3).contains(&code.len()) && code.bytes().all(|b| b.is_ascii_lowercase());
        if ok {
            Ok(Self(if code == "sa" { "sn".into() } else { code.into() }))
        } else {
            Err(CorpusError::UnknownLanguage(code.to_string()))
        }
    }

    pub fn code(&self) -> &str {
        &self.0
    }

    pub fn is_registered(&self) -> bool {
        REGISTERED.contains(&self.0.as_str())
    }

    /// Script the language is written in. Tulu is written in Kannada script
    /// and Sanskrit in Devanagari.
    pub fn script(&self) -> Option<ScriptId> {
        match self.0.as_str() {
            "kn" | "tu" => Some(ScriptId::Kannada),
            "ml" => Some(ScriptId::Malayalam),
            "ta" => Some(ScriptId::Tamil),
            "te" => Some(ScriptId::Telugu),
            "sn" => Some(ScriptId::Devanagari),
            _ => None,
        }
    }
}

impl fmt::Display for LanguageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub source: String,
    pub target: String,
    pub synthetic: bool,
}

impl SentencePair {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Result<Self, CorpusError> {
        Self::build(source.into(), target.into(), false)
    }

    pub fn synthetic(source: impl Into<String>, target: impl Into<String>) -> Result<Self, CorpusError> {
        Self::build(source.into(), target.into(), true)
    }

    fn build(source: String, target: String, synthetic: bool) -> Result<Self, CorpusError> {
        for side in [&source, &target] {
            if side.trim().is_empty() {
                return Err(CorpusError::InvalidPair("empty side".into()));
            }
            if side.contains('\n') || side.contains('\r') {
                return Err(CorpusError::InvalidPair("embedded newline".into()));
            }
        }
        Ok(Self {
            source,
            target,
            synthetic,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
    pub src_lang: LanguageTag,
    pub tgt_lang: LanguageTag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonolingualCorpus {
    pub sentences: Vec<String>,
    pub lang: LanguageTag,
}

/// Lines dropped while loading a parallel corpus.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadReport {
    /// Lines empty on both sides, silently dropped.
    pub blank: usize,
    /// Lines empty on exactly one side, rejected with a warning.
    pub one_sided: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CorpusStats {
    pub n_pairs: usize,
    pub n_tokens_src: usize,
    pub n_tokens_tgt: usize,
    pub mean_len_src: f64,
    pub mean_len_tgt: f64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads a UTF-8 file as LF-separated lines; a trailing newline is optional.
pub fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    match String::from_utf8(bytes) {
        Ok(text) => Ok(split_lines(&text)),
        Err(e) => {
            let valid = e.utf8_error().valid_up_to();
            let line = e.as_bytes()[..valid].iter().filter(|&&b| b == b'\n').count() + 1;
            Err(CorpusError::InvalidUtf8 {
                path: path.display().to_string(),
                line,
            })
        }
    }
}

pub fn split_lines(text: &str) -> Vec<String> {
    if text.is_empty() {
        return Vec::new();
    }
    let body = text.strip_suffix('\n').unwrap_or(text);
    body.split('\n').map(str::to_string).collect()
}

/// Writes one line per entry with a trailing newline.
pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<(), CorpusError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }
    let mut file = std::io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    for line in lines {
        file.write_all(line.as_ref().as_bytes()).map_err(io_err(path))?;
        file.write_all(b"\n").map_err(io_err(path))?;
    }
    file.flush().map_err(io_err(path))
}

pub fn load_parallel(
    src_path: &Path,
    tgt_path: &Path,
    src_lang: LanguageTag,
    tgt_lang: LanguageTag,
) -> Result<(ParallelCorpus, LoadReport), CorpusError> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    let (corpus, report) = parallel_from_lines(&src, &tgt, src_lang, tgt_lang)?;
    if report.one_sided > 0 {
        log::warn!(
            "rejected {} one-sided pairs from {}",
            report.one_sided,
            src_path.display()
        );
    }
    Ok((corpus, report))
}

pub fn parallel_from_lines<S: AsRef<str>>(
    src: &[S],
    tgt: &[S],
    src_lang: LanguageTag,
    tgt_lang: LanguageTag,
) -> Result<(ParallelCorpus, LoadReport), CorpusError> {
    if src.len() != tgt.len() {
        return Err(CorpusError::LineCountMismatch {
            src: src.len(),
            tgt: tgt.len(),
        });
    }
    let mut report = LoadReport::default();
    let mut pairs = Vec::with_capacity(src.len());
    for (s, t) in src.iter().zip(tgt) {
        let (s, t) = (s.as_ref(), t.as_ref());
        match (s.trim().is_empty(), t.trim().is_empty()) {
            (true, true) => report.blank += 1,
            (true, false) | (false, true) => report.one_sided += 1,
            (false, false) => pairs.push(SentencePair::new(s, t)?),
        }
    }
    Ok((
        ParallelCorpus {
            pairs,
            src_lang,
            tgt_lang,
        },
        report,
    ))
}

pub fn load_monolingual(path: &Path, lang: LanguageTag) -> Result<MonolingualCorpus, CorpusError> {
    let sentences = read_lines(path)?
        .into_iter()
        .filter(|l| !l.trim().is_empty())
        .collect();
    Ok(MonolingualCorpus { sentences, lang })
}

impl ParallelCorpus {
    pub fn new(src_lang: LanguageTag, tgt_lang: LanguageTag) -> Self {
        Self {
            pairs: Vec::new(),
            src_lang,
            tgt_lang,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> Vec<&str> {
        self.pairs.iter().map(|p| p.source.as_str()).collect()
    }

    pub fn targets(&self) -> Vec<&str> {
        self.pairs.iter().map(|p| p.target.as_str()).collect()
    }

    /// The same pairs in the opposite translation direction.
    pub fn swapped(&self) -> Self {
        Self {
            pairs: self
                .pairs
                .iter()
                .map(|p| SentencePair {
                    source: p.target.clone(),
                    target: p.source.clone(),
                    synthetic: p.synthetic,
                })
                .collect(),
            src_lang: self.tgt_lang.clone(),
            tgt_lang: self.src_lang.clone(),
        }
    }

    pub fn write(&self, src_path: &Path, tgt_path: &Path) -> Result<(), CorpusError> {
        write_lines(src_path, &self.sources())?;
        write_lines(tgt_path, &self.targets())
    }

    fn with_pairs(&self, pairs: Vec<SentencePair>) -> Self {
        Self {
            pairs,
            src_lang: self.src_lang.clone(),
            tgt_lang: self.tgt_lang.clone(),
        }
    }
}

/// Partitions a corpus into train/dev/test. With `seed = Some(s)` the pairs
/// are shuffled deterministically first; `None` takes contiguous prefixes.
pub fn split(
    corpus: &ParallelCorpus,
    train_n: usize,
    dev_n: usize,
    test_n: usize,
    seed: Option<u64>,
) -> Result<(ParallelCorpus, ParallelCorpus, ParallelCorpus), CorpusError> {
    let requested = train_n + dev_n + test_n;
    if requested > corpus.len() {
        return Err(CorpusError::SplitTooLarge {
            requested,
            available: corpus.len(),
        });
    }
    let mut pairs = corpus.pairs.clone();
    if let Some(seed) = seed {
        pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut rest = pairs.into_iter();
    let train: Vec<_> = rest.by_ref().take(train_n).collect();
    let dev: Vec<_> = rest.by_ref().take(dev_n).collect();
    let test: Vec<_> = rest.take(test_n).collect();
    Ok((
        corpus.with_pairs(train),
        corpus.with_pairs(dev),
        corpus.with_pairs(test),
    ))
}

pub fn stats(corpus: &ParallelCorpus) -> CorpusStats {
    let n_pairs = corpus.len();
    let count = |s: &str| s.split_whitespace().count();
    let n_tokens_src = corpus.pairs.iter().map(|p| count(&p.source)).sum();
    let n_tokens_tgt = corpus.pairs.iter().map(|p| count(&p.target)).sum();
    let mean = |n: usize| if n_pairs == 0 { 0.0 } else { n as f64 / n_pairs as f64 };
    CorpusStats {
        n_pairs,
        n_tokens_src,
        n_tokens_tgt,
        mean_len_src: mean(n_tokens_src),
        mean_len_tgt: mean(n_tokens_tgt),
    }
}

impl CorpusStats {
    /// Tab-separated key/value lines.
    pub fn to_tsv(&self) -> String {
        format!(
            "n_pairs\t{}\nn_tokens_src\t{}\nn_tokens_tgt\t{}\nmean_len_src\t{:.4}\nmean_len_tgt\t{:.4}\n",
            self.n_pairs, self.n_tokens_src, self.n_tokens_tgt, self.mean_len_src, self.mean_len_tgt
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn kn() -> LanguageTag {
        LanguageTag::parse("kn").unwrap()
    }
    fn ml() -> LanguageTag {
        LanguageTag::parse("ml").unwrap()
    }

    fn corpus_of(n: usize) -> ParallelCorpus {
        let src: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
        let tgt: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
        parallel_from_lines(&src, &tgt, kn(), ml()).unwrap().0
    }

    #[test]
    fn tags() {
        assert_eq!(LanguageTag::parse("sa").unwrap().code(), "sn");
        assert!(LanguageTag::parse("xx").is_err());
        assert_eq!(LanguageTag::custom("xx").unwrap().script(), None);
        assert!(LanguageTag::custom("X1").is_err());
        assert_eq!(LanguageTag::parse("tu").unwrap().script(), Some(ScriptId::Kannada));
    }

    #[test]
    fn load_three_line_files() {
        let dir = tempdir().unwrap();
        let (s, t) = (dir.path().join("a.kn"), dir.path().join("a.ml"));
        fs::write(&s, "one\ntwo\nthree\n").unwrap();
        fs::write(&t, "uno\ndos\ntres").unwrap();
        let (c, report) = load_parallel(&s, &t, kn(), ml()).unwrap();
        assert_eq!(c.sources(), ["one", "two", "three"]);
        assert_eq!(c.targets(), ["uno", "dos", "tres"]);
        assert_eq!(report, LoadReport::default());
    }

    #[test]
    fn mismatch_and_one_sided() {
        let dir = tempdir().unwrap();
        let (s, t) = (dir.path().join("a"), dir.path().join("b"));
        fs::write(&s, "1\n2\n3\n4\n5\n").unwrap();
        fs::write(&t, "1\n2\n3\n4\n").unwrap();
        assert!(matches!(
            load_parallel(&s, &t, kn(), ml()),
            Err(CorpusError::LineCountMismatch { src: 5, tgt: 4 })
        ));
        fs::write(&t, "1\n\n3\n4\n  \n").unwrap();
        fs::write(&s, "1\n2\n3\n4\n\n").unwrap();
        let (c, report) = load_parallel(&s, &t, kn(), ml()).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(report, LoadReport { blank: 1, one_sided: 1 });
    }

    #[test]
    fn invalid_utf8_is_reported() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad");
        fs::write(&p, b"ok\n\xff\xfe\n").unwrap();
        assert!(matches!(
            load_monolingual(&p, kn()),
            Err(CorpusError::InvalidUtf8 { line: 2, .. })
        ));
    }

    #[test]
    fn monolingual_blank_lines() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("mono");
        fs::write(&p, "").unwrap();
        assert!(load_monolingual(&p, ml()).unwrap().sentences.is_empty());
        let lines: Vec<String> = (0..10)
            .map(|i| if i == 3 || i == 7 { String::new() } else { format!("l{i}") })
            .collect();
        fs::write(&p, lines.join("\n")).unwrap();
        assert_eq!(load_monolingual(&p, ml()).unwrap().sentences.len(), 8);
    }

    #[test]
    fn write_back_is_byte_identical() {
        let dir = tempdir().unwrap();
        let (s, t) = (dir.path().join("s"), dir.path().join("t"));
        let src = "ಕನ್ನಡ ವಾಕ್ಯ\n  padded  \nx\n";
        let tgt = "മലയാളം\nb\nc\n";
        fs::write(&s, src).unwrap();
        fs::write(&t, tgt).unwrap();
        let (c, _) = load_parallel(&s, &t, kn(), ml()).unwrap();
        let (s2, t2) = (dir.path().join("s2"), dir.path().join("t2"));
        c.write(&s2, &t2).unwrap();
        assert_eq!(fs::read(&s2).unwrap(), src.as_bytes());
        assert_eq!(fs::read(&t2).unwrap(), tgt.as_bytes());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let c = corpus_of(6000);
        let (tr, dv, te) = split(&c, 4000, 1000, 1000, Some(7)).unwrap();
        assert_eq!((tr.len(), dv.len(), te.len()), (4000, 1000, 1000));
        let again = split(&c, 4000, 1000, 1000, Some(7)).unwrap();
        assert_eq!(tr, again.0);
        assert_eq!(dv, again.1);
        let mut all: Vec<_> = tr.sources().into_iter().chain(dv.sources()).chain(te.sources()).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 6000);

        let (tr, dv, te) = split(&c, 6000, 0, 0, Some(1)).unwrap();
        assert_eq!((tr.len(), dv.len(), te.len()), (6000, 0, 0));
        let (prefix, _, _) = split(&c, 3, 0, 0, None).unwrap();
        assert_eq!(prefix.sources(), ["s0", "s1", "s2"]);
        assert!(matches!(
            split(&c, 6000, 1, 0, None),
            Err(CorpusError::SplitTooLarge { .. })
        ));
    }

    #[test]
    fn stats_arithmetic() {
        assert_eq!(stats(&ParallelCorpus::new(kn(), ml())), CorpusStats::default());
        let (c, _) = parallel_from_lines(&["a b c", "d e f g"], &["x", "y z"], kn(), ml()).unwrap();
        let s = stats(&c);
        assert_eq!((s.n_pairs, s.n_tokens_src, s.n_tokens_tgt), (2, 7, 3));
        assert_eq!(s.mean_len_src, 3.5);
        assert!(s.to_tsv().starts_with("n_pairs\t2\n"));
    }
}

//! The text side of a translation system: surface text to subword ids and
//! back, in the fixed order normalize, tokenize, transliterate, BPE,
//! binarize.

use std::fmt;

use crate::corpus::{LanguageTag, ParallelCorpus};
use crate::subword::{apply_bpe, build_vocab, decode, encode, learn_bpe, undo_bpe, BpeModel, SubwordError, Vocabulary};
use crate::textnorm::{detokenize, normalize, tokenize, transliterate, ScriptId, TokenizedSentence};
use crate::training::EncodedPair;

/// One stage of the text pipeline, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Normalize,
    Tokenize,
    Transliterate,
    Bpe,
    Binarize,
    Decode,
    Unbinarize,
    UndoBpe,
    Detokenize,
    Detransliterate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Normalize => "normalize",
            Stage::Tokenize => "tokenize",
            Stage::Transliterate => "transliterate",
            Stage::Bpe => "bpe",
            Stage::Binarize => "binarize",
            Stage::Decode => "decode",
            Stage::Unbinarize => "unbinarize",
            Stage::UndoBpe => "undo_bpe",
            Stage::Detokenize => "detokenize",
            Stage::Detransliterate => "detransliterate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Language and native script of one side. With a script set, text is
/// pooled into Devanagari before BPE and mapped back after decoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Side {
    pub lang: LanguageTag,
    pub script: Option<ScriptId>,
}

impl Side {
    /// Uses the language's registered script, if any.
    pub fn for_lang(lang: LanguageTag) -> Self {
        let script = lang.script();
        Self { lang, script }
    }

    pub fn without_script(lang: LanguageTag) -> Self {
        Self { lang, script: None }
    }

    /// normalize → tokenize → transliterate, giving space-joined tokens.
    pub fn prepare(&self, text: &str, trace: &mut Vec<Stage>) -> String {
        let normalized = normalize(text, &self.lang);
        trace.push(Stage::Normalize);
        let tokens = tokenize(&normalized).joined();
        trace.push(Stage::Tokenize);
        let pooled = match self.script {
            Some(script) => transliterate(&tokens, script, ScriptId::Devanagari).text,
            None => tokens,
        };
        trace.push(Stage::Transliterate);
        pooled
    }

    /// Text mapped onto the surface a decoded output of this side takes.
    pub fn surface(&self, text: &str) -> String {
        let prepared = self.prepare(text, &mut Vec::new());
        let surface = detokenize(&TokenizedSentence::from_spaced(&prepared));
        match self.script {
            Some(script) => transliterate(&surface, ScriptId::Devanagari, script).text,
            None => surface,
        }
    }

    /// undo BPE → detokenize → detransliterate.
    pub fn finish<S: AsRef<str>>(&self, subwords: &[S], trace: &mut Vec<Stage>) -> String {
        let tokens = undo_bpe(subwords);
        trace.push(Stage::UndoBpe);
        let surface = detokenize(&tokens);
        trace.push(Stage::Detokenize);
        let native = match self.script {
            Some(script) => transliterate(&surface, ScriptId::Devanagari, script).text,
            None => surface,
        };
        trace.push(Stage::Detransliterate);
        native
    }
}

/// Settings for learning a [`TextPipeline`] from training data.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    /// Joint BPE merges learned over both sides.
    pub merges: usize,
    pub vocab_min_count: u64,
    pub vocab_max: Option<usize>,
    /// Pool registered scripts into Devanagari before BPE.
    pub transliterate: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            merges: 10000,
            vocab_min_count: 1,
            vocab_max: None,
            transliterate: true,
        }
    }
}

/// Everything needed to move between surface text and model ids.
#[derive(Debug, Clone)]
pub struct TextPipeline {
    pub source: Side,
    pub target: Side,
    pub bpe: BpeModel,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
}

impl TextPipeline {
    /// Learns joint BPE and per-side vocabularies from a training corpus.
    pub fn learn(train: &ParallelCorpus, options: &PipelineOptions) -> Self {
        let side = |lang: &LanguageTag| {
            if options.transliterate {
                Side::for_lang(lang.clone())
            } else {
                Side::without_script(lang.clone())
            }
        };
        let (source, target) = (side(&train.src_lang), side(&train.tgt_lang));
        let mut trace = Vec::new();
        let prep = |side: &Side, text: &str, trace: &mut Vec<Stage>| TokenizedSentence::from_spaced(&side.prepare(text, trace));
        let src: Vec<TokenizedSentence> = train.pairs.iter().map(|p| prep(&source, &p.source, &mut trace)).collect();
        let tgt: Vec<TokenizedSentence> = train.pairs.iter().map(|p| prep(&target, &p.target, &mut trace)).collect();
        let bpe = learn_bpe(src.iter().chain(&tgt), options.merges);
        let vocab = |sentences: &[TokenizedSentence]| {
            let segmented: Vec<Vec<String>> = sentences.iter().map(|s| apply_bpe(&bpe, s)).collect();
            build_vocab(segmented.iter().map(Vec::as_slice), options.vocab_min_count, options.vocab_max)
        };
        let (src_vocab, tgt_vocab) = (vocab(&src), vocab(&tgt));
        Self {
            source,
            target,
            bpe,
            src_vocab,
            tgt_vocab,
        }
    }

    pub fn encode_pair(&self, source: &str, target: &str) -> EncodedPair {
        EncodedPair::new(self.encode_source(source, &mut Vec::new()), self.encode_target(target))
    }

    pub fn encode_corpus(&self, corpus: &ParallelCorpus) -> Vec<EncodedPair> {
        corpus.pairs.iter().map(|p| self.encode_pair(&p.source, &p.target)).collect()
    }

    /// Source and target vocabulary fingerprints.
    pub fn fingerprints(&self) -> (String, String) {
        (self.src_vocab.fingerprint(), self.tgt_vocab.fingerprint())
    }

    /// Source text to subwords (before id lookup).
    pub fn source_subwords(&self, text: &str, trace: &mut Vec<Stage>) -> Vec<String> {
        let prepared = self.source.prepare(text, trace);
        let out = apply_bpe(&self.bpe, &TokenizedSentence::from_spaced(&prepared));
        trace.push(Stage::Bpe);
        out
    }

    /// Source text to ids, EOS-terminated.
    pub fn encode_source(&self, text: &str, trace: &mut Vec<Stage>) -> Vec<u32> {
        let subwords = self.source_subwords(text, trace);
        let ids = encode(&self.src_vocab, &subwords);
        trace.push(Stage::Binarize);
        ids
    }

    /// Target text to ids, EOS-terminated.
    pub fn encode_target(&self, text: &str) -> Vec<u32> {
        let mut trace = Vec::new();
        let prepared = self.target.prepare(text, &mut trace);
        let subwords = apply_bpe(&self.bpe, &TokenizedSentence::from_spaced(&prepared));
        encode(&self.tgt_vocab, &subwords)
    }

    /// Target ids back to surface text in the target's native script.
    pub fn decode_target(&self, ids: &[u32], trace: &mut Vec<Stage>) -> Result<String, SubwordError> {
        let subwords = decode(&self.tgt_vocab, ids)?;
        trace.push(Stage::Unbinarize);
        Ok(self.target.finish(&subwords, trace))
    }

    /// Reference text mapped onto the surface the model's output takes
    /// after [`Self::decode_target`], for scoring.
    pub fn target_surface(&self, text: &str) -> String {
        self.target.surface(text)
    }

    /// Swaps the two directions (used for reverse models).
    pub fn reversed(&self) -> Self {
        Self {
            source: self.target.clone(),
            target: self.source.clone(),
            bpe: self.bpe.clone(),
            src_vocab: self.tgt_vocab.clone(),
            tgt_vocab: self.src_vocab.clone(),
        }
    }
}

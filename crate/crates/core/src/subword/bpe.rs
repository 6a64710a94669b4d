use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::path::Path;

use super::SubwordError;
use crate::textnorm::TokenizedSentence;

/// Suffix marking a subword that is continued by the next one.
pub const CONTINUATION: &str = "@@";
/// Word-final sentinel attached to the last symbol while learning.
pub const END_OF_WORD: &str = "</w>";

const HEADER: &str = "#version: dmt-bpe 1";

/// Ordered merge rules; earlier merges have higher priority.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>) -> Result<Self, SubwordError> {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, pair) in merges.iter().enumerate() {
            if ranks.insert(pair.clone(), rank).is_some() {
                return Err(SubwordError::Duplicate(rank + 2));
            }
        }
        Ok(Self { merges, ranks })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    /// Version header followed by one `left right` pair per line.
    pub fn to_text(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for (l, r) in &self.merges {
            out.push_str(l);
            out.push(' ');
            out.push_str(r);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, SubwordError> {
        let mut lines = text.lines();
        match lines.next() {
            Some(HEADER) | None => {}
            Some(other) => return Err(SubwordError::BadHeader(other.to_string())),
        }
        let mut merges = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((l.to_string(), r.to_string()))
                }
                _ => {
                    return Err(SubwordError::Malformed {
                        line: i + 2,
                        content: line.to_string(),
                    })
                }
            }
        }
        Self::from_merges(merges)
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

    fn rank(&self, left: &str, right: &str) -> Option<usize> {
        // TODO: borrow-based lookup would avoid the two allocations per probe.
        self.ranks.get(&(left.to_string(), right.to_string())).copied()
    }

    /// Segments one token into subwords, with continuation markers on every
    /// non-final piece.
    pub fn segment(&self, token: &str) -> Vec<String> {
        let mut symbols = initial_symbols(token);
        if symbols.is_empty() {
            return Vec::new();
        }
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.rank(&w[0], &w[1]))
                .min();
            let Some(rank) = best else { break };
            let (left, right) = &self.merges[rank];
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && &symbols[i] == left && &symbols[i + 1] == right {
                    merged.push(format!("{left}{right}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
        }
        let last = symbols.len() - 1;
        symbols
            .into_iter()
            .enumerate()
            .map(|(i, mut s)| {
                if i == last {
                    s.truncate(s.len() - END_OF_WORD.len());
                    s
                } else {
                    s + CONTINUATION
                }
            })
            .collect()
    }
}

fn initial_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let n = chars.len();
    chars
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut s = c.to_string();
            if i + 1 == n {
                s.push_str(END_OF_WORD);
            }
            s
        })
        .collect()
}

/// Word frequency table in deterministic (sorted) order.
pub fn word_frequencies<'a, I>(corpus: I) -> BTreeMap<String, u64>
where
    I: IntoIterator<Item = &'a TokenizedSentence>,
{
    let mut freqs = BTreeMap::new();
    for sentence in corpus {
        for token in &sentence.tokens {
            *freqs.entry(token.clone()).or_insert(0) += 1;
        }
    }
    freqs
}

#[derive(PartialEq, Eq)]
struct Candidate {
    count: u64,
    left: String,
    right: String,
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| Reverse((&self.left, &self.right)).cmp(&Reverse((&other.left, &other.right))))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Learner {
    symbols: Vec<String>,
    ids: HashMap<String, u32>,
    words: Vec<(Vec<u32>, u64)>,
    counts: HashMap<(u32, u32), u64>,
    index: HashMap<(u32, u32), HashSet<usize>>,
    heap: BinaryHeap<Candidate>,
}

impl Learner {
    fn intern(&mut self, s: &str) -> u32 {
        if let Some(&id) = self.ids.get(s) {
            return id;
        }
        let id = self.symbols.len() as u32;
        self.symbols.push(s.to_string());
        self.ids.insert(s.to_string(), id);
        id
    }

    fn push(&mut self, pair: (u32, u32)) {
        let count = self.counts.get(&pair).copied().unwrap_or(0);
        if count > 0 {
            self.heap.push(Candidate {
                count,
                left: self.symbols[pair.0 as usize].clone(),
                right: self.symbols[pair.1 as usize].clone(),
            });
        }
    }

    fn adjust(&mut self, word: usize, delta_sign: bool, touched: &mut HashSet<(u32, u32)>) {
        let (syms, freq) = &self.words[word];
        for w in syms.windows(2) {
            let pair = (w[0], w[1]);
            let slot = self.counts.entry(pair).or_insert(0);
            if delta_sign {
                *slot += freq;
                self.index.entry(pair).or_default().insert(word);
            } else {
                *slot -= freq;
            }
            touched.insert(pair);
        }
    }
}

/// Learns up to `num_merges` merges, stopping early once no adjacent pair
/// occurs at least twice. Ties go to the lexicographically smallest pair.
pub fn learn_bpe<'a, I>(corpus: I, num_merges: usize) -> BpeModel
where
    I: IntoIterator<Item = &'a TokenizedSentence>,
{
    learn_from_frequencies(&word_frequencies(corpus), num_merges)
}

pub fn learn_from_frequencies(freqs: &BTreeMap<String, u64>, num_merges: usize) -> BpeModel {
    let mut learner = Learner {
        symbols: Vec::new(),
        ids: HashMap::new(),
        words: Vec::with_capacity(freqs.len()),
        counts: HashMap::new(),
        index: HashMap::new(),
        heap: BinaryHeap::new(),
    };
    for (word, &freq) in freqs {
        let syms: Vec<u32> = initial_symbols(word).iter().map(|s| learner.intern(s)).collect();
        learner.words.push((syms, freq));
    }
    let mut touched = HashSet::new();
    for w in 0..learner.words.len() {
        learner.adjust(w, true, &mut touched);
    }
    let mut initial: Vec<_> = touched.drain().collect();
    initial.sort_unstable();
    for pair in initial {
        learner.push(pair);
    }

    let mut merges = Vec::new();
    while merges.len() < num_merges {
        let Some(top) = learner.heap.pop() else { break };
        let pair = (learner.ids[&top.left], learner.ids[&top.right]);
        let current = learner.counts.get(&pair).copied().unwrap_or(0);
        if current != top.count {
            continue;
        }
        if current < 2 {
            break;
        }
        let merged = learner.intern(&format!("{}{}", top.left, top.right));
        merges.push((top.left, top.right));

        let mut affected: Vec<usize> = learner
            .index
            .get(&pair)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default();
        affected.sort_unstable();
        for w in affected {
            let syms = &learner.words[w].0;
            if !syms.windows(2).any(|x| (x[0], x[1]) == pair) {
                continue;
            }
            learner.adjust(w, false, &mut touched);
            let syms = &learner.words[w].0;
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && (syms[i], syms[i + 1]) == pair {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            learner.words[w].0 = out;
            learner.adjust(w, true, &mut touched);
        }
        let mut changed: Vec<_> = touched.drain().collect();
        changed.sort_unstable();
        for p in changed {
            learner.push(p);
        }
    }
    BpeModel::from_merges(merges).expect("learned merges are unique")
}

/// Segments every token of a sentence.
pub fn apply_bpe(model: &BpeModel, sentence: &TokenizedSentence) -> Vec<String> {
    sentence.tokens.iter().flat_map(|t| model.segment(t)).collect()
}

/// Joins continuation runs back into tokens. Returns the number of dangling
/// continuation markers at the end of the input alongside the tokens.
pub fn undo_bpe_counted<S: AsRef<str>>(subwords: &[S]) -> (TokenizedSentence, usize) {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut pending = false;
    for sw in subwords {
        let sw = sw.as_ref();
        match sw.strip_suffix(CONTINUATION) {
            Some(stem) => {
                current.push_str(stem);
                pending = true;
            }
            None => {
                current.push_str(sw);
                tokens.push(std::mem::take(&mut current));
                pending = false;
            }
        }
    }
    let dangling = usize::from(pending);
    if pending && !current.is_empty() {
        tokens.push(current);
    }
    (TokenizedSentence { tokens }, dangling)
}

pub fn undo_bpe<S: AsRef<str>>(subwords: &[S]) -> TokenizedSentence {
    let (sentence, dangling) = undo_bpe_counted(subwords);
    if dangling > 0 {
        log::warn!("trailing continuation marker joined as-is");
    }
    sentence
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn freqs(entries: &[(&str, u64)]) -> BTreeMap<String, u64> {
        entries.iter().map(|&(w, f)| (w.to_string(), f)).collect()
    }

    fn sent(s: &str) -> TokenizedSentence {
        TokenizedSentence::from_spaced(s)
    }

    /// Brute force: count every adjacent pair over the word table.
    fn brute_force_best(table: &[(Vec<String>, u64)]) -> Option<((String, String), u64)> {
        let mut counts: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (syms, f) in table {
            for w in syms.windows(2) {
                *counts.entry((w[0].clone(), w[1].clone())).or_insert(0) += f;
            }
        }
        let max = counts.values().copied().max()?;
        counts.into_iter().find(|(_, c)| *c == max).map(|(p, c)| (p, c))
    }

    #[test]
    fn single_word_merge() {
        let m = learn_from_frequencies(&freqs(&[("ab", 2)]), 1);
        assert_eq!(m.merges(), [("a".to_string(), "b</w>".to_string())]);
        assert_eq!(m.segment("ab"), ["ab"]);
    }

    #[test]
    fn count_two_beats_count_one() {
        let f = freqs(&[("abc", 1), ("abd", 1)]);
        let table: Vec<(Vec<String>, u64)> = f.iter().map(|(w, &c)| (initial_symbols(w), c)).collect();
        let (pair, count) = brute_force_best(&table).unwrap();
        assert_eq!((pair.0.as_str(), pair.1.as_str(), count), ("a", "b", 2));
        let m = learn_from_frequencies(&f, 1);
        assert_eq!(m.merges(), [pair]);
    }

    #[test]
    fn stops_when_no_pair_repeats() {
        let m = learn_from_frequencies(&freqs(&[("xyz", 1)]), 10);
        assert!(m.is_empty());
        assert!(learn_bpe(std::iter::empty(), 10).is_empty());
        assert!(learn_from_frequencies(&freqs(&[("ab", 5)]), 0).is_empty());
    }

    #[test]
    fn character_fallback() {
        let m = BpeModel::default();
        assert_eq!(m.segment("abc"), ["a@@", "b@@", "c"]);
        let m = BpeModel::from_merges(vec![("q".into(), "r".into())]).unwrap();
        assert_eq!(m.segment("xy"), ["x@@", "y"]);
    }

    #[test]
    fn undo_examples() {
        assert_eq!(undo_bpe(&["a@@", "b@@", "c"]).tokens, ["abc"]);
        assert_eq!(undo_bpe(&["hello"]).tokens, ["hello"]);
        let (s, dangling) = undo_bpe_counted(&["x", "a@@", "b@@"]);
        assert_eq!((s.tokens, dangling), (vec!["x".to_string(), "ab".to_string()], 1));
    }

    #[test]
    fn learned_merges_match_brute_force_sequence() {
        // Replays learning by brute force: pick the best pair, merge, repeat.
        let f = freqs(&[("low", 5), ("lower", 2), ("newest", 6), ("widest", 3)]);
        let mut table: Vec<(Vec<String>, u64)> = f.iter().map(|(w, &c)| (initial_symbols(w), c)).collect();
        let mut expected = Vec::new();
        for _ in 0..10 {
            let Some((pair, count)) = brute_force_best(&table) else { break };
            if count < 2 {
                break;
            }
            for (syms, _) in table.iter_mut() {
                let mut out = Vec::new();
                let mut i = 0;
                while i < syms.len() {
                    if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
                        out.push(format!("{}{}", pair.0, pair.1));
                        i += 2;
                    } else {
                        out.push(syms[i].clone());
                        i += 1;
                    }
                }
                *syms = out;
            }
            expected.push(pair);
        }
        assert_eq!(learn_from_frequencies(&f, 10).merges(), expected.as_slice());
    }

    #[test]
    fn text_format_round_trip() {
        let m = learn_bpe(&[sent("a b ab ab abc abc")], 5);
        let text = m.to_text();
        assert!(text.starts_with("#version: dmt-bpe 1\n"));
        assert_eq!(BpeModel::from_text(&text).unwrap(), m);
        assert!(BpeModel::from_text("#version: other\n").is_err());
        assert!(BpeModel::from_text(&format!("{HEADER}\na b c\n")).is_err());
        assert!(BpeModel::from_text(&format!("{HEADER}\na b\na b\n")).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_and_monotone(
            words in proptest::collection::vec("[a-e]{1,6}", 1..30),
            merges in 0usize..40,
        ) {
            let corpus = vec![TokenizedSentence::new(words.clone())];
            let small = learn_bpe(&corpus, merges);
            let big = learn_bpe(&corpus, merges + 5);
            prop_assert_eq!(&big.merges()[..small.len()], small.merges());
            let pieces = apply_bpe(&small, &corpus[0]);
            prop_assert_eq!(&undo_bpe(&pieces), &corpus[0]);
            for w in &words {
                prop_assert!(big.segment(w).len() <= small.segment(w).len());
                let joined: String = small.segment(w).iter().map(|p| p.trim_end_matches(CONTINUATION)).collect();
                prop_assert_eq!(&joined, w);
            }
        }
    }
}

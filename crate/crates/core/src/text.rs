//! Word tokenization, vocabularies, and model-input sequence layout.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{NeurankError, Result};
use crate::io::{read_lines, write_atomic};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Sequences shorter than this cannot hold `[CLS] q [SEP] d [SEP]`.
pub const MIN_MAX_LEN: usize = 4;
pub const DEFAULT_MAX_LEN: usize = 128;

/// Lowercases, splits on Unicode whitespace, strips leading/trailing ASCII
/// punctuation and drops tokens that end up empty.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn is_marker(id: usize) -> bool {
    id == CLS || id == SEP
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::reserved_only()
    }
}

impl Vocabulary {
    pub fn reserved_only() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    /// Keeps tokens seen at least `min_count` times, most frequent first with
    /// lexicographic tie-break, until the vocabulary (reserved entries
    /// included) holds `max_size` entries.
    pub fn build<I, S>(texts: I, min_count: usize, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut seen_any = false;
        for text in texts {
            seen_any = true;
            for tok in tokenize(text.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !seen_any {
            return Err(NeurankError::Ingestion("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !RESERVED.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut vocab = Self::reserved_only();
        for (tok, _) in ranked {
            if vocab.len() >= max_size {
                break;
            }
            vocab.push(tok);
        }
        Ok(vocab)
    }

    fn push(&mut self, tok: String) {
        self.index.insert(tok.clone(), self.tokens.len());
        self.tokens.push(tok);
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(NeurankError::Ingestion(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let mut vocab = Self::reserved_only();
        for tok in tokens.into_iter().skip(RESERVED.len()) {
            if vocab.index.contains_key(&tok) {
                return Err(NeurankError::Ingestion(format!("duplicate vocabulary entry `{tok}`")));
            }
            vocab.push(tok);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn ids<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, |w| {
            for t in &self.tokens {
                writeln!(w, "{t}")?;
            }
            Ok(())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let lines = read_lines(path)?;
        Self::from_tokens(lines)
    }

    pub fn read_from(reader: impl BufRead) -> Result<Self> {
        let lines = reader
            .lines()
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| NeurankError::Ingestion(e.to_string()))?;
        Self::from_tokens(lines)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Query,
    Document,
}

/// Where a model-input position came from in the source word lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Origin {
    pub side: Side,
    pub word: usize,
}

/// Which boundary markers a pair sequence carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MarkerPolicy {
    #[default]
    Full,
    /// `[SEP]`s removed, `[CLS]` kept for the scoring head.
    KeepCls,
    /// Both `[CLS]` and `[SEP]` removed.
    None,
}

impl fmt::Display for MarkerPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MarkerPolicy::Full => "full",
            MarkerPolicy::KeepCls => "keep-cls",
            MarkerPolicy::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// 0 = query side, 1 = document side
    pub segments: Vec<u8>,
    /// 1 = real token, 0 = padding
    pub mask: Vec<u8>,
    pub origins: Vec<Option<Origin>>,
}

impl TokenSequence {
    fn with_capacity(n: usize) -> Self {
        TokenSequence {
            ids: Vec::with_capacity(n),
            segments: Vec::with_capacity(n),
            mask: Vec::with_capacity(n),
            origins: Vec::with_capacity(n),
        }
    }

    fn push(&mut self, id: usize, segment: u8, origin: Option<Origin>) {
        self.ids.push(id);
        self.segments.push(segment);
        self.mask.push(1);
        self.origins.push(origin);
    }

    fn pad_to(&mut self, max_len: usize) {
        while self.ids.len() < max_len {
            self.ids.push(PAD);
            self.segments.push(0);
            self.mask.push(0);
            self.origins.push(None);
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-padding positions.
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn key_mask(&self) -> Vec<bool> {
        self.mask.iter().map(|&m| m == 1).collect()
    }

    /// Real, non-marker positions of one side, in order.
    pub fn content_positions(&self, side: Side) -> Vec<usize> {
        (0..self.len())
            .filter(|&p| {
                self.mask[p] == 1
                    && !is_marker(self.ids[p])
                    && self.origins[p].map(|o| o.side) == Some(side)
            })
            .collect()
    }

    /// Truncates padding so the sequence ends at its last real token.
    pub fn trimmed(&self) -> TokenSequence {
        let n = self.real_len();
        TokenSequence {
            ids: self.ids[..n].to_vec(),
            segments: self.segments[..n].to_vec(),
            mask: self.mask[..n].to_vec(),
            origins: self.origins[..n].to_vec(),
        }
    }
}

fn check_max_len(max_len: usize) -> Result<()> {
    if max_len < MIN_MAX_LEN {
        return Err(NeurankError::Config(format!(
            "max_len {max_len} is below the minimum of {MIN_MAX_LEN}"
        )));
    }
    Ok(())
}

/// `[CLS] q… [SEP] d… [SEP]`, document truncated before query, padded to `max_len`.
pub fn encode_pair<S: AsRef<str>>(q: &[S], d: &[S], vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    encode_pair_with(q, d, vocab, max_len, MarkerPolicy::Full)
}

pub fn encode_pair_with<S: AsRef<str>>(
    q: &[S],
    d: &[S],
    vocab: &Vocabulary,
    max_len: usize,
    markers: MarkerPolicy,
) -> Result<TokenSequence> {
    check_max_len(max_len)?;
    let budget = max_len - 3;
    let q_len = q.len().min(budget);
    let d_len = d.len().min(budget - q_len);

    let mut seq = TokenSequence::with_capacity(max_len);
    if markers != MarkerPolicy::None {
        seq.push(CLS, 0, None);
    }
    for (i, w) in q[..q_len].iter().enumerate() {
        seq.push(vocab.id(w.as_ref()), 0, Some(Origin { side: Side::Query, word: i }));
    }
    if markers == MarkerPolicy::Full {
        seq.push(SEP, 0, None);
    }
    for (j, w) in d[..d_len].iter().enumerate() {
        seq.push(vocab.id(w.as_ref()), 1, Some(Origin { side: Side::Document, word: j }));
    }
    if markers == MarkerPolicy::Full {
        seq.push(SEP, 1, None);
    }
    seq.pad_to(max_len);
    Ok(seq)
}

/// `[CLS] tokens… [SEP]` with all-zero segments.
pub fn encode_single<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    check_max_len(max_len)?;
    let n = tokens.len().min(max_len - 2);
    let mut seq = TokenSequence::with_capacity(max_len);
    seq.push(CLS, 0, None);
    for (i, w) in tokens[..n].iter().enumerate() {
        seq.push(vocab.id(w.as_ref()), 0, Some(Origin { side: Side::Query, word: i }));
    }
    seq.push(SEP, 0, None);
    seq.pad_to(max_len);
    Ok(seq)
}

/// The bundled English stopword list.
pub fn default_stopwords() -> HashSet<String> {
    include_str!("../data/stopwords.txt")
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn load_stopwords(path: &Path) -> Result<HashSet<String>> {
    Ok(read_lines(path)?
        .into_iter()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab_of(words: &[&str]) -> Vocabulary {
        let mut v = Vocabulary::reserved_only();
        for w in words {
            v.push(w.to_string());
        }
        v
    }

    fn w(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn tokenize_rules() {
        assert_eq!(tokenize("What is a PMI id?"), w(&["what", "is", "a", "pmi", "id"]));
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("Coffee—drink"), w(&["coffee—drink"]));
        assert_eq!(tokenize("  ...  (hello)  "), w(&["hello"]));
    }

    #[test]
    fn vocab_frequency_threshold_and_cap() {
        let v = Vocabulary::build(["a a b"], 2, 100).unwrap();
        assert_eq!(v.len(), RESERVED.len() + 1);
        assert_eq!(v.get("a"), Some(5));
        assert_eq!(v.get("b"), None);

        let v = Vocabulary::build(["a b"], 1, RESERVED.len() + 1).unwrap();
        assert_eq!(v.tokens()[5], "a");
        assert_eq!(v.len(), 6);

        assert!(matches!(
            Vocabulary::build(Vec::<String>::new(), 1, 10),
            Err(NeurankError::Ingestion(_))
        ));
    }

    #[test]
    fn vocab_reserved_ids_are_fixed() {
        let v = Vocabulary::build(["[cls] x y"], 1, 100).unwrap();
        for (i, r) in RESERVED.iter().enumerate() {
            assert_eq!(v.id(r), i);
        }
    }

    #[test]
    fn vocab_is_stable_across_runs() {
        let corpus: Vec<String> = (0..1000)
            .map(|i| format!("t{} t{} t{} common", i % 37, i % 11, (i * 7) % 53))
            .collect();
        let a = Vocabulary::build(&corpus, 1, 500).unwrap();
        let b = Vocabulary::build(&corpus, 1, 500).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens()[5], "common");
    }

    #[test]
    fn encode_pair_layout() {
        let v = vocab_of(&["a", "b", "c"]);
        let s = encode_pair(&w(&["a"]), &w(&["b", "c"]), &v, 8).unwrap();
        let (a, b, c) = (v.id("a"), v.id("b"), v.id("c"));
        assert_eq!(s.ids, vec![CLS, a, SEP, b, c, SEP, PAD, PAD]);
        assert_eq!(s.segments, vec![0, 0, 0, 1, 1, 1, 0, 0]);
        assert_eq!(s.mask, vec![1, 1, 1, 1, 1, 1, 0, 0]);
    }

    #[test]
    fn encode_pair_truncates_document_first() {
        let v = vocab_of(&["a", "b", "c", "d", "e"]);
        let s = encode_pair(&w(&["a"]), &w(&["b", "c", "d", "e"]), &v, 6).unwrap();
        assert_eq!(s.ids, vec![CLS, v.id("a"), SEP, v.id("b"), v.id("c"), SEP]);

        let s = encode_pair(&w(&["a", "b", "c"]), &w(&["d"]), &v, 5).unwrap();
        assert_eq!(s.ids, vec![CLS, v.id("a"), v.id("b"), SEP, SEP]);
    }

    #[test]
    fn encode_pair_unknown_token_maps_to_unk() {
        let v = vocab_of(&["a"]);
        let s = encode_pair(&w(&["a"]), &w(&["zzz"]), &v, 6).unwrap();
        assert_eq!(s.ids[3], UNK);
    }

    #[test]
    fn encode_rejects_tiny_max_len() {
        let v = vocab_of(&[]);
        assert!(matches!(encode_pair(&w(&["a"]), &w(&["b"]), &v, 3), Err(NeurankError::Config(_))));
        assert!(matches!(encode_single(&w(&["a"]), &v, 3), Err(NeurankError::Config(_))));
    }

    #[test]
    fn encode_single_layout() {
        let v = vocab_of(&["a", "b"]);
        let s = encode_single(&w(&["a", "b"]), &v, 5).unwrap();
        assert_eq!(s.ids, vec![CLS, v.id("a"), v.id("b"), SEP, PAD]);
        assert!(s.segments.iter().all(|&x| x == 0));

        let s = encode_single::<String>(&[], &v, 4).unwrap();
        assert_eq!(s.ids, vec![CLS, SEP, PAD, PAD]);

        let long = w(&["a", "b", "a", "b", "a", "b"]);
        let s = encode_single(&long, &v, 5).unwrap();
        assert_eq!(s.real_len(), 5);
        assert_eq!(s.ids[4], SEP);
    }

    #[test]
    fn marker_policies_drop_exactly_the_markers() {
        let v = vocab_of(&["a", "b", "c"]);
        let (q, d) = (w(&["a"]), w(&["b", "c"]));
        let full = encode_pair_with(&q, &d, &v, 10, MarkerPolicy::Full).unwrap();
        let keep = encode_pair_with(&q, &d, &v, 10, MarkerPolicy::KeepCls).unwrap();
        let none = encode_pair_with(&q, &d, &v, 10, MarkerPolicy::None).unwrap();
        assert_eq!(full.real_len() - keep.real_len(), 2);
        assert_eq!(full.real_len() - none.real_len(), 3);
        assert_eq!(keep.ids[0], CLS);
        assert_eq!(none.content_positions(Side::Document), vec![1, 2]);
    }

    #[test]
    fn bundled_stopwords() {
        let s = default_stopwords();
        assert_eq!(s.len(), 179);
        assert!(s.contains("the") && s.contains("is"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn words() -> impl Strategy<Value = Vec<String>> {
            proptest::collection::vec("[a-e]{1,2}", 0..12)
        }

        proptest! {
            #[test]
            fn pair_sequences_are_well_formed(q in words(), d in words(), max_len in 4usize..20) {
                let v = Vocabulary::build([q.join(" "), d.join(" "), "a".to_string()], 1, 100).unwrap();
                let s = encode_pair(&q, &d, &v, max_len).unwrap();
                prop_assert_eq!(s.len(), max_len);
                prop_assert_eq!(s.segments.len(), max_len);
                prop_assert_eq!(s.ids[0], CLS);
                let n = s.real_len();
                prop_assert!(s.mask[..n].iter().all(|&m| m == 1));
                prop_assert!(s.mask[n..].iter().all(|&m| m == 0));
                prop_assert!(s.ids[n..].iter().all(|&i| i == PAD));
                prop_assert!(s.segments[n..].iter().all(|&g| g == 0));
                prop_assert_eq!(s.ids[..n].iter().filter(|&&i| i == SEP).count(), 2);
                prop_assert_eq!(s.ids[..n].iter().filter(|&&i| i == CLS).count(), 1);
                prop_assert_eq!(&s, &encode_pair(&q, &d, &v, max_len).unwrap());
            }

            #[test]
            fn single_sequences_are_well_formed(t in words(), max_len in 4usize..20) {
                let v = Vocabulary::build([t.join(" "), "a".to_string()], 1, 100).unwrap();
                let s = encode_single(&t, &v, max_len).unwrap();
                let n = s.real_len();
                prop_assert_eq!(s.ids[0], CLS);
                prop_assert_eq!(s.ids[..n].iter().filter(|&&i| i == SEP).count(), 1);
                prop_assert_eq!(n, t.len().min(max_len - 2) + 2);
            }
        }
    }
}

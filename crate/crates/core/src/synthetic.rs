//! Synthetic key-term retrieval data.
//!
//! Each query is a few question fillers plus one key term; a passage is
//! relevant iff it contains the key term. Fillers are English stopwords, the
//! remaining vocabulary is opaque content words (`t000`, `t001`, …), so
//! relevance can only be read off a query–passage comparison.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Candidate, CandidateSet, QrelSet, TripleRecord};
use crate::error::{NeurankError, Result};
use crate::text::Vocabulary;
use crate::training::{Example, Triple};

pub const FILLERS: [&str; 20] = [
    "what", "is", "the", "a", "of", "how", "do", "does", "which", "where", "when", "why", "who", "in", "to", "for",
    "on", "are", "can", "was",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    /// Total distinct words, fillers included.
    pub vocab_size: usize,
    pub query_fillers: usize,
    pub doc_len: usize,
    pub doc_fillers: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Candidates per held-out query, one of them relevant.
    pub candidates: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            vocab_size: 200,
            query_fillers: 2,
            doc_len: 8,
            doc_fillers: 2,
            n_train: 500,
            n_val: 40,
            n_test: 50,
            candidates: 10,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDoc {
    pub docid: String,
    pub words: Vec<String>,
    pub relevant: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticQuery {
    pub qid: String,
    pub words: Vec<String>,
    pub key: String,
    pub docs: Vec<SyntheticDoc>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub words: Vec<String>,
    pub train: Vec<Triple>,
    pub val: Vec<Example>,
    pub test: Vec<SyntheticQuery>,
}

struct Gen<'a> {
    cfg: &'a SyntheticConfig,
    content: Vec<String>,
    rng: ChaCha8Rng,
}

impl Gen<'_> {
    fn filler(&mut self) -> String {
        FILLERS[self.rng.gen_range(0..FILLERS.len())].to_string()
    }

    fn query(&mut self) -> (Vec<String>, String) {
        let key = self.content[self.rng.gen_range(0..self.content.len())].clone();
        let mut q: Vec<String> = (0..self.cfg.query_fillers).map(|_| self.filler()).collect();
        q.push(key.clone());
        (q, key)
    }

    /// A passage without `key`, or with exactly one occurrence of it.
    fn doc(&mut self, key: &str, relevant: bool) -> Vec<String> {
        let n_content = self.cfg.doc_len - self.cfg.doc_fillers;
        let mut words: Vec<String> = Vec::with_capacity(self.cfg.doc_len);
        while words.len() < n_content {
            let w = &self.content[self.rng.gen_range(0..self.content.len())];
            if w != key {
                words.push(w.clone());
            }
        }
        if relevant {
            let slot = self.rng.gen_range(0..n_content);
            words[slot] = key.to_string();
        }
        for _ in 0..self.cfg.doc_fillers {
            let f = self.filler();
            let at = self.rng.gen_range(0..=words.len());
            words.insert(at, f);
        }
        words
    }
}

impl SyntheticCorpus {
    pub fn generate(cfg: &SyntheticConfig) -> Result<Self> {
        if cfg.vocab_size < FILLERS.len() + 2 || cfg.doc_fillers >= cfg.doc_len || cfg.candidates < 2 {
            return Err(NeurankError::Config(format!(
                "synthetic corpus needs vocab_size > {}, doc_len > doc_fillers and at least 2 candidates",
                FILLERS.len() + 1
            )));
        }
        let content: Vec<String> = (0..cfg.vocab_size - FILLERS.len()).map(|i| format!("t{i:03}")).collect();
        let mut words: Vec<String> = FILLERS.iter().map(|s| s.to_string()).collect();
        words.extend(content.iter().cloned());
        let mut g = Gen {
            cfg,
            content,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        };

        let train = (0..cfg.n_train)
            .map(|_| {
                let (query, key) = g.query();
                Triple {
                    pos: g.doc(&key, true),
                    neg: g.doc(&key, false),
                    query,
                }
            })
            .collect();
        let mut val = Vec::with_capacity(cfg.n_val);
        for i in 0..cfg.n_val {
            let (query, key) = g.query();
            let relevant = i % 2 == 0;
            val.push(Example {
                doc: g.doc(&key, relevant),
                query,
                label: if relevant { 1.0 } else { 0.0 },
            });
        }
        let mut test = Vec::with_capacity(cfg.n_test);
        for i in 0..cfg.n_test {
            let (query, key) = g.query();
            let mut docs: Vec<SyntheticDoc> = (0..cfg.candidates)
                .map(|j| SyntheticDoc {
                    docid: String::new(),
                    words: g.doc(&key, j == 0),
                    relevant: j == 0,
                })
                .collect();
            docs.shuffle(&mut g.rng);
            for (j, d) in docs.iter_mut().enumerate() {
                d.docid = format!("q{i}d{j}");
            }
            test.push(SyntheticQuery {
                qid: format!("q{i}"),
                words: query,
                key,
                docs,
            });
        }
        Ok(SyntheticCorpus { words, train, val, test })
    }

    /// Unlabelled passage stream for pretraining: neighbours share one content
    /// word, so next-sequence prediction rewards spotting a repeated term.
    pub fn pretraining_stream(cfg: &SyntheticConfig, n: usize, seed: u64) -> Vec<Vec<String>> {
        let n_content = cfg.vocab_size.saturating_sub(FILLERS.len()).max(1);
        let content: Vec<String> = (0..n_content).map(|i| format!("t{i:03}")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut link = content[rng.gen_range(0..n_content)].clone();
        let n_words = cfg.doc_len.saturating_sub(cfg.doc_fillers).max(2);
        (0..n)
            .map(|_| {
                let next = content[rng.gen_range(0..n_content)].clone();
                let mut words = vec![link.clone(), next.clone()];
                while words.len() < n_words {
                    words.push(content[rng.gen_range(0..n_content)].clone());
                }
                words.shuffle(&mut rng);
                for _ in 0..cfg.doc_fillers {
                    let at = rng.gen_range(0..=words.len());
                    words.insert(at, FILLERS[rng.gen_range(0..FILLERS.len())].to_string());
                }
                link = next;
                words
            })
            .collect()
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::build([self.words.join(" ")], 1, self.words.len() + crate::text::RESERVED.len())
    }

    pub fn test_qrels(&self) -> QrelSet {
        let mut q = QrelSet::new(1);
        for sq in &self.test {
            for d in &sq.docs {
                q.insert(&sq.qid, &d.docid, u32::from(d.relevant)).expect("grade within gmax");
            }
        }
        q
    }

    /// Held-out queries as candidate lists in generation order.
    pub fn test_candidates(&self) -> Vec<CandidateSet> {
        self.test
            .iter()
            .map(|sq| CandidateSet {
                qid: sq.qid.clone(),
                query: sq.words.join(" "),
                docs: sq
                    .docs
                    .iter()
                    .enumerate()
                    .map(|(i, d)| Candidate {
                        docid: d.docid.clone(),
                        text: d.words.join(" "),
                        base_score: -(i as f64),
                    })
                    .collect(),
            })
            .collect()
    }

    pub fn train_records(&self) -> Vec<TripleRecord> {
        self.train
            .iter()
            .map(|t| TripleRecord {
                query: t.query.join(" "),
                positive: t.pos.join(" "),
                negative: t.neg.join(" "),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::default_stopwords;

    #[test]
    fn labels_follow_key_term_presence() {
        let c = SyntheticCorpus::generate(&SyntheticConfig::default()).unwrap();
        assert_eq!(c.words.len(), 200);
        assert_eq!(c.train.len(), 500);
        for t in &c.train {
            let key = t.query.last().unwrap();
            assert_eq!(t.pos.iter().filter(|w| *w == key).count(), 1);
            assert!(!t.neg.contains(key));
            assert_eq!(t.pos.len(), 8);
        }
        for e in &c.val {
            let key = e.query.last().unwrap();
            assert_eq!(e.doc.contains(key), e.label == 1.0);
        }
        for q in &c.test {
            assert_eq!(q.docs.iter().filter(|d| d.relevant).count(), 1);
            for d in &q.docs {
                assert_eq!(d.words.contains(&q.key), d.relevant);
            }
        }
    }

    #[test]
    fn fillers_are_stopwords_and_generation_is_seeded() {
        let stop = default_stopwords();
        assert!(FILLERS.iter().all(|f| stop.contains(*f)));
        let cfg = SyntheticConfig::default();
        assert_eq!(SyntheticCorpus::generate(&cfg).unwrap(), SyntheticCorpus::generate(&cfg).unwrap());
        let v = SyntheticCorpus::generate(&cfg).unwrap().vocabulary().unwrap();
        assert_eq!(v.len(), 205);
    }

    #[test]
    fn stream_neighbours_share_a_content_word() {
        let cfg = SyntheticConfig::default();
        let s = SyntheticCorpus::pretraining_stream(&cfg, 50, 4);
        assert_eq!(s.len(), 50);
        let content = |p: &Vec<String>| -> std::collections::HashSet<String> {
            p.iter().filter(|w| !FILLERS.contains(&w.as_str())).cloned().collect()
        };
        for w in s.windows(2) {
            assert_eq!(w[0].len(), cfg.doc_len);
            assert!(!content(&w[0]).is_disjoint(&content(&w[1])));
        }
        assert_eq!(s, SyntheticCorpus::pretraining_stream(&cfg, 50, 4));
    }
}

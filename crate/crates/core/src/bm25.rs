//! In-memory BM25 index used to produce first-stage candidates.

use std::collections::HashMap;

use crate::data::{Candidate, CandidateSet};
use crate::text::tokenize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 0.9, b: 0.4 }
    }
}

#[derive(Debug, Clone)]
struct IndexedDoc {
    id: String,
    text: String,
    len: usize,
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    docs: Vec<IndexedDoc>,
    postings: HashMap<String, Vec<(usize, usize)>>,
    avgdl: f64,
}

impl Bm25Index {
    pub fn build(corpus: &[(String, String)]) -> Self {
        let mut postings: HashMap<String, Vec<(usize, usize)>> = HashMap::new();
        let mut docs = Vec::with_capacity(corpus.len());
        let mut total = 0usize;
        for (i, (id, text)) in corpus.iter().enumerate() {
            let toks = tokenize(text);
            let mut tf: HashMap<&str, usize> = HashMap::new();
            for t in &toks {
                *tf.entry(t.as_str()).or_default() += 1;
            }
            for (t, c) in tf {
                postings.entry(t.to_string()).or_default().push((i, c));
            }
            total += toks.len();
            docs.push(IndexedDoc {
                id: id.clone(),
                text: text.clone(),
                len: toks.len(),
            });
        }
        let avgdl = if docs.is_empty() { 0.0 } else { total as f64 / docs.len() as f64 };
        Bm25Index { docs, postings, avgdl }
    }

    pub fn num_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.doc_freq(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Top-`k` (docid, score) for documents matching at least one query
    /// token, by descending score then ascending doc id. Every query token
    /// occurrence contributes its term's weight.
    pub fn search(&self, query: &[String], k: usize, params: Bm25Params) -> Vec<(String, f64)> {
        let mut scores = vec![0.0; self.docs.len()];
        let mut matched = vec![false; self.docs.len()];
        for term in query {
            let Some(list) = self.postings.get(term) else { continue };
            let idf = self.idf(term);
            for &(doc, tf) in list {
                let tf = tf as f64;
                let dl = self.docs[doc].len as f64;
                let norm = params.k1 * (1.0 - params.b + params.b * dl / self.avgdl);
                scores[doc] += idf * tf * (params.k1 + 1.0) / (tf + norm);
                matched[doc] = true;
            }
        }
        let mut hits: Vec<(usize, f64)> = (0..self.docs.len())
            .filter(|&d| matched[d])
            .map(|d| (d, scores[d]))
            .collect();
        hits.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.docs[a.0].id.cmp(&self.docs[b.0].id))
        });
        hits.truncate(k);
        hits.into_iter().map(|(d, s)| (self.docs[d].id.clone(), s)).collect()
    }

    pub fn rank(&self, qid: &str, query_text: &str, k: usize, params: Bm25Params) -> CandidateSet {
        let by_id: HashMap<&str, &IndexedDoc> = self.docs.iter().map(|d| (d.id.as_str(), d)).collect();
        let docs = self
            .search(&tokenize(query_text), k, params)
            .into_iter()
            .map(|(id, score)| Candidate {
                text: by_id[id.as_str()].text.clone(),
                docid: id,
                base_score: score,
            })
            .collect();
        CandidateSet {
            qid: qid.to_string(),
            query: query_text.to_string(),
            docs,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn corpus(rows: &[(&str, &str)]) -> Vec<(String, String)> {
        rows.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    fn toy() -> Vec<(String, String)> {
        corpus(&[
            ("d1", "coffee drink with milk"),
            ("d2", "a macchiato is an espresso coffee drink with a mark of milk"),
            ("d3", "sinbad starred in a sitcom"),
            ("d4", "coffee coffee coffee beans"),
            ("d5", "tea and milk"),
        ])
    }

    /// Direct evaluation of the BM25 formula over every document.
    fn oracle(docs: &[(String, String)], query: &[&str], k1: f64, b: f64) -> Vec<(String, f64)> {
        let toks: Vec<Vec<String>> = docs.iter().map(|(_, t)| tokenize(t)).collect();
        let n = docs.len() as f64;
        let avgdl = toks.iter().map(Vec::len).sum::<usize>() as f64 / n;
        let mut out = Vec::new();
        for (i, (id, _)) in docs.iter().enumerate() {
            let dl = toks[i].len() as f64;
            let mut score = 0.0;
            let mut hit = false;
            for q in query {
                let tf = toks[i].iter().filter(|t| t == q).count() as f64;
                let df = toks.iter().filter(|d| d.iter().any(|t| t == q)).count() as f64;
                if tf > 0.0 {
                    hit = true;
                    let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                    score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl));
                }
            }
            if hit {
                out.push((id.clone(), score));
            }
        }
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        out
    }

    #[test]
    fn single_doc_is_ranked_first() {
        let idx = Bm25Index::build(&corpus(&[("only", "the coffee")]));
        let hits = idx.search(&["coffee".to_string()], 10, Bm25Params::default());
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].0, "only");
    }

    #[test]
    fn absent_term_gives_empty_result() {
        let idx = Bm25Index::build(&toy());
        assert!(idx.search(&["zebra".to_string()], 10, Bm25Params::default()).is_empty());
        assert!(idx.rank("q", "", 10, Bm25Params::default()).docs.is_empty());
    }

    #[test]
    fn toy_corpus_matches_oracle() {
        let docs = toy();
        let idx = Bm25Index::build(&docs);
        for query in [&["coffee", "milk"][..], &["macchiato", "coffee", "drink"], &["milk"], &["sitcom", "tea"]] {
            let q: Vec<String> = query.iter().map(|s| s.to_string()).collect();
            let got = idx.search(&q, 10, Bm25Params::default());
            let want = oracle(&docs, query, 0.9, 0.4);
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                assert_eq!(g.0, w.0);
                assert_abs_diff_eq!(g.1, w.1, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn ties_break_by_doc_id_and_k_truncates() {
        let idx = Bm25Index::build(&corpus(&[("b", "x y"), ("a", "x y"), ("c", "x y")]));
        let hits = idx.search(&["x".to_string()], 2, Bm25Params::default());
        assert_eq!(hits.iter().map(|h| h.0.as_str()).collect::<Vec<_>>(), vec!["a", "b"]);
    }
}

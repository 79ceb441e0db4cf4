//! Interchange formats: training triples, candidate lists, TREC qrels and
//! run files, and `docid<TAB>text` corpora.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use log::warn;

use crate::error::{NeurankError, Result};
use crate::io::write_atomic;

pub const DEFAULT_DEPTH: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripleRecord {
    pub query: String,
    pub positive: String,
    pub negative: String,
}

pub fn parse_triples(source: &str, content: &str) -> Result<Vec<TripleRecord>> {
    let mut out = Vec::new();
    for (n, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(NeurankError::parse(
                source,
                n + 1,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        if fields.iter().any(|f| f.trim().is_empty()) {
            return Err(NeurankError::parse(source, n + 1, "empty field in triple"));
        }
        out.push(TripleRecord {
            query: fields[0].to_string(),
            positive: fields[1].to_string(),
            negative: fields[2].to_string(),
        });
    }
    Ok(out)
}

pub fn load_triples(path: &Path) -> Result<Vec<TripleRecord>> {
    parse_triples(&path.display().to_string(), &read_text(path)?)
}

pub fn write_triples(path: &Path, triples: &[TripleRecord]) -> Result<()> {
    write_atomic(path, |w| {
        for t in triples {
            writeln!(w, "{}\t{}\t{}", t.query, t.positive, t.negative)?;
        }
        Ok(())
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub docid: String,
    pub text: String,
    pub base_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub qid: String,
    pub query: String,
    pub docs: Vec<Candidate>,
}

/// Parses `qid<TAB>docid<TAB>query_text<TAB>doc_text` lines grouped by qid.
/// The file carries no base score; candidates receive `−(position)` so that
/// file order is preserved as a descending score.
pub fn parse_candidates(source: &str, content: &str, depth: usize) -> Result<Vec<CandidateSet>> {
    let mut sets: Vec<CandidateSet> = Vec::new();
    let mut seen_qids: HashSet<String> = HashSet::new();
    let mut seen_docs: HashSet<String> = HashSet::new();
    let mut truncated = false;
    for (n, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(4, '\t').collect();
        if fields.len() != 4 {
            return Err(NeurankError::parse(
                source,
                n + 1,
                format!("expected 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        let (qid, docid, query, text) = (fields[0], fields[1], fields[2], fields[3]);
        if qid.is_empty() || docid.is_empty() {
            return Err(NeurankError::parse(source, n + 1, "empty qid or docid"));
        }
        if sets.last().map(|s| s.qid.as_str()) != Some(qid) {
            if !seen_qids.insert(qid.to_string()) {
                return Err(NeurankError::parse(
                    source,
                    n + 1,
                    format!("candidates for query {qid} are not contiguous"),
                ));
            }
            seen_docs.clear();
            sets.push(CandidateSet {
                qid: qid.to_string(),
                query: query.to_string(),
                docs: Vec::new(),
            });
        }
        if !seen_docs.insert(docid.to_string()) {
            return Err(NeurankError::parse(
                source,
                n + 1,
                format!("duplicate candidate {docid} for query {qid}"),
            ));
        }
        let set = sets.last_mut().expect("pushed above");
        if set.docs.len() >= depth {
            truncated = true;
            continue;
        }
        let position = set.docs.len() + 1;
        set.docs.push(Candidate {
            docid: docid.to_string(),
            text: text.to_string(),
            base_score: -(position as f64),
        });
    }
    if truncated {
        warn!("{source}: candidate lists truncated to depth {depth}");
    }
    Ok(sets)
}

pub fn load_candidates(path: &Path, depth: usize) -> Result<Vec<CandidateSet>> {
    parse_candidates(&path.display().to_string(), &read_text(path)?, depth)
}

pub fn write_candidates(path: &Path, sets: &[CandidateSet]) -> Result<()> {
    write_atomic(path, |w| {
        for s in sets {
            for d in &s.docs {
                writeln!(w, "{}\t{}\t{}\t{}", s.qid, d.docid, s.query, d.text)?;
            }
        }
        Ok(())
    })
}

/// Relevance judgments keyed by (qid, docid), in first-seen order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct QrelSet {
    grades: IndexMap<(String, String), u32>,
    gmax: u32,
}

impl QrelSet {
    pub fn new(gmax: u32) -> Self {
        QrelSet {
            grades: IndexMap::new(),
            gmax,
        }
    }

    pub fn gmax(&self) -> u32 {
        self.gmax
    }

    pub fn insert(&mut self, qid: &str, docid: &str, grade: u32) -> Result<()> {
        if grade > self.gmax {
            return Err(NeurankError::Contract(format!(
                "grade {grade} for ({qid}, {docid}) exceeds gmax {}",
                self.gmax
            )));
        }
        self.grades.insert((qid.to_string(), docid.to_string()), grade);
        Ok(())
    }

    pub fn grade(&self, qid: &str, docid: &str) -> u32 {
        // IndexMap lookups need an owned key tuple
        self.grades
            .get(&(qid.to_string(), docid.to_string()))
            .copied()
            .unwrap_or(0)
    }

    pub fn contains_query(&self, qid: &str) -> bool {
        self.grades.keys().any(|(q, _)| q == qid)
    }

    /// Distinct qids in first-seen order.
    pub fn queries(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.grades
            .keys()
            .filter(|(q, _)| seen.insert(q.clone()))
            .map(|(q, _)| q.clone())
            .collect()
    }

    /// Judged grades for one query.
    pub fn judgments(&self, qid: &str) -> Vec<(&str, u32)> {
        self.grades
            .iter()
            .filter(|((q, _), _)| q == qid)
            .map(|((_, d), g)| (d.as_str(), *g))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.grades.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grades.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u32)> {
        self.grades.iter().map(|((q, d), g)| (q.as_str(), d.as_str(), *g))
    }
}

/// Parses TREC qrels `qid 0 docid grade`. With `gmax = None` the maximum
/// observed grade (at least 1) is used. Duplicate pairs keep the last grade.
pub fn parse_qrels(source: &str, content: &str, gmax: Option<u32>) -> Result<QrelSet> {
    let mut rows = Vec::new();
    for (n, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(NeurankError::parse(
                source,
                n + 1,
                format!("expected `qid 0 docid grade`, found {} fields", fields.len()),
            ));
        }
        let grade: i64 = fields[3]
            .parse()
            .map_err(|_| NeurankError::parse(source, n + 1, format!("bad grade `{}`", fields[3])))?;
        if grade < 0 {
            return Err(NeurankError::parse(source, n + 1, format!("negative grade {grade}")));
        }
        rows.push((n + 1, fields[0], fields[2], grade as u32));
    }
    let observed = rows.iter().map(|r| r.3).max().unwrap_or(0).max(1);
    let mut set = QrelSet::new(gmax.unwrap_or(observed));
    for (line, qid, docid, grade) in rows {
        if set.grades.contains_key(&(qid.to_string(), docid.to_string())) {
            warn!("{source}:{line}: duplicate judgment for ({qid}, {docid}); keeping the last");
        }
        set.insert(qid, docid, grade)
            .map_err(|e| NeurankError::parse(source, line, e.to_string()))?;
    }
    Ok(set)
}

pub fn load_qrels(path: &Path, gmax: Option<u32>) -> Result<QrelSet> {
    parse_qrels(&path.display().to_string(), &read_text(path)?, gmax)
}

pub fn format_qrels(qrels: &QrelSet) -> String {
    let mut out = String::new();
    for (q, d, g) in qrels.iter() {
        out.push_str(&format!("{q} 0 {d} {g}\n"));
    }
    out
}

pub fn write_qrels(path: &Path, qrels: &QrelSet) -> Result<()> {
    let text = format_qrels(qrels);
    write_atomic(path, |w| w.write_all(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub qid: String,
    pub docid: String,
    pub rank: usize,
    pub score: f64,
    pub tag: String,
}

/// A TREC run: `qid Q0 docid rank score runtag` lines.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunFile {
    pub entries: Vec<RunEntry>,
}

impl RunFile {
    /// Builds a run from per-query scored documents, ranking each query by
    /// descending score with doc-id tie-break.
    pub fn from_scores(tag: &str, scored: &[(String, Vec<(String, f64)>)]) -> Self {
        let mut entries = Vec::new();
        for (qid, docs) in scored {
            let mut docs = docs.clone();
            sort_scored(&mut docs);
            for (i, (docid, score)) in docs.into_iter().enumerate() {
                entries.push(RunEntry {
                    qid: qid.clone(),
                    docid,
                    rank: i + 1,
                    score,
                    tag: tag.to_string(),
                });
            }
        }
        RunFile { entries }
    }

    /// Per-query (docid, score) lists, qids in first-seen order.
    pub fn by_query(&self) -> Vec<(String, Vec<(String, f64)>)> {
        let mut map: IndexMap<&str, Vec<(String, f64)>> = IndexMap::new();
        for e in &self.entries {
            map.entry(e.qid.as_str()).or_default().push((e.docid.clone(), e.score));
        }
        map.into_iter().map(|(q, v)| (q.to_string(), v)).collect()
    }

    pub fn format(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("{} Q0 {} {} {} {}\n", e.qid, e.docid, e.rank, e.score, e.tag));
        }
        out
    }
}

/// Descending score, ascending doc id on ties.
pub fn sort_scored(docs: &mut [(String, f64)]) {
    docs.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

pub fn parse_run(source: &str, content: &str) -> Result<RunFile> {
    let mut entries = Vec::new();
    for (n, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(NeurankError::parse(
                source,
                n + 1,
                format!("expected `qid Q0 docid rank score runtag`, found {} fields", fields.len()),
            ));
        }
        let rank = fields[3]
            .parse()
            .map_err(|_| NeurankError::parse(source, n + 1, format!("bad rank `{}`", fields[3])))?;
        let score: f64 = fields[4]
            .parse()
            .map_err(|_| NeurankError::parse(source, n + 1, format!("bad score `{}`", fields[4])))?;
        if !score.is_finite() {
            return Err(NeurankError::parse(source, n + 1, "non-finite score"));
        }
        entries.push(RunEntry {
            qid: fields[0].to_string(),
            docid: fields[2].to_string(),
            rank,
            score,
            tag: fields[5].to_string(),
        });
    }
    Ok(RunFile { entries })
}

pub fn load_run(path: &Path) -> Result<RunFile> {
    parse_run(&path.display().to_string(), &read_text(path)?)
}

pub fn write_run(path: &Path, run: &RunFile) -> Result<()> {
    let text = run.format();
    write_atomic(path, |w| w.write_all(text.as_bytes()))
}

/// `id<TAB>text` lines, order preserved. Used for corpora and query files.
pub fn parse_id_text(source: &str, content: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((id, text)) = line.split_once('\t') else {
            return Err(NeurankError::parse(source, n + 1, "expected `id<TAB>text`"));
        };
        if id.is_empty() {
            return Err(NeurankError::parse(source, n + 1, "empty id"));
        }
        if !seen.insert(id.to_string()) {
            return Err(NeurankError::parse(source, n + 1, format!("duplicate id {id}")));
        }
        out.push((id.to_string(), text.to_string()));
    }
    Ok(out)
}

pub fn load_id_text(path: &Path) -> Result<Vec<(String, String)>> {
    parse_id_text(&path.display().to_string(), &read_text(path)?)
}

/// Map view of an `id<TAB>text` file.
pub fn id_text_map(rows: &[(String, String)]) -> BTreeMap<&str, &str> {
    rows.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect()
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| NeurankError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triple_line_parses() {
        let t = parse_triples("t", "what is x\tx is a y\tunrelated text\n").unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].positive, "x is a y");
    }

    #[test]
    fn malformed_triple_names_line() {
        let err = parse_triples("triples.tsv", "a\tb\tc\nonly\ttwo\n").unwrap_err();
        assert_eq!(err.to_string(), "triples.tsv:2: expected 3 tab-separated fields, found 2");
        assert!(parse_triples("t", "a\t  \tc\n").is_err());
    }

    #[test]
    fn qrels_line_parses() {
        let q = parse_qrels("q", "7 0 doc3 2\n", None).unwrap();
        assert_eq!(q.grade("7", "doc3"), 2);
        assert_eq!(q.grade("7", "doc4"), 0);
        assert_eq!(q.gmax(), 2);
    }

    #[test]
    fn qrels_duplicate_is_last_wins() {
        let q = parse_qrels("q", "1 0 a 1\n1 0 b 0\n1 0 a 3\n", Some(4)).unwrap();
        assert_eq!(q.grade("1", "a"), 3);
        assert_eq!(q.len(), 2);
        assert_eq!(format_qrels(&q), "1 0 a 3\n1 0 b 0\n");
    }

    #[test]
    fn qrels_grade_above_gmax_is_rejected() {
        let err = parse_qrels("q", "1 0 a 1\n1 0 b 3\n", Some(1)).unwrap_err();
        assert!(err.to_string().starts_with("q:2:"), "{err}");
    }

    #[test]
    fn candidates_group_and_truncate() {
        let text = "1\td1\tq one\ttext a\n1\td2\tq one\ttext b\n2\td1\tq two\ttext c\n";
        let sets = parse_candidates("c", text, 1).unwrap();
        assert_eq!(sets.len(), 2);
        assert_eq!(sets[0].docs.len(), 1);
        let sets = parse_candidates("c", text, 100).unwrap();
        assert_eq!(sets[0].docs[1].docid, "d2");
        assert!(sets[0].docs[0].base_score > sets[0].docs[1].base_score);

        assert!(parse_candidates("c", "1\td1\tq\tt\n1\td1\tq\tt\n", 10).is_err());
        assert!(parse_candidates("c", "1\td1\tq\tt\n2\td1\tq\tt\n1\td2\tq\tt\n", 10).is_err());
    }

    #[test]
    fn run_round_trip() {
        let scored = vec![
            ("q1".to_string(), vec![("d2".to_string(), 0.5), ("d1".to_string(), 0.5), ("d3".to_string(), 2.25)]),
            ("q2".to_string(), vec![("x".to_string(), -1.0e-7)]),
        ];
        let run = RunFile::from_scores("tag", &scored);
        let text = run.format();
        assert_eq!(text.lines().next().unwrap(), "q1 Q0 d3 1 2.25 tag");
        assert_eq!(text.lines().nth(1).unwrap(), "q1 Q0 d1 2 0.5 tag");
        let back = parse_run("r", &text).unwrap();
        assert_eq!(back, run);
        assert_eq!(back.format(), text);
    }

    #[test]
    fn malformed_run_line_is_reported() {
        let err = parse_run("run", "q Q0 d 1 0.5 t\nq Q0 d x 0.5 t\n").unwrap_err();
        assert!(err.to_string().starts_with("run:2:"), "{err}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn entry() -> impl Strategy<Value = (String, String, usize, f64)> {
            ("q[0-9]{1,2}", "d[0-9]{1,3}", 1usize..200, -1e6f64..1e6)
        }

        proptest! {
            #[test]
            fn canonical_run_files_round_trip(entries in proptest::collection::vec(entry(), 0..30)) {
                let run = RunFile {
                    entries: entries
                        .into_iter()
                        .map(|(qid, docid, rank, score)| RunEntry { qid, docid, rank, score, tag: "t".into() })
                        .collect(),
                };
                let text = run.format();
                let back = parse_run("r", &text).unwrap();
                prop_assert_eq!(back.format(), text);
            }

            #[test]
            fn canonical_qrels_round_trip(rows in proptest::collection::vec(("q[0-9]", "d[0-9]{1,2}", 0u32..5), 0..30)) {
                let mut q = QrelSet::new(4);
                for (a, b, g) in &rows {
                    q.insert(a, b, *g).unwrap();
                }
                let text = format_qrels(&q);
                let back = parse_qrels("q", &text, Some(4)).unwrap();
                prop_assert_eq!(format_qrels(&back), text);
            }
        }
    }
}

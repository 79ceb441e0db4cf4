//! Ranking metrics, run evaluation and paired permutation tests.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{sort_scored, QrelSet, RunFile};
use crate::error::{NeurankError, Result};
use crate::io::write_atomic;

pub const DEFAULT_N_PERM: usize = 100_000;
/// Largest query count for which [`PermutationMode::Auto`] enumerates all sign flips.
pub const EXACT_MAX_QUERIES: usize = 12;

/// One query's documents, descending by score with doc-id tie-break.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub qid: String,
    docs: Vec<(String, f64)>,
}

impl RankedList {
    pub fn new(qid: impl Into<String>, mut docs: Vec<(String, f64)>) -> Result<Self> {
        let qid = qid.into();
        sort_scored(&mut docs);
        let mut seen = std::collections::HashSet::new();
        if let Some((d, _)) = docs.iter().find(|(d, _)| !seen.insert(d.as_str())) {
            return Err(NeurankError::Contract(format!("document `{d}` ranked twice for query `{qid}`")));
        }
        Ok(RankedList { qid, docs })
    }

    pub fn docs(&self) -> &[(String, f64)] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    fn grades(&self, qrels: &QrelSet, k: usize) -> Vec<u32> {
        self.docs.iter().take(k).map(|(d, _)| qrels.grade(&self.qid, d)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Mrr(usize),
    Ndcg(usize),
    Err(usize),
}

impl Metric {
    pub fn cutoff(self) -> usize {
        match self {
            Metric::Mrr(k) | Metric::Ndcg(k) | Metric::Err(k) => k,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Mrr(_) => "mrr",
            Metric::Ndcg(_) => "ndcg",
            Metric::Err(_) => "err",
        }
    }

    pub fn compute(self, list: &RankedList, qrels: &QrelSet) -> Result<f64> {
        match self {
            Metric::Mrr(k) => mrr_at_k(list, qrels, k),
            Metric::Ndcg(k) => ndcg_at_k(list, qrels, k),
            Metric::Err(k) => err_at_k(list, qrels, k, qrels.gmax()),
        }
    }

    /// MRR@10, NDCG@20 and ERR@20.
    pub fn standard() -> Vec<Metric> {
        vec![Metric::Mrr(10), Metric::Ndcg(20), Metric::Err(20)]
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.name(), self.cutoff())
    }
}

impl FromStr for Metric {
    type Err = NeurankError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || NeurankError::Config(format!("bad metric `{s}`; expected e.g. mrr@10, ndcg@20, err@20"));
        let (name, k) = s.trim().split_once('@').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(bad());
        }
        match name.to_ascii_lowercase().as_str() {
            "mrr" => Ok(Metric::Mrr(k)),
            "ndcg" => Ok(Metric::Ndcg(k)),
            "err" => Ok(Metric::Err(k)),
            _ => Err(bad()),
        }
    }
}

pub fn parse_metrics(list: &str) -> Result<Vec<Metric>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

fn check_query(list: &RankedList, qrels: &QrelSet, k: usize) -> Result<bool> {
    if k == 0 {
        return Err(NeurankError::Contract("metric cutoff must be at least 1".into()));
    }
    if !qrels.contains_query(&list.qid) {
        log::warn!("query `{}` has no judgments; metric is 0", list.qid);
        return Ok(false);
    }
    Ok(true)
}

/// Reciprocal rank of the first document with grade > 0 within the top k.
pub fn mrr_at_k(list: &RankedList, qrels: &QrelSet, k: usize) -> Result<f64> {
    if !check_query(list, qrels, k)? {
        return Ok(0.0);
    }
    Ok(list
        .grades(qrels, k)
        .iter()
        .position(|&g| g > 0)
        .map_or(0.0, |r| 1.0 / (r + 1) as f64))
}

fn dcg(grades: impl IntoIterator<Item = u32>) -> f64 {
    grades
        .into_iter()
        .enumerate()
        .map(|(r, g)| (2f64.powi(g as i32) - 1.0) / ((r + 2) as f64).log2())
        .sum()
}

/// DCG@k with gain (2^g − 1) / log2(rank + 1), over the ideal DCG@k.
pub fn ndcg_at_k(list: &RankedList, qrels: &QrelSet, k: usize) -> Result<f64> {
    if !check_query(list, qrels, k)? {
        return Ok(0.0);
    }
    let mut ideal: Vec<u32> = qrels.judgments(&list.qid).into_iter().map(|(_, g)| g).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(ideal.into_iter().take(k));
    if idcg == 0.0 {
        return Ok(0.0);
    }
    Ok(dcg(list.grades(qrels, k)) / idcg)
}

/// Cascade ERR@k with stop probability R = (2^g − 1) / 2^gmax.
pub fn err_at_k(list: &RankedList, qrels: &QrelSet, k: usize, gmax: u32) -> Result<f64> {
    if !check_query(list, qrels, k)? {
        return Ok(0.0);
    }
    let denom = 2f64.powi(gmax as i32);
    let mut reach = 1.0;
    let mut err = 0.0;
    for (r, g) in list.grades(qrels, k).into_iter().enumerate() {
        if g > gmax {
            return Err(NeurankError::Contract(format!("grade {g} exceeds gmax {gmax}")));
        }
        let stop = (2f64.powi(g as i32) - 1.0) / denom;
        err += reach * stop / (r + 1) as f64;
        reach *= 1.0 - stop;
    }
    Ok(err)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub metric: Metric,
    pub per_query: Vec<(String, f64)>,
    pub mean: f64,
}

impl MetricReport {
    pub fn new(metric: Metric, per_query: Vec<(String, f64)>) -> Self {
        let mean = if per_query.is_empty() {
            0.0
        } else {
            per_query.iter().map(|(_, v)| v).sum::<f64>() / per_query.len() as f64
        };
        MetricReport { metric, per_query, mean }
    }

    pub fn values(&self) -> Vec<f64> {
        self.per_query.iter().map(|(_, v)| *v).collect()
    }

    pub fn value(&self, qid: &str) -> Option<f64> {
        self.per_query.iter().find(|(q, _)| q == qid).map(|(_, v)| *v)
    }

    /// `qid,value` rows and a closing `all,<mean>` line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("qid,value\n");
        for (q, v) in &self.per_query {
            out.push_str(&format!("{q},{v}\n"));
        }
        out.push_str(&format!("all,{}\n", self.mean));
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let text = self.to_csv();
        write_atomic(path, |w| w.write_all(text.as_bytes()))
    }
}

/// Evaluates every judged query; judged queries missing from the run score 0
/// and run queries without judgments are skipped.
pub fn evaluate_run(run: &RunFile, qrels: &QrelSet, metric: Metric) -> Result<MetricReport> {
    let by_query = run.by_query();
    for (q, _) in &by_query {
        if !qrels.contains_query(q) {
            log::warn!("run query `{q}` has no judgments; skipped");
        }
    }
    let mut per_query = Vec::new();
    for qid in qrels.queries() {
        let value = match by_query.iter().find(|(q, _)| *q == qid) {
            Some((_, docs)) => metric.compute(&RankedList::new(qid.clone(), docs.clone())?, qrels)?,
            None => 0.0,
        };
        per_query.push((qid, value));
    }
    Ok(MetricReport::new(metric, per_query))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PermutationMode {
    /// Exact for at most [`EXACT_MAX_QUERIES`] queries, Monte Carlo above.
    Auto { n_perm: usize },
    Exact,
    MonteCarlo { n_perm: usize },
}

impl Default for PermutationMode {
    fn default() -> Self {
        PermutationMode::Auto { n_perm: DEFAULT_N_PERM }
    }
}

fn paired_diffs(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(NeurankError::Contract(format!(
            "paired samples differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

/// Whether a permuted |Σ d| reaches the observed one, tolerant of summation-order rounding.
fn at_least(permuted: f64, observed: f64, scale: f64) -> bool {
    permuted.abs() >= observed.abs() - 1e-12 * scale.max(1.0)
}

/// Two-sided paired sign-flip test on the mean difference.
pub fn permutation_test(a: &[f64], b: &[f64], mode: PermutationMode, seed: u64) -> Result<f64> {
    let d = paired_diffs(a, b)?;
    match mode {
        PermutationMode::Exact => exact_p(&d),
        PermutationMode::MonteCarlo { n_perm } => monte_carlo_p(&d, n_perm, seed),
        PermutationMode::Auto { n_perm } if d.len() <= EXACT_MAX_QUERIES => {
            let _ = n_perm;
            exact_p(&d)
        }
        PermutationMode::Auto { n_perm } => monte_carlo_p(&d, n_perm, seed),
    }
}

/// Fraction of all 2^n sign assignments whose |Σ d| reaches the observed one.
fn exact_p(d: &[f64]) -> Result<f64> {
    if d.len() > 24 {
        return Err(NeurankError::Config(format!("exact enumeration over {} queries is too large", d.len())));
    }
    if d.is_empty() {
        return Ok(1.0);
    }
    let observed: f64 = d.iter().sum();
    let scale: f64 = d.iter().map(|x| x.abs()).sum();
    let total = 1u64 << d.len();
    let mut hits = 0u64;
    for mask in 0..total {
        let s: f64 = d
            .iter()
            .enumerate()
            .map(|(i, x)| if mask >> i & 1 == 1 { -x } else { *x })
            .sum();
        if at_least(s, observed, scale) {
            hits += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// `(1 + hits) / (1 + n_perm)` over random sign flips.
fn monte_carlo_p(d: &[f64], n_perm: usize, seed: u64) -> Result<f64> {
    if n_perm == 0 {
        return Err(NeurankError::Config("n_perm must be at least 1".into()));
    }
    let observed: f64 = d.iter().sum();
    let scale: f64 = d.iter().map(|x| x.abs()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..n_perm {
        let s: f64 = d.iter().map(|x| if rng.gen::<bool>() { -x } else { *x }).sum();
        if at_least(s, observed, scale) {
            hits += 1;
        }
    }
    Ok((1 + hits) as f64 / (1 + n_perm) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignificanceReport {
    pub metric: Metric,
    pub mean_a: f64,
    pub mean_b: f64,
    pub p_value: f64,
}

impl SignificanceReport {
    pub fn compare(a: &MetricReport, b: &MetricReport, mode: PermutationMode, seed: u64) -> Result<Self> {
        if a.metric != b.metric {
            return Err(NeurankError::Contract(format!("comparing {} with {}", a.metric, b.metric)));
        }
        let qa: Vec<&str> = a.per_query.iter().map(|(q, _)| q.as_str()).collect();
        let qb: Vec<&str> = b.per_query.iter().map(|(q, _)| q.as_str()).collect();
        if qa != qb {
            return Err(NeurankError::Contract("reports cover different queries".into()));
        }
        Ok(SignificanceReport {
            metric: a.metric,
            mean_a: a.mean,
            mean_b: b.mean,
            p_value: permutation_test(&a.values(), &b.values(), mode, seed)?,
        })
    }

    pub fn to_csv(&self) -> String {
        format!(
            "metric,mean_a,mean_b,p_value\n{},{},{},{}\n",
            self.metric, self.mean_a, self.mean_b, self.p_value
        )
    }
}

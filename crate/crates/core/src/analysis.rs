//! Behavioural probes: how much attention each token group receives per
//! layer, how the score moves when a single document term is removed, and
//! what happens to ranking quality when the boundary markers are dropped.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CandidateSet, QrelSet};
use crate::encoder::{encode, EncoderOutput};
use crate::error::{NeurankError, Result};
use crate::evaluation::{evaluate_run, Metric, MetricReport, PermutationMode, SignificanceReport};
use crate::io::write_atomic;
use crate::rankers::{PairInput, Ranker, RankerKind};
use crate::text::{encode_pair, is_marker, tokenize, MarkerPolicy, Side, TokenSequence, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenGroup {
    Marker,
    Stopword,
    Regular,
}

impl TokenGroup {
    pub const ALL: [TokenGroup; 3] = [TokenGroup::Marker, TokenGroup::Stopword, TokenGroup::Regular];

    pub fn as_str(self) -> &'static str {
        match self {
            TokenGroup::Marker => "marker",
            TokenGroup::Stopword => "stopword",
            TokenGroup::Regular => "regular",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for TokenGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Group of every position; `None` for padding.
pub fn classify_tokens(seq: &TokenSequence, vocab: &Vocabulary, stopwords: &HashSet<String>) -> Vec<Option<TokenGroup>> {
    seq.ids
        .iter()
        .zip(&seq.mask)
        .map(|(&id, &m)| {
            if m == 0 {
                None
            } else if is_marker(id) {
                Some(TokenGroup::Marker)
            } else if vocab.token(id).is_some_and(|t| stopwords.contains(t)) {
                Some(TokenGroup::Stopword)
            } else {
                Some(TokenGroup::Regular)
            }
        })
        .collect()
}

fn is_regular(word: &str, stopwords: &HashSet<String>) -> bool {
    !stopwords.contains(word)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub above_average: usize,
    pub majority: usize,
    pub group_size_total: usize,
}

/// Per layer (index 0 is layer 1) and group: how many sending tokens gave
/// the group more than its uniform share, or more than half, of their
/// head-averaged attention. Accumulates over sequences.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionShareReport {
    pub layers: Vec<[GroupCounts; 3]>,
    pub sequences: usize,
}

pub const ATTENTION_CSV_HEADER: &str = "layer,group,count_above_average,count_majority,group_size_total";

impl AttentionShareReport {
    pub fn get(&self, layer: usize, group: TokenGroup) -> GroupCounts {
        self.layers[layer - 1][group.index()]
    }

    /// Adds one sequence's counts.
    pub fn add(&mut self, output: &EncoderOutput, groups: &[Option<TokenGroup>]) -> Result<()> {
        let other = attention_group_shares(output, groups)?;
        self.merge(&other)
    }

    pub fn merge(&mut self, other: &AttentionShareReport) -> Result<()> {
        if self.layers.is_empty() {
            self.layers = vec![[GroupCounts::default(); 3]; other.layers.len()];
        }
        if self.layers.len() != other.layers.len() {
            return Err(NeurankError::Contract(format!(
                "cannot merge attention reports over {} and {} layers",
                self.layers.len(),
                other.layers.len()
            )));
        }
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                a.above_average += b.above_average;
                a.majority += b.majority;
                a.group_size_total += b.group_size_total;
            }
        }
        self.sequences += other.sequences;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{ATTENTION_CSV_HEADER}\n");
        for (k, counts) in self.layers.iter().enumerate() {
            for g in TokenGroup::ALL {
                let c = counts[g.index()];
                s.push_str(&format!(
                    "{},{},{},{},{}\n",
                    k + 1,
                    g,
                    c.above_average,
                    c.majority,
                    c.group_size_total
                ));
            }
        }
        s
    }

    /// Writes the CSV plus a `<path>.meta.json` sidecar naming the
    /// aggregation choices.
    pub fn write(&self, path: &Path) -> Result<()> {
        let csv = self.to_csv();
        write_atomic(path, |w| w.write_all(csv.as_bytes()))?;
        let meta = serde_json::json!({
            "heads": "mean",
            "direction": "sender",
            "above_average_threshold": "group_size / real_length",
            "majority_threshold": 0.5,
            "padding": "excluded",
            "sequences": self.sequences,
        });
        let meta_path = sidecar(path, "meta.json");
        let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
        write_atomic(&meta_path, |w| writeln!(w, "{text}"))
    }
}

pub fn sidecar(path: &Path, ext: &str) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    s.into()
}

/// Counts for one encoded sequence.
pub fn attention_group_shares(output: &EncoderOutput, groups: &[Option<TokenGroup>]) -> Result<AttentionShareReport> {
    let real: Vec<usize> = (0..groups.len()).filter(|&i| groups[i].is_some()).collect();
    let n_real = real.len();
    let mut sizes = [0usize; 3];
    for g in groups.iter().flatten() {
        sizes[g.index()] += 1;
    }
    let mut layers = Vec::with_capacity(output.attention.len());
    for heads in &output.attention {
        let n = heads.first().map_or(0, |a| a.shape()[0]);
        if n != groups.len() {
            return Err(NeurankError::Contract(format!(
                "attention over {n} positions but {} token groups",
                groups.len()
            )));
        }
        let mut counts = [GroupCounts::default(); 3];
        for (c, &size) in counts.iter_mut().zip(&sizes) {
            c.group_size_total = size;
        }
        for &t in &real {
            let mut mass = [0.0; 3];
            for att in heads {
                let row = att.row(t);
                for &j in &real {
                    mass[groups[j].expect("real position").index()] += row[j];
                }
            }
            for (g, m) in mass.iter_mut().enumerate() {
                *m /= heads.len() as f64;
                if sizes[g] == 0 {
                    continue;
                }
                if *m > sizes[g] as f64 / n_real as f64 {
                    counts[g].above_average += 1;
                }
                if *m > 0.5 {
                    counts[g].majority += 1;
                }
            }
        }
        layers.push(counts);
    }
    Ok(AttentionShareReport { layers, sequences: 1 })
}

/// Runs the encoder of `ranker` over each query-candidate pair and
/// accumulates attention shares.
pub fn attention_report(
    ranker: &Ranker,
    sets: &[CandidateSet],
    stopwords: &HashSet<String>,
) -> Result<AttentionShareReport> {
    if !ranker.kind().uses_encoder() {
        return Err(NeurankError::Config(format!("{} ranker has no attention to analyse", ranker.kind())));
    }
    let mut report = AttentionShareReport::default();
    for set in sets {
        let q = tokenize(&set.query);
        for c in &set.docs {
            let seq = encode_pair(&q, &tokenize(&c.text), &ranker.vocab, ranker.config.max_len)?.trimmed();
            let out = encode(&ranker.params, &ranker.encoder, &seq)?;
            report.add(&out, &classify_tokens(&seq, &ranker.vocab, stopwords))?;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfluenceMode {
    #[default]
    RandomOne,
    Exhaustive,
}

impl std::str::FromStr for InfluenceMode {
    type Err = NeurankError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random-one" => Ok(InfluenceMode::RandomOne),
            "exhaustive" => Ok(InfluenceMode::Exhaustive),
            _ => Err(NeurankError::Config(format!(
                "unknown influence mode `{s}` (random-one, exhaustive)"
            ))),
        }
    }
}

impl fmt::Display for InfluenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InfluenceMode::RandomOne => "random-one",
            InfluenceMode::Exhaustive => "exhaustive",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRecord {
    pub qid: String,
    pub docid: String,
    pub term: String,
    /// Word index of the removed occurrence in the document.
    pub position: usize,
    pub original_score: f64,
    pub removed_score: f64,
    pub delta: f64,
}

/// FNV-1a over the seed and the pair ids, so each pair's draw is independent
/// of processing order.
fn pair_seed(seed: u64, qid: &str, docid: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let bytes = seed.to_le_bytes();
    for &b in bytes.iter().chain(qid.as_bytes()).chain([0u8].iter()).chain(docid.as_bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub struct InfluenceInput<'a> {
    pub qid: &'a str,
    pub docid: &'a str,
    pub query: &'a [String],
    pub doc: &'a [String],
    /// Only the first `visible` document words reach the model.
    pub visible: usize,
}

/// Removes Regular document words one occurrence at a time and re-scores.
pub fn term_influence<F>(
    input: &InfluenceInput<'_>,
    mut scorer: F,
    stopwords: &HashSet<String>,
    seed: u64,
    mode: InfluenceMode,
) -> Result<Vec<InfluenceRecord>>
where
    F: FnMut(&[String], &[String]) -> Result<f64>,
{
    let visible = input.visible.min(input.doc.len());
    let regular: Vec<usize> = (0..visible).filter(|&i| is_regular(&input.doc[i], stopwords)).collect();
    if regular.is_empty() {
        log::warn!("{}/{}: document has no regular terms to remove", input.qid, input.docid);
        return Ok(Vec::new());
    }
    let chosen = match mode {
        InfluenceMode::Exhaustive => regular,
        InfluenceMode::RandomOne => {
            let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(seed, input.qid, input.docid));
            vec![regular[rng.gen_range(0..regular.len())]]
        }
    };
    let original = scorer(input.query, input.doc)?;
    chosen
        .into_iter()
        .map(|pos| {
            let mut reduced = input.doc.to_vec();
            let term = reduced.remove(pos);
            let removed = scorer(input.query, &reduced)?;
            Ok(InfluenceRecord {
                qid: input.qid.to_string(),
                docid: input.docid.to_string(),
                term,
                position: pos,
                original_score: original,
                removed_score: removed,
                delta: original - removed,
            })
        })
        .collect()
}

/// How many leading document words survive truncation for this ranker.
pub fn visible_doc_words(ranker: &Ranker, query: &[String], doc: &[String]) -> Result<usize> {
    Ok(match ranker.prepare(query, doc)? {
        PairInput::Joint(seq) => count_side(&seq, Side::Document),
        PairInput::Separate { doc: d, .. } => count_side(&d, Side::Query),
        PairInput::Tokens { doc: d, .. } => d.len(),
    })
}

fn count_side(seq: &TokenSequence, side: Side) -> usize {
    seq.origins.iter().flatten().filter(|o| o.side == side).count()
}

/// Influence records for every candidate of every query.
pub fn influence_report(
    ranker: &Ranker,
    sets: &[CandidateSet],
    stopwords: &HashSet<String>,
    seed: u64,
    mode: InfluenceMode,
) -> Result<Vec<InfluenceRecord>> {
    let mut out = Vec::new();
    for set in sets {
        let q = tokenize(&set.query);
        for c in &set.docs {
            let d = tokenize(&c.text);
            let input = InfluenceInput {
                qid: &set.qid,
                docid: &c.docid,
                query: &q,
                doc: &d,
                visible: visible_doc_words(ranker, &q, &d)?,
            };
            out.extend(term_influence(
                &input,
                |q, d| Ok(ranker.score(q, d)?.score),
                stopwords,
                seed,
                mode,
            )?);
        }
    }
    Ok(out)
}

/// Removed terms ordered by |delta| descending, ties by term.
pub fn rank_terms(records: &[InfluenceRecord], top_n: usize) -> Vec<(String, f64)> {
    let mut terms: Vec<(String, f64)> = records.iter().map(|r| (r.term.clone(), r.delta.abs())).collect();
    terms.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    terms.truncate(top_n);
    terms
}

pub fn most_influential_terms<F>(
    input: &InfluenceInput<'_>,
    scorer: F,
    stopwords: &HashSet<String>,
    top_n: usize,
) -> Result<Vec<(String, f64)>>
where
    F: FnMut(&[String], &[String]) -> Result<f64>,
{
    let records = term_influence(input, scorer, stopwords, 0, InfluenceMode::Exhaustive)?;
    Ok(rank_terms(&records, top_n))
}

pub const SCATTER_HEADER: [&str; 5] = ["qid", "docid", "term", "original_score", "removed_score"];
pub const TOP_TERMS_HEADER: [&str; 5] = ["qid", "docid", "rank", "term", "abs_delta"];

fn write_csv_rows(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    write_atomic(path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(header)?;
        for r in &rows {
            csv.write_record(r)?;
        }
        csv.flush()
    })
}

pub fn emit_scatter(records: &[InfluenceRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(NeurankError::Contract("no influence records to write".into()));
    }
    let rows = records
        .iter()
        .map(|r| {
            vec![
                r.qid.clone(),
                r.docid.clone(),
                r.term.clone(),
                r.original_score.to_string(),
                r.removed_score.to_string(),
            ]
        })
        .collect();
    write_csv_rows(path, &SCATTER_HEADER, rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterRow {
    pub qid: String,
    pub docid: String,
    pub term: String,
    pub original_score: f64,
    pub removed_score: f64,
}

pub fn read_scatter(path: &Path) -> Result<Vec<ScatterRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| NeurankError::parse(path.display(), 0, e.to_string()))?;
    let header: Vec<String> = rd
        .headers()
        .map_err(|e| NeurankError::parse(path.display(), 1, e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    if header != SCATTER_HEADER {
        return Err(NeurankError::parse(path.display(), 1, format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| NeurankError::parse(path.display(), line, e.to_string()))?;
        let num = |k: usize| {
            rec[k]
                .parse::<f64>()
                .map_err(|e| NeurankError::parse(path.display(), line, format!("column {}: {e}", SCATTER_HEADER[k])))
        };
        rows.push(ScatterRow {
            qid: rec[0].to_string(),
            docid: rec[1].to_string(),
            term: rec[2].to_string(),
            original_score: num(3)?,
            removed_score: num(4)?,
        });
    }
    Ok(rows)
}

/// Top terms of each (qid, docid) group, groups in first-seen order.
pub fn emit_top_terms(records: &[InfluenceRecord], top_n: usize, path: &Path) -> Result<()> {
    let mut groups: indexmap::IndexMap<(&str, &str), Vec<InfluenceRecord>> = indexmap::IndexMap::new();
    for r in records {
        groups.entry((&r.qid, &r.docid)).or_default().push(r.clone());
    }
    let mut rows = Vec::new();
    for ((qid, docid), recs) in &groups {
        for (rank, (term, d)) in rank_terms(recs, top_n).into_iter().enumerate() {
            rows.push(vec![qid.to_string(), docid.to_string(), (rank + 1).to_string(), term, d.to_string()]);
        }
    }
    write_csv_rows(path, &TOP_TERMS_HEADER, rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkerAblation {
    pub policy: MarkerPolicy,
    pub with_markers: MetricReport,
    pub without_markers: MetricReport,
    pub p_value: f64,
}

pub const ABLATION_CSV_HEADER: &str = "qid,with_markers,without_markers";

impl MarkerAblation {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{ABLATION_CSV_HEADER}\n");
        for (qid, a) in &self.with_markers.per_query {
            let b = self.without_markers.value(qid).unwrap_or(0.0);
            s.push_str(&format!("{qid},{a},{b}\n"));
        }
        s.push_str(&format!("all,{},{}\n", self.with_markers.mean, self.without_markers.mean));
        s
    }

    pub fn summary(&self) -> SignificanceReport {
        SignificanceReport {
            metric: self.with_markers.metric,
            mean_a: self.with_markers.mean,
            mean_b: self.without_markers.mean,
            p_value: self.p_value,
        }
    }
}

/// Re-ranks the candidates with and without boundary markers and compares
/// the two runs query by query.
pub fn marker_ablation(
    ranker: &Ranker,
    sets: &[CandidateSet],
    qrels: &QrelSet,
    metric: Metric,
    policy: MarkerPolicy,
    mode: PermutationMode,
    seed: u64,
) -> Result<MarkerAblation> {
    if !matches!(ranker.kind(), RankerKind::LastInt | RankerKind::MultInt)
        && !(ranker.kind() == RankerKind::TermTrans && matches!(ranker.prepare(&["a"], &["b"])?, PairInput::Joint(_)))
    {
        return Err(NeurankError::Config(format!(
            "marker ablation needs a joint-sequence ranker, got {}",
            ranker.kind()
        )));
    }
    if policy == MarkerPolicy::Full {
        return Err(NeurankError::Config("marker ablation needs a policy that removes markers".into()));
    }
    let with = evaluate_run(&ranker.rerank_with(sets, "markers", MarkerPolicy::Full)?, qrels, metric)?;
    let without = evaluate_run(&ranker.rerank_with(sets, "no-markers", policy)?, qrels, metric)?;
    let sig = SignificanceReport::compare(&with, &without, mode, seed)?;
    Ok(MarkerAblation {
        policy,
        with_markers: with,
        without_markers: without,
        p_value: sig.p_value,
    })
}

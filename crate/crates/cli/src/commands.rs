use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use neurank::analysis::{
    attention_report, emit_scatter, emit_top_terms, influence_report, marker_ablation, sidecar, InfluenceMode,
};
use neurank::bm25::{Bm25Index, Bm25Params};
use neurank::checkpoint::Checkpoint;
use neurank::config::{from_kv, to_kv, KeyValues};
use neurank::data::{
    load_candidates, load_id_text, load_qrels, load_run, load_triples, write_candidates, write_run, DEFAULT_DEPTH,
};
use neurank::encoder::{init_params, EncoderConfig};
use neurank::evaluation::{evaluate_run, parse_metrics, Metric, PermutationMode, SignificanceReport};
use neurank::io::write_atomic;
use neurank::rankers::{Ranker, RankerKind};
use neurank::text::{default_stopwords, load_stopwords, tokenize, MarkerPolicy, Vocabulary};
use neurank::training::{self, write_log, Example, Triple};

use crate::settings::{self, Settings};
use crate::ConfigArgs;

pub const DEFAULT_MAX_VOCAB: usize = 30_000;

/// Set when replaying: the recorded configuration replaces file and overrides.
#[derive(Debug, Default)]
pub struct Ctx {
    pub snapshot: Option<KeyValues>,
}

/// What a command read and wrote, for its manifest.
#[derive(Debug, Default)]
pub struct Outcome {
    pub config_path: Option<PathBuf>,
    pub config: KeyValues,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, PathBuf>,
    /// Primary output first; the manifest is written next to it.
    pub outputs: Vec<PathBuf>,
}

impl Outcome {
    fn input(mut self, name: &str, path: &Path) -> Self {
        self.inputs.insert(name.to_string(), path.to_path_buf());
        self
    }

    fn maybe_input(self, name: &str, path: Option<&PathBuf>) -> Self {
        match path {
            Some(p) => self.input(name, p),
            None => self,
        }
    }
}

fn settings_for(cfg: &ConfigArgs, ctx: &Ctx) -> Result<Settings> {
    let kv = match &ctx.snapshot {
        Some(snap) => {
            settings::check_keys(snap)?;
            snap.clone()
        }
        None => settings::resolve(cfg.config.as_deref(), &cfg.set)?,
    };
    Settings::from_kv(kv)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    use std::io::Write;
    write_atomic(path, |w| w.write_all(text.as_bytes())).with_context(|| format!("writing {}", path.display()))
}

fn stopword_set(path: Option<&PathBuf>) -> Result<HashSet<String>> {
    Ok(match path {
        Some(p) => load_stopwords(p)?,
        None => default_stopwords(),
    })
}

fn load_ranker(path: &Path, expected: Option<RankerKind>) -> Result<Ranker> {
    let ckpt = Checkpoint::load(path)?;
    let ranker = Ranker::from_checkpoint(&ckpt).with_context(|| format!("{}", path.display()))?;
    if let Some(k) = expected {
        if k != ranker.kind() {
            bail!("{} holds a {} ranker, requested {k}", path.display(), ranker.kind());
        }
    }
    Ok(ranker)
}

fn corpus_vocabulary(corpus: &[(String, String)], min_count: usize, max_size: usize) -> Result<Vocabulary> {
    Ok(Vocabulary::build(corpus.iter().map(|(_, t)| t), min_count, max_size)?)
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
    /// Entries including the reserved tokens.
    #[arg(long, default_value_t = DEFAULT_MAX_VOCAB)]
    pub max_size: usize,
}

pub fn build_vocab(a: &BuildVocabArgs) -> Result<Outcome> {
    let corpus = load_id_text(&a.corpus)?;
    let vocab = corpus_vocabulary(&corpus, a.min_count, a.max_size)?;
    vocab.save(&a.out)?;
    log::info!("{} entries", vocab.len());
    Ok(Outcome {
        outputs: vec![a.out.clone()],
        ..Outcome::default()
    }
    .input("corpus", &a.corpus))
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Vocabulary file; built from the corpus when absent.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss log; defaults to `<out>.log.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

pub fn pretrain(a: &PretrainArgs, ctx: &Ctx) -> Result<Outcome> {
    let s = settings_for(&a.cfg, ctx)?;
    let corpus = load_id_text(&a.corpus)?;
    let vocab = match &a.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => corpus_vocabulary(&corpus, 1, DEFAULT_MAX_VOCAB)?,
    };
    let enc = EncoderConfig {
        vocab_size: vocab.len(),
        ..s.encoder.clone()
    };
    enc.validate()?;
    let passages: Vec<Vec<String>> = corpus.iter().map(|(_, t)| tokenize(t)).collect();
    let mut params = init_params(&enc, s.pretrain.pretrain_seed)?;
    let rows = training::pretrain(&mut params, &enc, &vocab, &passages, s.ranker.max_len, &s.pretrain)?;
    let mut config = to_kv(&enc)?;
    config.extend(to_kv(&s.pretrain)?);
    let ckpt = Checkpoint {
        kind: "pretrain".into(),
        config,
        vocab: vocab.tokens().to_vec(),
        params,
    };
    ckpt.save(&a.out)?;
    let log_path = a.log.clone().unwrap_or_else(|| sidecar(&a.out, "log.csv"));
    write_log(&log_path, &rows)?;
    Ok(Outcome {
        config_path: a.cfg.config.clone(),
        config: s.snapshot()?,
        seed: Some(s.pretrain.pretrain_seed),
        outputs: vec![a.out.clone(), log_path],
        ..Outcome::default()
    }
    .input("corpus", &a.corpus)
    .maybe_input("vocab", a.vocab.as_ref()))
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// `query<TAB>positive<TAB>negative` lines.
    #[arg(long)]
    pub triples: PathBuf,
    #[arg(long)]
    pub dev_candidates: PathBuf,
    #[arg(long)]
    pub dev_qrels: PathBuf,
    /// Pretraining or ranker checkpoint to start from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Vocabulary file; required without `--init`.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss log; defaults to `<out>.log.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Candidates kept per dev query.
    #[arg(long, default_value_t = DEFAULT_DEPTH)]
    pub depth: usize,
}

fn initial_ranker(a: &TrainArgs, s: &Settings) -> Result<Ranker> {
    let seed = s.train.seed;
    let Some(init) = &a.init else {
        let path = a.vocab.as_ref().context("--vocab is required without --init")?;
        let vocab = Vocabulary::load(path)?;
        return Ok(Ranker::new(s.encoder.clone(), s.ranker.clone(), vocab, seed)?);
    };
    if a.vocab.is_some() {
        log::warn!("--vocab ignored; the vocabulary comes from {}", init.display());
    }
    let ckpt = Checkpoint::load(init)?;
    if ckpt.kind != "pretrain" {
        let r = Ranker::from_checkpoint(&ckpt)?;
        if r.kind() != s.ranker.ranker {
            bail!("{} holds a {} ranker, configured {}", init.display(), r.kind(), s.ranker.ranker);
        }
        return Ok(r);
    }
    // Architecture comes from the checkpoint; dropout is a training choice.
    let enc = EncoderConfig {
        dropout: s.encoder.dropout,
        ..from_kv(&ckpt.config)?
    };
    let vocab = Vocabulary::from_tokens(ckpt.vocab.clone())?;
    let mut r = Ranker::new(enc, s.ranker.clone(), vocab, seed)?;
    if s.ranker.ranker.uses_encoder() {
        r.load_encoder_from(&ckpt.params)?;
    } else {
        log::warn!("{} does not use the encoder; pretrained weights unused", s.ranker.ranker);
    }
    Ok(r)
}

pub fn train(a: &TrainArgs, ctx: &Ctx) -> Result<Outcome> {
    let s = settings_for(&a.cfg, ctx)?;
    let triples: Vec<Triple> = load_triples(&a.triples)?.iter().map(Triple::from_record).collect();
    let qrels = load_qrels(&a.dev_qrels, None)?;
    let mut val = Vec::new();
    for set in load_candidates(&a.dev_candidates, a.depth)? {
        if !qrels.contains_query(&set.qid) {
            continue;
        }
        let query = tokenize(&set.query);
        for c in &set.docs {
            val.push(Example {
                query: query.clone(),
                doc: tokenize(&c.text),
                label: if qrels.grade(&set.qid, &c.docid) > 0 { 1.0 } else { 0.0 },
            });
        }
    }
    if val.is_empty() {
        bail!("no judged dev candidates in {}", a.dev_candidates.display());
    }
    let mut ranker = initial_ranker(a, &s)?;
    let outcome = training::train(&mut ranker, &triples, &val, &s.train)?;
    log::info!(
        "{} steps, best validation loss {:?} at step {:?}",
        outcome.steps,
        outcome.best_val_loss,
        outcome.best_step
    );
    ranker.to_checkpoint()?.save(&a.out)?;
    let log_path = a.log.clone().unwrap_or_else(|| sidecar(&a.out, "log.csv"));
    write_log(&log_path, &outcome.log)?;
    Ok(Outcome {
        config_path: a.cfg.config.clone(),
        config: s.snapshot()?,
        seed: Some(s.train.seed),
        outputs: vec![a.out.clone(), log_path],
        ..Outcome::default()
    }
    .input("triples", &a.triples)
    .input("dev_candidates", &a.dev_candidates)
    .input("dev_qrels", &a.dev_qrels)
    .maybe_input("init", a.init.as_ref())
    .maybe_input("vocab", a.vocab.as_ref()))
}

#[derive(Debug, Args)]
pub struct Bm25Args {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub corpus: PathBuf,
    /// `qid<TAB>text` lines.
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DEPTH)]
    pub depth: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn bm25(a: &Bm25Args, ctx: &Ctx) -> Result<Outcome> {
    let s = settings_for(&a.cfg, ctx)?;
    let params = Bm25Params {
        k1: s.bm25.bm25_k1,
        b: s.bm25.bm25_b,
    };
    let index = Bm25Index::build(&load_id_text(&a.corpus)?);
    let sets: Vec<_> = load_id_text(&a.queries)?
        .iter()
        .map(|(qid, text)| index.rank(qid, text, a.depth, params))
        .collect();
    write_candidates(&a.out, &sets)?;
    Ok(Outcome {
        config_path: a.cfg.config.clone(),
        config: to_kv(&s.bm25)?,
        outputs: vec![a.out.clone()],
        ..Outcome::default()
    }
    .input("corpus", &a.corpus)
    .input("queries", &a.queries))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Markers {
    Full,
    KeepCls,
    None,
}

impl From<Markers> for MarkerPolicy {
    fn from(m: Markers) -> Self {
        match m {
            Markers::Full => MarkerPolicy::Full,
            Markers::KeepCls => MarkerPolicy::KeepCls,
            Markers::None => MarkerPolicy::None,
        }
    }
}

#[derive(Debug, Args)]
pub struct RerankArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub candidates: PathBuf,
    /// Expected ranker kind; a mismatch with the checkpoint is an error.
    #[arg(long)]
    pub ranker: Option<RankerKind>,
    #[arg(long, default_value_t = DEFAULT_DEPTH)]
    pub depth: usize,
    #[arg(long, value_enum, default_value_t = Markers::Full)]
    pub markers: Markers,
    /// Run tag; defaults to the ranker kind.
    #[arg(long)]
    pub tag: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn rerank(a: &RerankArgs) -> Result<Outcome> {
    let ranker = load_ranker(&a.checkpoint, a.ranker)?;
    let sets = load_candidates(&a.candidates, a.depth)?;
    let tag = a.tag.clone().unwrap_or_else(|| ranker.kind().to_string());
    let run = ranker.rerank_with(&sets, &tag, a.markers.into())?;
    write_run(&a.out, &run)?;
    Ok(Outcome {
        outputs: vec![a.out.clone()],
        ..Outcome::default()
    }
    .input("checkpoint", &a.checkpoint)
    .input("candidates", &a.candidates))
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub qrels: PathBuf,
    /// Comma-separated, e.g. `mrr@10,ndcg@20,err@20`.
    #[arg(long, default_value = "mrr@10,ndcg@20,err@20")]
    pub metrics: String,
    /// Maximum grade for ERR; defaults to the largest grade in the qrels.
    #[arg(long)]
    pub gmax: Option<u32>,
    /// Summary CSV (`metric,mean,queries`); per-query files go next to it
    /// as `<stem>.<metric>.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn per_metric_path(summary: &Path, metric: Metric) -> PathBuf {
    let stem = summary.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    summary.with_file_name(format!("{stem}.{metric}.csv"))
}

pub fn eval(a: &EvalArgs) -> Result<Outcome> {
    let metrics = parse_metrics(&a.metrics)?;
    if metrics.is_empty() {
        bail!("no metrics given");
    }
    let run = load_run(&a.run)?;
    let qrels = load_qrels(&a.qrels, a.gmax)?;
    let mut summary = String::from("metric,mean,queries\n");
    let mut outputs = vec![a.out.clone()];
    for m in metrics {
        let report = evaluate_run(&run, &qrels, m)?;
        summary.push_str(&format!("{m},{},{}\n", report.mean, report.per_query.len()));
        let p = per_metric_path(&a.out, m);
        report.write_csv(&p)?;
        outputs.push(p);
    }
    write_text(&a.out, &summary)?;
    Ok(Outcome {
        outputs,
        ..Outcome::default()
    }
    .input("run", &a.run)
    .input("qrels", &a.qrels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PermMode {
    /// Exact up to 12 queries, Monte Carlo above.
    Auto,
    Exact,
    MonteCarlo,
}

fn permutation_mode(mode: PermMode, n_perm: usize) -> PermutationMode {
    match mode {
        PermMode::Auto => PermutationMode::Auto { n_perm },
        PermMode::Exact => PermutationMode::Exact,
        PermMode::MonteCarlo => PermutationMode::MonteCarlo { n_perm },
    }
}

#[derive(Debug, Args)]
pub struct SignificanceArgs {
    #[arg(long)]
    pub run_a: PathBuf,
    #[arg(long)]
    pub run_b: PathBuf,
    #[arg(long)]
    pub qrels: PathBuf,
    #[arg(long, default_value = "mrr@10")]
    pub metric: Metric,
    #[arg(long, default_value_t = neurank::evaluation::DEFAULT_N_PERM)]
    pub n_perm: usize,
    #[arg(long, value_enum, default_value_t = PermMode::Auto)]
    pub mode: PermMode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn significance(a: &SignificanceArgs) -> Result<Outcome> {
    let qrels = load_qrels(&a.qrels, None)?;
    let ra = evaluate_run(&load_run(&a.run_a)?, &qrels, a.metric)?;
    let rb = evaluate_run(&load_run(&a.run_b)?, &qrels, a.metric)?;
    let report = SignificanceReport::compare(&ra, &rb, permutation_mode(a.mode, a.n_perm), a.seed)?;
    write_text(&a.out, &report.to_csv())?;
    Ok(Outcome {
        seed: Some(a.seed),
        outputs: vec![a.out.clone()],
        ..Outcome::default()
    }
    .input("run_a", &a.run_a)
    .input("run_b", &a.run_b)
    .input("qrels", &a.qrels))
}

#[derive(Debug, Args)]
pub struct AttentionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub candidates: PathBuf,
    /// One word per line; the bundled English list when absent.
    #[arg(long)]
    pub stopwords: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_DEPTH)]
    pub depth: usize,
    /// CSV; a `.meta.json` sidecar records the aggregation choices.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn analyze_attention(a: &AttentionArgs) -> Result<Outcome> {
    let ranker = load_ranker(&a.checkpoint, None)?;
    let sets = load_candidates(&a.candidates, a.depth)?;
    let report = attention_report(&ranker, &sets, &stopword_set(a.stopwords.as_ref())?)?;
    report.write(&a.out)?;
    Ok(Outcome {
        outputs: vec![a.out.clone(), sidecar(&a.out, "meta.json")],
        ..Outcome::default()
    }
    .input("checkpoint", &a.checkpoint)
    .input("candidates", &a.candidates)
    .maybe_input("stopwords", a.stopwords.as_ref()))
}

#[derive(Debug, Args)]
pub struct InfluenceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub candidates: PathBuf,
    /// `random-one` or `exhaustive`.
    #[arg(long, default_value = "random-one")]
    pub mode: InfluenceMode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub stopwords: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_DEPTH)]
    pub depth: usize,
    /// Scatter CSV of original against removed scores.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the most influential terms per pair.
    #[arg(long)]
    pub top_terms: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub top_n: usize,
}

pub fn analyze_influence(a: &InfluenceArgs) -> Result<Outcome> {
    let ranker = load_ranker(&a.checkpoint, None)?;
    let sets = load_candidates(&a.candidates, a.depth)?;
    let records = influence_report(&ranker, &sets, &stopword_set(a.stopwords.as_ref())?, a.seed, a.mode)?;
    emit_scatter(&records, &a.out)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(p) = &a.top_terms {
        emit_top_terms(&records, a.top_n, p)?;
        outputs.push(p.clone());
    }
    Ok(Outcome {
        seed: Some(a.seed),
        outputs,
        ..Outcome::default()
    }
    .input("checkpoint", &a.checkpoint)
    .input("candidates", &a.candidates)
    .maybe_input("stopwords", a.stopwords.as_ref()))
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long)]
    pub qrels: PathBuf,
    #[arg(long, default_value = "mrr@10")]
    pub metric: Metric,
    /// Markers left in place: `keep-cls` or `none`.
    #[arg(long, value_enum, default_value_t = Markers::KeepCls)]
    pub policy: Markers,
    #[arg(long, default_value_t = neurank::evaluation::DEFAULT_N_PERM)]
    pub n_perm: usize,
    #[arg(long, value_enum, default_value_t = PermMode::Auto)]
    pub mode: PermMode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_DEPTH)]
    pub depth: usize,
    /// Per-query CSV; the significance summary goes to `<out>.significance.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn ablate_markers(a: &AblateArgs) -> Result<Outcome> {
    let ranker = load_ranker(&a.checkpoint, None)?;
    let sets = load_candidates(&a.candidates, a.depth)?;
    let qrels = load_qrels(&a.qrels, None)?;
    let ab = marker_ablation(
        &ranker,
        &sets,
        &qrels,
        a.metric,
        a.policy.into(),
        permutation_mode(a.mode, a.n_perm),
        a.seed,
    )?;
    write_text(&a.out, &ab.to_csv())?;
    let summary = sidecar(&a.out, "significance.csv");
    write_text(&summary, &ab.summary().to_csv())?;
    Ok(Outcome {
        seed: Some(a.seed),
        outputs: vec![a.out.clone(), summary],
        ..Outcome::default()
    }
    .input("checkpoint", &a.checkpoint)
    .input("candidates", &a.candidates)
    .input("qrels", &a.qrels))
}

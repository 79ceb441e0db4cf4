//! Fine-tuning: classification and pairwise losses, Adam, and the training
//! loop with validation-based early stopping. Pretraining lives in [`pretrain`].

pub mod pretrain;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TripleRecord;
use crate::error::{NeurankError, Result};
use crate::io::write_atomic;
use crate::rankers::{PairInput, Ranker};
use crate::tensor::{ParamSet, Tape, Tensor, Var};
use crate::text::tokenize;

pub use pretrain::{
    mask_lm_batch, next_seq_batch, pretrain, pretrain_batch, MaskedSequences, PretrainBatch, PretrainConfig,
};

/// Parameters under this prefix train at the projection learning rate.
pub const PROJ_PREFIX: &str = "head/proj/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    Classification,
    Pairwise,
}

/// How a scalar score becomes a relevance probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Link {
    #[default]
    Sigmoid,
    /// Softmax over the logits `[0, s]`.
    Softmax2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub proj_learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_interval: usize,
    pub patience: usize,
    /// Validation loss must drop by more than this to count as improvement.
    pub min_delta: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub link: Link,
    pub margin: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            proj_learning_rate: 2e-3,
            batch_size: 8,
            max_steps: 2000,
            eval_interval: 100,
            patience: 3,
            min_delta: 0.0,
            seed: 42,
            loss: LossKind::Classification,
            link: Link::Sigmoid,
            margin: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NeurankError::Config(m));
        if !(self.learning_rate > 0.0) || !(self.proj_learning_rate > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.batch_size == 0 || self.eval_interval == 0 || self.patience == 0 {
            return bad("batch_size, eval_interval and patience must be at least 1".into());
        }
        if !(self.margin >= 0.0) || !(self.min_delta >= 0.0) {
            return bad("margin and min_delta must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad(format!(
                "invalid Adam constants beta1={} beta2={} eps={}",
                self.adam_beta1, self.adam_beta2, self.adam_eps
            ));
        }
        Ok(())
    }
}

fn log_sigmoid(x: f64) -> f64 {
    -((-x.abs()).exp().ln_1p() + (-x).max(0.0))
}

/// −[y ln σ(s) + (1−y) ln(1−σ(s))], stable for large |s|.
pub fn classification_loss(score: f64, label: f64) -> f64 {
    -(label * log_sigmoid(score) + (1.0 - label) * log_sigmoid(-score))
}

/// max(0, margin − (s⁺ − s⁻)).
pub fn pairwise_loss(score_pos: f64, score_neg: f64, margin: f64) -> f64 {
    (margin - (score_pos - score_neg)).max(0.0)
}

/// Records the classification loss of a scalar score.
pub fn record_classification_loss(tape: &mut Tape, score: Var, label: f64, link: Link) -> Result<Var> {
    match link {
        Link::Sigmoid => tape.bce_with_logits(score, label),
        Link::Softmax2 => {
            if label != 0.0 && label != 1.0 {
                return Err(NeurankError::Contract(format!("softmax link needs a 0/1 label, got {label}")));
            }
            let zero = tape.constant(Tensor::zeros(&[1, 1]));
            let s = tape.reshape(score, &[1, 1])?;
            let logits = tape.concat_cols(&[zero, s])?;
            tape.cross_entropy_rows(logits, &[label as usize])
        }
    }
}

pub fn record_pairwise_loss(tape: &mut Tape, pos: Var, neg: Var, margin: f64) -> Result<Var> {
    tape.hinge(pos, neg, margin)
}

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub lr: f64,
    pub proj_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, proj_lr: f64) -> Self {
        AdamState {
            t: 0,
            lr,
            proj_lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        AdamState {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            ..AdamState::new(cfg.learning_rate, cfg.proj_learning_rate)
        }
    }
}

/// One bias-corrected Adam update of every trainable tensor from its stored gradient.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        if !p.requires_grad() {
            continue;
        }
        let Some(g) = p.grad().map(<[f64]>::to_vec) else {
            return Err(NeurankError::Contract(format!("no gradient for trainable parameter `{name}`")));
        };
        let n = p.numel();
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        if m.len() != n || g.len() != n {
            return Err(NeurankError::Shape {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: vec![m.len()],
            });
        }
        let lr = if name.starts_with(PROJ_PREFIX) { state.proj_lr } else { state.lr };
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            *x -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub split: Split,
    pub loss: f64,
}

pub fn format_log(rows: &[LogRow]) -> String {
    let mut out = String::from("step,split,loss\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.step, r.split, r.loss));
    }
    out
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let text = format_log(rows);
    write_atomic(path, |w| w.write_all(text.as_bytes()))
}

/// Tokenized (query, positive, negative) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Triple {
    pub query: Vec<String>,
    pub pos: Vec<String>,
    pub neg: Vec<String>,
}

impl Triple {
    pub fn from_record(r: &TripleRecord) -> Self {
        Triple {
            query: tokenize(&r.query),
            pos: tokenize(&r.positive),
            neg: tokenize(&r.negative),
        }
    }
}

/// A (query, document, 0/1 label) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub query: Vec<String>,
    pub doc: Vec<String>,
    pub label: f64,
}

/// Each triple yields one positive and one negative example.
pub fn examples_from_triples(triples: &[Triple]) -> Vec<Example> {
    triples
        .iter()
        .flat_map(|t| {
            [
                Example {
                    query: t.query.clone(),
                    doc: t.pos.clone(),
                    label: 1.0,
                },
                Example {
                    query: t.query.clone(),
                    doc: t.neg.clone(),
                    label: 0.0,
                },
            ]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub steps: usize,
    pub best_step: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
}

/// Mean classification loss of the current model over `inputs`. Both links
/// give the same value: softmax over `[0, s]` is σ(s).
pub fn validation_loss(ranker: &Ranker, inputs: &[(PairInput, f64)]) -> Result<f64> {
    let mut total = 0.0;
    for (input, label) in inputs {
        total += classification_loss(ranker.score_input(input)?.score, *label);
    }
    Ok(total / inputs.len().max(1) as f64)
}

enum Pool {
    Pointwise(Vec<(PairInput, f64)>),
    Pairwise(Vec<(PairInput, PairInput)>),
}

impl Pool {
    fn len(&self) -> usize {
        match self {
            Pool::Pointwise(v) => v.len(),
            Pool::Pairwise(v) => v.len(),
        }
    }
}

/// Fine-tunes `ranker` in place. Validation loss (mean classification loss
/// over `val`) is measured every `eval_interval` steps and at the last step;
/// training stops after `patience` evaluations without improvement, and the
/// parameters of the best evaluation are restored.
pub fn train(ranker: &mut Ranker, triples: &[Triple], val: &[Example], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if triples.is_empty() {
        return Err(NeurankError::Config("no training triples".into()));
    }
    let pool = match cfg.loss {
        LossKind::Classification => Pool::Pointwise(
            examples_from_triples(triples)
                .iter()
                .map(|e| Ok((ranker.prepare(&e.query, &e.doc)?, e.label)))
                .collect::<Result<_>>()?,
        ),
        LossKind::Pairwise => Pool::Pairwise(
            triples
                .iter()
                .map(|t| Ok((ranker.prepare(&t.query, &t.pos)?, ranker.prepare(&t.query, &t.neg)?)))
                .collect::<Result<_>>()?,
        ),
    };
    let val_inputs: Vec<(PairInput, f64)> = val
        .iter()
        .map(|e| Ok((ranker.prepare(&e.query, &e.doc)?, e.label)))
        .collect::<Result<_>>()?;

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d20f);
    let mut adam = AdamState::from_config(cfg);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut order_rng);
    let mut cursor = 0;

    let mut log = Vec::new();
    let mut best: Option<(usize, f64, ParamSet)> = None;
    let mut bad_evals = 0;
    let mut interval_loss = 0.0;
    let mut interval_steps = 0;
    let mut stopped_early = false;
    let mut step = 0;

    while step < cfg.max_steps {
        step += 1;
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let mut tape = Tape::new();
        let b = ranker.params.bind(&mut tape);
        let mut losses = Vec::with_capacity(batch.len());
        for &i in &batch {
            let loss = match &pool {
                Pool::Pointwise(v) => {
                    let (input, label) = &v[i];
                    let s = ranker.forward(&mut tape, &b, input, Some(&mut dropout_rng))?.score;
                    record_classification_loss(&mut tape, s, *label, cfg.link)?
                }
                Pool::Pairwise(v) => {
                    let (pos, neg) = &v[i];
                    let sp = ranker.forward(&mut tape, &b, pos, Some(&mut dropout_rng))?.score;
                    let sn = ranker.forward(&mut tape, &b, neg, Some(&mut dropout_rng))?.score;
                    record_pairwise_loss(&mut tape, sp, sn, cfg.margin)?
                }
            };
            losses.push(loss);
        }
        let total = tape.add_all(&losses)?.expect("batch is non-empty");
        let loss = tape.scale(total, 1.0 / batch.len() as f64);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(NeurankError::NonFiniteLoss { step });
        }
        let grads = tape.backward(loss)?;
        ranker.params.zero_grads();
        ranker.params.accumulate_grads(&b, &grads)?;
        adam_step(&mut ranker.params, &mut adam)?;
        ranker.params.zero_grads();
        interval_loss += value;
        interval_steps += 1;

        if step % cfg.eval_interval == 0 || step == cfg.max_steps {
            log.push(LogRow {
                step,
                split: Split::Train,
                loss: interval_loss / interval_steps as f64,
            });
            interval_loss = 0.0;
            interval_steps = 0;
            if val_inputs.is_empty() {
                continue;
            }
            let v = validation_loss(ranker, &val_inputs)?;
            if !v.is_finite() {
                return Err(NeurankError::NonFiniteLoss { step });
            }
            log.push(LogRow {
                step,
                split: Split::Val,
                loss: v,
            });
            log::info!("step {step}: validation loss {v:.6}");
            match &best {
                Some((_, bv, _)) if v >= bv - cfg.min_delta => {
                    bad_evals += 1;
                    if bad_evals >= cfg.patience {
                        stopped_early = true;
                        break;
                    }
                }
                _ => {
                    best = Some((step, v, ranker.params.clone()));
                    bad_evals = 0;
                }
            }
        }
    }

    let (best_step, best_val_loss) = match best {
        Some((s, v, params)) => {
            ranker.params = params;
            (Some(s), Some(v))
        }
        None => (None, None),
    };
    Ok(TrainOutcome {
        log,
        steps: step,
        best_step,
        best_val_loss,
        stopped_early,
    })
}

#[cfg(test)]
mod tests;

//! Heads on the Transformer encoder.

use std::ops::RangeInclusive;

use rand_chacha::ChaCha8Rng;

use super::{frozen_eval, PairInput, Ranker, RankerConfig, RankerKind, ScoreBreakdown, ScoreVars};
use crate::encoder::{encoder_forward, truncated_normal, EncoderConfig, INIT_STD};
use crate::error::{NeurankError, Result};
use crate::tensor::{Bindings, ParamSet, Tape, Tensor, Var};
use crate::text::{Side, TokenSequence};

pub const LAST_W: &str = "head/w";

pub fn mult_w(k: usize) -> String {
    format!("head/w_mult/layer{k:02}")
}

pub fn proj(k: usize) -> String {
    format!("head/proj/layer{k:02}")
}

pub fn trans_w(k: usize) -> String {
    format!("head/w_trans/layer{k:02}")
}

pub(super) fn init_head(enc: &EncoderConfig, cfg: &RankerConfig, rng: &mut ChaCha8Rng) -> Result<ParamSet> {
    let h = enc.hidden;
    let mut p = ParamSet::new();
    match cfg.ranker {
        RankerKind::LastInt => p.insert(LAST_W, truncated_normal(rng, INIT_STD, &[h, 1])),
        RankerKind::MultInt => {
            for k in cfg.layer_range(enc)? {
                p.insert(mult_w(k), truncated_normal(rng, INIT_STD, &[h, 1]));
            }
        }
        RankerKind::TermTrans => {
            let width = cfg.proj_width(enc);
            for k in cfg.layer_range(enc)? {
                p.insert(proj(k), truncated_normal(rng, INIT_STD, &[h, width]));
                p.insert(trans_w(k), Tensor::vector(vec![1.0]));
            }
        }
        _ => {}
    }
    p.set_requires_grad(true);
    Ok(p)
}

fn require(p: &Bindings, name: &str) -> Result<Var> {
    p.get(name)
        .ok_or_else(|| NeurankError::Config(format!("model has no parameter `{name}` for this layer range")))
}

fn cls_dot(tape: &mut Tape, hidden: Var, w: Var) -> Result<Var> {
    let cls = tape.select_rows(hidden, &[0])?;
    let s = tape.matmul(cls, w)?;
    tape.reshape(s, &[])
}

pub(super) fn rep(
    tape: &mut Tape,
    p: &Bindings,
    enc: &EncoderConfig,
    q: &TokenSequence,
    d: &TokenSequence,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<ScoreVars> {
    let hq = encoder_forward(tape, p, enc, q, dropout.as_deref_mut())?;
    let hd = encoder_forward(tape, p, enc, d, dropout)?;
    let last = enc.layers;
    let cq = tape.select_rows(hq.hidden[last], &[0])?;
    let cd = tape.select_rows(hd.hidden[last], &[0])?;
    let c = tape.cosine_matrix(cq, cd)?;
    let score = tape.reshape(c, &[])?;
    Ok(ScoreVars {
        score,
        layers: vec![last],
        parts: vec![score],
        features: Vec::new(),
    })
}

pub(super) fn last_int(
    tape: &mut Tape,
    p: &Bindings,
    enc: &EncoderConfig,
    qd: &TokenSequence,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<ScoreVars> {
    let trace = encoder_forward(tape, p, enc, qd, dropout)?;
    let score = cls_dot(tape, trace.hidden[enc.layers], require(p, LAST_W)?)?;
    Ok(ScoreVars {
        score,
        layers: vec![enc.layers],
        parts: vec![score],
        features: Vec::new(),
    })
}

pub(super) fn mult_int(
    tape: &mut Tape,
    p: &Bindings,
    enc: &EncoderConfig,
    qd: &TokenSequence,
    layers: RangeInclusive<usize>,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<ScoreVars> {
    check_range(&layers, enc)?;
    let trace = encoder_forward(tape, p, enc, qd, dropout)?;
    let mut parts = Vec::new();
    for k in layers.clone() {
        parts.push(cls_dot(tape, trace.hidden[k], require(p, &mult_w(k))?)?);
    }
    let score = tape.add_all(&parts)?.expect("range checked non-empty");
    Ok(ScoreVars {
        score,
        layers: layers.collect(),
        parts,
        features: Vec::new(),
    })
}

pub(super) fn term_trans(
    tape: &mut Tape,
    p: &Bindings,
    enc: &EncoderConfig,
    input: &PairInput,
    layers: RangeInclusive<usize>,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<ScoreVars> {
    check_range(&layers, enc)?;
    let (q_hidden, d_hidden, q_pos, d_pos) = match input {
        PairInput::Joint(qd) => {
            let trace = encoder_forward(tape, p, enc, qd, dropout)?;
            let q_pos = qd.content_positions(Side::Query);
            let d_pos = qd.content_positions(Side::Document);
            (trace.hidden.clone(), trace.hidden, q_pos, d_pos)
        }
        PairInput::Separate { query, doc } => {
            let tq = encoder_forward(tape, p, enc, query, dropout.as_deref_mut())?;
            let td = encoder_forward(tape, p, enc, doc, dropout)?;
            (
                tq.hidden,
                td.hidden,
                query.content_positions(Side::Query),
                doc.content_positions(Side::Query),
            )
        }
        PairInput::Tokens { .. } => {
            return Err(NeurankError::Contract("term-trans needs encoder input".into()));
        }
    };

    let layer_list: Vec<usize> = layers.collect();
    if q_pos.is_empty() || d_pos.is_empty() {
        log::warn!("term-trans: query or document has no content tokens; score is 0");
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(ScoreVars {
            score: zero,
            parts: vec![zero; layer_list.len()],
            features: vec![zero; layer_list.len()],
            layers: layer_list,
        });
    }

    let mut parts = Vec::with_capacity(layer_list.len());
    let mut features = Vec::with_capacity(layer_list.len());
    for &k in &layer_list {
        let pk = require(p, &proj(k))?;
        let qk = tape.select_rows(q_hidden[k], &q_pos)?;
        let dk = tape.select_rows(d_hidden[k], &d_pos)?;
        let qk = tape.matmul(qk, pk)?;
        let qk = tape.relu(qk);
        let dk = tape.matmul(dk, pk)?;
        let dk = tape.relu(dk);
        let m = tape.cosine_matrix(qk, dk)?;
        let s = tape.mean(m);
        features.push(s);
        parts.push(tape.mul_scalar(require(p, &trans_w(k))?, s)?);
    }
    let score = tape.add_all(&parts)?.expect("range checked non-empty");
    Ok(ScoreVars {
        score,
        layers: layer_list,
        parts,
        features,
    })
}

fn check_range(layers: &RangeInclusive<usize>, enc: &EncoderConfig) -> Result<()> {
    if layers.is_empty() || *layers.end() > enc.layers {
        return Err(NeurankError::Config(format!(
            "layer range {}..={} is empty or outside 0..={}",
            layers.start(),
            layers.end(),
            enc.layers
        )));
    }
    Ok(())
}

fn expect_kind(ranker: &Ranker, kind: RankerKind) -> Result<()> {
    if ranker.kind() != kind {
        return Err(NeurankError::Contract(format!(
            "model is `{}`, not `{kind}`",
            ranker.kind()
        )));
    }
    Ok(())
}

/// Cosine of the final-layer `[CLS]` states of query and document encoded apart.
pub fn score_rep(ranker: &Ranker, q: &TokenSequence, d: &TokenSequence) -> Result<ScoreBreakdown> {
    expect_kind(ranker, RankerKind::Rep)?;
    frozen_eval(ranker, |tape, b| rep(tape, b, &ranker.encoder, &q.trimmed(), &d.trimmed(), None))
}

pub fn score_last_int(ranker: &Ranker, qd: &TokenSequence) -> Result<ScoreBreakdown> {
    expect_kind(ranker, RankerKind::LastInt)?;
    frozen_eval(ranker, |tape, b| last_int(tape, b, &ranker.encoder, &qd.trimmed(), None))
}

pub fn score_mult_int(ranker: &Ranker, qd: &TokenSequence, layers: RangeInclusive<usize>) -> Result<ScoreBreakdown> {
    expect_kind(ranker, RankerKind::MultInt)?;
    frozen_eval(ranker, |tape, b| mult_int(tape, b, &ranker.encoder, &qd.trimmed(), layers, None))
}

/// Term-Trans on a concatenated pair sequence.
pub fn score_term_trans(
    ranker: &Ranker,
    qd: &TokenSequence,
    layers: RangeInclusive<usize>,
) -> Result<ScoreBreakdown> {
    expect_kind(ranker, RankerKind::TermTrans)?;
    let input = PairInput::Joint(qd.trimmed());
    frozen_eval(ranker, |tape, b| term_trans(tape, b, &ranker.encoder, &input, layers, None))
}

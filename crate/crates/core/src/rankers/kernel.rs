//! K-NRM and Conv-KNRM: Gaussian kernel pooling over a word-level
//! translation matrix, followed by `tanh(w·φ + b)`.

use rand_chacha::ChaCha8Rng;

use super::{frozen_eval, ConvActivation, Ranker, RankerConfig, RankerKind, ScoreBreakdown, ScoreVars};
use crate::encoder::{truncated_normal, EncoderConfig};
use crate::error::{NeurankError, Result};
use crate::tensor::{Bindings, ParamSet, Tape, Tensor, Var};

pub const KERNEL_FLOOR: f64 = 1e-10;
pub const EMBEDDING: &str = "head/embedding";
pub const KERNEL_W: &str = "head/kernel_w";
pub const KERNEL_B: &str = "head/kernel_b";

const EMBED_STD: f64 = 0.1;
const KERNEL_W_STD: f64 = 1e-3;

pub fn conv_w(n: usize) -> String {
    format!("head/conv/n{n}/w")
}

pub fn conv_b(n: usize) -> String {
    format!("head/conv/n{n}/b")
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    pub mus: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub floor: f64,
}

impl KernelBank {
    pub fn new(mus: Vec<f64>, sigmas: Vec<f64>, floor: f64) -> Result<Self> {
        if mus.is_empty() || mus.len() != sigmas.len() {
            return Err(NeurankError::Config(format!(
                "kernel bank needs matching non-empty means and widths (got {} and {})",
                mus.len(),
                sigmas.len()
            )));
        }
        if sigmas.iter().any(|&s| !(s > 0.0) || !s.is_finite()) || !(floor > 0.0) {
            return Err(NeurankError::Config("kernel widths and floor must be positive".into()));
        }
        Ok(KernelBank { mus, sigmas, floor })
    }

    pub fn len(&self) -> usize {
        self.mus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mus.is_empty()
    }
}

/// One exact-match kernel (μ = 1, σ = 10⁻³) and ten soft-match kernels
/// at μ = 0.9, 0.7, …, −0.9 with σ = 0.1.
pub fn default_kernel_bank() -> KernelBank {
    let mut mus = vec![1.0];
    let mut sigmas = vec![1e-3];
    for i in 0..10 {
        mus.push((9 - 2 * i) as f64 / 10.0);
        sigmas.push(0.1);
    }
    KernelBank {
        mus,
        sigmas,
        floor: KERNEL_FLOOR,
    }
}

fn feature_len(cfg: &RankerConfig) -> usize {
    match cfg.ranker {
        RankerKind::ConvKnrm => cfg.kernel_mus.len() * cfg.max_ngram * cfg.max_ngram,
        _ => cfg.kernel_mus.len(),
    }
}

pub(super) fn init_head(enc: &EncoderConfig, cfg: &RankerConfig, rng: &mut ChaCha8Rng) -> Result<ParamSet> {
    let e = cfg.embed_dim;
    let mut p = ParamSet::new();
    p.insert(EMBEDDING, truncated_normal(rng, EMBED_STD, &[enc.vocab_size, e]));
    if cfg.ranker == RankerKind::ConvKnrm {
        for n in 1..=cfg.max_ngram {
            let std = 1.0 / ((n * e) as f64).sqrt();
            p.insert(conv_w(n), truncated_normal(rng, std, &[n * e, cfg.conv_filters]));
            p.insert(conv_b(n), Tensor::zeros(&[cfg.conv_filters]));
        }
    }
    p.insert(KERNEL_W, truncated_normal(rng, KERNEL_W_STD, &[feature_len(cfg), 1]));
    p.insert(KERNEL_B, Tensor::zeros(&[1]));
    p.set_requires_grad(true);
    Ok(p)
}

/// `tanh(w·φ + b)` for a flat feature vector `phi`.
fn kernel_head(tape: &mut Tape, p: &Bindings, phi: Var) -> Result<Var> {
    let n = tape.value(phi).numel();
    let row = tape.reshape(phi, &[1, n])?;
    let lin = tape.matmul(row, p.require(KERNEL_W)?)?;
    let lin = tape.reshape(lin, &[])?;
    let b = tape.reshape(p.require(KERNEL_B)?, &[])?;
    let z = tape.add(lin, b)?;
    Ok(tape.tanh(z))
}

fn finish(tape: &mut Tape, p: &Bindings, phi: Var) -> Result<ScoreVars> {
    let score = kernel_head(tape, p, phi)?;
    Ok(ScoreVars {
        score,
        layers: Vec::new(),
        parts: vec![score],
        features: vec![phi],
    })
}

pub(super) fn knrm(tape: &mut Tape, p: &Bindings, bank: &KernelBank, q: &[usize], d: &[usize]) -> Result<ScoreVars> {
    let phi = if q.is_empty() || d.is_empty() {
        tape.constant(Tensor::zeros(&[bank.len()]))
    } else {
        let emb = p.require(EMBEDDING)?;
        let eq = tape.select_rows(emb, q)?;
        let ed = tape.select_rows(emb, d)?;
        let m = tape.cosine_matrix(eq, ed)?;
        tape.kernel_pool(m, &bank.mus, &bank.sigmas, bank.floor)?
    };
    finish(tape, p, phi)
}

/// n-gram representations for n = 1..=max_ngram; `None` where the text is
/// shorter than n.
fn ngrams(
    tape: &mut Tape,
    p: &Bindings,
    ids: &[usize],
    max_ngram: usize,
    activation: ConvActivation,
) -> Result<Vec<Option<Var>>> {
    if ids.is_empty() {
        return Ok(vec![None; max_ngram]);
    }
    let emb = tape.select_rows(p.require(EMBEDDING)?, ids)?;
    let mut out = Vec::with_capacity(max_ngram);
    for n in 1..=max_ngram {
        if ids.len() < n {
            out.push(None);
            continue;
        }
        let windows = tape.unfold_rows(emb, n)?;
        let c = tape.matmul(windows, p.require(&conv_w(n))?)?;
        let c = tape.add_row(c, p.require(&conv_b(n))?)?;
        out.push(Some(match activation {
            ConvActivation::Relu => tape.relu(c),
            ConvActivation::Identity => c,
        }));
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv_knrm(
    tape: &mut Tape,
    p: &Bindings,
    bank: &KernelBank,
    max_ngram: usize,
    activation: ConvActivation,
    q: &[usize],
    d: &[usize],
) -> Result<ScoreVars> {
    if max_ngram == 0 {
        return Err(NeurankError::Config("max_ngram must be positive".into()));
    }
    let qn = ngrams(tape, p, q, max_ngram, activation)?;
    let dn = ngrams(tape, p, d, max_ngram, activation)?;
    let nk = bank.len();
    let mut blocks = Vec::with_capacity(max_ngram * max_ngram);
    for a in &qn {
        for b in &dn {
            let block = match (a, b) {
                (Some(a), Some(b)) => {
                    let m = tape.cosine_matrix(*a, *b)?;
                    let f = tape.kernel_pool(m, &bank.mus, &bank.sigmas, bank.floor)?;
                    tape.reshape(f, &[1, nk])?
                }
                _ => tape.constant(Tensor::zeros(&[1, nk])),
            };
            blocks.push(block);
        }
    }
    let phi = if blocks.len() == 1 {
        blocks[0]
    } else {
        tape.concat_cols(&blocks)?
    };
    let phi = tape.reshape(phi, &[nk * max_ngram * max_ngram])?;
    finish(tape, p, phi)
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

/// K-NRM on vocabulary ids. An empty side scores `tanh(b)`.
pub fn knrm_score(ranker: &Ranker, q: &[usize], d: &[usize]) -> Result<ScoreBreakdown> {
    expect_kind(ranker, RankerKind::Knrm)?;
    let bank = ranker.config.kernel_bank()?;
    frozen_eval(ranker, |tape, b| knrm(tape, b, &bank, q, d))
}

pub fn conv_knrm_score(ranker: &Ranker, q: &[usize], d: &[usize], max_ngram: usize) -> Result<ScoreBreakdown> {
    expect_kind(ranker, RankerKind::ConvKnrm)?;
    let bank = ranker.config.kernel_bank()?;
    let act = ranker.config.conv_activation;
    frozen_eval(ranker, |tape, b| conv_knrm(tape, b, &bank, max_ngram, act, q, d))
}

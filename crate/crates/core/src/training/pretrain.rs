//! Mask-LM and next-sequence pretraining of the encoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adam_step, AdamState, LogRow, Split};
use crate::encoder::{encoder_forward, names, truncated_normal, EncoderConfig, INIT_STD};
use crate::error::{NeurankError, Result};
use crate::tensor::{Bindings, ParamSet, Tape, Tensor, Var};
use crate::text::{encode_pair, is_marker, TokenSequence, Vocabulary, MASK, RESERVED};

pub const MLM_BIAS: &str = "pretrain/mlm_bias";
pub const NSP_W: &str = "pretrain/nsp_w";
pub const NSP_B: &str = "pretrain/nsp_b";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub mask_rate: f64,
    pub pretrain_seed: u64,
    pub pretrain_log_interval: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            pretrain_steps: 500,
            pretrain_batch: 8,
            pretrain_lr: 1e-3,
            mask_rate: 0.15,
            pretrain_seed: 7,
            pretrain_log_interval: 50,
        }
    }
}

/// Masked copies of input sequences with the positions to predict.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequences {
    pub inputs: Vec<TokenSequence>,
    pub positions: Vec<Vec<usize>>,
    /// Original ids at `positions`.
    pub targets: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainBatch {
    pub masked: MaskedSequences,
    /// 1 when the two passages are adjacent in the corpus.
    pub next_labels: Vec<u8>,
}

/// Selects each real, non-marker position with probability `rate`; a selected
/// position becomes `[MASK]` (80%), a random non-reserved token (10%) or
/// stays unchanged (10%).
pub fn mask_lm_batch(sequences: &[TokenSequence], vocab_size: usize, rate: f64, seed: u64) -> Result<MaskedSequences> {
    if !(0.0..1.0).contains(&rate) {
        return Err(NeurankError::Config(format!("mask rate {rate} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = if vocab_size > RESERVED.len() { RESERVED.len() } else { 0 };
    let mut out = MaskedSequences {
        inputs: Vec::with_capacity(sequences.len()),
        positions: Vec::with_capacity(sequences.len()),
        targets: Vec::with_capacity(sequences.len()),
    };
    for seq in sequences {
        let mut input = seq.clone();
        let (mut pos, mut tgt) = (Vec::new(), Vec::new());
        for p in 0..seq.len() {
            if seq.mask[p] == 0 || is_marker(seq.ids[p]) || !rng.gen_bool(rate) {
                continue;
            }
            pos.push(p);
            tgt.push(seq.ids[p]);
            let u: f64 = rng.gen();
            if u < 0.8 {
                input.ids[p] = MASK;
            } else if u < 0.9 {
                input.ids[p] = rng.gen_range(lo..vocab_size);
            }
        }
        out.inputs.push(input);
        out.positions.push(pos);
        out.targets.push(tgt);
    }
    Ok(out)
}

/// `n` passage pairs: with probability 1/2 a passage and its successor
/// (label 1), otherwise a passage and a random non-successor (label 0).
pub fn next_seq_batch(
    passages: &[Vec<String>],
    n: usize,
    vocab: &Vocabulary,
    max_len: usize,
    seed: u64,
) -> Result<Vec<(TokenSequence, u8)>> {
    if passages.len() < 2 {
        return Err(NeurankError::Config(format!(
            "next-sequence pairs need at least 2 passages, corpus has {}",
            passages.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = passages.len() - 1;
    (0..n)
        .map(|_| {
            let i = rng.gen_range(0..last);
            let (j, label) = if rng.gen_bool(0.5) {
                (i + 1, 1)
            } else {
                let mut j = rng.gen_range(0..last);
                if j >= i + 1 {
                    j += 1;
                }
                (j, 0)
            };
            Ok((encode_pair(&passages[i], &passages[j], vocab, max_len)?.trimmed(), label))
        })
        .collect()
}

pub fn pretrain_batch(
    passages: &[Vec<String>],
    n: usize,
    vocab: &Vocabulary,
    max_len: usize,
    rate: f64,
    seed: u64,
) -> Result<PretrainBatch> {
    let pairs = next_seq_batch(passages, n, vocab, max_len, seed)?;
    let (seqs, labels): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    Ok(PretrainBatch {
        masked: mask_lm_batch(&seqs, vocab.len(), rate, seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 1)?,
        next_labels: labels,
    })
}

/// Adds the Mask-LM output bias and next-sequence classifier if absent.
/// The Mask-LM decoder reuses the token embedding matrix.
pub fn init_pretrain_head(params: &mut ParamSet, enc: &EncoderConfig, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if !params.contains(MLM_BIAS) {
        params.insert(MLM_BIAS, Tensor::zeros(&[enc.vocab_size]).with_requires_grad(true));
    }
    if !params.contains(NSP_W) {
        params.insert(NSP_W, truncated_normal(&mut rng, INIT_STD, &[enc.hidden, 1]).with_requires_grad(true));
    }
    if !params.contains(NSP_B) {
        params.insert(NSP_B, Tensor::zeros(&[1]).with_requires_grad(true));
    }
}

/// Mean over the batch of (Mask-LM cross-entropy + next-sequence BCE).
fn batch_loss(tape: &mut Tape, b: &Bindings, enc: &EncoderConfig, batch: &PretrainBatch) -> Result<Var> {
    let mut losses = Vec::new();
    for (i, seq) in batch.masked.inputs.iter().enumerate() {
        let trace = encoder_forward(tape, b, enc, seq, None)?;
        let top = trace.hidden[enc.layers];
        let positions = &batch.masked.positions[i];
        if !positions.is_empty() {
            let h = tape.select_rows(top, positions)?;
            let logits = tape.matmul_nt(h, b.require(names::TOKEN)?)?;
            let logits = tape.add_row(logits, b.require(MLM_BIAS)?)?;
            losses.push(tape.cross_entropy_rows(logits, &batch.masked.targets[i])?);
        }
        let cls = tape.select_rows(top, &[0])?;
        let z = tape.matmul(cls, b.require(NSP_W)?)?;
        let z = tape.reshape(z, &[1])?;
        let z = tape.add(z, b.require(NSP_B)?)?;
        losses.push(tape.bce_with_logits(z, batch.next_labels[i] as f64)?);
    }
    let total = tape.add_all(&losses)?.expect("at least one loss per sequence");
    Ok(tape.scale(total, 1.0 / batch.masked.inputs.len() as f64))
}

/// Pretrains encoder parameters in place; returns the loss log (mean loss
/// per `pretrain_log_interval` steps).
pub fn pretrain(
    params: &mut ParamSet,
    enc: &EncoderConfig,
    vocab: &Vocabulary,
    passages: &[Vec<String>],
    max_len: usize,
    cfg: &PretrainConfig,
) -> Result<Vec<LogRow>> {
    if cfg.pretrain_batch == 0 || cfg.pretrain_log_interval == 0 || !(cfg.pretrain_lr > 0.0) {
        return Err(NeurankError::Config(
            "pretrain_batch and pretrain_log_interval must be at least 1, pretrain_lr positive".into(),
        ));
    }
    if enc.vocab_size != vocab.len() {
        return Err(NeurankError::Config(format!(
            "encoder vocab_size {} does not match vocabulary of {}",
            enc.vocab_size,
            vocab.len()
        )));
    }
    init_pretrain_head(params, enc, cfg.pretrain_seed);
    let mut adam = AdamState::new(cfg.pretrain_lr, cfg.pretrain_lr);
    let mut log = Vec::new();
    let mut acc = (0.0, 0usize);
    for step in 1..=cfg.pretrain_steps {
        let seed = cfg.pretrain_seed.wrapping_mul(1_000_003).wrapping_add(step as u64);
        let batch = pretrain_batch(passages, cfg.pretrain_batch, vocab, max_len, cfg.mask_rate, seed)?;
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let loss = batch_loss(&mut tape, &b, enc, &batch)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(NeurankError::NonFiniteLoss { step });
        }
        let grads = tape.backward(loss)?;
        params.zero_grads();
        params.accumulate_grads(&b, &grads)?;
        adam_step(params, &mut adam)?;
        params.zero_grads();
        acc = (acc.0 + value, acc.1 + 1);
        if step % cfg.pretrain_log_interval == 0 || step == cfg.pretrain_steps {
            log.push(LogRow {
                step,
                split: Split::Train,
                loss: acc.0 / acc.1 as f64,
            });
            acc = (0.0, 0);
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{encode_single, CLS, PAD, SEP};

    fn vocab() -> Vocabulary {
        let words: Vec<String> = (0..100).map(|i| format!("w{i}")).collect();
        Vocabulary::build([words.join(" ")], 1, 200).unwrap()
    }

    fn passages(n: usize) -> Vec<Vec<String>> {
        (0..n).map(|i| (0..4).map(|j| format!("w{}", (i * 3 + j) % 100)).collect()).collect()
    }

    #[test]
    fn rate_zero_masks_nothing() {
        let v = vocab();
        let seq = encode_single(&["w1", "w2", "w3"], &v, 8).unwrap();
        let m = mask_lm_batch(&[seq.clone()], v.len(), 0.0, 1).unwrap();
        assert!(m.positions[0].is_empty());
        assert_eq!(m.inputs[0], seq);
    }

    #[test]
    fn masking_rate_and_split() {
        let v = vocab();
        let words: Vec<String> = (0..60).map(|i| format!("w{}", i % 30)).collect();
        let seqs: Vec<_> = (0..200).map(|_| encode_single(&words, &v, 64).unwrap()).collect();
        let real: usize = seqs.iter().map(|s| s.real_len() - 2).sum();
        assert!(real >= 10_000);
        let m = mask_lm_batch(&seqs, v.len(), 0.15, 3).unwrap();
        let chosen: usize = m.positions.iter().map(Vec::len).sum();
        let rate = chosen as f64 / real as f64;
        assert!((rate - 0.15).abs() < 0.01, "{rate}");
        let (mut masked, mut same) = (0, 0);
        for (i, pos) in m.positions.iter().enumerate() {
            for (&p, &t) in pos.iter().zip(&m.targets[i]) {
                assert_eq!(seqs[i].ids[p], t);
                assert!(![CLS, SEP, PAD].contains(&t));
                match m.inputs[i].ids[p] {
                    MASK => masked += 1,
                    id if id == t => same += 1,
                    id => assert!(id >= RESERVED.len()),
                }
            }
        }
        let frac = masked as f64 / chosen as f64;
        assert!((frac - 0.8).abs() < 0.03, "{frac}");
        // unchanged covers the 10% keep plus random draws that hit the original
        assert!(same as f64 / chosen as f64 > 0.07);
    }

    #[test]
    fn markers_and_padding_are_never_selected() {
        let v = vocab();
        let seq = encode_pair(&["w1"], &["w2", "w3"], &v, 12).unwrap();
        let m = mask_lm_batch(&vec![seq.clone(); 500], v.len(), 0.5, 9).unwrap();
        for pos in &m.positions {
            for &p in pos {
                assert_eq!(seq.mask[p], 1);
                assert!(!is_marker(seq.ids[p]));
            }
        }
    }

    #[test]
    fn masking_is_seeded() {
        let v = vocab();
        let seqs = vec![encode_single(&["w1", "w2", "w3", "w4"], &v, 8).unwrap(); 50];
        assert_eq!(mask_lm_batch(&seqs, v.len(), 0.3, 5).unwrap(), mask_lm_batch(&seqs, v.len(), 0.3, 5).unwrap());
    }

    #[test]
    fn next_sequence_pairs() {
        let v = vocab();
        let ps = passages(20);
        let pairs = next_seq_batch(&ps, 10_000, &v, 16, 4).unwrap();
        let ones = pairs.iter().filter(|(_, l)| *l == 1).count() as f64;
        assert!((ones / 10_000.0 - 0.5).abs() < 0.02);
        for (seq, label) in pairs.iter().take(200) {
            assert_eq!(seq.ids[0], CLS);
            assert_eq!(seq.ids.iter().filter(|&&i| i == SEP).count(), 2);
            let q: Vec<&str> = seq.ids[1..5].iter().map(|&i| v.token(i).unwrap()).collect();
            let d: Vec<&str> = seq.ids[6..10].iter().map(|&i| v.token(i).unwrap()).collect();
            let i = ps.iter().position(|p| p.iter().map(String::as_str).eq(q.iter().copied())).unwrap();
            let adjacent = ps[i + 1].iter().map(String::as_str).eq(d.iter().copied());
            assert_eq!(adjacent, *label == 1);
        }
        assert!(matches!(next_seq_batch(&ps[..1], 1, &v, 16, 0), Err(NeurankError::Config(_))));
    }

    #[test]
    fn pretraining_reduces_loss_and_is_deterministic() {
        let v = vocab();
        let enc = EncoderConfig {
            layers: 1,
            hidden: 16,
            heads: 2,
            ff_dim: 32,
            max_positions: 16,
            vocab_size: v.len(),
            ..Default::default()
        };
        let cfg = PretrainConfig {
            pretrain_steps: 60,
            pretrain_log_interval: 20,
            pretrain_lr: 3e-3,
            ..Default::default()
        };
        let ps = passages(12);
        let mut a = crate::encoder::init_params(&enc, 1).unwrap();
        let log = pretrain(&mut a, &enc, &v, &ps, 12, &cfg).unwrap();
        assert_eq!(log.len(), 3);
        assert!(log[2].loss < log[0].loss, "{log:?}");
        let mut b = crate::encoder::init_params(&enc, 1).unwrap();
        assert_eq!(pretrain(&mut b, &enc, &v, &ps, 12, &cfg).unwrap(), log);
        assert_eq!(a, b);
        assert!(a.contains(MLM_BIAS) && a.contains(NSP_W));
    }

    #[test]
    fn pretrain_loss_gradients_check() {
        let v = vocab();
        let enc = EncoderConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            ff_dim: 8,
            max_positions: 12,
            vocab_size: v.len(),
            ..Default::default()
        };
        let mut p = crate::encoder::init_params(&enc, 2).unwrap();
        init_pretrain_head(&mut p, &enc, 2);
        let batch = pretrain_batch(&passages(6), 2, &v, 10, 0.4, 3).unwrap();
        let report = crate::tensor::grad_check(&p, 1e-6, |tape, b| batch_loss(tape, b, &enc, &batch)).unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }
}

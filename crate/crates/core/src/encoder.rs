//! Post-layer-norm Transformer encoder that records every layer's hidden
//! states and every head's attention matrix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{NeurankError, Result};
use crate::tensor::{Bindings, ParamSet, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::text::{TokenSequence, RESERVED};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    /// Standard deviation of the truncated-normal initializer.
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 4,
            hidden: 64,
            heads: 4,
            ff_dim: 256,
            max_positions: 128,
            vocab_size: 0,
            dropout: 0.0,
            layer_norm_eps: LAYER_NORM_EPS,
            init_std: INIT_STD,
        }
    }
}

impl EncoderConfig {
    /// 24 layers, 1024 hidden, 16 heads.
    pub fn large(vocab_size: usize) -> Self {
        EncoderConfig {
            layers: 24,
            hidden: 1024,
            heads: 16,
            ff_dim: 4096,
            max_positions: 512,
            vocab_size,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(NeurankError::Config(m));
        if self.layers < 1 {
            return fail("encoder needs at least one layer".into());
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return fail(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.ff_dim == 0 || self.max_positions == 0 {
            return fail("ff_dim and max_positions must be positive".into());
        }
        if self.vocab_size < RESERVED.len() {
            return fail(format!("vocab_size {} smaller than the reserved tokens", self.vocab_size));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return fail(format!("init_std {} must be positive", self.init_std));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Parameter names, all under the `encoder/` prefix.
pub mod names {
    pub const TOKEN: &str = "encoder/embed/token";
    pub const POSITION: &str = "encoder/embed/position";
    pub const SEGMENT: &str = "encoder/embed/segment";
    pub const EMBED_LN_GAIN: &str = "encoder/embed/ln_gain";
    pub const EMBED_LN_BIAS: &str = "encoder/embed/ln_bias";

    pub fn layer(k: usize, leaf: &str) -> String {
        format!("encoder/layer{k:02}/{leaf}")
    }
}

pub(crate) fn truncated_normal(rng: &mut ChaCha8Rng, std: f64, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 3.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Truncated-normal (σ = `init_std`, cut at 3σ) weights and embeddings, zero biases,
/// unit layer-norm gains. Deterministic in `seed`.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = config.hidden;
    let mut p = ParamSet::new();
    let mut normal = |p: &mut ParamSet, name: &str, shape: &[usize]| {
        p.insert(name, truncated_normal(&mut rng, config.init_std, shape).with_requires_grad(true));
    };
    normal(&mut p, names::TOKEN, &[config.vocab_size, h]);
    normal(&mut p, names::POSITION, &[config.max_positions, h]);
    normal(&mut p, names::SEGMENT, &[2, h]);
    for k in 1..=config.layers {
        for w in ["attn/q_w", "attn/k_w", "attn/v_w", "attn/o_w"] {
            normal(&mut p, &names::layer(k, w), &[h, h]);
        }
        normal(&mut p, &names::layer(k, "ff/w1"), &[h, config.ff_dim]);
        normal(&mut p, &names::layer(k, "ff/w2"), &[config.ff_dim, h]);
    }
    let mut fixed = |name: String, len: usize, v: f64| {
        p.insert(name, Tensor::full(&[len], v).with_requires_grad(true));
    };
    fixed(names::EMBED_LN_GAIN.into(), h, 1.0);
    fixed(names::EMBED_LN_BIAS.into(), h, 0.0);
    for k in 1..=config.layers {
        for b in ["attn/q_b", "attn/k_b", "attn/v_b", "attn/o_b", "ff/b2"] {
            fixed(names::layer(k, b), h, 0.0);
        }
        fixed(names::layer(k, "ff/b1"), config.ff_dim, 0.0);
        fixed(names::layer(k, "attn_ln_gain"), h, 1.0);
        fixed(names::layer(k, "attn_ln_bias"), h, 0.0);
        fixed(names::layer(k, "ff_ln_gain"), h, 1.0);
        fixed(names::layer(k, "ff_ln_bias"), h, 0.0);
    }
    Ok(p)
}

/// Tape handles of one forward pass. `hidden[0]` is the embedding output,
/// `hidden[k]` the output of layer k; `attention[k-1][a]` is head a of layer k.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub hidden: Vec<Var>,
    pub attention: Vec<Vec<Var>>,
}

/// Materialized per-layer hidden states and attention matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub hidden: Vec<Tensor>,
    pub attention: Vec<Vec<Tensor>>,
}

impl EncoderOutput {
    pub fn from_trace(tape: &Tape, trace: &EncoderTrace) -> Self {
        EncoderOutput {
            hidden: trace.hidden.iter().map(|&v| tape.value(v).clone()).collect(),
            attention: trace
                .attention
                .iter()
                .map(|heads| heads.iter().map(|&v| tape.value(v).clone()).collect())
                .collect(),
        }
    }

    pub fn layers(&self) -> usize {
        self.attention.len()
    }

    /// The `[CLS]` (position 0) row of layer `k`.
    pub fn cls(&self, k: usize) -> &[f64] {
        self.hidden[k].row(0)
    }
}

fn check_sequence(seq: &TokenSequence, config: &EncoderConfig) -> Result<()> {
    if seq.is_empty() {
        return Err(NeurankError::Contract("empty token sequence".into()));
    }
    if seq.len() > config.max_positions {
        return Err(NeurankError::Contract(format!(
            "sequence length {} exceeds max positions {}",
            seq.len(),
            config.max_positions
        )));
    }
    if let Some(&bad) = seq.ids.iter().find(|&&id| id >= config.vocab_size) {
        return Err(NeurankError::Contract(format!(
            "token id {bad} out of range for vocabulary of {}",
            config.vocab_size
        )));
    }
    if seq.mask.first() != Some(&1) {
        return Err(NeurankError::Contract("sequence has no real positions".into()));
    }
    Ok(())
}

/// token + position + segment embeddings, layer-normed.
pub fn embed(tape: &mut Tape, p: &Bindings, config: &EncoderConfig, seq: &TokenSequence) -> Result<Var> {
    check_sequence(seq, config)?;
    let positions: Vec<usize> = (0..seq.len()).collect();
    let segments: Vec<usize> = seq.segments.iter().map(|&s| s as usize).collect();
    let tok = tape.select_rows(p.require(names::TOKEN)?, &seq.ids)?;
    let pos = tape.select_rows(p.require(names::POSITION)?, &positions)?;
    let seg = tape.select_rows(p.require(names::SEGMENT)?, &segments)?;
    let sum = tape.add(tok, pos)?;
    let sum = tape.add(sum, seg)?;
    tape.layer_norm(
        sum,
        p.require(names::EMBED_LN_GAIN)?,
        p.require(names::EMBED_LN_BIAS)?,
        config.layer_norm_eps,
    )
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Runs the encoder. `dropout_rng` enables dropout (training); `None` is
/// inference and fully deterministic.
pub fn encoder_forward(
    tape: &mut Tape,
    p: &Bindings,
    config: &EncoderConfig,
    seq: &TokenSequence,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<EncoderTrace> {
    let key_mask = seq.key_mask();
    let rate = config.dropout;
    let mut drop = |tape: &mut Tape, x: Var| match dropout_rng.as_deref_mut() {
        Some(rng) => tape.dropout(x, rate, rng),
        None => x,
    };

    let x0 = embed(tape, p, config, seq)?;
    let x0 = drop(tape, x0);
    let mut hidden = vec![x0];
    let mut attention = Vec::with_capacity(config.layers);
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    for k in 1..=config.layers {
        let l = |leaf: &str| p.require(&names::layer(k, leaf));
        let x = *hidden.last().expect("embedding pushed");
        let q = linear(tape, x, l("attn/q_w")?, l("attn/q_b")?)?;
        let kk = linear(tape, x, l("attn/k_w")?, l("attn/k_b")?)?;
        let v = linear(tape, x, l("attn/v_w")?, l("attn/v_b")?)?;

        let mut heads = Vec::with_capacity(config.heads);
        let mut contexts = Vec::with_capacity(config.heads);
        for a in 0..config.heads {
            let qa = tape.slice_cols(q, a * dh, dh)?;
            let ka = tape.slice_cols(kk, a * dh, dh)?;
            let va = tape.slice_cols(v, a * dh, dh)?;
            let logits = tape.matmul_nt(qa, ka)?;
            let logits = tape.scale(logits, scale);
            let probs = tape.softmax_rows(logits, Some(&key_mask))?;
            heads.push(probs);
            let probs = drop(tape, probs);
            contexts.push(tape.matmul(probs, va)?);
        }
        let ctx = if contexts.len() == 1 {
            contexts[0]
        } else {
            tape.concat_cols(&contexts)?
        };
        let attn_out = linear(tape, ctx, l("attn/o_w")?, l("attn/o_b")?)?;
        let attn_out = drop(tape, attn_out);
        let res = tape.add(x, attn_out)?;
        let x1 = tape.layer_norm(res, l("attn_ln_gain")?, l("attn_ln_bias")?, config.layer_norm_eps)?;

        let ff = linear(tape, x1, l("ff/w1")?, l("ff/b1")?)?;
        let ff = tape.gelu(ff);
        let ff = linear(tape, ff, l("ff/w2")?, l("ff/b2")?)?;
        let ff = drop(tape, ff);
        let res = tape.add(x1, ff)?;
        let x2 = tape.layer_norm(res, l("ff_ln_gain")?, l("ff_ln_bias")?, config.layer_norm_eps)?;

        hidden.push(x2);
        attention.push(heads);
    }
    Ok(EncoderTrace { hidden, attention })
}

/// Inference-mode forward pass over constant parameters.
pub fn encode(params: &ParamSet, config: &EncoderConfig, seq: &TokenSequence) -> Result<EncoderOutput> {
    let mut frozen = params.with_prefix("encoder/");
    frozen.set_requires_grad(false);
    let mut tape = Tape::new();
    let b = frozen.bind(&mut tape);
    let trace = encoder_forward(&mut tape, &b, config, seq, None)?;
    Ok(EncoderOutput::from_trace(&tape, &trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use crate::text::{encode_pair, Vocabulary};
    use approx::assert_abs_diff_eq;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["alpha beta gamma delta epsilon zeta eta theta"], 1, 100).unwrap()
    }

    fn words(s: &str) -> Vec<String> {
        s.split(' ').map(str::to_string).collect()
    }

    fn desk(vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            ff_dim: 16,
            max_positions: 16,
            vocab_size,
            ..Default::default()
        }
    }

    #[test]
    fn init_is_deterministic_with_unit_gains() {
        let cfg = desk(20);
        let a = init_params(&cfg, 9).unwrap();
        assert_eq!(a, init_params(&cfg, 9).unwrap());
        assert_ne!(a, init_params(&cfg, 10).unwrap());
        for (name, t) in a.iter() {
            if name.ends_with("ln_gain") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            }
        }
    }

    #[test]
    fn init_std_is_close_to_target() {
        let cfg = EncoderConfig {
            vocab_size: 10_000,
            hidden: 1,
            heads: 1,
            layers: 1,
            ff_dim: 1,
            max_positions: 1,
            ..Default::default()
        };
        let p = init_params(&cfg, 1).unwrap();
        let w = p.get(names::TOKEN).unwrap().data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        assert!((std - INIT_STD).abs() / INIT_STD < 0.1, "std {std}");
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig { heads: 3, ..desk(20) }.validate().is_err());
        assert!(EncoderConfig { layers: 0, ..desk(20) }.validate().is_err());
        assert!(EncoderConfig { dropout: 1.0, ..desk(20) }.validate().is_err());
        assert!(EncoderConfig::large(30_000).validate().is_ok());
    }

    #[test]
    fn embedding_reflects_segments_and_tokens() {
        let v = vocab();
        let cfg = desk(v.len());
        let p = init_params(&cfg, 2).unwrap();
        let seq = encode_pair(&words("alpha"), &words("beta gamma"), &v, 8).unwrap();
        let mut other = seq.clone();
        other.segments[3] = 0;
        let a = encode(&p, &cfg, &seq).unwrap();
        let b = encode(&p, &cfg, &other).unwrap();
        assert_ne!(a.hidden[0].row(3), b.hidden[0].row(3));
        assert_eq!(a.hidden[0].row(1), b.hidden[0].row(1));

        let mut swapped = seq.clone();
        swapped.ids.swap(3, 4);
        let c = encode(&p, &cfg, &swapped).unwrap();
        assert_eq!(a.hidden[0].row(1), c.hidden[0].row(1));
        assert_ne!(a.hidden[0].row(3), c.hidden[0].row(3));

        for pos in 0..seq.real_len() {
            let n: f64 = a.hidden[0].row(pos).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(n.is_finite() && n > 0.0);
        }
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let v = vocab();
        let cfg = desk(v.len());
        let p = init_params(&cfg, 2).unwrap();
        let mut seq = encode_pair(&words("alpha"), &words("beta"), &v, 6).unwrap();
        seq.ids[1] = 999;
        assert!(matches!(encode(&p, &cfg, &seq), Err(NeurankError::Contract(_))));
    }

    #[test]
    fn shapes_and_row_stochastic_attention() {
        let v = vocab();
        let cfg = desk(v.len());
        let p = init_params(&cfg, 3).unwrap();
        let seq = encode_pair(&words("alpha beta"), &words("gamma delta"), &v, 10).unwrap();
        let out = encode(&p, &cfg, &seq).unwrap();
        assert_eq!(out.hidden.len(), cfg.layers + 1);
        assert!(out.hidden.iter().all(|h| h.shape() == [10, 8]));
        assert_eq!(out.attention.len(), cfg.layers);
        let n = seq.real_len();
        for heads in &out.attention {
            assert_eq!(heads.len(), cfg.heads);
            for att in heads {
                assert_eq!(att.shape(), &[10, 10]);
                for r in 0..10 {
                    let row = att.row(r);
                    assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
                    assert!(row[n..].iter().all(|&x| x == 0.0));
                }
            }
        }
    }

    #[test]
    fn padding_content_does_not_leak() {
        let v = vocab();
        let cfg = desk(v.len());
        let p = init_params(&cfg, 4).unwrap();
        let seq = encode_pair(&words("alpha"), &words("beta gamma"), &v, 10).unwrap();
        let mut noisy = seq.clone();
        let n = seq.real_len();
        for pos in n..10 {
            noisy.ids[pos] = 5 + pos % 4;
            noisy.segments[pos] = 1;
        }
        let a = encode(&p, &cfg, &seq).unwrap();
        let b = encode(&p, &cfg, &noisy).unwrap();
        for k in 0..=cfg.layers {
            for pos in 0..n {
                assert_eq!(a.hidden[k].row(pos), b.hidden[k].row(pos));
            }
        }
        // trimming the padding away leaves real rows bitwise unchanged
        let t = encode(&p, &cfg, &seq.trimmed()).unwrap();
        for pos in 0..n {
            assert_eq!(a.hidden[cfg.layers].row(pos), t.hidden[cfg.layers].row(pos));
        }
    }

    /// Straight-line single-layer, single-head encoder written without the tape.
    fn hand_layer(p: &ParamSet, seq: &TokenSequence, h: usize) -> Vec<Vec<f64>> {
        let get = |n: &str| p.get(n).unwrap().data().to_vec();
        let ln = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
            let m = x.iter().sum::<f64>() / h as f64;
            let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / h as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            (0..h).map(|j| g[j] * (x[j] - m) * r + b[j]).collect()
        };
        let lin = |x: &[f64], w: &[f64], b: &[f64], out: usize| -> Vec<f64> {
            (0..out)
                .map(|j| b[j] + (0..x.len()).map(|i| x[i] * w[i * out + j]).sum::<f64>())
                .collect()
        };
        let (tok, pos, seg) = (get(names::TOKEN), get(names::POSITION), get(names::SEGMENT));
        let n = seq.len();
        let x: Vec<Vec<f64>> = (0..n)
            .map(|t| {
                let e: Vec<f64> = (0..h)
                    .map(|j| {
                        tok[seq.ids[t] * h + j] + pos[t * h + j] + seg[seq.segments[t] as usize * h + j]
                    })
                    .collect();
                ln(&e, &get(names::EMBED_LN_GAIN), &get(names::EMBED_LN_BIAS))
            })
            .collect();
        let l = |leaf: &str| get(&names::layer(1, leaf));
        let q: Vec<Vec<f64>> = x.iter().map(|r| lin(r, &l("attn/q_w"), &l("attn/q_b"), h)).collect();
        let k: Vec<Vec<f64>> = x.iter().map(|r| lin(r, &l("attn/k_w"), &l("attn/k_b"), h)).collect();
        let v: Vec<Vec<f64>> = x.iter().map(|r| lin(r, &l("attn/v_w"), &l("attn/v_b"), h)).collect();
        let f = l("ff/b1").len();
        (0..n)
            .map(|t| {
                let logits: Vec<f64> = (0..n)
                    .map(|s| (0..h).map(|j| q[t][j] * k[s][j]).sum::<f64>() / (h as f64).sqrt())
                    .collect();
                let real: Vec<usize> = (0..n).filter(|&s| seq.mask[s] == 1).collect();
                let max = real.iter().map(|&s| logits[s]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = real.iter().map(|&s| (logits[s] - max).exp()).sum();
                let ctx: Vec<f64> = (0..h)
                    .map(|j| real.iter().map(|&s| (logits[s] - max).exp() / z * v[s][j]).sum())
                    .collect();
                let o = lin(&ctx, &l("attn/o_w"), &l("attn/o_b"), h);
                let r1: Vec<f64> = (0..h).map(|j| x[t][j] + o[j]).collect();
                let x1 = ln(&r1, &l("attn_ln_gain"), &l("attn_ln_bias"));
                let mid: Vec<f64> = lin(&x1, &l("ff/w1"), &l("ff/b1"), f)
                    .into_iter()
                    .map(|u| 0.5 * u * (1.0 + libm::erf(u / std::f64::consts::SQRT_2)))
                    .collect();
                let ff = lin(&mid, &l("ff/w2"), &l("ff/b2"), h);
                let r2: Vec<f64> = (0..h).map(|j| x1[j] + ff[j]).collect();
                ln(&r2, &l("ff_ln_gain"), &l("ff_ln_bias"))
            })
            .collect()
    }

    #[test]
    fn single_layer_matches_hand_unrolled_oracle() {
        let v = vocab();
        let cfg = EncoderConfig {
            layers: 1,
            hidden: 4,
            heads: 1,
            ff_dim: 6,
            max_positions: 8,
            vocab_size: v.len(),
            ..Default::default()
        };
        let mut p = init_params(&cfg, 11).unwrap();
        // non-trivial biases and gains so every term is exercised
        for (i, (_, t)) in p.iter_mut().enumerate() {
            for (j, x) in t.data_mut().iter_mut().enumerate() {
                *x += 0.05 * (((i * 7 + j * 3) % 11) as f64 - 5.0) / 5.0;
            }
        }
        let seq = encode_pair(&words("alpha beta"), &words("gamma"), &v, 8).unwrap();
        let out = encode(&p, &cfg, &seq).unwrap();
        let want = hand_layer(&p, &seq, 4);
        for t in 0..seq.real_len() {
            for j in 0..4 {
                assert_abs_diff_eq!(out.hidden[1].get(t, j), want[t][j], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn encoder_passes_grad_check() {
        let v = vocab();
        let cfg = desk(v.len());
        let seq = encode_pair(&words("alpha beta"), &words("gamma delta"), &v, 6).unwrap();
        let mut p = init_params(&cfg, 5).unwrap();
        // larger weights so the check is not dominated by near-linear behaviour
        for (_, t) in p.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= 10.0);
        }
        let report = grad_check(&p, 1e-5, |tape, b| {
            let trace = encoder_forward(tape, b, &cfg, &seq, None)?;
            let last = *trace.hidden.last().unwrap();
            let w = tape.constant(Tensor::from_parts(
                vec![6, 8],
                (0..48).map(|i| ((i * 5 % 13) as f64 - 6.0) / 6.0).collect(),
            ));
            let prod = tape.mul(last, w)?;
            Ok(tape.sum(prod))
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn dropout_changes_training_pass_only() {
        let v = vocab();
        let cfg = EncoderConfig { dropout: 0.3, ..desk(v.len()) };
        let p = init_params(&cfg, 6).unwrap();
        let seq = encode_pair(&words("alpha"), &words("beta"), &v, 6).unwrap();
        let a = encode(&p, &cfg, &seq).unwrap();
        assert_eq!(a, encode(&p, &cfg, &seq).unwrap());
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trace = encoder_forward(&mut tape, &b, &cfg, &seq, Some(&mut rng)).unwrap();
        assert_ne!(tape.value(trace.hidden[2]), &a.hidden[2]);
    }
}

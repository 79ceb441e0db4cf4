//! Scoring heads.
//!
//! Four heads sit on the Transformer encoder:
//!
//! | kind         | input                  | score                                          |
//! |--------------|------------------------|------------------------------------------------|
//! | `rep`        | q and d encoded apart  | cos(q_cls^L, d_cls^L)                          |
//! | `last-int`   | `[CLS] q [SEP] d [SEP]`| w · qd_cls^L                                   |
//! | `mult-int`   | same                   | Σ_k w_k · qd_cls^k                             |
//! | `term-trans` | same                   | Σ_k w_k · mean_ij cos(relu(P_k q_i), relu(P_k d_j)) |
//!
//! and two kernel-pooling baselines work from their own word embeddings:
//! `knrm` and its n-gram variant `conv-knrm`.
//!
//! Every head is written once against the [`Tape`], so the same code path
//! serves inference, training and gradient checks.

mod bert;
mod kernel;

use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{from_kv, to_kv, KeyValues};
use crate::data::{CandidateSet, RunFile};
use crate::encoder::{self, EncoderConfig};
use crate::error::{NeurankError, Result};
use crate::tensor::{Bindings, ParamSet, Tape, Var};
use crate::text::{
    encode_pair_with, encode_single, tokenize, MarkerPolicy, TokenSequence, Vocabulary, DEFAULT_MAX_LEN,
};

pub use bert::{mult_w, proj, score_last_int, score_mult_int, score_rep, score_term_trans, trans_w, LAST_W};
pub use kernel::{conv_knrm_score, default_kernel_bank, knrm_score, KernelBank};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RankerKind {
    Rep,
    #[default]
    LastInt,
    MultInt,
    TermTrans,
    Knrm,
    ConvKnrm,
}

impl RankerKind {
    pub const ALL: [RankerKind; 6] = [
        RankerKind::Rep,
        RankerKind::LastInt,
        RankerKind::MultInt,
        RankerKind::TermTrans,
        RankerKind::Knrm,
        RankerKind::ConvKnrm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RankerKind::Rep => "rep",
            RankerKind::LastInt => "last-int",
            RankerKind::MultInt => "mult-int",
            RankerKind::TermTrans => "term-trans",
            RankerKind::Knrm => "knrm",
            RankerKind::ConvKnrm => "conv-knrm",
        }
    }

    /// Whether the head sits on the Transformer encoder.
    pub fn uses_encoder(self) -> bool {
        !matches!(self, RankerKind::Knrm | RankerKind::ConvKnrm)
    }
}

impl fmt::Display for RankerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RankerKind {
    type Err = NeurankError;

    fn from_str(s: &str) -> Result<Self> {
        RankerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| NeurankError::Config(format!("unknown ranker kind `{s}`")))
    }
}

/// Where Term-Trans takes its query/document token states from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TermTransEncoding {
    #[default]
    Concatenated,
    Separate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ConvActivation {
    #[default]
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankerConfig {
    pub ranker: RankerKind,
    pub max_len: usize,
    /// First encoder layer used by Mult-Int / Term-Trans (0 = embedding output).
    pub layer_from: usize,
    /// Last layer used; 0 means the encoder's last layer.
    pub layer_to: usize,
    /// Term-Trans projection width; 0 means the encoder width.
    pub proj_dim: usize,
    pub term_trans_encoding: TermTransEncoding,
    pub kernel_mus: Vec<f64>,
    pub kernel_sigmas: Vec<f64>,
    pub kernel_floor: f64,
    pub embed_dim: usize,
    pub conv_filters: usize,
    pub max_ngram: usize,
    pub conv_activation: ConvActivation,
}

impl Default for RankerConfig {
    fn default() -> Self {
        let bank = default_kernel_bank();
        RankerConfig {
            ranker: RankerKind::LastInt,
            max_len: DEFAULT_MAX_LEN,
            layer_from: 1,
            layer_to: 0,
            proj_dim: 0,
            term_trans_encoding: TermTransEncoding::Concatenated,
            kernel_mus: bank.mus,
            kernel_sigmas: bank.sigmas,
            kernel_floor: kernel::KERNEL_FLOOR,
            embed_dim: 64,
            conv_filters: 128,
            max_ngram: 2,
            conv_activation: ConvActivation::Relu,
        }
    }
}

impl RankerConfig {
    pub fn layer_range(&self, enc: &EncoderConfig) -> Result<RangeInclusive<usize>> {
        let to = if self.layer_to == 0 { enc.layers } else { self.layer_to };
        if self.layer_from > to || to > enc.layers {
            return Err(NeurankError::Config(format!(
                "layer range {}..={to} is empty or outside 0..={}",
                self.layer_from, enc.layers
            )));
        }
        Ok(self.layer_from..=to)
    }

    pub fn proj_width(&self, enc: &EncoderConfig) -> usize {
        if self.proj_dim == 0 {
            enc.hidden
        } else {
            self.proj_dim
        }
    }

    pub fn kernel_bank(&self) -> Result<KernelBank> {
        KernelBank::new(self.kernel_mus.clone(), self.kernel_sigmas.clone(), self.kernel_floor)
    }

    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        if self.max_len < crate::text::MIN_MAX_LEN {
            return Err(NeurankError::Config(format!("max_len {} too small", self.max_len)));
        }
        self.kernel_bank()?;
        if self.ranker.uses_encoder() {
            enc.validate()?;
            if self.max_len > enc.max_positions {
                return Err(NeurankError::Config(format!(
                    "max_len {} exceeds the encoder's {} positions",
                    self.max_len, enc.max_positions
                )));
            }
            if matches!(self.ranker, RankerKind::MultInt | RankerKind::TermTrans) {
                self.layer_range(enc)?;
            }
        } else {
            if self.embed_dim == 0 || self.conv_filters == 0 || self.max_ngram == 0 {
                return Err(NeurankError::Config(
                    "embed_dim, conv_filters and max_ngram must be positive".into(),
                ));
            }
            if enc.vocab_size < crate::text::RESERVED.len() {
                return Err(NeurankError::Config("vocab_size not set".into()));
            }
        }
        Ok(())
    }
}

/// Score plus the parts it combines.
///
/// * `rep`, `last-int`: `parts = [score]`.
/// * `mult-int`: `parts[i]` is layer `layers[i]`'s term; score = Σ parts.
/// * `term-trans`: `parts[i] = w_k · s^k`, `features[i] = s^k`; score = Σ parts.
/// * `knrm`, `conv-knrm`: `features` = kernel features φ; score = tanh(w·φ + b).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreBreakdown {
    pub score: f64,
    pub layers: Vec<usize>,
    pub parts: Vec<f64>,
    pub features: Vec<f64>,
}

/// Tape handles behind a [`ScoreBreakdown`].
#[derive(Debug, Clone)]
pub struct ScoreVars {
    pub score: Var,
    pub layers: Vec<usize>,
    pub parts: Vec<Var>,
    pub features: Vec<Var>,
}

impl ScoreVars {
    pub fn breakdown(&self, tape: &Tape) -> ScoreBreakdown {
        let flat = |vars: &[Var]| -> Vec<f64> {
            vars.iter().flat_map(|&v| tape.value(v).data().to_vec()).collect()
        };
        ScoreBreakdown {
            score: tape.scalar(self.score),
            layers: self.layers.clone(),
            parts: flat(&self.parts),
            features: flat(&self.features),
        }
    }
}

/// Model-ready inputs for one (query, document) pair.
#[derive(Debug, Clone, PartialEq)]
pub enum PairInput {
    Joint(TokenSequence),
    Separate { query: TokenSequence, doc: TokenSequence },
    Tokens { query: Vec<usize>, doc: Vec<usize> },
}

/// A ranking model: configuration, vocabulary and all parameters
/// (`encoder/…` and `head/…`).
#[derive(Debug, Clone, PartialEq)]
pub struct Ranker {
    pub encoder: EncoderConfig,
    pub config: RankerConfig,
    pub vocab: Vocabulary,
    pub params: ParamSet,
}

impl Ranker {
    pub fn new(mut encoder_cfg: EncoderConfig, config: RankerConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        encoder_cfg.vocab_size = vocab.len();
        config.validate(&encoder_cfg)?;
        let mut params = if config.ranker.uses_encoder() {
            encoder::init_params(&encoder_cfg, seed)?
        } else {
            ParamSet::new()
        };
        params.extend(init_head(&encoder_cfg, &config, seed.wrapping_add(0x9e37_79b9))?);
        Ok(Ranker {
            encoder: encoder_cfg,
            config,
            vocab,
            params,
        })
    }

    pub fn kind(&self) -> RankerKind {
        self.config.ranker
    }

    /// Replaces encoder weights with those of `source` (e.g. a pretraining checkpoint).
    pub fn load_encoder_from(&mut self, source: &ParamSet) -> Result<()> {
        for (name, t) in source.iter().filter(|(n, _)| n.starts_with("encoder/")) {
            let Some(dst) = self.params.get_mut(name) else {
                return Err(NeurankError::Checkpoint(format!("unexpected encoder parameter `{name}`")));
            };
            if dst.shape() != t.shape() {
                return Err(NeurankError::Checkpoint(format!(
                    "encoder parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    pub fn prepare<S: AsRef<str>>(&self, query: &[S], doc: &[S]) -> Result<PairInput> {
        self.prepare_with(query, doc, MarkerPolicy::Full)
    }

    /// Builds model input; sequence padding is trimmed since padded
    /// positions never influence real ones.
    pub fn prepare_with<S: AsRef<str>>(&self, query: &[S], doc: &[S], markers: MarkerPolicy) -> Result<PairInput> {
        let max_len = self.config.max_len;
        Ok(match self.kind() {
            RankerKind::Rep => PairInput::Separate {
                query: encode_single(query, &self.vocab, max_len)?.trimmed(),
                doc: encode_single(doc, &self.vocab, max_len)?.trimmed(),
            },
            RankerKind::TermTrans if self.config.term_trans_encoding == TermTransEncoding::Separate => {
                PairInput::Separate {
                    query: encode_single(query, &self.vocab, max_len)?.trimmed(),
                    doc: encode_single(doc, &self.vocab, max_len)?.trimmed(),
                }
            }
            RankerKind::LastInt | RankerKind::MultInt | RankerKind::TermTrans => {
                PairInput::Joint(encode_pair_with(query, doc, &self.vocab, max_len, markers)?.trimmed())
            }
            RankerKind::Knrm | RankerKind::ConvKnrm => PairInput::Tokens {
                query: self.vocab.ids(query),
                doc: self.vocab.ids(doc),
            },
        })
    }

    /// Records the score of one pair on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        input: &PairInput,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<ScoreVars> {
        let enc = &self.encoder;
        match (self.kind(), input) {
            (RankerKind::Rep, PairInput::Separate { query, doc }) => bert::rep(tape, p, enc, query, doc, dropout),
            (RankerKind::LastInt, PairInput::Joint(qd)) => bert::last_int(tape, p, enc, qd, dropout),
            (RankerKind::MultInt, PairInput::Joint(qd)) => {
                bert::mult_int(tape, p, enc, qd, self.config.layer_range(enc)?, dropout)
            }
            (RankerKind::TermTrans, input) => {
                bert::term_trans(tape, p, enc, input, self.config.layer_range(enc)?, dropout)
            }
            (RankerKind::Knrm, PairInput::Tokens { query, doc }) => {
                kernel::knrm(tape, p, &self.config.kernel_bank()?, query, doc)
            }
            (RankerKind::ConvKnrm, PairInput::Tokens { query, doc }) => kernel::conv_knrm(
                tape,
                p,
                &self.config.kernel_bank()?,
                self.config.max_ngram,
                self.config.conv_activation,
                query,
                doc,
            ),
            (kind, _) => Err(NeurankError::Contract(format!("input layout does not match ranker `{kind}`"))),
        }
    }

    /// Inference score of a prepared pair.
    pub fn score_input(&self, input: &PairInput) -> Result<ScoreBreakdown> {
        frozen_eval(self, |tape, b| self.forward(tape, b, input, None))
    }

    pub fn score<S: AsRef<str>>(&self, query: &[S], doc: &[S]) -> Result<ScoreBreakdown> {
        self.score_input(&self.prepare(query, doc)?)
    }

    /// Scores every candidate of every query and ranks by descending score.
    pub fn rerank(&self, sets: &[CandidateSet], tag: &str) -> Result<RunFile> {
        self.rerank_with(sets, tag, MarkerPolicy::Full)
    }

    pub fn rerank_with(&self, sets: &[CandidateSet], tag: &str, markers: MarkerPolicy) -> Result<RunFile> {
        let mut scored = Vec::with_capacity(sets.len());
        for set in sets {
            let q = tokenize(&set.query);
            let docs = set
                .docs
                .iter()
                .map(|c| {
                    let input = self.prepare_with(&q, &tokenize(&c.text), markers)?;
                    Ok((c.docid.clone(), self.score_input(&input)?.score))
                })
                .collect::<Result<Vec<_>>>()?;
            scored.push((set.qid.clone(), docs));
        }
        Ok(RunFile::from_scores(tag, &scored))
    }

    pub fn config_kv(&self) -> Result<KeyValues> {
        let mut kv = to_kv(&self.encoder)?;
        kv.extend(to_kv(&self.config)?);
        Ok(kv)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: self.kind().to_string(),
            config: self.config_kv()?,
            vocab: self.vocab.tokens().to_vec(),
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let kind: RankerKind = ckpt.kind.parse().map_err(|_| {
            NeurankError::Checkpoint(format!("checkpoint kind `{}` is not a ranker", ckpt.kind))
        })?;
        let encoder: EncoderConfig = from_kv(&ckpt.config)?;
        let config: RankerConfig = from_kv(&ckpt.config)?;
        if config.ranker != kind {
            return Err(NeurankError::Checkpoint(format!(
                "header kind `{kind}` disagrees with configured ranker `{}`",
                config.ranker
            )));
        }
        let vocab = Vocabulary::from_tokens(ckpt.vocab.clone())?;
        let template = Ranker::new(encoder.clone(), config.clone(), vocab.clone(), 0)?;
        let names = |p: &ParamSet| p.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect::<Vec<_>>();
        if names(&template.params) != names(&ckpt.params) {
            return Err(NeurankError::Checkpoint("parameter set does not match the configuration".into()));
        }
        Ok(Ranker {
            encoder: template.encoder,
            config,
            vocab,
            params: ckpt.params.clone(),
        })
    }
}

/// Runs `f` over constant copies of the ranker's parameters.
pub(crate) fn frozen_eval(
    ranker: &Ranker,
    f: impl FnOnce(&mut Tape, &Bindings) -> Result<ScoreVars>,
) -> Result<ScoreBreakdown> {
    let mut frozen = ranker.params.clone();
    frozen.set_requires_grad(false);
    let mut tape = Tape::new();
    let b = frozen.bind(&mut tape);
    let vars = f(&mut tape, &b)?;
    Ok(vars.breakdown(&tape))
}

fn init_head(enc: &EncoderConfig, cfg: &RankerConfig, seed: u64) -> Result<ParamSet> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match cfg.ranker {
        RankerKind::Rep => Ok(ParamSet::new()),
        RankerKind::LastInt | RankerKind::MultInt | RankerKind::TermTrans => bert::init_head(enc, cfg, &mut rng),
        RankerKind::Knrm | RankerKind::ConvKnrm => kernel::init_head(enc, cfg, &mut rng),
    }
}

//! A small post-LN transformer encoder built on the [`autograd`](crate::autograd) tape.
//!
//! Layout per layer: multi-head self-attention, residual + layer norm,
//! GELU feed-forward, residual + layer norm. Token and learned absolute
//! position embeddings are summed and layer-normalized before the first
//! layer. An MLM head (dense, GELU, layer norm, vocabulary projection) sits
//! on top for masked-token pretraining.
//!
//! # Parameter count
//!
//! With vocabulary `V`, model width `d`, feed-forward width `f`, maximum
//! sequence length `P` and `N` layers:
//!
//! ```text
//! embeddings  V·d + P·d + 2d
//! per layer   4d² + 4d          (query, key, value, output projections)
//!           + 2d·f + f + d      (feed-forward)
//!           + 4d                (two layer norms)
//! MLM head    d² + d + 2d + d·V + V
//! ```
//!
//! [`EncoderConfig::parameter_count`] evaluates this formula; a unit test
//! checks it against the initialized [`ParameterSet`].

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use forward::{
    forward, forward_graph, mlm_logits, mlm_logits_graph, pool, pool_graph, BatchTrace,
    ForwardTrace, LayerProjections, LayerVars, Segment,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParameterSet;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("pad mask has {mask} entries for {ids} ids")]
    PadMaskLength { ids: usize, mask: usize },
    #[error("cannot pool a sequence with no non-pad positions")]
    AllPadding,
    #[error("cls pooling needs a non-pad first position")]
    ClsIsPadding,
    #[error("parameters do not match the encoder layout: {0}")]
    LayoutMismatch(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Average of the non-pad hidden states.
    Mean,
    /// Hidden state of the first position.
    Cls,
}

impl std::str::FromStr for Pooling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Self::Mean),
            "cls" => Ok(Self::Cls),
            other => Err(format!("unknown pooling `{other}` (expected mean or cls)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub pooling: Pooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            model_dim: 32,
            ff_dim: 64,
            max_seq_len: 64,
            vocab_size: 64,
            pooling: Pooling::Mean,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::InvalidConfig(m));
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("model_dim", self.model_dim),
            ("ff_dim", self.ff_dim),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.max_seq_len < 2 {
            return bad(format!("max_seq_len must be at least 2, got {}", self.max_seq_len));
        }
        if self.model_dim % self.num_heads != 0 {
            return bad(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        Ok(())
    }

    /// Closed-form parameter count; see the module docs.
    pub fn parameter_count(&self) -> usize {
        let (v, d, f, p, n) = (
            self.vocab_size,
            self.model_dim,
            self.ff_dim,
            self.max_seq_len,
            self.num_layers,
        );
        let embeddings = v * d + p * d + 2 * d;
        let layer = 4 * d * d + 4 * d + 2 * d * f + f + d + 4 * d;
        let head = d * d + d + 2 * d + d * v + v;
        embeddings + n * layer + head
    }

    /// Names and shapes of every parameter, in a fixed order.
    pub fn layout(&self) -> Vec<(String, (usize, usize))> {
        let (v, d, f) = (self.vocab_size, self.model_dim, self.ff_dim);
        let mut out = vec![
            ("embeddings.token".to_string(), (v, d)),
            ("embeddings.position".to_string(), (self.max_seq_len, d)),
            ("embeddings.ln.gain".to_string(), (1, d)),
            ("embeddings.ln.bias".to_string(), (1, d)),
        ];
        for l in 0..self.num_layers {
            let p = |s: &str| format!("layer.{l}.{s}");
            for proj in ["query", "key", "value", "output"] {
                out.push((p(&format!("attn.{proj}.weight")), (d, d)));
                out.push((p(&format!("attn.{proj}.bias")), (1, d)));
            }
            out.push((p("attn.ln.gain"), (1, d)));
            out.push((p("attn.ln.bias"), (1, d)));
            out.push((p("ffn.inner.weight"), (d, f)));
            out.push((p("ffn.inner.bias"), (1, f)));
            out.push((p("ffn.outer.weight"), (f, d)));
            out.push((p("ffn.outer.bias"), (1, d)));
            out.push((p("ffn.ln.gain"), (1, d)));
            out.push((p("ffn.ln.bias"), (1, d)));
        }
        out.extend([
            ("mlm.dense.weight".to_string(), (d, d)),
            ("mlm.dense.bias".to_string(), (1, d)),
            ("mlm.ln.gain".to_string(), (1, d)),
            ("mlm.ln.bias".to_string(), (1, d)),
            ("mlm.decoder.weight".to_string(), (d, v)),
            ("mlm.decoder.bias".to_string(), (1, v)),
        ]);
        out
    }

    /// Checks that `params` has exactly this config's names and shapes.
    pub fn check_params(&self, params: &ParameterSet) -> Result<(), EncoderError> {
        let layout = self.layout();
        if layout.len() != params.len() {
            return Err(EncoderError::LayoutMismatch(format!(
                "expected {} tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape) in layout {
            match params.get(&name) {
                None => return Err(EncoderError::LayoutMismatch(format!("missing `{name}`"))),
                Some(t) if t.shape() != shape => {
                    return Err(EncoderError::LayoutMismatch(format!(
                        "`{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(t) if !t.is_finite() => {
                    return Err(EncoderError::LayoutMismatch(format!("`{name}` is not finite")))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Normal(0, 0.02) weights and embeddings, zero biases, unit layer-norm gains.
    pub fn init_params(&self, seed: u64) -> Result<ParameterSet, EncoderError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut params = ParameterSet::new();
        for (name, (r, c)) in self.layout() {
            let t = if name.ends_with(".gain") {
                Tensor::filled(r, c, 1.0)
            } else if name.ends_with(".bias") {
                Tensor::zeros(r, c)
            } else {
                Tensor::from_vec(r, c, (0..r * c).map(|_| normal.sample(&mut rng)).collect())
            };
            params.insert(name, t);
        }
        Ok(params)
    }
}

/// A config paired with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: ParameterSet,
}

impl Encoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        let params = config.init_params(seed)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: EncoderConfig, params: ParameterSet) -> Result<Self, EncoderError> {
        config.validate()?;
        config.check_params(&params)?;
        Ok(Self { config, params })
    }

    pub fn forward(&self, ids: &[u32], pad_mask: &[bool]) -> Result<ForwardTrace, EncoderError> {
        forward(&self.params, &self.config, ids, pad_mask)
    }

    /// Pooled embeddings (one row per sequence) without recording gradients.
    pub fn embed<S: AsRef<[u32]>>(&self, sequences: &[S]) -> Result<Tensor, EncoderError> {
        if sequences.is_empty() {
            return Ok(Tensor::zeros(0, self.config.model_dim));
        }
        let mut g = crate::autograd::Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let seqs: Vec<&[u32]> = sequences.iter().map(AsRef::as_ref).collect();
        let trace = forward_graph(&mut g, &self.config, &bound, &seqs, None)?;
        let pooled = pool_graph(&mut g, &trace, self.config.pooling)?;
        Ok(g.value(pooled).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_matches_layout() {
        for cfg in [
            EncoderConfig::default(),
            EncoderConfig {
                num_layers: 1,
                num_heads: 1,
                model_dim: 3,
                ff_dim: 5,
                max_seq_len: 7,
                vocab_size: 11,
                pooling: Pooling::Cls,
            },
            EncoderConfig {
                num_layers: 4,
                ..EncoderConfig::default()
            },
        ] {
            let params = cfg.init_params(0).unwrap();
            assert_eq!(params.count(), cfg.parameter_count());
            cfg.check_params(&params).unwrap();
        }
    }

    #[test]
    fn config_validation() {
        let bad = EncoderConfig {
            model_dim: 30,
            num_heads: 4,
            ..EncoderConfig::default()
        };
        assert!(matches!(bad.validate(), Err(EncoderError::InvalidConfig(_))));
        let short = EncoderConfig {
            max_seq_len: 1,
            ..EncoderConfig::default()
        };
        assert!(short.validate().is_err());
        let empty = EncoderConfig {
            num_layers: 0,
            ..EncoderConfig::default()
        };
        assert!(empty.validate().is_err());
    }

    #[test]
    fn initialization_is_seeded() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.init_params(3).unwrap(), cfg.init_params(3).unwrap());
        assert_ne!(cfg.init_params(3).unwrap(), cfg.init_params(4).unwrap());
        let p = cfg.init_params(3).unwrap();
        assert!(p.get("layer.0.attn.ln.gain").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(p.get("layer.1.ffn.inner.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }
}

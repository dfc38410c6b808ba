use crate::autograd::{AttnSegment, Graph, Var};
use crate::params::{BoundParams, ParameterSet};
use crate::tensor::Tensor;

use super::{EncoderConfig, EncoderError, Pooling, LAYER_NORM_EPS};

/// Rows `start..start + len` of a batch trace belong to one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    /// `true` marks a padding position.
    pub pad_mask: Vec<bool>,
}

impl Segment {
    pub fn valid_positions(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(|&i| !self.pad_mask[i])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

/// Graph handles produced by [`forward_graph`]. All sequences of a batch are
/// stacked row-wise; `segments` says which rows belong to which sequence.
#[derive(Clone, Debug)]
pub struct BatchTrace {
    pub hidden: Var,
    pub layers: Vec<LayerVars>,
    pub segments: Vec<Segment>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerProjections {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
}

/// Concrete values of a single-sequence forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// `seq_len × model_dim`
    pub hidden: Tensor,
    pub layers: Vec<LayerProjections>,
    pub pad_mask: Vec<bool>,
}

fn linear(g: &mut Graph, p: &BoundParams, x: Var, prefix: &str) -> Var {
    let y = g.matmul(x, p.var(&format!("{prefix}.weight")));
    g.add_row(y, p.var(&format!("{prefix}.bias")))
}

fn norm(g: &mut Graph, p: &BoundParams, x: Var, prefix: &str) -> Var {
    g.layer_norm(
        x,
        p.var(&format!("{prefix}.gain")),
        p.var(&format!("{prefix}.bias")),
        LAYER_NORM_EPS,
    )
}

/// Runs the encoder over a batch of sequences on `g`.
///
/// `pad_masks`, when given, must hold one mask per sequence; padding
/// positions are never attended to.
pub fn forward_graph(
    g: &mut Graph,
    config: &EncoderConfig,
    params: &BoundParams,
    sequences: &[&[u32]],
    pad_masks: Option<&[&[bool]]>,
) -> Result<BatchTrace, EncoderError> {
    let mut segments = Vec::with_capacity(sequences.len());
    let mut token_rows = Vec::new();
    let mut position_rows = Vec::new();
    for (s, ids) in sequences.iter().enumerate() {
        if ids.is_empty() {
            return Err(EncoderError::EmptySequence);
        }
        if ids.len() > config.max_seq_len {
            return Err(EncoderError::SequenceTooLong {
                len: ids.len(),
                max: config.max_seq_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= config.vocab_size) {
            return Err(EncoderError::TokenOutOfRange {
                id,
                vocab_size: config.vocab_size,
            });
        }
        let pad_mask = match pad_masks {
            Some(masks) => {
                let m = masks[s];
                if m.len() != ids.len() {
                    return Err(EncoderError::PadMaskLength {
                        ids: ids.len(),
                        mask: m.len(),
                    });
                }
                m.to_vec()
            }
            None => vec![false; ids.len()],
        };
        segments.push(Segment {
            start: token_rows.len(),
            len: ids.len(),
            pad_mask,
        });
        token_rows.extend(ids.iter().map(|&id| id as usize));
        position_rows.extend(0..ids.len());
    }

    let tok = g.gather(params.var("embeddings.token"), &token_rows);
    let pos = g.gather(params.var("embeddings.position"), &position_rows);
    let emb = g.add(tok, pos);
    let mut x = norm(g, params, emb, "embeddings.ln");

    let attn_segments: Vec<AttnSegment> = segments
        .iter()
        .map(|s| AttnSegment {
            start: s.start,
            len: s.len,
            key_mask: s.pad_mask.iter().map(|&p| !p).collect(),
        })
        .collect();

    let mut layers = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        let pre = format!("layer.{l}");
        let query = linear(g, params, x, &format!("{pre}.attn.query"));
        let key = linear(g, params, x, &format!("{pre}.attn.key"));
        let value = linear(g, params, x, &format!("{pre}.attn.value"));
        let ctx = g.attention(query, key, value, attn_segments.clone(), config.num_heads);
        let attn_out = linear(g, params, ctx, &format!("{pre}.attn.output"));
        let res = g.add(x, attn_out);
        x = norm(g, params, res, &format!("{pre}.attn.ln"));
        let inner = linear(g, params, x, &format!("{pre}.ffn.inner"));
        let act = g.gelu(inner);
        let outer = linear(g, params, act, &format!("{pre}.ffn.outer"));
        let res = g.add(x, outer);
        x = norm(g, params, res, &format!("{pre}.ffn.ln"));
        layers.push(LayerVars { query, key, value });
    }
    Ok(BatchTrace {
        hidden: x,
        layers,
        segments,
    })
}

/// One pooled row per sequence of `trace`.
pub fn pool_graph(g: &mut Graph, trace: &BatchTrace, pooling: Pooling) -> Result<Var, EncoderError> {
    let mut groups = Vec::with_capacity(trace.segments.len());
    for seg in &trace.segments {
        let valid: Vec<usize> = seg.valid_positions().map(|i| seg.start + i).collect();
        if valid.is_empty() {
            return Err(EncoderError::AllPadding);
        }
        groups.push(match pooling {
            Pooling::Mean => valid,
            Pooling::Cls if seg.pad_mask[0] => return Err(EncoderError::ClsIsPadding),
            Pooling::Cls => vec![seg.start],
        });
    }
    Ok(g.group_mean(trace.hidden, groups))
}

/// Vocabulary logits for every row of `hidden`.
pub fn mlm_logits_graph(g: &mut Graph, params: &BoundParams, hidden: Var) -> Var {
    let h = linear(g, params, hidden, "mlm.dense");
    let h = g.gelu(h);
    let h = norm(g, params, h, "mlm.ln");
    linear(g, params, h, "mlm.decoder")
}

/// Single-sequence forward pass returning concrete values.
pub fn forward(
    params: &ParameterSet,
    config: &EncoderConfig,
    ids: &[u32],
    pad_mask: &[bool],
) -> Result<ForwardTrace, EncoderError> {
    config.validate()?;
    config.check_params(params)?;
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let trace = forward_graph(&mut g, config, &bound, &[ids], Some(&[pad_mask]))?;
    Ok(ForwardTrace {
        hidden: g.value(trace.hidden).clone(),
        layers: trace
            .layers
            .iter()
            .map(|l| LayerProjections {
                query: g.value(l.query).clone(),
                key: g.value(l.key).clone(),
                value: g.value(l.value).clone(),
            })
            .collect(),
        pad_mask: pad_mask.to_vec(),
    })
}

/// Reduces a trace to one embedding vector.
pub fn pool(trace: &ForwardTrace, strategy: Pooling) -> Result<Vec<f64>, EncoderError> {
    let valid: Vec<usize> = (0..trace.hidden.rows()).filter(|&i| !trace.pad_mask[i]).collect();
    if valid.is_empty() {
        return Err(EncoderError::AllPadding);
    }
    match strategy {
        Pooling::Cls if trace.pad_mask[0] => Err(EncoderError::ClsIsPadding),
        Pooling::Cls => Ok(trace.hidden.row(0).to_vec()),
        Pooling::Mean => {
            let mut out = vec![0.0; trace.hidden.cols()];
            for &r in &valid {
                for (o, v) in out.iter_mut().zip(trace.hidden.row(r)) {
                    *o += v;
                }
            }
            let n = valid.len() as f64;
            out.iter_mut().for_each(|o| *o /= n);
            Ok(out)
        }
    }
}

/// `seq_len × vocab_size` logits from the MLM head.
pub fn mlm_logits(params: &ParameterSet, trace: &ForwardTrace) -> Tensor {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let hidden = g.constant(trace.hidden.clone());
    let logits = mlm_logits_graph(&mut g, &bound, hidden);
    g.value(logits).clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Encoder;

    fn encoder() -> Encoder {
        Encoder::new(
            EncoderConfig {
                num_layers: 2,
                num_heads: 2,
                model_dim: 8,
                ff_dim: 12,
                max_seq_len: 12,
                vocab_size: 20,
                pooling: Pooling::Mean,
            },
            7,
        )
        .unwrap()
    }

    #[test]
    fn output_shape_and_determinism() {
        let enc = encoder();
        let ids = [1, 5, 7, 3, 2];
        let a = enc.forward(&ids, &[false; 5]).unwrap();
        let b = enc.forward(&ids, &[false; 5]).unwrap();
        assert_eq!(a.hidden.shape(), (5, 8));
        assert_eq!(a.layers.len(), 2);
        assert_eq!(a, b);
    }

    #[test]
    fn appended_padding_leaves_real_positions_unchanged() {
        let enc = encoder();
        let ids = [1, 5, 7, 3, 2];
        let base = enc.forward(&ids, &[false; 5]).unwrap();
        for k in 1..=4 {
            let mut padded = ids.to_vec();
            padded.extend(std::iter::repeat_n(3, k));
            let mut mask = vec![false; 5];
            mask.extend(std::iter::repeat_n(true, k));
            let t = enc.forward(&padded, &mask).unwrap();
            for r in 0..5 {
                for c in 0..8 {
                    assert!((t.hidden.get(r, c) - base.hidden.get(r, c)).abs() < 1e-10);
                }
            }
            let pa = pool(&t, Pooling::Mean).unwrap();
            let pb = pool(&base, Pooling::Mean).unwrap();
            for (x, y) in pa.iter().zip(&pb) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn pooling_rules() {
        let trace = ForwardTrace {
            hidden: Tensor::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 9.0, 9.0]),
            layers: vec![],
            pad_mask: vec![false, false, true],
        };
        assert_eq!(pool(&trace, Pooling::Mean).unwrap(), vec![0.5, 0.5]);
        assert_eq!(pool(&trace, Pooling::Cls).unwrap(), vec![1.0, 0.0]);
        let all_pad = ForwardTrace {
            pad_mask: vec![true; 3],
            ..trace
        };
        assert!(matches!(pool(&all_pad, Pooling::Mean), Err(EncoderError::AllPadding)));
        assert!(matches!(pool(&all_pad, Pooling::Cls), Err(EncoderError::AllPadding)));
    }

    #[test]
    fn rejects_bad_inputs() {
        let enc = encoder();
        assert!(matches!(
            enc.forward(&[1; 13], &[false; 13]),
            Err(EncoderError::SequenceTooLong { len: 13, max: 12 })
        ));
        assert!(matches!(
            enc.forward(&[1, 20], &[false; 2]),
            Err(EncoderError::TokenOutOfRange { id: 20, .. })
        ));
        assert!(matches!(
            enc.forward(&[1, 2], &[false]),
            Err(EncoderError::PadMaskLength { .. })
        ));
    }

    #[test]
    fn mlm_logits_shape_and_finiteness() {
        let enc = encoder();
        let trace = enc.forward(&[1, 4, 9, 2], &[false; 4]).unwrap();
        let logits = mlm_logits(&enc.params, &trace);
        assert_eq!(logits.shape(), (4, 20));
        assert!(logits.is_finite());
        let again = mlm_logits(&enc.params, &trace);
        assert_eq!(logits, again);
    }

    #[test]
    fn batched_embedding_matches_single_sequence_pooling() {
        let enc = encoder();
        let seqs = vec![vec![1u32, 4, 9, 2], vec![1, 7, 2], vec![1, 3, 3, 3, 8, 2]];
        let batch = enc.embed(&seqs).unwrap();
        for (i, s) in seqs.iter().enumerate() {
            let t = enc.forward(s, &vec![false; s.len()]).unwrap();
            let p = pool(&t, Pooling::Mean).unwrap();
            for (a, b) in batch.row(i).iter().zip(&p) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

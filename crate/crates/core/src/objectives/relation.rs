//! Self-attention relation distillation.
//!
//! For each relation kind (query–query, key–key, value–value) the last
//! layer's projections are split into `relation_heads` column blocks. Within
//! a sequence, block `A` (positions × width `w`) yields the relation
//! distribution `softmax(A Aᵀ / √w)` row by row. The loss for one kind is
//! the teacher→student KL divergence averaged over heads and positions; the
//! three kinds are summed, and sequences of a batch are summed.
//!
//! Teacher and student widths may differ, as long as `relation_heads`
//! divides both. Padding positions are dropped before forming relations.

use crate::autograd::{Graph, Var};
use crate::encoder::{ForwardTrace, LayerVars, Segment};
use crate::tensor::Tensor;

use super::ObjectiveError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelationKind {
    Query,
    Key,
    Value,
}

impl RelationKind {
    pub const ALL: [RelationKind; 3] = [Self::Query, Self::Key, Self::Value];

    fn pick(self, layer: &LayerVars) -> Var {
        match self {
            Self::Query => layer.query,
            Self::Key => layer.key,
            Self::Value => layer.value,
        }
    }
}

fn check_heads(heads: usize, dim: usize) -> Result<(), ObjectiveError> {
    if heads == 0 || dim % heads != 0 {
        Err(ObjectiveError::RelationHeads { heads, dim })
    } else {
        Ok(())
    }
}

/// Records the relation-distillation loss between the last layers of a
/// teacher and a student batch trace that share `segments`.
///
/// The teacher side is treated as a fixed target.
pub fn relation_kd_graph(
    g: &mut Graph,
    teacher: &LayerVars,
    student: &LayerVars,
    segments: &[Segment],
    relation_heads: usize,
) -> Result<Var, ObjectiveError> {
    let dt = g.value(teacher.query).cols();
    let ds = g.value(student.query).cols();
    check_heads(relation_heads, dt)?;
    check_heads(relation_heads, ds)?;
    let (wt, ws) = (dt / relation_heads, ds / relation_heads);
    let mut terms = Vec::new();
    for seg in segments {
        let rows: Vec<usize> = seg.valid_positions().map(|i| seg.start + i).collect();
        if rows.is_empty() {
            continue;
        }
        let norm = 1.0 / (relation_heads * rows.len()) as f64;
        for kind in RelationKind::ALL {
            let t_rows = g.gather(kind.pick(teacher), &rows);
            let s_rows = g.gather(kind.pick(student), &rows);
            for h in 0..relation_heads {
                let ta = g.slice_cols(t_rows, h * wt, wt);
                let tr = g.matmul_t(ta, ta);
                let tr = g.scale(tr, 1.0 / (wt as f64).sqrt());
                let log_pt = g.log_softmax_rows(tr, None);
                let log_pt_value = g.value(log_pt).clone();
                let pt = g.constant(log_pt_value.map(f64::exp));
                let log_pt = g.constant(log_pt_value);

                let sa = g.slice_cols(s_rows, h * ws, ws);
                let sr = g.matmul_t(sa, sa);
                let sr = g.scale(sr, 1.0 / (ws as f64).sqrt());
                let log_ps = g.log_softmax_rows(sr, None);

                let diff = g.sub(log_pt, log_ps);
                let kl = g.mul(pt, diff);
                let kl = g.sum(kl);
                terms.push(g.scale(kl, norm));
            }
        }
    }
    if terms.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let all = g.concat_cols(&terms);
    Ok(g.sum(all))
}

/// Relation-distillation loss between two single-sequence traces.
pub fn attention_relation_kd_loss(
    teacher: &ForwardTrace,
    student: &ForwardTrace,
    relation_heads: usize,
) -> Result<f64, ObjectiveError> {
    let (Some(t), Some(s)) = (teacher.layers.last(), student.layers.last()) else {
        return Err(ObjectiveError::NoLayers);
    };
    let (lt, ls) = (teacher.pad_mask.len(), student.pad_mask.len());
    if lt != ls || teacher.pad_mask != student.pad_mask {
        return Err(ObjectiveError::SequenceMismatch {
            teacher: lt,
            student: ls,
        });
    }
    let mut g = Graph::new();
    let mut bind = |x: &Tensor| g.constant(x.clone());
    let tv = LayerVars {
        query: bind(&t.query),
        key: bind(&t.key),
        value: bind(&t.value),
    };
    let sv = LayerVars {
        query: bind(&s.query),
        key: bind(&s.key),
        value: bind(&s.value),
    };
    let segments = [Segment {
        start: 0,
        len: lt,
        pad_mask: teacher.pad_mask.clone(),
    }];
    let loss = relation_kd_graph(&mut g, &tv, &sv, &segments, relation_heads)?;
    Ok(g.value(loss).get(0, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Encoder, EncoderConfig, Pooling};

    fn enc(layers: usize, dim: usize, heads: usize, seed: u64) -> Encoder {
        Encoder::new(
            EncoderConfig {
                num_layers: layers,
                num_heads: heads,
                model_dim: dim,
                ff_dim: 2 * dim,
                max_seq_len: 16,
                vocab_size: 30,
                pooling: Pooling::Mean,
            },
            seed,
        )
        .unwrap()
    }

    fn softmax_rows(a: &Tensor, width: usize) -> Vec<Vec<f64>> {
        let scale = 1.0 / (width as f64).sqrt();
        (0..a.rows())
            .map(|i| {
                let logits: Vec<f64> = (0..a.rows())
                    .map(|j| scale * a.row(i).iter().zip(a.row(j)).map(|(x, y)| x * y).sum::<f64>())
                    .collect();
                let z: f64 = logits.iter().map(|v| v.exp()).sum();
                logits.iter().map(|v| v.exp() / z).collect()
            })
            .collect()
    }

    fn cols(t: &Tensor, start: usize, w: usize) -> Tensor {
        Tensor::from_rows(&(0..t.rows()).map(|r| t.row(r)[start..start + w].to_vec()).collect::<Vec<_>>())
    }

    /// Naive per-position KL sum.
    fn oracle(t: &ForwardTrace, s: &ForwardTrace, heads: usize) -> f64 {
        let (lt, ls) = (t.layers.last().unwrap(), s.layers.last().unwrap());
        let (wt, ws) = (lt.query.cols() / heads, ls.query.cols() / heads);
        let mut total = 0.0;
        let n = t.hidden.rows();
        for (a, b) in [(&lt.query, &ls.query), (&lt.key, &ls.key), (&lt.value, &ls.value)] {
            for h in 0..heads {
                let pt = softmax_rows(&cols(a, h * wt, wt), wt);
                let ps = softmax_rows(&cols(b, h * ws, ws), ws);
                for i in 0..n {
                    for j in 0..n {
                        total += pt[i][j] * (pt[i][j].ln() - ps[i][j].ln()) / (heads * n) as f64;
                    }
                }
            }
        }
        total
    }

    #[test]
    fn identical_projections_give_zero() {
        let t = enc(2, 8, 2, 1).forward(&[1, 4, 6, 2], &[false; 4]).unwrap();
        let l = attention_relation_kd_loss(&t, &t, 2).unwrap();
        assert!(l.abs() < 1e-14);
    }

    #[test]
    fn matches_naive_oracle_across_widths() {
        let ids = [1, 9, 4, 17, 3, 2];
        let mask = [false; 6];
        let t = enc(3, 12, 3, 2).forward(&ids, &mask).unwrap();
        let s = enc(1, 6, 2, 3).forward(&ids, &mask).unwrap();
        for heads in [1, 2, 3, 6] {
            let got = attention_relation_kd_loss(&t, &s, heads).unwrap();
            assert!(got > 0.0);
            assert!((got - oracle(&t, &s, heads)).abs() < 1e-10, "heads {heads}");
        }
        assert!(matches!(
            attention_relation_kd_loss(&t, &s, 4),
            Err(ObjectiveError::RelationHeads { heads: 4, .. })
        ));
    }

    #[test]
    fn sequence_length_mismatch_is_an_error() {
        let t = enc(1, 8, 2, 1).forward(&[1, 4, 2], &[false; 3]).unwrap();
        let s = enc(1, 8, 2, 1).forward(&[1, 4, 5, 2], &[false; 4]).unwrap();
        assert_eq!(
            attention_relation_kd_loss(&t, &s, 2),
            Err(ObjectiveError::SequenceMismatch { teacher: 3, student: 4 })
        );
    }

    #[test]
    fn batch_loss_is_order_invariant_sum() {
        let te = enc(2, 8, 2, 4);
        let st = enc(1, 8, 2, 5);
        let seqs: Vec<Vec<u32>> = vec![vec![1, 5, 2], vec![1, 7, 7, 9, 2], vec![1, 11, 2, 2]];
        let batch_loss = |order: &[usize]| {
            let mut g = Graph::new();
            let tb = te.params.bind_frozen(&mut g);
            let sb = st.params.bind_frozen(&mut g);
            let refs: Vec<&[u32]> = order.iter().map(|&i| seqs[i].as_slice()).collect();
            let tt = crate::encoder::forward_graph(&mut g, &te.config, &tb, &refs, None).unwrap();
            let stt = crate::encoder::forward_graph(&mut g, &st.config, &sb, &refs, None).unwrap();
            let l = relation_kd_graph(&mut g, tt.layers.last().unwrap(), stt.layers.last().unwrap(), &tt.segments, 2).unwrap();
            g.value(l).get(0, 0)
        };
        let singles: f64 = seqs
            .iter()
            .map(|s| {
                let m = vec![false; s.len()];
                attention_relation_kd_loss(&te.forward(s, &m).unwrap(), &st.forward(s, &m).unwrap(), 2).unwrap()
            })
            .sum();
        let a = batch_loss(&[0, 1, 2]);
        let b = batch_loss(&[2, 0, 1]);
        assert!((a - b).abs() < 1e-12);
        assert!((a - singles).abs() < 1e-12);
    }
}

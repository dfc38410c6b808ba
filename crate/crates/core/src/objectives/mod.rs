//! Training objectives.
//!
//! Every loss has two entry points: a `*_graph` function that records the
//! loss on an [`autograd::Graph`](crate::autograd::Graph) so it can be
//! differentiated through the encoder, and a plain function over concrete
//! vectors that builds a throwaway graph and returns the value. Both share
//! one implementation.

mod contrastive;
mod distill;
mod mlm;
mod relation;

pub use contrastive::{contrastive_loss, contrastive_loss_graph, ContrastiveConfig, TripleBatch};
pub use distill::{
    embedding_kd_loss, embedding_kd_loss_graph, kd_distributions, KdConfig, SimilarityMatrix,
};
pub use mlm::{mlm_loss, mlm_loss_graph};
pub use relation::{attention_relation_kd_loss, relation_kd_graph, RelationKind};

use thiserror::Error;

use crate::tensor::{dot, l2_norm};

/// Contrastive temperature used when none is configured.
pub const DEFAULT_TAU: f64 = 0.05;
/// Distillation temperature used when none is configured.
pub const DEFAULT_TAU_KD: f64 = 4.0;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("embedding contains a non-finite value")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("need at least {needed} elements, found {found}")]
    TooFewElements { needed: usize, found: usize },
    #[error("teacher has {teacher} elements but student has {student}")]
    CountMismatch { teacher: usize, student: usize },
    #[error("teacher sequence length {teacher} differs from student length {student}")]
    SequenceMismatch { teacher: usize, student: usize },
    #[error("relation heads {heads} do not divide dimension {dim}")]
    RelationHeads { heads: usize, dim: usize },
    #[error("trace has no layers")]
    NoLayers,
    #[error("no masked positions to score")]
    NoMaskedPositions,
    #[error("{labels} labels for {positions} masked positions")]
    LabelCount { labels: usize, positions: usize },
    #[error("index {index} out of range (limit {limit})")]
    OutOfRange { index: usize, limit: usize },
}

pub(crate) fn check_temperature(t: f64) -> Result<(), ObjectiveError> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(ObjectiveError::InvalidTemperature(t))
    }
}

/// Checks a set of vectors for a shared dimension, finiteness and nonzero norm.
pub(crate) fn check_vectors(vs: &[Vec<f64>], dim: Option<usize>) -> Result<usize, ObjectiveError> {
    let dim = dim.or_else(|| vs.first().map(Vec::len)).unwrap_or(0);
    for v in vs {
        if v.len() != dim {
            return Err(ObjectiveError::DimensionMismatch {
                expected: dim,
                found: v.len(),
            });
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(ObjectiveError::NonFinite);
        }
        if v.iter().all(|&x| x == 0.0) {
            return Err(ObjectiveError::ZeroVector);
        }
    }
    Ok(dim)
}

/// Temperature-scaled cosine similarity `cos(q, p) / tau`.
pub fn similarity(q: &[f64], p: &[f64], tau: f64) -> Result<f64, ObjectiveError> {
    check_temperature(tau)?;
    if q.len() != p.len() {
        return Err(ObjectiveError::DimensionMismatch {
            expected: q.len(),
            found: p.len(),
        });
    }
    if !q.iter().chain(p).all(|x| x.is_finite()) {
        return Err(ObjectiveError::NonFinite);
    }
    let (nq, np) = (l2_norm(q), l2_norm(p));
    if nq == 0.0 || np == 0.0 {
        return Err(ObjectiveError::ZeroVector);
    }
    Ok(dot(q, p) / (nq * np) / tau)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn similarity_closed_forms() {
        let u = [0.6, 0.8];
        assert!((similarity(&u, &u, 0.05).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 3.0], 0.3).unwrap(), 0.0);
        assert!((similarity(&[1.0, 2.0], &[-1.0, -2.0], 1.0).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn similarity_errors() {
        assert_eq!(similarity(&[0.0, 0.0], &[1.0, 0.0], 1.0), Err(ObjectiveError::ZeroVector));
        assert_eq!(
            similarity(&[1.0], &[1.0], 0.0),
            Err(ObjectiveError::InvalidTemperature(0.0))
        );
        assert!(matches!(
            similarity(&[1.0], &[1.0, 2.0], 1.0),
            Err(ObjectiveError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn similarity_is_scale_invariant_and_ranking_ignores_tau() {
        let q = [0.3, -1.2, 0.5];
        let cands = [[1.0, 0.1, 0.0], [0.2, -1.0, 0.4], [-0.3, 0.2, 0.9]];
        let base = similarity(&q, &cands[1], 0.1).unwrap();
        let scaled: Vec<f64> = cands[1].iter().map(|x| x * 7.5).collect();
        let q2: Vec<f64> = q.iter().map(|x| x * 0.01).collect();
        assert!((similarity(&q2, &scaled, 0.1).unwrap() - base).abs() < 1e-12);
        let rank = |tau: f64| {
            let mut idx: Vec<usize> = (0..3).collect();
            idx.sort_by(|&a, &b| {
                similarity(&q, &cands[b], tau)
                    .unwrap()
                    .total_cmp(&similarity(&q, &cands[a], tau).unwrap())
            });
            idx
        };
        assert_eq!(rank(0.05), rank(1.0));
        assert_eq!(rank(0.05), rank(20.0));
    }
}

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

use super::{check_temperature, check_vectors, ObjectiveError, DEFAULT_TAU};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    /// Temperature of the scaled cosine similarity.
    pub tau: f64,
    /// Count the positive pair once in the normalizer instead of twice.
    ///
    /// Off by default: the normalizer sums `s(q_i, p_j)` over every `j` and
    /// `s(q_j, p_i)` over every `j`, so the positive term appears in both.
    pub dedup_positive: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            dedup_positive: false,
        }
    }
}

/// Query/positive embedding pairs plus optional mined negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct TripleBatch {
    pub queries: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
    /// Explicit negatives per query. They are pooled and appended to the
    /// passage side of the query-to-passage sum for every anchor.
    pub negatives: Vec<Vec<Vec<f64>>>,
    pub config: ContrastiveConfig,
}

impl TripleBatch {
    /// In-batch negatives only.
    pub fn new(queries: Vec<Vec<f64>>, positives: Vec<Vec<f64>>, tau: f64) -> Self {
        let n = queries.len();
        Self {
            queries,
            positives,
            negatives: vec![Vec::new(); n],
            config: ContrastiveConfig {
                tau,
                ..ContrastiveConfig::default()
            },
        }
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Bidirectional InfoNCE over a batch of `n` query/positive rows.
///
/// ```text
/// L   = -(1/n) Σ_i log( exp(s(q_i, p_i)) / Z_i )
/// Z_i = Σ_j exp(s(q_i, p_j)) + Σ_j exp(s(q_j, p_i))
///     + Σ_{j≠i} exp(s(q_i, q_j)) + Σ_{j≠i} exp(s(p_i, p_j))
/// ```
///
/// `negatives` (an `m × d` pool) extends the first sum. Each `log Z_i` is a
/// max-subtracted log-sum-exp.
pub fn contrastive_loss_graph(
    g: &mut Graph,
    queries: Var,
    positives: Var,
    negatives: Option<Var>,
    config: &ContrastiveConfig,
) -> Var {
    let n = g.value(queries).rows();
    assert_eq!(g.value(positives).rows(), n, "one positive per query");
    let inv_tau = 1.0 / config.tau;
    let qn = g.normalize_rows(queries);
    let pn = g.normalize_rows(positives);
    let qp = g.matmul_t(qn, pn);
    let s_qp = g.scale(qp, inv_tau);
    let s_pq = g.transpose(s_qp);
    let qq = g.matmul_t(qn, qn);
    let s_qq = g.scale(qq, inv_tau);
    let pp = g.matmul_t(pn, pn);
    let s_pp = g.scale(pp, inv_tau);

    let mut blocks = vec![s_qp];
    // (width, diagonal excluded)
    let mut layout = vec![(n, false)];
    if let Some(neg) = negatives {
        let nn = g.normalize_rows(neg);
        let qneg = g.matmul_t(qn, nn);
        let s_qneg = g.scale(qneg, inv_tau);
        layout.push((g.value(neg).rows(), false));
        blocks.push(s_qneg);
    }
    blocks.extend([s_pq, s_qq, s_pp]);
    layout.extend([(n, config.dedup_positive), (n, true), (n, true)]);

    let width: usize = layout.iter().map(|(w, _)| w).sum();
    let mut mask = vec![true; n * width];
    for i in 0..n {
        let mut c0 = 0;
        for &(w, skip_diag) in &layout {
            if skip_diag {
                mask[i * width + c0 + i] = false;
            }
            c0 += w;
        }
    }
    let logits = g.concat_cols(&blocks);
    let log_z = g.logsumexp_rows(logits, Some(mask));
    let positive = g.diag(s_qp);
    let per_anchor = g.sub(log_z, positive);
    g.mean(per_anchor)
}

/// Value of [`contrastive_loss_graph`] for concrete embeddings.
pub fn contrastive_loss(batch: &TripleBatch) -> Result<f64, ObjectiveError> {
    check_temperature(batch.config.tau)?;
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    if batch.positives.len() != batch.queries.len() {
        return Err(ObjectiveError::CountMismatch {
            teacher: batch.queries.len(),
            student: batch.positives.len(),
        });
    }
    let dim = check_vectors(&batch.queries, None)?;
    check_vectors(&batch.positives, Some(dim))?;
    let pool: Vec<Vec<f64>> = batch.negatives.iter().flatten().cloned().collect();
    check_vectors(&pool, Some(dim))?;

    let mut g = Graph::new();
    let q = g.constant(Tensor::from_rows(&batch.queries));
    let p = g.constant(Tensor::from_rows(&batch.positives));
    let neg = (!pool.is_empty()).then(|| g.constant(Tensor::from_rows(&pool)));
    let loss = contrastive_loss_graph(&mut g, q, p, neg, &batch.config);
    Ok(g.value(loss).get(0, 0))
}

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

use super::{check_temperature, check_vectors, similarity, ObjectiveError, DEFAULT_TAU, DEFAULT_TAU_KD};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    /// Softmax temperature applied on top of the similarity scores.
    pub tau_kd: f64,
    /// Drop the `j = i` term from each row's normalizer, so every
    /// distribution lives on the pairs `{x_i, x_j}, j ≠ i`.
    pub exclude_self: bool,
    /// Temperature of the underlying scaled cosine similarity.
    pub similarity_tau: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            tau_kd: DEFAULT_TAU_KD,
            exclude_self: true,
            similarity_tau: DEFAULT_TAU,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        check_temperature(self.tau_kd)?;
        check_temperature(self.similarity_tau)
    }

    fn mask(&self, m: usize) -> Option<Vec<bool>> {
        self.exclude_self
            .then(|| (0..m * m).map(|k| k / m != k % m).collect())
    }
}

/// Pairwise temperature-scaled cosine scores of one element set.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub scores: Tensor,
    pub temperature: f64,
}

impl SimilarityMatrix {
    pub fn from_embeddings(elements: &[Vec<f64>], tau: f64) -> Result<Self, ObjectiveError> {
        check_temperature(tau)?;
        check_vectors(elements, None)?;
        let m = elements.len();
        let mut scores = Tensor::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                scores.set(i, j, similarity(&elements[i], &elements[j], tau)?);
            }
        }
        Ok(Self {
            scores,
            temperature: tau,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.rows() == 0
    }
}

/// Row-wise softmax of `scores / tau_kd`. With `exclude_self`, the diagonal
/// entry of every row is exactly 0 and the rest sum to 1.
pub fn kd_distributions(sims: &SimilarityMatrix, cfg: &KdConfig) -> Result<Tensor, ObjectiveError> {
    cfg.validate()?;
    let m = sims.len();
    if m < 2 {
        return Err(ObjectiveError::TooFewElements { needed: 2, found: m });
    }
    let mut g = Graph::new();
    let s = g.constant(sims.scores.clone());
    let s = g.scale(s, 1.0 / cfg.tau_kd);
    let mask = cfg.mask(m);
    let logp = g.log_softmax_rows(s, mask.clone());
    Ok(probabilities(g.value(logp), mask.as_deref()))
}

fn probabilities(logp: &Tensor, mask: Option<&[bool]>) -> Tensor {
    let mut p = logp.map(f64::exp);
    if let Some(mask) = mask {
        for (v, &keep) in p.data_mut().iter_mut().zip(mask) {
            if !keep {
                *v = 0.0;
            }
        }
    }
    p
}

/// `-Σ_i Σ_{j≠i} p_t(x_i, x_j) log p_s(x_i, x_j)` with the teacher held fixed.
///
/// `teacher` and `student` are `m × d_t` and `m × d_s` embedding rows; the
/// widths may differ. The sum is not divided by `m`.
pub fn embedding_kd_loss_graph(g: &mut Graph, teacher: Var, student: Var, cfg: &KdConfig) -> Var {
    let m = g.value(teacher).rows();
    assert_eq!(g.value(student).rows(), m, "teacher and student element counts differ");
    let scale = 1.0 / (cfg.similarity_tau * cfg.tau_kd);
    let mask = cfg.mask(m);

    let tn = g.normalize_rows(teacher);
    let tt = g.matmul_t(tn, tn);
    let st = g.scale(tt, scale);
    let log_pt = g.log_softmax_rows(st, mask.clone());
    let pt = probabilities(g.value(log_pt), mask.as_deref());
    let pt = g.constant(pt);

    let sn = g.normalize_rows(student);
    let ss = g.matmul_t(sn, sn);
    let ss = g.scale(ss, scale);
    let log_ps = g.log_softmax_rows(ss, mask);
    let weighted = g.mul(pt, log_ps);
    let total = g.sum(weighted);
    g.scale(total, -1.0)
}

/// Value of [`embedding_kd_loss_graph`] for concrete embeddings.
pub fn embedding_kd_loss(
    teacher: &[Vec<f64>],
    student: &[Vec<f64>],
    cfg: &KdConfig,
) -> Result<f64, ObjectiveError> {
    cfg.validate()?;
    if teacher.len() != student.len() {
        return Err(ObjectiveError::CountMismatch {
            teacher: teacher.len(),
            student: student.len(),
        });
    }
    if teacher.len() < 2 {
        return Err(ObjectiveError::TooFewElements {
            needed: 2,
            found: teacher.len(),
        });
    }
    check_vectors(teacher, None)?;
    check_vectors(student, None)?;
    let mut g = Graph::new();
    let t = g.constant(Tensor::from_rows(teacher));
    let s = g.constant(Tensor::from_rows(student));
    let loss = embedding_kd_loss_graph(&mut g, t, s, cfg);
    Ok(g.value(loss).get(0, 0))
}

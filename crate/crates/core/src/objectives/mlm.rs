use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

use super::ObjectiveError;

fn check(rows: usize, cols: usize, labels: &[u32], positions: &[usize]) -> Result<(), ObjectiveError> {
    if positions.is_empty() {
        return Err(ObjectiveError::NoMaskedPositions);
    }
    if labels.len() != positions.len() {
        return Err(ObjectiveError::LabelCount {
            labels: labels.len(),
            positions: positions.len(),
        });
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= rows) {
        return Err(ObjectiveError::OutOfRange { index: p, limit: rows });
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= cols) {
        return Err(ObjectiveError::OutOfRange {
            index: l as usize,
            limit: cols,
        });
    }
    Ok(())
}

/// Mean cross entropy of `labels` at the masked `positions` of `logits`.
pub fn mlm_loss_graph(
    g: &mut Graph,
    logits: Var,
    labels: &[u32],
    positions: &[usize],
) -> Result<Var, ObjectiveError> {
    let (rows, cols) = g.value(logits).shape();
    check(rows, cols, labels, positions)?;
    let picked = g.gather(logits, positions);
    let targets: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    Ok(g.cross_entropy(picked, &targets))
}

pub fn mlm_loss(logits: &Tensor, labels: &[u32], positions: &[usize]) -> Result<f64, ObjectiveError> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = mlm_loss_graph(&mut g, l, labels, positions)?;
    Ok(g.value(loss).get(0, 0))
}

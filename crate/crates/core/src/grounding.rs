//! Knowledge and persona selection and their losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{argmax, log_softmax, Matrix};

/// Persona sentences chosen for one turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaDecision {
    pub level: usize,
    /// Selected indices in ascending order.
    pub selected: Vec<usize>,
    /// `sigmoid(score)` per persona sentence.
    pub per_candidate_prob: Vec<f64>,
}

/// Highest-scoring candidate; ties go to the lowest index.
pub fn select_knowledge(scores: &[f64]) -> Result<usize> {
    argmax(scores).ok_or(Error::EmptyCandidateSet)
}

/// `-log softmax(scores)[gt]`.
pub fn knowledge_loss(scores: &[f64], gt: usize) -> Result<f64> {
    if gt >= scores.len() {
        return Err(Error::IndexOutOfRange { index: gt, len: scores.len() });
    }
    Ok(-log_softmax(scores)[gt])
}

/// Persona-level logits `W^T cls + b`.
pub fn level_logits(cls_state: &[f64], weight: &Matrix, bias: &Matrix) -> Result<Vec<f64>> {
    if weight.rows() != cls_state.len() || bias.shape() != (1, weight.cols()) {
        return Err(Error::ShapeMismatch(format!(
            "cls {} against weight {:?} and bias {:?}",
            cls_state.len(),
            weight.shape(),
            bias.shape()
        )));
    }
    let x = Matrix::row_vector(cls_state.to_vec()).matmul(weight);
    Ok(x.data().iter().zip(bias.data()).map(|(a, b)| a + b).collect())
}

/// Number of persona sentences to ground, in `0..=P`.
pub fn predict_persona_level(cls_state: &[f64], weight: &Matrix, bias: &Matrix) -> Result<usize> {
    let logits = level_logits(cls_state, weight, bias)?;
    argmax(&logits).ok_or(Error::EmptyCandidateSet)
}

/// The `level` highest-scoring personas (ties toward the lower index).
pub fn select_personas(scores: &[f64], level: usize) -> Result<PersonaDecision> {
    if level > scores.len() {
        return Err(Error::LevelOutOfRange { level, max: scores.len() });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut selected = order[..level].to_vec();
    selected.sort_unstable();
    Ok(PersonaDecision {
        level,
        selected,
        per_candidate_prob: scores.iter().map(|&s| crate::graph::sigmoid(s)).collect(),
    })
}

fn check_labels(scores: &[f64], labels: &[f64]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::NonBinaryLabel(bad));
    }
    Ok(())
}

/// Summed binary cross-entropy with logits.
pub fn persona_loss(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_labels(scores, labels)?;
    Ok(scores.iter().zip(labels).map(|(&s, &y)| crate::graph::softplus(s) - y * s).sum())
}

/// `(P + 1)`-way cross-entropy of the persona-level classifier.
pub fn level_loss(level_logits: &[f64], gt_count: usize) -> Result<f64> {
    if level_logits.is_empty() || gt_count >= level_logits.len() {
        return Err(Error::CountOutOfRange { count: gt_count, max: level_logits.len().saturating_sub(1) });
    }
    Ok(-log_softmax(level_logits)[gt_count])
}

/// Labels as floats, for the graph losses.
pub fn labels_f64(labels: &[u8]) -> Vec<f64> {
    labels.iter().map(|&l| f64::from(l)).collect()
}

/// Cross-entropy of a `T x 1` or `1 x T` score node against `gt`.
pub fn cross_entropy_graph(g: &mut Graph, scores: Var, gt: usize) -> Result<Var> {
    let (r, c) = g.value(scores).shape();
    let row = if c == 1 && r > 1 { g.transpose(scores) } else { scores };
    let len = g.value(row).cols();
    if g.value(row).rows() != 1 || gt >= len {
        return Err(Error::IndexOutOfRange { index: gt, len });
    }
    let ls = g.log_softmax_rows(row);
    let picked = g.pick(ls, &[(0, gt)]);
    Ok(g.scale(picked, -1.0))
}

/// Summed BCE-with-logits of a `P x 1` score node: `sum softplus(s) - y s`.
pub fn bce_graph(g: &mut Graph, scores: Var, labels: &[f64]) -> Result<Var> {
    check_labels(g.value(scores).data(), labels)?;
    let shape = g.value(scores).shape();
    let sp = g.softplus(scores);
    let y = g.constant(Matrix::new(shape.0, shape.1, labels.to_vec()));
    let ys = g.mul(y, scores);
    let neg = g.scale(ys, -1.0);
    let total = g.add(sp, neg);
    Ok(g.sum(total))
}

/// Persona loss with the level indicator folded in at coefficient 1.
pub fn persona_grounding_loss_graph(g: &mut Graph, scores: Var, labels: &[f64], level_logits: Var) -> Result<Var> {
    let bce = bce_graph(g, scores, labels)?;
    let count = labels.iter().filter(|&&y| y == 1.0).count();
    let max = g.value(level_logits).len().saturating_sub(1);
    if count > max {
        return Err(Error::CountOutOfRange { count, max });
    }
    let lvl = cross_entropy_graph(g, level_logits, count)?;
    Ok(g.add(bce, lvl))
}

//! Per-branch metric-learning losses: label-smoothed identity loss,
//! batch-hard soft-margin triplet loss, and center loss, combined per branch
//! as id + triplet + lambda * center and summed over branches.

use crate::error::{Error, Result};
use crate::model::{BranchId, BranchOutputs, DeepMiner};
use crate::tensor::{Tape, Tensor};

/// Loss hyperparameters.
#[derive(Debug, Clone)]
pub struct LossConfig {
    /// Center-loss weight.
    pub lambda: f64,
    /// Label-smoothing strength.
    pub epsilon: f64,
    pub num_classes: usize,
}

impl LossConfig {
    pub fn new(num_classes: usize) -> Self {
        LossConfig {
            lambda: 5e-4,
            epsilon: 0.1,
            num_classes,
        }
    }
}

/// Per-identity feature centers for every branch, updated outside the
/// gradient path by a mean-delta rule.
pub struct CenterTable {
    pub lr: f64,
    entries: Vec<(BranchId, Tensor)>,
}

impl CenterTable {
    /// Zero-initialized centers shaped after the model's branch dims.
    pub fn for_model(model: &DeepMiner, lr: f64) -> Self {
        let entries = model
            .cfg()
            .feature_dims()
            .into_iter()
            .map(|(branch, dim)| {
                (
                    branch,
                    Tensor::zeros(vec![model.cfg().num_identities, dim]),
                )
            })
            .collect();
        CenterTable { lr, entries }
    }

    pub fn get(&self, branch: BranchId) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(b, _)| *b == branch)
            .map(|(_, t)| t)
    }
}

/// Smoothed target distribution: the true class gets 1 - eps*(C-1)/C, every
/// other class eps/C. The final entry absorbs the floating-point residual so
/// a left-to-right sum is exactly 1.0.
pub fn smoothed_targets(label: usize, num_classes: usize, epsilon: f64) -> Result<Vec<f64>> {
    if label >= num_classes {
        return Err(Error::IndexOutOfRange {
            index: label,
            len: num_classes,
        });
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidHyperparam(format!(
            "label smoothing epsilon {epsilon} outside [0,1)"
        )));
    }
    let c = num_classes as f64;
    let mut q = vec![epsilon / c; num_classes];
    q[label] = 1.0 - epsilon * (c - 1.0) / c;
    let prefix: f64 = q[..num_classes - 1].iter().sum();
    q[num_classes - 1] = 1.0 - prefix;
    Ok(q)
}

/// Mean over the batch of the cross entropy between smoothed targets and the
/// log-softmax of the logits.
pub fn id_loss(tape: &Tape, logits: &Tensor, labels: &[usize], epsilon: f64) -> Result<Tensor> {
    let [n, c] = *logits.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "id_loss expects [N,C] logits, got {:?}",
            logits.shape()
        )));
    };
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    let mut q = Vec::with_capacity(n * c);
    for &label in labels {
        q.extend(smoothed_targets(label, c, epsilon)?);
    }
    let q = Tensor::from_parts(vec![n, c], q, false);

    let max = tape.max_reduce(logits, &[1], true)?;
    let shifted = tape.sub(logits, &max)?;
    let lse = tape.log(&tape.sum(&tape.exp(&shifted)?, &[1], true)?)?;
    let log_probs = tape.sub(&shifted, &lse)?;
    let weighted = tape.sum_all(&tape.mul(&q, &log_probs)?)?;
    tape.scale(&tape.neg(&weighted)?, 1.0 / n as f64)
}

/// Batch-hard soft-margin triplet loss: per anchor, softplus(hardest-positive
/// distance - hardest-negative distance), summed over all anchors.
///
/// Hardest positive is the farthest same-label sample (the anchor itself
/// participates at distance 0 and never wins unless every positive is an
/// exact duplicate); hardest negative is the closest different-label sample.
pub fn triplet_loss(tape: &Tape, features: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let [n, d] = *features.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "triplet_loss expects [N,d] features, got {:?}",
            features.shape()
        )));
    };
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {n} feature rows",
            labels.len()
        )));
    }
    let mut counts = std::collections::HashMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if counts.len() < 2 {
        return Err(Error::DegenerateBatch(
            "triplet loss needs at least 2 distinct labels".into(),
        ));
    }
    if let Some((l, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::DegenerateBatch(format!(
            "label {l} has a single sample; triplet loss needs >= 2 per label"
        )));
    }

    // hardest-pair selection on plain values (selection is not differentiated)
    let fd = features.data();
    let mut sq = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for k in 0..d {
                let diff = fd[i * d + k] - fd[j * d + k];
                s += diff * diff;
            }
            sq[i * n + j] = s;
            sq[j * n + i] = s;
        }
    }
    let mut sel_pos = vec![0.0; n * n];
    let mut sel_neg = vec![0.0; n * n];
    for i in 0..n {
        let mut best_pos = i;
        let mut best_pos_d = -1.0;
        let mut best_neg = usize::MAX;
        let mut best_neg_d = f64::INFINITY;
        for j in 0..n {
            if labels[j] == labels[i] {
                if sq[i * n + j] > best_pos_d {
                    best_pos_d = sq[i * n + j];
                    best_pos = j;
                }
            } else if sq[i * n + j] < best_neg_d {
                best_neg_d = sq[i * n + j];
                best_neg = j;
            }
        }
        sel_pos[i * n + best_pos] = 1.0;
        sel_neg[i * n + best_neg] = 1.0;
    }
    drop(fd);

    let sel_pos = Tensor::from_parts(vec![n, n], sel_pos, false);
    let sel_neg = Tensor::from_parts(vec![n, n], sel_neg, false);
    let d_pos = selected_distance(tape, features, &sel_pos)?;
    let d_neg = selected_distance(tape, features, &sel_neg)?;
    let margin = tape.sub(&d_pos, &d_neg)?;
    tape.sum_all(&tape.softplus(&margin)?)
}

/// Euclidean distance from each feature row to its selected row, on the tape.
/// Rows whose squared distance is exactly zero (duplicates) contribute a
/// constant 0 with zero gradient, keeping sqrt inside its domain.
fn selected_distance(tape: &Tape, features: &Tensor, selector: &Tensor) -> Result<Tensor> {
    let n = features.shape()[0];
    let picked = tape.matmul(selector, features)?;
    let diff = tape.sub(features, &picked)?;
    let sq = tape.sum(&tape.mul(&diff, &diff)?, &[1], false)?;
    let zero_rows: Vec<f64> = sq
        .data()
        .iter()
        .map(|&v| if v == 0.0 { 1.0 } else { 0.0 })
        .collect();
    if zero_rows.iter().all(|&z| z == 0.0) {
        return tape.sqrt(&sq);
    }
    let bump = Tensor::from_parts(vec![n], zero_rows.clone(), false);
    let keep = Tensor::from_parts(
        vec![n],
        zero_rows.iter().map(|&z| 1.0 - z).collect(),
        false,
    );
    tape.mul(&tape.sqrt(&tape.add(&sq, &bump)?)?, &keep)
}

/// Half the summed squared distance from each feature to its identity's
/// center. Differentiable with respect to the features only.
pub fn center_loss(
    tape: &Tape,
    features: &Tensor,
    labels: &[usize],
    centers: &Tensor,
) -> Result<Tensor> {
    let [n, d] = *features.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "center_loss expects [N,d] features, got {:?}",
            features.shape()
        )));
    };
    let [num_classes, dc] = *centers.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "center_loss expects [C,d] centers, got {:?}",
            centers.shape()
        )));
    };
    if dc != d || labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "features [{n},{d}] vs centers [{num_classes},{dc}] with {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: num_classes,
        });
    }
    let mut selector = vec![0.0; n * num_classes];
    for (i, &l) in labels.iter().enumerate() {
        selector[i * num_classes + l] = 1.0;
    }
    let selector = Tensor::from_parts(vec![n, num_classes], selector, false);
    let own = tape.matmul(&selector, &centers.detach())?;
    let diff = tape.sub(features, &own)?;
    tape.scale(&tape.sum_all(&tape.mul(&diff, &diff)?)?, 0.5)
}

/// Moves each referenced center by `lr` times the mean offset of its batch
/// members; unreferenced centers stay put.
pub fn update_centers(features: &Tensor, labels: &[usize], centers: &Tensor, lr: f64) {
    let n = features.shape()[0];
    let d = features.shape()[1];
    let fd = features.data();
    let mut deltas: std::collections::BTreeMap<usize, (Vec<f64>, usize)> =
        std::collections::BTreeMap::new();
    let cd = centers.data();
    for i in 0..n {
        let entry = deltas
            .entry(labels[i])
            .or_insert_with(|| (vec![0.0; d], 0));
        for k in 0..d {
            entry.0[k] += fd[i * d + k] - cd[labels[i] * d + k];
        }
        entry.1 += 1;
    }
    drop(cd);
    drop(fd);
    centers.update_data(|data| {
        for (label, (sum, count)) in deltas {
            for k in 0..d {
                data[label * d + k] += lr * sum[k] / count as f64;
            }
        }
    });
}

/// Loss terms of one branch, as plain values for logging.
#[derive(Debug, Clone)]
pub struct BranchLossTerms {
    pub branch: BranchId,
    pub id: f64,
    pub triplet: f64,
    pub center: f64,
    pub total: f64,
}

/// Composite loss over all branches: sum of id + triplet + lambda*center.
/// Returns the scalar loss tensor and the per-branch breakdown.
pub fn total_loss(
    tape: &Tape,
    outputs: &BranchOutputs,
    labels: &[usize],
    centers: &CenterTable,
    cfg: &LossConfig,
) -> Result<(Tensor, Vec<BranchLossTerms>)> {
    let mut grand: Option<Tensor> = None;
    let mut breakdown = Vec::with_capacity(outputs.branches.len());
    for bf in &outputs.branches {
        let branch = bf.branch;
        let term_ctx = |term: &'static str, e: Error| match e {
            Error::NonFiniteInput(op) => Error::TrainAbort(format!(
                "non-finite {term} loss in branch {branch} (op {op})"
            )),
            other => other,
        };
        let id = id_loss(tape, &bf.logits, labels, cfg.epsilon)
            .map_err(|e| term_ctx("id", e))?;
        let triplet =
            triplet_loss(tape, &bf.f, labels).map_err(|e| term_ctx("triplet", e))?;
        let center_matrix = centers.get(branch).ok_or_else(|| {
            Error::ConfigInvalid(format!("no center table entry for branch {branch}"))
        })?;
        let center = center_loss(tape, &bf.f, labels, center_matrix)
            .map_err(|e| term_ctx("center", e))?;

        let branch_total = tape.add(&tape.add(&id, &triplet)?, &tape.scale(&center, cfg.lambda)?)?;
        breakdown.push(BranchLossTerms {
            branch,
            id: id.item(),
            triplet: triplet.item(),
            center: center.item(),
            total: branch_total.item(),
        });
        grand = Some(match grand {
            Some(acc) => tape.add(&acc, &branch_total)?,
            None => branch_total,
        });
    }
    let grand = grand.ok_or_else(|| Error::ConfigInvalid("model has no branches".into()))?;
    Ok((grand, breakdown))
}

//! Supervised contrastive loss over one or two augmented views.

use crate::data::augment::{augment_batch, AugmentationSpec};
use crate::embedding::{
    cosine_distance_matrix, distance_backward, DistanceMatrix, EmbeddingBatch, LabelVector,
};
use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp_with_weights, Matrix, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupConParams {
    pub tau: f64,
    /// Fail instead of skipping anchors that have no positive in the batch.
    pub fail_on_missing_positive: bool,
}

impl Default for SupConParams {
    fn default() -> Self {
        Self {
            tau: 0.1,
            fail_on_missing_positive: false,
        }
    }
}

impl SupConParams {
    pub fn new(tau: f64) -> Result<Self> {
        let p = Self {
            tau,
            ..Default::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Rows from one or two views of the same source samples, view-major:
/// rows `0..B` are view one, `B..2B` view two.
#[derive(Debug, Clone)]
pub struct MultiviewBatch {
    pub embeddings: EmbeddingBatch,
    pub labels: LabelVector,
    pub view_of: Vec<usize>,
    pub views: usize,
}

impl MultiviewBatch {
    pub fn single(embeddings: EmbeddingBatch, labels: LabelVector) -> Result<Self> {
        Self::from_views(vec![embeddings], labels)
    }

    /// Stacks per-view embeddings of the same `B` sources.
    pub fn from_views(views: Vec<EmbeddingBatch>, labels: LabelVector) -> Result<Self> {
        if !(1..=2).contains(&views.len()) {
            return Err(Error::InvalidConfiguration(format!(
                "view count must be 1 or 2, got {}",
                views.len()
            )));
        }
        let b = labels.len();
        for v in &views {
            if v.len() != b {
                return Err(Error::ShapeError {
                    op: "MultiviewBatch",
                    lhs: (v.len(), v.dim()),
                    rhs: (b, 1),
                });
            }
        }
        let count = views.len();
        let mut it = views.into_iter();
        let mut embeddings = it.next().expect("at least one view");
        for v in it {
            embeddings = embeddings.stack(&v)?;
        }
        Ok(Self {
            embeddings,
            labels: labels.repeat(count),
            view_of: (0..count).flat_map(|_| 0..b).collect(),
            views: count,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SupConOutput {
    pub loss: f64,
    /// Gradient with respect to whichever input the entry point consumed.
    pub grad: Matrix,
    pub anchors_used: usize,
    pub anchors_skipped: usize,
}

/// Contrastive loss on a distance matrix whose similarities are `1 − D`;
/// `grad` is `∂L/∂D`. Every off-diagonal row entry enters the denominator,
/// positives included.
pub fn supcon_from_distances(
    d: &DistanceMatrix,
    labels: &LabelVector,
    p: &SupConParams,
) -> Result<SupConOutput> {
    p.validate()?;
    let n = d.len();
    if labels.len() != n {
        return Err(Error::ShapeError {
            op: "supcon",
            lhs: (n, n),
            rhs: (labels.len(), 1),
        });
    }
    if n < 2 {
        return Err(Error::DegenerateInput(
            "supcon needs at least two rows".into(),
        ));
    }
    let y = labels.as_slice();
    let mut grad = Matrix::zeros(n, n);
    let mut total = 0.0;
    let mut used = 0usize;
    let mut sims = Vec::with_capacity(n - 1);
    let mut others = Vec::with_capacity(n - 1);
    // (anchor, per-anchor gradient row) collected first so the mean scale is known
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    for i in 0..n {
        sims.clear();
        others.clear();
        for j in (0..n).filter(|&j| j != i) {
            sims.push(1.0 - d.get(i, j));
            others.push(j);
        }
        let positives = others.iter().filter(|&&j| y[j] == y[i]).count();
        if positives == 0 {
            if p.fail_on_missing_positive {
                return Err(Error::PreconditionViolation(format!(
                    "anchor {i} has no positive in the batch"
                )));
            }
            continue;
        }
        let (lse, q) = log_sum_exp_with_weights(&sims, p.tau)?;
        let pos_sum: f64 = others
            .iter()
            .zip(&sims)
            .filter(|(&j, _)| y[j] == y[i])
            .map(|(_, s)| s)
            .sum();
        let inv_p = 1.0 / positives as f64;
        total += (lse - pos_sum * inv_p) / p.tau;
        used += 1;
        // ∂L_i/∂sim_ij = (q_j − [j ∈ P]/|P|)/τ and ∂sim/∂d = −1
        let row = others
            .iter()
            .zip(&q)
            .map(|(&j, &qj)| {
                let pos = if y[j] == y[i] { inv_p } else { 0.0 };
                -(qj - pos) / p.tau
            })
            .collect();
        rows.push((i, row));
    }
    if used > 0 {
        let scale = 1.0 / used as f64;
        for (i, row) in rows {
            for (j, g) in (0..n).filter(|&j| j != i).zip(row) {
                grad[(i, j)] = g * scale;
            }
        }
    }
    Ok(SupConOutput {
        loss: if used > 0 { total / used as f64 } else { 0.0 },
        grad,
        anchors_used: used,
        anchors_skipped: n - used,
    })
}

/// Contrastive loss on a normalized multi-view batch; `grad` is `∂L/∂Z`.
pub fn supcon_loss(batch: &MultiviewBatch, p: &SupConParams) -> Result<SupConOutput> {
    let d = cosine_distance_matrix(&batch.embeddings)?;
    let mut out = supcon_from_distances(&d, &batch.labels, p)?;
    out.grad = distance_backward(&out.grad, batch.embeddings.matrix())?;
    Ok(out)
}

/// Augments every input twice, encodes both views and stacks them.
pub fn build_two_view_batch<E>(
    x: &Matrix,
    labels: &LabelVector,
    augment: &AugmentationSpec,
    rng: &mut SeededRng,
    mut encode: E,
) -> Result<MultiviewBatch>
where
    E: FnMut(&Matrix) -> Result<EmbeddingBatch>,
{
    augment.validate()?;
    let first = augment_batch(x, augment, rng);
    let second = augment_batch(x, augment, rng);
    let v1 = encode(&first)?;
    let v2 = encode(&second)?;
    if !v1.is_normalized() || !v2.is_normalized() {
        return Err(Error::PreconditionViolation(
            "encoder must return normalized embeddings".into(),
        ));
    }
    MultiviewBatch::from_views(vec![v1, v2], labels.clone())
}

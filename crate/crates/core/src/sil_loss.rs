//! Differentiable soft silhouette loss and the exact silhouette score.
//!
//! For each anchor `i` with at least one same-class partner in the batch:
//!
//! ```text
//! a(i)   = mean_{j ∈ S(i)} d(i,j)
//! d(i,c) = mean_{j ∈ S_c} d(i,j)                  for every other class c present
//! b(i)   = −τ_s · ln Σ_c exp(−d(i,c)/τ_s)
//! m(i)   =  τ_m · ln(exp(a/τ_m) + exp(b/τ_m))
//! s(i)   = (b − a) / (m + ε)
//! L      = −mean_i s(i)
//! ```
//!
//! Two gradient routes are provided. [`soft_silhouette`] works on a distance
//! matrix and returns `∂L/∂D`, which lets the contrastive loss share the same
//! matrix. [`soft_silhouette_embeddings`] works on normalized embeddings
//! directly through per-class sums, costing `O(B·C·d)` instead of `O(B²·d)`.

use crate::embedding::partition_by_class;
use crate::embedding::{
    cosine_distance_matrix, l2_normalize_rows, ClassPartition, DistanceMatrix, EmbeddingBatch,
    LabelVector,
};
use crate::error::{Error, Result};
use crate::numerics::{dot, matmul_nt, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SilhouetteParams {
    pub tau_s: f64,
    pub tau_m: f64,
    pub epsilon: f64,
    /// Fail with [`Error::SingletonClass`] instead of skipping such anchors.
    pub fail_on_singleton: bool,
}

impl Default for SilhouetteParams {
    fn default() -> Self {
        Self {
            tau_s: 0.1,
            tau_m: 0.05,
            epsilon: 1e-8,
            fail_on_singleton: false,
        }
    }
}

impl SilhouetteParams {
    pub fn new(tau_s: f64, tau_m: f64, epsilon: f64) -> Result<Self> {
        let p = Self {
            tau_s,
            tau_m,
            epsilon,
            fail_on_singleton: false,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau_s", self.tau_s), ("tau_m", self.tau_m)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        // ε = 0 is allowed so the hard-max limit can be probed exactly.
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be non-negative, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Per-anchor intermediates.
#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteTerms {
    pub a: f64,
    /// `(class, mean distance)` for every other class present, ascending class order.
    pub d_ic: Vec<(usize, f64)>,
    pub b: f64,
    pub m_tilde: f64,
    pub s_tilde: f64,
}

/// Loss value, per-anchor terms (`None` for skipped anchors) and the gradient
/// with respect to whichever input the route consumed.
#[derive(Debug, Clone)]
pub struct SoftSilhouette {
    pub loss: f64,
    pub terms: Vec<Option<SilhouetteTerms>>,
    pub grad: Matrix,
    pub skipped: usize,
}

impl SoftSilhouette {
    pub fn used(&self) -> usize {
        self.terms.len() - self.skipped
    }

    /// Smallest and largest per-anchor soft score, if any anchor was scored.
    pub fn score_range(&self) -> Option<(f64, f64)> {
        self.terms.iter().flatten().fold(None, |acc, t| match acc {
            None => Some((t.s_tilde, t.s_tilde)),
            Some((lo, hi)) => Some((lo.min(t.s_tilde), hi.max(t.s_tilde))),
        })
    }
}

/// `a(i)`: mean distance from `i` to the other members of its class.
pub fn intra_class_mean(d: &DistanceMatrix, part: &ClassPartition, i: usize) -> Result<f64> {
    let members = part.members(part.label(i));
    if members.len() < 2 {
        return Err(Error::SingletonClass { index: i });
    }
    let sum: f64 = members
        .iter()
        .filter(|&&j| j != i)
        .map(|&j| d.get(i, j))
        .sum();
    Ok(sum / (members.len() - 1) as f64)
}

/// `d(i,c)` for every class `c ≠ yᵢ` present in the batch.
pub fn inter_class_means(
    d: &DistanceMatrix,
    part: &ClassPartition,
    i: usize,
) -> Result<Vec<(usize, f64)>> {
    let own = part.label(i);
    let out: Vec<(usize, f64)> = (0..part.num_classes())
        .filter(|&c| c != own && !part.members(c).is_empty())
        .map(|c| {
            let members = part.members(c);
            let sum: f64 = members.iter().map(|&j| d.get(i, j)).sum();
            (c, sum / members.len() as f64)
        })
        .collect();
    if out.is_empty() {
        return Err(Error::SingleClassBatch);
    }
    Ok(out)
}

/// Score and partial derivatives for one anchor.
struct AnchorScore {
    terms: SilhouetteTerms,
    ds_da: f64,
    /// `∂s/∂d(i,c)`, aligned with `terms.d_ic`.
    ds_dclass: Vec<f64>,
}

fn score_anchor(a: f64, d_ic: Vec<(usize, f64)>, p: &SilhouetteParams) -> Result<AnchorScore> {
    if d_ic.is_empty() {
        return Err(Error::SingleClassBatch);
    }
    // soft-min over class means, weights kept in place for the gradient
    let lo = d_ic.iter().fold(f64::INFINITY, |m, &(_, v)| m.min(v));
    // exp(0) is exactly 1, so the nearest class and the larger of (a, b) skip the call
    let unit_or_exp = |x: f64| if x == 0.0 { 1.0 } else { x.exp() };
    let mut w: Vec<f64> = d_ic
        .iter()
        .map(|&(_, v)| unit_or_exp(-(v - lo) / p.tau_s))
        .collect();
    let total: f64 = w.iter().sum();
    let b = lo - p.tau_s * total.ln();
    // smooth max of (a, b)
    let hi = a.max(b);
    let ea = unit_or_exp((a - hi) / p.tau_m);
    let eb = unit_or_exp((b - hi) / p.tau_m);
    let m = hi + p.tau_m * (ea + eb).ln();
    let (sigma_a, sigma_b) = (ea / (ea + eb), eb / (ea + eb));
    let denom = m + p.epsilon;
    let num = b - a;
    let s = num / denom;
    let q = num / (denom * denom);
    let ds_da = -1.0 / denom - q * sigma_a;
    let ds_db = 1.0 / denom - q * sigma_b;
    for wc in &mut w {
        *wc *= ds_db / total;
    }
    Ok(AnchorScore {
        terms: SilhouetteTerms {
            a,
            d_ic,
            b,
            m_tilde: m,
            s_tilde: s,
        },
        ds_da,
        ds_dclass: w,
    })
}

fn check_classes(part: &ClassPartition) -> Result<()> {
    if part.present_classes().len() < 2 {
        return Err(Error::SingleClassBatch);
    }
    Ok(())
}

/// Soft silhouette loss on a distance matrix; `grad` is `∂L/∂D`.
///
/// Each anchor reads only its own row of `D`, so the gradient is generally
/// not symmetric. Chain through [`crate::embedding::distance_backward`] for
/// embedding gradients.
pub fn soft_silhouette(
    d: &DistanceMatrix,
    part: &ClassPartition,
    p: &SilhouetteParams,
) -> Result<SoftSilhouette> {
    p.validate()?;
    let n = d.len();
    if part.batch_size() != n {
        return Err(Error::ShapeError {
            op: "soft_silhouette",
            lhs: (n, n),
            rhs: (part.batch_size(), 1),
        });
    }
    check_classes(part)?;

    let mut scored = Vec::with_capacity(n);
    for i in 0..n {
        let a = match intra_class_mean(d, part, i) {
            Ok(a) => a,
            Err(Error::SingletonClass { .. }) if !p.fail_on_singleton => {
                scored.push(None);
                continue;
            }
            Err(e) => return Err(e),
        };
        let d_ic = inter_class_means(d, part, i)?;
        scored.push(Some(score_anchor(a, d_ic, p)?));
    }

    let used = scored.iter().flatten().count();
    let mut grad = Matrix::zeros(n, n);
    let mut total = 0.0;
    if used > 0 {
        let scale = -1.0 / used as f64;
        for (i, s) in scored.iter().enumerate() {
            let Some(s) = s else { continue };
            total += s.terms.s_tilde;
            let own = part.members(part.label(i));
            let ga = scale * s.ds_da / (own.len() - 1) as f64;
            for &j in own {
                if j != i {
                    grad[(i, j)] += ga;
                }
            }
            for (&(c, _), &dsc) in s.terms.d_ic.iter().zip(&s.ds_dclass) {
                let members = part.members(c);
                let gc = scale * dsc / members.len() as f64;
                for &j in members {
                    grad[(i, j)] += gc;
                }
            }
        }
    }
    let loss = if used > 0 { -total / used as f64 } else { 0.0 };
    Ok(SoftSilhouette {
        loss,
        skipped: n - used,
        terms: scored.into_iter().map(|s| s.map(|s| s.terms)).collect(),
        grad,
    })
}

/// Soft silhouette loss on normalized embeddings via per-class sums; `grad`
/// is `∂L/∂Z`. Agrees with [`soft_silhouette`] on `1 − ZZᵀ` up to rounding.
pub fn soft_silhouette_embeddings(
    z: &EmbeddingBatch,
    part: &ClassPartition,
    p: &SilhouetteParams,
) -> Result<SoftSilhouette> {
    p.validate()?;
    if !z.is_normalized() {
        return Err(Error::PreconditionViolation(
            "soft_silhouette_embeddings expects l2-normalized rows".into(),
        ));
    }
    let zm = z.matrix();
    let (n, dim) = zm.shape();
    if part.batch_size() != n {
        return Err(Error::ShapeError {
            op: "soft_silhouette_embeddings",
            lhs: (n, dim),
            rhs: (part.batch_size(), 1),
        });
    }
    check_classes(part)?;
    let classes = part.num_classes();

    // class_sum[c] = Σ_{j ∈ S_c} z_j
    let mut class_sum = Matrix::zeros(classes, dim);
    for c in 0..classes {
        for &j in part.members(c) {
            for (s, v) in class_sum.row_mut(c).iter_mut().zip(zm.row(j)) {
                *s += v;
            }
        }
    }

    // dots[(i, c)] = z_i · class_sum[c]
    let dots = matmul_nt(zm, &class_sum)?;
    let mut scored = Vec::with_capacity(n);
    for i in 0..n {
        let own_class = part.label(i);
        let own = part.members(own_class).len();
        if own < 2 {
            if p.fail_on_singleton {
                return Err(Error::SingletonClass { index: i });
            }
            scored.push(None);
            continue;
        }
        let zi = zm.row(i);
        let self_dot = dot(zi, zi);
        let a = 1.0 - (dots[(i, own_class)] - self_dot) / (own - 1) as f64;
        let mut d_ic = Vec::with_capacity(classes - 1);
        for (c, &dc) in dots.row(i).iter().enumerate() {
            let size = part.members(c).len();
            if c != own_class && size > 0 {
                d_ic.push((c, 1.0 - dc / size as f64));
            }
        }
        scored.push(Some(score_anchor(a, d_ic, p)?));
    }

    let used = scored.iter().flatten().count();
    let mut grad = Matrix::zeros(n, dim);
    let mut total = 0.0;
    if used > 0 {
        let scale = -1.0 / used as f64;
        // alpha[i] = ∂L/∂a(i); beta[i][c] = ∂L/∂d(i,c)
        let mut alpha = vec![0.0; n];
        let mut beta = Matrix::zeros(n, classes);
        for (i, s) in scored.iter().enumerate() {
            let Some(s) = s else { continue };
            total += s.terms.s_tilde;
            alpha[i] = scale * s.ds_da;
            for (&(c, _), &dsc) in s.terms.d_ic.iter().zip(&s.ds_dclass) {
                beta[(i, c)] = scale * dsc;
            }
        }
        // own_weighted[c] = Σ_{k ∈ S_c} α_k z_k ; foreign_weighted[c] = Σ_{k ∉ S_c} β_{k,c} z_k
        let mut own_weighted = Matrix::zeros(classes, dim);
        let mut foreign_weighted = Matrix::zeros(classes, dim);
        for k in 0..n {
            let zk = zm.row(k);
            for (o, v) in own_weighted.row_mut(part.label(k)).iter_mut().zip(zk) {
                *o += alpha[k] * v;
            }
            for (c, &bkc) in beta.row(k).iter().enumerate() {
                if bkc != 0.0 {
                    for (o, v) in foreign_weighted.row_mut(c).iter_mut().zip(zk) {
                        *o += bkc * v;
                    }
                }
            }
        }
        for i in 0..n {
            let yi = part.label(i);
            let own = part.members(yi).len() as f64;
            let zi = zm.row(i);
            let g = grad.row_mut(i);
            if own >= 2.0 {
                let inv = 1.0 / (own - 1.0);
                let ai = alpha[i];
                // own statistics, then every same-class anchor that reads z_i
                for (((g, &s), &w), &v) in g
                    .iter_mut()
                    .zip(class_sum.row(yi))
                    .zip(own_weighted.row(yi))
                    .zip(zi)
                {
                    *g -= inv * (ai * (s - v) + w - ai * v);
                }
            }
            for (c, &bic) in beta.row(i).iter().enumerate() {
                if bic != 0.0 {
                    let f = bic / part.members(c).len() as f64;
                    for (g, &s) in g.iter_mut().zip(class_sum.row(c)) {
                        *g -= f * s;
                    }
                }
            }
            // foreign anchors whose d(k, yᵢ) includes z_i
            let inv = 1.0 / own;
            for (g, &w) in g.iter_mut().zip(foreign_weighted.row(yi)) {
                *g -= inv * w;
            }
        }
    }
    let loss = if used > 0 { -total / used as f64 } else { 0.0 };
    Ok(SoftSilhouette {
        loss,
        skipped: n - used,
        terms: scored.into_iter().map(|s| s.map(|s| s.terms)).collect(),
        grad,
    })
}

/// Exact silhouette scores.
#[derive(Debug, Clone, PartialEq)]
pub struct HardSilhouette {
    pub mean: f64,
    pub per_sample: Vec<f64>,
}

/// Exact silhouette on cosine distances. Rows are normalized first if needed.
/// Samples alone in their class score 0 and still count toward the mean.
pub fn hard_silhouette(embeddings: &EmbeddingBatch, y: &LabelVector) -> Result<HardSilhouette> {
    if embeddings.len() != y.len() {
        return Err(Error::ShapeError {
            op: "hard_silhouette",
            lhs: (embeddings.len(), embeddings.dim()),
            rhs: (y.len(), 1),
        });
    }
    let normalized;
    let z = if embeddings.is_normalized() {
        embeddings
    } else {
        normalized = l2_normalize_rows(embeddings)?.batch;
        &normalized
    };
    let d = cosine_distance_matrix(z)?;
    hard_silhouette_from_distances(&d, &partition_by_class(y))
}

pub fn hard_silhouette_from_distances(
    d: &DistanceMatrix,
    part: &ClassPartition,
) -> Result<HardSilhouette> {
    check_classes(part)?;
    let n = d.len();
    let mut per_sample = Vec::with_capacity(n);
    for i in 0..n {
        let a = match intra_class_mean(d, part, i) {
            Ok(a) => a,
            Err(Error::SingletonClass { .. }) => {
                per_sample.push(0.0);
                continue;
            }
            Err(e) => return Err(e),
        };
        let b = inter_class_means(d, part, i)?
            .into_iter()
            .map(|(_, v)| v)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        per_sample.push(if m > 0.0 { (b - a) / m } else { 0.0 });
    }
    let mean = per_sample.iter().sum::<f64>() / n as f64;
    Ok(HardSilhouette { mean, per_sample })
}

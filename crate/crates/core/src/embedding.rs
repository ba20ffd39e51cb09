//! Row normalization, cosine geometry and per-class index bookkeeping.

use crate::error::{Error, Result};
use crate::numerics::{dot, matmul, matmul_nt, Matrix};

const ZERO_ROW_NORM: f64 = 1e-12;

/// `B×d` embeddings, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    z: Matrix,
    normalized: bool,
}

impl EmbeddingBatch {
    pub fn new(z: Matrix) -> Result<Self> {
        if z.rows() == 0 || z.cols() == 0 {
            return Err(Error::DegenerateInput(format!(
                "embedding batch must be non-empty, got {}x{}",
                z.rows(),
                z.cols()
            )));
        }
        Ok(Self {
            z,
            normalized: false,
        })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.z
    }

    pub fn into_matrix(self) -> Matrix {
        self.z
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.z.cols()
    }

    /// Concatenates two normalized batches of equal width.
    pub fn stack(&self, other: &EmbeddingBatch) -> Result<EmbeddingBatch> {
        Ok(EmbeddingBatch {
            z: self.z.vstack(&other.z)?,
            normalized: self.normalized && other.normalized,
        })
    }
}

/// Output of [`l2_normalize_rows`] along with the row norms its Jacobian needs.
#[derive(Debug, Clone)]
pub struct NormalizedRows {
    pub batch: EmbeddingBatch,
    pub norms: Vec<f64>,
}

/// Divides every row by its Euclidean norm.
pub fn l2_normalize_rows(z: &EmbeddingBatch) -> Result<NormalizedRows> {
    let m = z.matrix();
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let norm = dot(m.row(r), m.row(r)).sqrt();
        if !(norm > ZERO_ROW_NORM) {
            return Err(Error::DegenerateInput(format!(
                "row {r} has near-zero norm {norm:e}"
            )));
        }
        for v in out.row_mut(r) {
            *v /= norm;
        }
        norms.push(norm);
    }
    Ok(NormalizedRows {
        batch: EmbeddingBatch {
            z: out,
            normalized: true,
        },
        norms,
    })
}

/// Pulls a gradient on normalized rows back to the raw rows:
/// `∂/∂x = (g − ŷ(ŷ·g)) / ‖x‖`.
pub fn l2_normalize_backward(normalized: &NormalizedRows, grad: &Matrix) -> Result<Matrix> {
    let y = normalized.batch.matrix();
    if y.shape() != grad.shape() {
        return Err(Error::ShapeError {
            op: "l2_normalize_backward",
            lhs: y.shape(),
            rhs: grad.shape(),
        });
    }
    let mut out = grad.clone();
    for r in 0..y.rows() {
        let yr = y.row(r);
        let proj = dot(yr, grad.row(r));
        let inv = 1.0 / normalized.norms[r];
        for (o, &yv) in out.row_mut(r).iter_mut().zip(yr) {
            *o = (*o - yv * proj) * inv;
        }
    }
    Ok(out)
}

/// Class labels for a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabelVector {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidLabel {
                label: bad,
                num_classes,
            });
        }
        Ok(Self {
            labels,
            num_classes,
        })
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn select(&self, indices: &[usize]) -> LabelVector {
        LabelVector {
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Labels repeated `views` times, view-major.
    pub fn repeat(&self, views: usize) -> LabelVector {
        let mut labels = Vec::with_capacity(self.labels.len() * views);
        for _ in 0..views {
            labels.extend_from_slice(&self.labels);
        }
        LabelVector {
            labels,
            num_classes: self.num_classes,
        }
    }
}

/// Batch indices grouped by class, each list in ascending index order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPartition {
    members: Vec<Vec<usize>>,
    labels: Vec<usize>,
}

impl ClassPartition {
    pub fn members(&self, class: usize) -> &[usize] {
        &self.members[class]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.members.len()
    }

    /// `|S(i)|`: same-class samples other than `i`.
    pub fn same_class_count(&self, i: usize) -> usize {
        self.members[self.labels[i]].len() - 1
    }

    /// Classes with at least one member, ascending.
    pub fn present_classes(&self) -> Vec<usize> {
        (0..self.members.len())
            .filter(|&c| !self.members[c].is_empty())
            .collect()
    }
}

pub fn partition_by_class(y: &LabelVector) -> ClassPartition {
    let mut members = vec![Vec::new(); y.num_classes()];
    for (i, &label) in y.as_slice().iter().enumerate() {
        members[label].push(i);
    }
    ClassPartition {
        members,
        labels: y.as_slice().to_vec(),
    }
}

/// Square matrix of pairwise distances. Rows are read per anchor, so the loss
/// code never assumes symmetry.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    d: Matrix,
}

impl DistanceMatrix {
    pub fn from_matrix(d: Matrix) -> Result<Self> {
        if d.rows() != d.cols() {
            return Err(Error::ShapeError {
                op: "DistanceMatrix",
                lhs: d.shape(),
                rhs: (d.cols(), d.rows()),
            });
        }
        Ok(Self { d })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.d
    }

    pub fn len(&self) -> usize {
        self.d.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.d.rows() == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[(i, j)]
    }
}

/// `D = 1 − Z Zᵀ` with the diagonal forced to zero.
pub fn cosine_distance_matrix(z: &EmbeddingBatch) -> Result<DistanceMatrix> {
    if !z.is_normalized() {
        return Err(Error::PreconditionViolation(
            "cosine_distance_matrix expects l2-normalized rows".into(),
        ));
    }
    let mut d = matmul_nt(z.matrix(), z.matrix())?;
    let n = d.rows();
    for i in 0..n {
        for j in 0..n {
            d[(i, j)] = if i == j { 0.0 } else { 1.0 - d[(i, j)] };
        }
    }
    Ok(DistanceMatrix { d })
}

/// Chains `∂L/∂D` through `D = 1 − Z Zᵀ`: `∂L/∂Z = −(G + Gᵀ) Z`.
/// Diagonal entries of `G` are ignored since the diagonal is constant.
pub fn distance_backward(grad_d: &Matrix, z: &Matrix) -> Result<Matrix> {
    let n = z.rows();
    if grad_d.shape() != (n, n) {
        return Err(Error::ShapeError {
            op: "distance_backward",
            lhs: grad_d.shape(),
            rhs: (n, n),
        });
    }
    let mut sym = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sym[(i, j)] = -(grad_d[(i, j)] + grad_d[(j, i)]);
            }
        }
    }
    matmul(&sym, z)
}

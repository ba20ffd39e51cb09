//! Comparison objectives: softmax cross-entropy, Center Loss and Proxy-NCA.

use crate::embedding::{EmbeddingBatch, LabelVector};
use crate::error::{Error, Result};
use crate::model::{Linear, LinearGrads};
use crate::numerics::{dot, log_sum_exp_with_weights, Matrix, SeededRng, ValueWithGrad};

/// Linear classifier on encoder features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub linear: Linear,
}

impl ClassifierHead {
    pub fn init(features: usize, classes: usize, rng: &mut SeededRng) -> Self {
        Self {
            linear: Linear::init(features, classes, rng),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.linear.output_width()
    }

    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        self.linear.forward(features)
    }

    pub fn backward(
        &self,
        features: &Matrix,
        grad_logits: &Matrix,
    ) -> Result<(LinearGrads, Matrix)> {
        let (grads, gx) = self.linear.backward(features, grad_logits, true)?;
        Ok((grads, gx.expect("input gradient requested")))
    }
}

/// Mean softmax negative log-likelihood; `grad` is `(softmax − onehot)/B`.
pub fn cross_entropy(logits: &Matrix, y: &LabelVector) -> Result<ValueWithGrad> {
    let (b, c) = logits.shape();
    if y.len() != b {
        return Err(Error::ShapeError {
            op: "cross_entropy",
            lhs: logits.shape(),
            rhs: (y.len(), 1),
        });
    }
    if b == 0 {
        return Err(Error::DegenerateInput(
            "cross_entropy on an empty batch".into(),
        ));
    }
    let mut grad = Matrix::zeros(b, c);
    let mut total = 0.0;
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        let label = y.as_slice()[i];
        if label >= c {
            return Err(Error::InvalidLabel {
                label,
                num_classes: c,
            });
        }
        let (lse, p) = log_sum_exp_with_weights(logits.row(i), 1.0)?;
        total += lse - logits[(i, label)];
        for (k, pk) in p.into_iter().enumerate() {
            grad[(i, k)] = (pk - if k == label { 1.0 } else { 0.0 }) * inv_b;
        }
    }
    Ok(ValueWithGrad {
        value: total * inv_b,
        grad,
    })
}

/// Learnable class centers, updated outside the main optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCenters {
    pub centers: Matrix,
    pub learning_rate: f64,
}

impl ClassCenters {
    pub fn zeros(classes: usize, dim: usize, learning_rate: f64) -> Self {
        Self {
            centers: Matrix::zeros(classes, dim),
            learning_rate,
        }
    }

    /// `c ← c − α·Δc`.
    pub fn apply_update(&mut self, update: &Matrix) -> Result<()> {
        self.centers.axpy(-self.learning_rate, update)
    }
}

#[derive(Debug, Clone)]
pub struct CenterLossOutput {
    pub loss: f64,
    pub grad_features: Matrix,
    /// Per-class `Σ (c_j − x_i) / (1 + n_j)` over the batch.
    pub center_update: Matrix,
}

/// `(1/2B)·Σᵢ ‖xᵢ − c_{yᵢ}‖²`.
pub fn center_loss(
    features: &Matrix,
    y: &LabelVector,
    c: &ClassCenters,
) -> Result<CenterLossOutput> {
    let (b, dim) = features.shape();
    if y.len() != b || c.centers.cols() != dim {
        return Err(Error::ShapeError {
            op: "center_loss",
            lhs: features.shape(),
            rhs: c.centers.shape(),
        });
    }
    let classes = c.centers.rows();
    let inv_b = 1.0 / b as f64;
    let mut grad = Matrix::zeros(b, dim);
    let mut update = Matrix::zeros(classes, dim);
    let mut counts = vec![0usize; classes];
    let mut total = 0.0;
    for i in 0..b {
        let label = y.as_slice()[i];
        if label >= classes {
            return Err(Error::InvalidLabel {
                label,
                num_classes: classes,
            });
        }
        counts[label] += 1;
        for d in 0..dim {
            let diff = features[(i, d)] - c.centers[(label, d)];
            total += diff * diff;
            grad[(i, d)] = diff * inv_b;
            update[(label, d)] -= diff;
        }
    }
    for (k, &n) in counts.iter().enumerate() {
        let inv = 1.0 / (1 + n) as f64;
        for v in update.row_mut(k) {
            *v *= inv;
        }
    }
    Ok(CenterLossOutput {
        loss: 0.5 * total * inv_b,
        grad_features: grad,
        center_update: update,
    })
}

/// Unit-norm class proxies.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProxies {
    pub proxies: Matrix,
}

impl ClassProxies {
    pub fn new(proxies: Matrix) -> Result<Self> {
        for r in 0..proxies.rows() {
            let n = dot(proxies.row(r), proxies.row(r)).sqrt();
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::PreconditionViolation(format!(
                    "proxy {r} has norm {n}, expected 1"
                )));
            }
        }
        Ok(Self { proxies })
    }

    pub fn num_classes(&self) -> usize {
        self.proxies.rows()
    }
}

#[derive(Debug, Clone)]
pub struct ProxyNcaOutput {
    pub loss: f64,
    pub grad_z: Matrix,
    pub grad_proxies: Matrix,
}

/// Mean over anchors of `d(z, p_y) + ln Σ_{c≠y} exp(−d(z, p_c))` with cosine
/// distance `d = 1 − z·p`; the positive proxy is left out of the denominator.
pub fn proxy_nca(
    embeddings: &EmbeddingBatch,
    y: &LabelVector,
    p: &ClassProxies,
) -> Result<ProxyNcaOutput> {
    if !embeddings.is_normalized() {
        return Err(Error::PreconditionViolation(
            "proxy_nca expects l2-normalized embeddings".into(),
        ));
    }
    let classes = p.num_classes();
    if classes < 2 {
        return Err(Error::InvalidConfiguration(format!(
            "proxy_nca needs at least 2 classes, got {classes}"
        )));
    }
    let z = embeddings.matrix();
    let (b, dim) = z.shape();
    if p.proxies.cols() != dim || y.len() != b {
        return Err(Error::ShapeError {
            op: "proxy_nca",
            lhs: z.shape(),
            rhs: p.proxies.shape(),
        });
    }
    let inv_b = 1.0 / b as f64;
    let mut grad_z = Matrix::zeros(b, dim);
    let mut grad_p = Matrix::zeros(classes, dim);
    let mut total = 0.0;
    let mut neg = Vec::with_capacity(classes - 1);
    let mut neg_idx = Vec::with_capacity(classes - 1);
    for i in 0..b {
        let label = y.as_slice()[i];
        if label >= classes {
            return Err(Error::InvalidLabel {
                label,
                num_classes: classes,
            });
        }
        let zi = z.row(i);
        neg.clear();
        neg_idx.clear();
        for c in (0..classes).filter(|&c| c != label) {
            // −d(z, p_c)
            neg.push(dot(zi, p.proxies.row(c)) - 1.0);
            neg_idx.push(c);
        }
        let d_pos = 1.0 - dot(zi, p.proxies.row(label));
        let (lse, q) = log_sum_exp_with_weights(&neg, 1.0)?;
        total += d_pos + lse;
        for d in 0..dim {
            let mut g = -p.proxies[(label, d)];
            for (&c, &qc) in neg_idx.iter().zip(&q) {
                g += qc * p.proxies[(c, d)];
            }
            grad_z[(i, d)] = g * inv_b;
            grad_p[(label, d)] -= zi[d] * inv_b;
        }
        for (&c, &qc) in neg_idx.iter().zip(&q) {
            for d in 0..dim {
                grad_p[(c, d)] += qc * zi[d] * inv_b;
            }
        }
    }
    Ok(ProxyNcaOutput {
        loss: total * inv_b,
        grad_z,
        grad_proxies: grad_p,
    })
}

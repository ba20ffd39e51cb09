use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First and second moments, created on the first step.
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::InvalidConfiguration(format!(
                "bad optimizer settings lr={} wd={} betas=({}, {}) eps={}",
                self.lr, self.weight_decay, self.beta1, self.beta2, self.eps
            )));
        }
        Ok(())
    }

    /// `p ← p(1 − lr·wd) − lr·m̂/(√v̂ + ε)`.
    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidState(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (t, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::ShapeError {
                    op: "adamw_step",
                    lhs: p.shape(),
                    rhs: g.shape(),
                });
            }
            if let Some(k) = g.as_slice().iter().position(|v| !v.is_finite()) {
                return Err(Error::NumericalFailure(format!(
                    "gradient of tensor {t} {:?} is {} at entry ({}, {})",
                    g.shape(),
                    g.as_slice()[k],
                    k / g.cols(),
                    k % g.cols()
                )));
            }
        }
        if self.m.is_empty() {
            self.m = grads
                .iter()
                .map(|g| Matrix::zeros(g.rows(), g.cols()))
                .collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.len()
            || self
                .m
                .iter()
                .zip(grads)
                .any(|(m, g)| m.shape() != g.shape())
        {
            return Err(Error::InvalidState(
                "optimizer moments do not match parameters".into(),
            ));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powf(self.step as f64);
        let bc2 = 1.0 - self.beta2.powf(self.step as f64);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let ps = p.as_mut_slice();
            let ms = m.as_mut_slice();
            let vs = v.as_mut_slice();
            for (k, &gk) in g.as_slice().iter().enumerate() {
                ms[k] = self.beta1 * ms[k] + (1.0 - self.beta1) * gk;
                vs[k] = self.beta2 * vs[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = ms[k] / bc1;
                let v_hat = vs[k] / bc2;
                ps[k] = ps[k] * decay - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Matrix {
        Matrix::filled(1, 1, v)
    }

    #[test]
    fn zero_grads_without_decay_leave_params() {
        let mut opt = AdamW::new(1e-3, 0.0);
        let mut p = Matrix::from_rows(&[[1.0, -2.0]]).unwrap();
        for _ in 0..3 {
            opt.step(vec![&mut p], &[Matrix::zeros(1, 2)]).unwrap();
        }
        assert_eq!(p.as_slice(), &[1.0, -2.0]);
    }

    #[test]
    fn decay_alone_shrinks_by_lr_wd() {
        let mut opt = AdamW::new(1e-3, 1e-4);
        let mut p = scalar(2.0);
        opt.step(vec![&mut p], &[scalar(0.0)]).unwrap();
        assert_eq!(p[(0, 0)], 2.0 * (1.0 - 1e-3 * 1e-4));
    }

    #[test]
    fn scalar_steps_match_reference() {
        // reference: explicit moment recursion written out for two steps
        let (lr, wd, b1, b2, eps) = (0.01, 0.1, 0.9, 0.999, 1e-8);
        let (g1, g2) = (0.5, -1.5);
        let mut p_ref = 1.0f64;
        let m1 = (1.0 - b1) * g1;
        let v1 = (1.0 - b2) * g1 * g1;
        p_ref = p_ref * (1.0 - lr * wd) - lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let m2 = b1 * m1 + (1.0 - b1) * g2;
        let v2 = b2 * v1 + (1.0 - b2) * g2 * g2;
        p_ref = p_ref * (1.0 - lr * wd)
            - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);

        let mut opt = AdamW::new(lr, wd);
        let mut p = scalar(1.0);
        opt.step(vec![&mut p], &[scalar(g1)]).unwrap();
        // first step moves by lr·sign(g) up to ε and decay
        assert!((p[(0, 0)] - (1.0 - lr * wd - lr)).abs() < 1e-9);
        opt.step(vec![&mut p], &[scalar(g2)]).unwrap();
        assert!((p[(0, 0)] - p_ref).abs() <= 1e-15);
        assert_eq!(opt.step, 2);
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let mut opt = AdamW::new(1e-3, 0.0);
        let mut p = Matrix::zeros(2, 2);
        let mut g = Matrix::zeros(2, 2);
        g.as_mut_slice()[3] = f64::NAN;
        match opt.step(vec![&mut p], &[g]) {
            Err(Error::NumericalFailure(msg)) => assert!(msg.contains("(1, 1)"), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut opt = AdamW::new(1e-3, 0.0);
        let mut p = Matrix::zeros(2, 2);
        assert!(matches!(
            opt.step(vec![&mut p], &[Matrix::zeros(1, 2)]),
            Err(Error::ShapeError { .. })
        ));
    }
}

//! Gaussian-mixture classification data.

use std::path::Path;

use crate::data::{stratified_split, Dataset};
use crate::embedding::LabelVector;
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::numerics::{Matrix, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Standard deviation of the class centers around the origin.
    pub spread: f64,
    /// Within-class standard deviation.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            dim: 32,
            per_class: 400,
            spread: 1.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

pub const SPEC_KEYS: [&str; 6] = ["classes", "dim", "per_class", "spread", "noise", "seed"];

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim == 0 || self.per_class < 2 {
            return Err(Error::InvalidConfiguration(format!(
                "synthetic spec needs >= 2 classes, >= 2 samples per class and dim >= 1, got {self:?}"
            )));
        }
        if !(self.spread > 0.0) || !(self.noise > 0.0) {
            return Err(Error::InvalidConfiguration(format!(
                "synthetic spread and noise must be positive, got {} and {}",
                self.spread, self.noise
            )));
        }
        Ok(())
    }

    /// Reads `classes`, `dim`, ... under an optional key prefix such as `synth.`.
    pub fn from_kv(kv: &KeyValues, prefix: &str, base: SyntheticSpec) -> Result<Self> {
        let key = |k: &str| format!("{prefix}{k}");
        let spec = Self {
            classes: kv.parsed_or(&key("classes"), base.classes)?,
            dim: kv.parsed_or(&key("dim"), base.dim)?,
            per_class: kv.parsed_or(&key("per_class"), base.per_class)?,
            spread: kv.parsed_or(&key("spread"), base.spread)?,
            noise: kv.parsed_or(&key("noise"), base.noise)?,
            seed: kv.parsed_or(&key("seed"), base.seed)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let kv = KeyValues::read(path)?;
        kv.reject_unknown(&SPEC_KEYS)?;
        Self::from_kv(&kv, "", Self::default())
    }
}

/// Draws centers from `N(0, spread²·I)`, samples as center plus
/// `N(0, noise²·I)`, then rescales every value to `[0,1]` with one global
/// affine map. Splits are stratified 70/15/15.
pub fn gen_gaussian_mixture(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = SeededRng::derive(spec.seed, 0x5e7);
    let centers = rng.normal_matrix(spec.classes, spec.dim).scale(spec.spread);
    let n = spec.classes * spec.per_class;
    let mut x = Matrix::zeros(n, spec.dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..spec.classes {
        for k in 0..spec.per_class {
            let r = c * spec.per_class + k;
            for d in 0..spec.dim {
                x[(r, d)] = centers[(c, d)] + spec.noise * rng.normal();
            }
            labels.push(c);
        }
    }
    let (lo, hi) = x
        .as_slice()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    let x = x.map(|v| (v - lo) / span);
    let y = LabelVector::new(labels, spec.classes)?;
    let splits = stratified_split(&y, 0.7, 0.15, &mut rng);
    Ok(Dataset {
        name: "synthetic".into(),
        x,
        y,
        splits,
        image: None,
        provenance: format!(
            "gaussian mixture: {} classes x {} samples, dim {}, spread {}, noise {}, seed {}",
            spec.classes, spec.per_class, spec.dim, spec.spread, spec.noise, spec.seed
        ),
    })
}

//! Cheap stochastic augmentations: horizontal flip, pad-and-crop, additive noise.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

/// Channel-major image layout (`C×H×W`, as in the CIFAR binary files).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub const CIFAR: ImageShape = ImageShape {
        height: 32,
        width: 32,
        channels: 3,
    };

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parses `HxWxC`, e.g. `32x32x3`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split('x').collect();
        let nums: Vec<usize> = parts
            .iter()
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| {
                Error::InvalidConfiguration(format!("bad image shape {s:?}, expected HxWxC"))
            })?;
        match nums.as_slice() {
            &[height, width, channels] if height * width * channels > 0 => Ok(Self {
                height,
                width,
                channels,
            }),
            _ => Err(Error::InvalidConfiguration(format!(
                "bad image shape {s:?}, expected HxWxC"
            ))),
        }
    }
}

impl std::fmt::Display for ImageShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// A zero probability, pad or sigma disables the corresponding transform.
/// Flip and crop only apply when `image` matches the row width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationSpec {
    pub flip_prob: f64,
    pub crop_pad: usize,
    pub noise_sigma: f64,
    pub image: Option<ImageShape>,
}

impl AugmentationSpec {
    pub fn disabled() -> Self {
        Self {
            flip_prob: 0.0,
            crop_pad: 0,
            noise_sigma: 0.0,
            image: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::InvalidConfiguration(format!(
                "flip probability must be in [0,1], got {}",
                self.flip_prob
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidConfiguration(format!(
                "noise sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.flip_prob == 0.0 && self.crop_pad == 0 && self.noise_sigma == 0.0
    }
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self::disabled()
    }
}

pub fn flip_horizontal(row: &[f64], shape: ImageShape) -> Vec<f64> {
    let mut out = row.to_vec();
    for c in 0..shape.channels {
        for r in 0..shape.height {
            let base = (c * shape.height + r) * shape.width;
            out[base..base + shape.width].reverse();
        }
    }
    out
}

/// Zero-pads by `pad` on every side and crops back at offset `(dy, dx)` from
/// the padded origin; `(pad, pad)` is the identity.
pub fn pad_crop(row: &[f64], shape: ImageShape, pad: usize, dy: usize, dx: usize) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    for c in 0..shape.channels {
        for r in 0..shape.height {
            let src_r = (r + dy) as isize - pad as isize;
            if src_r < 0 || src_r >= shape.height as isize {
                continue;
            }
            for col in 0..shape.width {
                let src_c = (col + dx) as isize - pad as isize;
                if src_c < 0 || src_c >= shape.width as isize {
                    continue;
                }
                out[(c * shape.height + r) * shape.width + col] =
                    row[(c * shape.height + src_r as usize) * shape.width + src_c as usize];
            }
        }
    }
    out
}

/// Applies flip, crop and noise in that order, drawing from `rng` only for
/// enabled transforms.
pub fn augment(row: &[f64], spec: &AugmentationSpec, rng: &mut SeededRng) -> Vec<f64> {
    let image = spec.image.filter(|s| s.len() == row.len());
    let mut out = row.to_vec();
    if let Some(shape) = image {
        if spec.flip_prob > 0.0 && rng.bernoulli(spec.flip_prob) {
            out = flip_horizontal(&out, shape);
        }
        if spec.crop_pad > 0 {
            let span = 2 * spec.crop_pad + 1;
            let dy = rng.below(span);
            let dx = rng.below(span);
            out = pad_crop(&out, shape, spec.crop_pad, dy, dx);
        }
    }
    if spec.noise_sigma > 0.0 {
        for v in &mut out {
            *v = (*v + spec.noise_sigma * rng.normal()).clamp(0.0, 1.0);
        }
    }
    out
}

/// Augments every row independently, in row order.
pub fn augment_batch(x: &Matrix, spec: &AugmentationSpec, rng: &mut SeededRng) -> Matrix {
    if spec.is_identity() {
        return x.clone();
    }
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = augment(x.row(r), spec, rng);
        out.row_mut(r).copy_from_slice(&row);
    }
    out
}

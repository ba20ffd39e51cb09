//! MLP encoder and projection head with an explicit tape for backward passes.
//!
//! Classifier logits attach to the encoder features, while contrastive and
//! silhouette losses attach to the l2-normalized projections. The backward
//! pass accepts gradients at both points and sums them.

pub mod checkpoint;
mod linear;
pub mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use linear::{Linear, LinearGrads};
pub use optim::AdamW;

use crate::baselines::{ClassCenters, ClassifierHead};
use crate::embedding::{l2_normalize_backward, l2_normalize_rows, EmbeddingBatch, NormalizedRows};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Linear layers each followed by a rectifier, with dropout on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpEncoder {
    pub layers: Vec<Linear>,
    pub dropout: f64,
}

/// Linear layers with rectifiers between them; no layers is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub layers: Vec<Linear>,
}

/// Everything needed to build a fresh [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Input width, hidden widths, feature width.
    pub encoder_widths: Vec<usize>,
    /// Hidden and output widths after the features; empty for identity.
    pub head_widths: Vec<usize>,
    pub dropout: f64,
    pub classes: usize,
    pub classifier: bool,
    pub proxies: bool,
    /// Learning rate of the class centers, if they are kept.
    pub center_lr: Option<f64>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.len() < 2
            || self.encoder_widths.contains(&0)
            || self.head_widths.contains(&0)
        {
            return Err(Error::InvalidConfiguration(format!(
                "encoder needs input and feature widths > 0, got {:?} / head {:?}",
                self.encoder_widths, self.head_widths
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfiguration(format!(
                "dropout must be in [0,1), got {}",
                self.dropout
            )));
        }
        if (self.classifier || self.proxies || self.center_lr.is_some()) && self.classes < 2 {
            return Err(Error::InvalidConfiguration(format!(
                "need >= 2 classes, got {}",
                self.classes
            )));
        }
        Ok(())
    }
}

/// Encoder, projection head and the optional per-objective parameters.
///
/// Parameters must be changed through [`Model::params_mut`] or
/// [`Model::centers_mut`]; tapes recorded before a change are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    encoder: MlpEncoder,
    head: ProjectionHead,
    classifier: Option<ClassifierHead>,
    proxies: Option<Matrix>,
    centers: Option<ClassCenters>,
    version: u64,
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    version: u64,
    encoder_inputs: Vec<Matrix>,
    encoder_pre: Vec<Matrix>,
    dropout_mask: Option<Matrix>,
    head_inputs: Vec<Matrix>,
    head_pre: Vec<Matrix>,
    normalized: NormalizedRows,
}

impl Tape {
    /// Inputs of every rectifier: all encoder layers and all head layers
    /// but the last.
    fn rectified(&self) -> impl Iterator<Item = &Matrix> {
        let last = self.head_pre.len().saturating_sub(1);
        self.encoder_pre
            .iter()
            .chain(self.head_pre.iter().take(last))
    }

    /// Smallest rectifier input magnitude; finite differences are only
    /// trustworthy when steps stay clear of the kink at zero.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.rectified()
            .flat_map(|m| m.as_slice())
            .fold(f64::INFINITY, |acc, v| acc.min(v.abs()))
    }

    /// Hidden units that are inactive on every row of the batch.
    pub fn dead_units(&self) -> usize {
        self.rectified()
            .map(|m| {
                (0..m.cols())
                    .filter(|&c| (0..m.rows()).all(|r| m[(r, c)] <= 0.0))
                    .count()
            })
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub features: Matrix,
    pub projections: EmbeddingBatch,
    pub tape: Tape,
}

/// Gradients for every trainable tensor, in [`Model::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: Vec<LinearGrads>,
    pub head: Vec<LinearGrads>,
    pub classifier: Option<LinearGrads>,
    pub proxies: Option<Matrix>,
}

impl Gradients {
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for g in self
            .encoder
            .iter()
            .chain(&self.head)
            .chain(&self.classifier)
        {
            out.push(&g.weight);
            out.push(&g.bias);
        }
        out.extend(&self.proxies);
        out
    }

    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        for (a, b) in self.encoder.iter_mut().zip(&other.encoder) {
            a.accumulate(b)?;
        }
        for (a, b) in self.head.iter_mut().zip(&other.head) {
            a.accumulate(b)?;
        }
        if let (Some(a), Some(b)) = (&mut self.classifier, &other.classifier) {
            a.accumulate(b)?;
        }
        if let (Some(a), Some(b)) = (&mut self.proxies, &other.proxies) {
            a.axpy(1.0, b)?;
        }
        Ok(())
    }
}

fn relu_in_place(m: &mut Matrix) {
    for v in m.as_mut_slice() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn relu_backward(grad: &mut Matrix, pre: &Matrix) {
    for (g, &p) in grad.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

impl Model {
    pub fn init(config: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let enc = &config.encoder_widths;
        let layers = enc
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], rng))
            .collect();
        let feature = *enc.last().expect("validated");
        let mut head_layers = Vec::new();
        let mut prev = feature;
        for &w in &config.head_widths {
            head_layers.push(Linear::init(prev, w, rng));
            prev = w;
        }
        let classifier = config
            .classifier
            .then(|| ClassifierHead::init(feature, config.classes, rng));
        let proxies = config
            .proxies
            .then(|| rng.normal_matrix(config.classes, prev));
        let centers = config
            .center_lr
            .map(|lr| ClassCenters::zeros(config.classes, feature, lr));
        Ok(Self {
            encoder: MlpEncoder {
                layers,
                dropout: config.dropout,
            },
            head: ProjectionHead {
                layers: head_layers,
            },
            classifier,
            proxies,
            centers,
            version: 0,
        })
    }

    /// Assembles a model from parts, checking that shapes chain.
    pub fn from_parts(
        encoder: MlpEncoder,
        head: ProjectionHead,
        classifier: Option<ClassifierHead>,
        proxies: Option<Matrix>,
        centers: Option<ClassCenters>,
    ) -> Result<Self> {
        let bad = |what: String| Err(Error::InvalidConfiguration(what));
        if encoder.layers.is_empty() {
            return bad("encoder has no layers".into());
        }
        if !(0.0..1.0).contains(&encoder.dropout) {
            return bad(format!("dropout must be in [0,1), got {}", encoder.dropout));
        }
        let mut prev = encoder.layers[0].input_width();
        for l in encoder.layers.iter().chain(&head.layers) {
            if l.input_width() != prev || l.bias.shape() != (1, l.output_width()) {
                return bad(format!(
                    "layer {:?} does not follow width {prev}",
                    l.weight.shape()
                ));
            }
            prev = l.output_width();
        }
        let feature = encoder.layers.last().expect("non-empty").output_width();
        if let Some(c) = &classifier {
            if c.linear.input_width() != feature || c.linear.bias.shape() != (1, c.num_classes()) {
                return bad("classifier does not match feature width".into());
            }
        }
        if let Some(p) = &proxies {
            if p.cols() != prev {
                return bad("proxies do not match projection width".into());
            }
        }
        if let Some(c) = &centers {
            if c.centers.cols() != feature {
                return bad("centers do not match feature width".into());
            }
        }
        Ok(Self {
            encoder,
            head,
            classifier,
            proxies,
            centers,
            version: 0,
        })
    }

    pub fn encoder(&self) -> &MlpEncoder {
        &self.encoder
    }

    pub fn head(&self) -> &ProjectionHead {
        &self.head
    }

    pub fn classifier(&self) -> Option<&ClassifierHead> {
        self.classifier.as_ref()
    }

    /// Raw (unnormalized) proxy parameters.
    pub fn proxies(&self) -> Option<&Matrix> {
        self.proxies.as_ref()
    }

    pub fn centers(&self) -> Option<&ClassCenters> {
        self.centers.as_ref()
    }

    pub fn centers_mut(&mut self) -> Option<&mut ClassCenters> {
        self.centers.as_mut()
    }

    pub fn input_width(&self) -> usize {
        self.encoder.layers[0].input_width()
    }

    pub fn feature_width(&self) -> usize {
        self.encoder
            .layers
            .last()
            .expect("non-empty")
            .output_width()
    }

    pub fn projection_width(&self) -> usize {
        self.head
            .layers
            .last()
            .map_or(self.feature_width(), Linear::output_width)
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|m| m.rows() * m.cols()).sum()
    }

    /// Trainable tensors: encoder and head `(W, b)` pairs, classifier, proxies.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        let layers = self.encoder.layers.iter().chain(&self.head.layers);
        for l in layers.chain(self.classifier.iter().map(|c| &c.linear)) {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.extend(&self.proxies);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.version += 1;
        let mut out = Vec::new();
        let layers = self.encoder.layers.iter_mut().chain(&mut self.head.layers);
        for l in layers.chain(self.classifier.iter_mut().map(|c| &mut c.linear)) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.extend(&mut self.proxies);
        out
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            encoder: self
                .encoder
                .layers
                .iter()
                .map(LinearGrads::zeros_like)
                .collect(),
            head: self
                .head
                .layers
                .iter()
                .map(LinearGrads::zeros_like)
                .collect(),
            classifier: self
                .classifier
                .as_ref()
                .map(|c| LinearGrads::zeros_like(&c.linear)),
            proxies: self
                .proxies
                .as_ref()
                .map(|p| Matrix::zeros(p.rows(), p.cols())),
        }
    }

    /// Unit-norm proxies and the norms needed to differentiate through them.
    pub fn normalized_proxies(&self) -> Result<Option<NormalizedRows>> {
        self.proxies
            .as_ref()
            .map(|p| l2_normalize_rows(&EmbeddingBatch::new(p.clone())?))
            .transpose()
    }

    /// Forward pass. Dropout masks are drawn from `rng` in train mode only.
    pub fn forward(&self, x: &Matrix, mode: Mode, rng: &mut SeededRng) -> Result<ForwardOutput> {
        if x.cols() != self.input_width() {
            return Err(Error::ShapeError {
                op: "forward",
                lhs: x.shape(),
                rhs: (x.rows(), self.input_width()),
            });
        }
        let mut encoder_inputs = Vec::with_capacity(self.encoder.layers.len());
        let mut encoder_pre = Vec::with_capacity(self.encoder.layers.len());
        let mut h = x.clone();
        for layer in &self.encoder.layers {
            let pre = layer.forward(&h)?;
            encoder_inputs.push(h);
            h = pre.clone();
            relu_in_place(&mut h);
            encoder_pre.push(pre);
        }
        let p = self.encoder.dropout;
        let dropout_mask = if mode == Mode::Train && p > 0.0 {
            let keep = 1.0 / (1.0 - p);
            let mut mask = Matrix::zeros(h.rows(), h.cols());
            for v in mask.as_mut_slice() {
                *v = if rng.bernoulli(p) { 0.0 } else { keep };
            }
            for (v, m) in h.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                *v *= m;
            }
            Some(mask)
        } else {
            None
        };
        let features = h.clone();
        let mut head_inputs = Vec::with_capacity(self.head.layers.len());
        let mut head_pre = Vec::with_capacity(self.head.layers.len());
        let last = self.head.layers.len().saturating_sub(1);
        for (k, layer) in self.head.layers.iter().enumerate() {
            let pre = layer.forward(&h)?;
            head_inputs.push(h);
            h = pre.clone();
            if k < last {
                relu_in_place(&mut h);
            }
            head_pre.push(pre);
        }
        let normalized = l2_normalize_rows(&EmbeddingBatch::new(h)?)?;
        Ok(ForwardOutput {
            features,
            projections: normalized.batch.clone(),
            tape: Tape {
                version: self.version,
                encoder_inputs,
                encoder_pre,
                dropout_mask,
                head_inputs,
                head_pre,
                normalized,
            },
        })
    }

    /// Eval-mode forward; a pure function of the parameters and `x`.
    pub fn forward_eval(&self, x: &Matrix) -> Result<ForwardOutput> {
        // eval mode never draws from the generator
        self.forward(x, Mode::Eval, &mut SeededRng::new(0))
    }

    /// Chain rule from the two attachment points back to every encoder and
    /// head parameter. Classifier and proxy slots are returned as zeros.
    pub fn backward(
        &self,
        tape: &Tape,
        grad_features: Option<&Matrix>,
        grad_projections: Option<&Matrix>,
    ) -> Result<Gradients> {
        if tape.version != self.version {
            return Err(Error::InvalidState(format!(
                "tape recorded at parameter version {} but model is at {}",
                tape.version, self.version
            )));
        }
        let mut grads = self.zero_grads();
        let feat_shape = tape
            .head_inputs
            .first()
            .map_or(tape.normalized.batch.matrix().shape(), Matrix::shape);
        let mut g_feat = match grad_features {
            Some(g) if g.shape() != feat_shape => {
                return Err(Error::ShapeError {
                    op: "backward(features)",
                    lhs: g.shape(),
                    rhs: feat_shape,
                })
            }
            Some(g) => g.clone(),
            None => Matrix::zeros(feat_shape.0, feat_shape.1),
        };
        if let Some(gp) = grad_projections {
            let mut g = l2_normalize_backward(&tape.normalized, gp)?;
            for k in (0..self.head.layers.len()).rev() {
                let (lg, gx) = self.head.layers[k].backward(&tape.head_inputs[k], &g, true)?;
                grads.head[k] = lg;
                g = gx.expect("requested");
                if k > 0 {
                    relu_backward(&mut g, &tape.head_pre[k - 1]);
                }
            }
            g_feat.axpy(1.0, &g)?;
        }
        if let Some(mask) = &tape.dropout_mask {
            for (g, m) in g_feat.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                *g *= m;
            }
        }
        let mut g = g_feat;
        for k in (0..self.encoder.layers.len()).rev() {
            relu_backward(&mut g, &tape.encoder_pre[k]);
            let (lg, gx) = self.encoder.layers[k].backward(&tape.encoder_inputs[k], &g, k > 0)?;
            grads.encoder[k] = lg;
            if let Some(gx) = gx {
                g = gx;
            }
        }
        Ok(grads)
    }

    /// One optimizer step over every trainable tensor.
    pub fn apply_gradients(&mut self, opt: &mut AdamW, grads: &Gradients) -> Result<()> {
        let g: Vec<Matrix> = grads.tensors().into_iter().cloned().collect();
        opt.step(self.params_mut(), &g)
    }
}

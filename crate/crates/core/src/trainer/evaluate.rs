//! Classification accuracy, linear probes and embedding quality.

use serde::{Deserialize, Serialize};

use crate::baselines::{cross_entropy, ClassifierHead};
use crate::embedding::LabelVector;
use crate::error::{Error, Result};
use crate::model::{AdamW, Model};
use crate::numerics::{matmul_nt, Matrix, SeededRng};
use crate::sil_loss::hard_silhouette;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub top1: f64,
    /// Accuracy within the `top5_k` largest scores.
    pub top5: f64,
    /// `min(5, C)`.
    pub top5_k: usize,
    pub silhouette: f64,
}

/// How class scores are produced from the network.
#[derive(Debug, Clone, Copy)]
pub enum Scorer<'a> {
    /// The model's own classifier head on features.
    Classifier,
    /// Cosine similarity between projections and normalized proxies.
    Proxies,
    /// A separately fit linear probe on frozen features.
    Probe(&'a ClassifierHead),
}

impl Scorer<'_> {
    /// Picks the scorer a trained model supports, preferring its classifier.
    pub fn for_model<'p>(model: &Model, probe: Option<&'p ClassifierHead>) -> Result<Scorer<'p>> {
        if model.classifier().is_some() {
            Ok(Scorer::Classifier)
        } else if model.proxies().is_some() {
            Ok(Scorer::Proxies)
        } else {
            probe.map(Scorer::Probe).ok_or_else(|| {
                Error::InvalidConfiguration(
                    "model has no classifier or proxies; a probe is required".into(),
                )
            })
        }
    }
}

/// Fraction of rows whose true class ranks within the top `k` scores.
/// A class outranks the true one if it scores higher, or equal with a
/// lower index.
pub fn topk_accuracy(scores: &Matrix, y: &LabelVector, k: usize) -> Result<f64> {
    if scores.rows() != y.len() || scores.rows() == 0 {
        return Err(Error::ShapeError {
            op: "topk_accuracy",
            lhs: scores.shape(),
            rhs: (y.len(), scores.cols()),
        });
    }
    let mut hits = 0usize;
    for (i, &label) in y.as_slice().iter().enumerate() {
        let row = scores.row(i);
        let own = row[label];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > own || (s == own && j < label))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / y.len() as f64)
}

pub fn class_scores(model: &Model, x: &Matrix, scorer: Scorer<'_>) -> Result<(Matrix, Matrix)> {
    let out = model.forward_eval(x)?;
    let scores = match scorer {
        Scorer::Classifier => model
            .classifier()
            .ok_or_else(|| Error::InvalidConfiguration("model has no classifier".into()))?
            .logits(&out.features)?,
        Scorer::Proxies => {
            let p = model
                .normalized_proxies()?
                .ok_or_else(|| Error::InvalidConfiguration("model has no proxies".into()))?;
            matmul_nt(out.projections.matrix(), p.batch.matrix())?
        }
        Scorer::Probe(head) => head.logits(&out.features)?,
    };
    Ok((scores, out.projections.into_matrix()))
}

/// Top-1, top-min(5, C) and the hard silhouette of the normalized
/// projections over the whole split.
pub fn evaluate(
    model: &Model,
    x: &Matrix,
    y: &LabelVector,
    scorer: Scorer<'_>,
) -> Result<EvalMetrics> {
    let (scores, projections) = class_scores(model, x, scorer)?;
    let k = 5.min(scores.cols());
    let top1 = topk_accuracy(&scores, y, 1)?;
    let top5 = topk_accuracy(&scores, y, k)?;
    let sil = hard_silhouette(&crate::embedding::EmbeddingBatch::new(projections)?, y)?;
    Ok(EvalMetrics {
        top1,
        top5,
        top5_k: k,
        silhouette: sil.mean,
    })
}

const PROBE_BATCH: usize = 256;

/// Softmax classifier fit on eval-mode encoder features with AdamW,
/// shuffled minibatches of 256 and no weight decay.
pub fn fit_linear_probe(
    model: &Model,
    x: &Matrix,
    y: &LabelVector,
    epochs: usize,
    lr: f64,
    rng: &mut SeededRng,
) -> Result<ClassifierHead> {
    if epochs == 0 {
        return Err(Error::InvalidConfiguration(
            "probe needs at least one epoch".into(),
        ));
    }
    let features = model.forward_eval(x)?.features;
    let mut head = ClassifierHead::init(features.cols(), y.num_classes(), rng);
    let mut opt = AdamW::new(lr, 0.0);
    let mut order: Vec<usize> = (0..y.len()).collect();
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(PROBE_BATCH) {
            let fb = features.select_rows(chunk);
            let yb = y.select(chunk);
            let ce = cross_entropy(&head.logits(&fb)?, &yb)?;
            let (g, _) = head.backward(&fb, &ce.grad)?;
            opt.step(
                vec![&mut head.linear.weight, &mut head.linear.bias],
                &[g.weight, g.bias],
            )?;
        }
    }
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussian_mixture, Split, SyntheticSpec};
    use crate::model::ModelConfig;

    #[test]
    fn perfect_scores() {
        let y = LabelVector::new(vec![0, 2, 1, 2], 3).unwrap();
        let mut s = Matrix::zeros(4, 3);
        for (i, &c) in y.as_slice().iter().enumerate() {
            s[(i, c)] = 1.0;
        }
        assert_eq!(topk_accuracy(&s, &y, 1).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&s, &y, 3).unwrap(), 1.0);
    }

    #[test]
    fn ties_go_to_the_lower_index() {
        let s = Matrix::filled(2, 4, 0.5);
        let y = LabelVector::new(vec![0, 3], 4).unwrap();
        assert_eq!(topk_accuracy(&s, &y, 1).unwrap(), 0.5);
        assert_eq!(topk_accuracy(&s, &y, 3).unwrap(), 0.5);
        assert_eq!(topk_accuracy(&s, &y, 4).unwrap(), 1.0);
    }

    #[test]
    fn random_scores_over_ten_classes() {
        let mut rng = SeededRng::new(77);
        let n = 20000;
        let s = rng.uniform_matrix(n, 10, 0.0, 1.0);
        let y = LabelVector::new((0..n).map(|_| rng.below(10)).collect(), 10).unwrap();
        let top1 = topk_accuracy(&s, &y, 1).unwrap();
        let top5 = topk_accuracy(&s, &y, 5).unwrap();
        assert!((top5 - 0.5).abs() < 0.02, "{top5}");
        assert!((top1 - 0.1).abs() < 0.01, "{top1}");
        assert!(top1 <= top5);
    }

    #[test]
    fn probe_on_random_encoder_beats_chance() {
        let ds = gen_gaussian_mixture(&SyntheticSpec {
            classes: 4,
            dim: 8,
            per_class: 60,
            spread: 1.0,
            noise: 0.5,
            seed: 1,
        })
        .unwrap();
        let cfg = ModelConfig {
            encoder_widths: vec![8, 16],
            head_widths: vec![8],
            dropout: 0.2,
            classes: 4,
            classifier: false,
            proxies: false,
            center_lr: None,
        };
        let model = Model::init(&cfg, &mut SeededRng::new(3)).unwrap();
        let (xt, yt) = ds.subset(Split::Train);
        let (xv, yv) = ds.subset(Split::Test);
        let probe = fit_linear_probe(&model, &xt, &yt, 100, 1e-2, &mut SeededRng::new(4)).unwrap();
        let m = evaluate(&model, &xv, &yv, Scorer::Probe(&probe)).unwrap();
        assert!(m.top1 > 0.25, "{m:?}");
        assert_eq!(m.top5_k, 4);
        assert!(m.top1 <= m.top5);
    }

    #[test]
    fn scorer_requires_some_head() {
        let cfg = ModelConfig {
            encoder_widths: vec![2, 4],
            head_widths: vec![],
            dropout: 0.0,
            classes: 2,
            classifier: false,
            proxies: false,
            center_lr: None,
        };
        let model = Model::init(&cfg, &mut SeededRng::new(0)).unwrap();
        assert!(Scorer::for_model(&model, None).is_err());
    }
}

//! Training objectives and their composite losses.

use std::fmt;
use std::str::FromStr;

use crate::baselines::{center_loss, cross_entropy, proxy_nca, ClassProxies};
use crate::embedding::{
    cosine_distance_matrix, distance_backward, l2_normalize_backward, partition_by_class,
    EmbeddingBatch, LabelVector,
};
use crate::error::{Error, Result};
use crate::model::{LinearGrads, Model};
use crate::numerics::Matrix;
use crate::sil_loss::{
    soft_silhouette, soft_silhouette_embeddings, SilhouetteParams, SoftSilhouette,
};
use crate::supcon::{supcon_from_distances, SupConParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ObjectiveKind {
    Ce,
    CeSil,
    SupCon,
    SupCon2,
    CeSilSupCon2,
    ProxyNca,
    Center,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 7] = [
        ObjectiveKind::Ce,
        ObjectiveKind::CeSil,
        ObjectiveKind::SupCon,
        ObjectiveKind::SupCon2,
        ObjectiveKind::CeSilSupCon2,
        ObjectiveKind::ProxyNca,
        ObjectiveKind::Center,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ObjectiveKind::Ce => "CE",
            ObjectiveKind::CeSil => "CE+SIL",
            ObjectiveKind::SupCon => "SupCon",
            ObjectiveKind::SupCon2 => "SupCon2",
            ObjectiveKind::CeSilSupCon2 => "CE+SIL+SupCon2",
            ObjectiveKind::ProxyNca => "ProxyNCA",
            ObjectiveKind::Center => "Center",
        }
    }

    /// Augmented views per input.
    pub fn views(self) -> usize {
        match self {
            ObjectiveKind::SupCon2 | ObjectiveKind::CeSilSupCon2 => 2,
            _ => 1,
        }
    }

    pub fn has_classifier(self) -> bool {
        matches!(
            self,
            ObjectiveKind::Ce
                | ObjectiveKind::CeSil
                | ObjectiveKind::CeSilSupCon2
                | ObjectiveKind::Center
        )
    }

    /// Objectives without a jointly trained classifier or proxies are scored
    /// through a linear probe on frozen features.
    pub fn uses_probe(self) -> bool {
        matches!(self, ObjectiveKind::SupCon | ObjectiveKind::SupCon2)
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| !c.is_whitespace())
            .collect::<String>()
            .to_ascii_lowercase();
        ObjectiveKind::ALL
            .into_iter()
            .find(|k| k.tag().to_ascii_lowercase() == norm)
            .ok_or_else(|| {
                let tags: Vec<_> = ObjectiveKind::ALL.iter().map(|k| k.tag()).collect();
                Error::InvalidConfiguration(format!(
                    "unknown objective {s:?}, expected one of {tags:?}"
                ))
            })
    }
}

/// Rows the silhouette term sees in two-view objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SilViews {
    All,
    First,
}

impl FromStr for SilViews {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(SilViews::All),
            "first" => Ok(SilViews::First),
            _ => Err(Error::InvalidConfiguration(format!(
                "sil_views must be all or first, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for SilViews {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SilViews::All => "all",
            SilViews::First => "first",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub lambda_sil: f64,
    pub lambda_ce: f64,
    pub center_weight: f64,
    pub sil: SilhouetteParams,
    pub supcon: SupConParams,
    pub sil_views: SilViews,
}

impl ObjectiveSpec {
    pub fn new(kind: ObjectiveKind) -> Self {
        Self {
            kind,
            lambda_sil: 1.0,
            lambda_ce: 1.0,
            center_weight: 0.003,
            sil: SilhouetteParams::default(),
            supcon: SupConParams::default(),
            sil_views: SilViews::All,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_sil", self.lambda_sil),
            ("lambda_ce", self.lambda_ce),
            ("center_weight", self.center_weight),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfiguration(format!(
                    "{name} must be >= 0, got {v}"
                )));
            }
        }
        self.sil.validate()?;
        self.supcon.validate()
    }
}

/// Per-component loss values; `None` where the objective has no such term.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub ce: Option<f64>,
    pub sil: Option<f64>,
    pub supcon: Option<f64>,
    pub proxy_nca: Option<f64>,
    pub center: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CompositeOutput {
    pub total: f64,
    pub components: LossComponents,
    pub grad_features: Option<Matrix>,
    pub grad_projections: Option<Matrix>,
    pub classifier: Option<LinearGrads>,
    pub proxies: Option<Matrix>,
    pub center_update: Option<Matrix>,
    pub sil_skipped: usize,
    pub supcon_skipped: usize,
    pub sil_score_range: Option<(f64, f64)>,
}

impl CompositeOutput {
    fn new(total: f64) -> Self {
        Self {
            total,
            components: LossComponents::default(),
            grad_features: None,
            grad_projections: None,
            classifier: None,
            proxies: None,
            center_update: None,
            sil_skipped: 0,
            supcon_skipped: 0,
            sil_score_range: None,
        }
    }

    fn add_features(&mut self, g: Matrix) -> Result<()> {
        match &mut self.grad_features {
            Some(acc) => acc.axpy(1.0, &g),
            None => {
                self.grad_features = Some(g);
                Ok(())
            }
        }
    }

    fn add_projections(&mut self, g: Matrix) -> Result<()> {
        match &mut self.grad_projections {
            Some(acc) => acc.axpy(1.0, &g),
            None => {
                self.grad_projections = Some(g);
                Ok(())
            }
        }
    }

    fn record_sil(&mut self, sil: &SoftSilhouette) {
        self.components.sil = Some(sil.loss);
        self.sil_skipped = sil.skipped;
        self.sil_score_range = sil.score_range();
    }
}

/// Network outputs for one batch. Rows are view-major: `0..B` is view one.
#[derive(Debug, Clone, Copy)]
pub struct BatchOutputs<'a> {
    pub features: &'a Matrix,
    pub projections: &'a EmbeddingBatch,
    /// Labels of the `B` source samples.
    pub labels: &'a LabelVector,
    pub views: usize,
}

/// Pads a gradient over the first `b` rows with zeros up to `rows`.
fn pad_rows(g: Matrix, rows: usize) -> Result<Matrix> {
    if g.rows() == rows {
        return Ok(g);
    }
    g.vstack(&Matrix::zeros(rows - g.rows(), g.cols()))
}

/// Loss value and gradients at both attachment points, plus classifier,
/// proxy and center updates where the objective owns them.
pub fn composite_loss(
    spec: &ObjectiveSpec,
    model: &Model,
    out: &BatchOutputs<'_>,
) -> Result<CompositeOutput> {
    spec.validate()?;
    let kind = spec.kind;
    let b = out.labels.len();
    let rows = out.features.rows();
    if out.views != kind.views() {
        return Err(Error::InvalidConfiguration(format!(
            "{kind} needs {} view(s), got {}",
            kind.views(),
            out.views
        )));
    }
    if rows != b * out.views || out.projections.len() != rows {
        return Err(Error::ShapeError {
            op: "composite_loss",
            lhs: (rows, out.projections.len()),
            rhs: (b * out.views, b * out.views),
        });
    }
    let all_labels = out.labels.repeat(out.views);
    let mut res = CompositeOutput::new(0.0);

    if kind.has_classifier() {
        let head = model.classifier().ok_or_else(|| {
            Error::InvalidConfiguration(format!("{kind} needs a classifier head"))
        })?;
        let weight = if kind == ObjectiveKind::CeSilSupCon2 {
            spec.lambda_ce
        } else {
            1.0
        };
        let feats = if out.views == 1 {
            out.features.clone()
        } else {
            out.features.slice_rows(0, b)
        };
        let logits = head.logits(&feats)?;
        let ce = cross_entropy(&logits, out.labels)?;
        res.components.ce = Some(ce.value);
        res.total += weight * ce.value;
        let (mut cg, gx) = head.backward(&feats, &ce.grad.scale(weight))?;
        if weight == 0.0 {
            cg = LinearGrads::zeros_like(&head.linear);
        }
        res.classifier = Some(cg);
        if weight != 0.0 {
            res.add_features(pad_rows(gx, rows)?)?;
        }
    }

    match kind {
        ObjectiveKind::Ce => {}
        ObjectiveKind::CeSil => {
            let sil = soft_silhouette_embeddings(
                out.projections,
                &partition_by_class(out.labels),
                &spec.sil,
            )?;
            res.record_sil(&sil);
            res.total += spec.lambda_sil * sil.loss;
            if spec.lambda_sil != 0.0 {
                res.add_projections(sil.grad.scale(spec.lambda_sil))?;
            }
        }
        ObjectiveKind::SupCon | ObjectiveKind::SupCon2 => {
            let d = cosine_distance_matrix(out.projections)?;
            let sc = supcon_from_distances(&d, &all_labels, &spec.supcon)?;
            res.components.supcon = Some(sc.loss);
            res.supcon_skipped = sc.anchors_skipped;
            res.total += sc.loss;
            res.add_projections(distance_backward(&sc.grad, out.projections.matrix())?)?;
        }
        ObjectiveKind::CeSilSupCon2 => {
            // one distance matrix over all 2B rows feeds both terms
            let d = cosine_distance_matrix(out.projections)?;
            let sc = supcon_from_distances(&d, &all_labels, &spec.supcon)?;
            res.components.supcon = Some(sc.loss);
            res.supcon_skipped = sc.anchors_skipped;
            res.total += sc.loss;
            let mut grad_d = sc.grad;
            match spec.sil_views {
                SilViews::All => {
                    let sil = soft_silhouette(&d, &partition_by_class(&all_labels), &spec.sil)?;
                    res.record_sil(&sil);
                    res.total += spec.lambda_sil * sil.loss;
                    if spec.lambda_sil != 0.0 {
                        grad_d.axpy(spec.lambda_sil, &sil.grad)?;
                    }
                }
                SilViews::First => {
                    let first = EmbeddingBatch::new(out.projections.matrix().slice_rows(0, b))?;
                    let first = crate::embedding::l2_normalize_rows(&first)?.batch;
                    let sil = soft_silhouette_embeddings(
                        &first,
                        &partition_by_class(out.labels),
                        &spec.sil,
                    )?;
                    res.record_sil(&sil);
                    res.total += spec.lambda_sil * sil.loss;
                    if spec.lambda_sil != 0.0 {
                        res.add_projections(pad_rows(sil.grad.scale(spec.lambda_sil), rows)?)?;
                    }
                }
            }
            res.add_projections(distance_backward(&grad_d, out.projections.matrix())?)?;
        }
        ObjectiveKind::ProxyNca => {
            let normalized = model.normalized_proxies()?.ok_or_else(|| {
                Error::InvalidConfiguration("ProxyNCA needs class proxies".into())
            })?;
            let proxies = ClassProxies {
                proxies: normalized.batch.matrix().clone(),
            };
            let pn = proxy_nca(out.projections, out.labels, &proxies)?;
            res.components.proxy_nca = Some(pn.loss);
            res.total += pn.loss;
            res.proxies = Some(l2_normalize_backward(&normalized, &pn.grad_proxies)?);
            res.add_projections(pn.grad_z)?;
        }
        ObjectiveKind::Center => {
            let centers = model
                .centers()
                .ok_or_else(|| Error::InvalidConfiguration("Center needs class centers".into()))?;
            let cl = center_loss(out.features, out.labels, centers)?;
            res.components.center = Some(cl.loss);
            res.total += spec.center_weight * cl.loss;
            if spec.center_weight != 0.0 {
                res.add_features(cl.grad_features.scale(spec.center_weight))?;
            }
            res.center_update = Some(cl.center_update);
        }
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Mode, ModelConfig};
    use crate::numerics::SeededRng;
    use crate::supcon::supcon_loss;
    use crate::supcon::MultiviewBatch;

    fn model_for(kind: ObjectiveKind) -> Model {
        let cfg = ModelConfig {
            encoder_widths: vec![4, 8, 6],
            head_widths: vec![5, 4],
            dropout: 0.0,
            classes: 3,
            classifier: kind.has_classifier(),
            proxies: kind == ObjectiveKind::ProxyNca,
            center_lr: (kind == ObjectiveKind::Center).then_some(0.5),
        };
        Model::init(&cfg, &mut SeededRng::new(2)).unwrap()
    }

    fn batch(views: usize) -> (Matrix, LabelVector) {
        let y = LabelVector::new(vec![0, 0, 1, 1, 2, 2], 3).unwrap();
        (SeededRng::new(9).uniform_matrix(6 * views, 4, 0.0, 1.0), y)
    }

    fn run(spec: &ObjectiveSpec, model: &Model, x: &Matrix, y: &LabelVector) -> CompositeOutput {
        let f = model
            .forward(x, Mode::Eval, &mut SeededRng::new(0))
            .unwrap();
        let out = BatchOutputs {
            features: &f.features,
            projections: &f.projections,
            labels: y,
            views: spec.kind.views(),
        };
        composite_loss(spec, model, &out).unwrap()
    }

    #[test]
    fn tags_roundtrip() {
        for k in ObjectiveKind::ALL {
            assert_eq!(k.tag().parse::<ObjectiveKind>().unwrap(), k);
        }
        assert_eq!(
            "ce+sil".parse::<ObjectiveKind>().unwrap(),
            ObjectiveKind::CeSil
        );
        assert!("triplet".parse::<ObjectiveKind>().is_err());
    }

    #[test]
    fn zero_lambda_sil_reduces_to_ce() {
        let model = model_for(ObjectiveKind::CeSil);
        let (x, y) = batch(1);
        let mut spec = ObjectiveSpec::new(ObjectiveKind::CeSil);
        spec.lambda_sil = 0.0;
        let with = run(&spec, &model, &x, &y);
        let ce = run(&ObjectiveSpec::new(ObjectiveKind::Ce), &model, &x, &y);
        assert_eq!(with.total, ce.total);
        assert_eq!(with.grad_features, ce.grad_features);
        assert_eq!(with.classifier, ce.classifier);
        assert!(with.grad_projections.is_none());
        assert!(with.components.sil.is_some());
    }

    #[test]
    fn combined_objective_is_additive() {
        let model = model_for(ObjectiveKind::CeSilSupCon2);
        let (x, y) = batch(2);
        let mut spec = ObjectiveSpec::new(ObjectiveKind::CeSilSupCon2);
        spec.lambda_ce = 0.7;
        spec.lambda_sil = 0.4;
        let got = run(&spec, &model, &x, &y);

        // recompute each component through independent entry points
        let f = model.forward_eval(&x).unwrap();
        let logits = model
            .classifier()
            .unwrap()
            .logits(&f.features.slice_rows(0, 6))
            .unwrap();
        let ce = cross_entropy(&logits, &y).unwrap().value;
        let v1 = EmbeddingBatch::new(f.projections.matrix().slice_rows(0, 6)).unwrap();
        let v2 = EmbeddingBatch::new(f.projections.matrix().slice_rows(6, 12)).unwrap();
        let v1 = crate::embedding::l2_normalize_rows(&v1).unwrap().batch;
        let v2 = crate::embedding::l2_normalize_rows(&v2).unwrap().batch;
        let mv = MultiviewBatch::from_views(vec![v1, v2], y.clone()).unwrap();
        let sc = supcon_loss(&mv, &spec.supcon).unwrap().loss;
        let sil = soft_silhouette_embeddings(
            &f.projections,
            &partition_by_class(&y.repeat(2)),
            &spec.sil,
        )
        .unwrap()
        .loss;
        assert!((got.total - (0.7 * ce + sc + 0.4 * sil)).abs() <= 1e-12);
        assert!((got.components.ce.unwrap() - ce).abs() <= 1e-15);
        assert!((got.components.sil.unwrap() - sil).abs() <= 1e-12);
    }

    #[test]
    fn first_view_silhouette_only_touches_view_one() {
        let model = model_for(ObjectiveKind::CeSilSupCon2);
        let (x, y) = batch(2);
        let mut spec = ObjectiveSpec::new(ObjectiveKind::CeSilSupCon2);
        spec.sil_views = SilViews::First;
        let first = run(&spec, &model, &x, &y);
        spec.lambda_sil = 0.0;
        let none = run(&spec, &model, &x, &y);
        let diff = first
            .grad_projections
            .unwrap()
            .sub(none.grad_projections.as_ref().unwrap())
            .unwrap();
        assert!(diff.slice_rows(6, 12).max_abs() <= 1e-15);
        assert!(diff.slice_rows(0, 6).max_abs() > 0.0);
    }

    #[test]
    fn wrong_view_count_is_a_configuration_error() {
        let model = model_for(ObjectiveKind::SupCon2);
        let (x, y) = batch(1);
        let f = model.forward_eval(&x).unwrap();
        let out = BatchOutputs {
            features: &f.features,
            projections: &f.projections,
            labels: &y,
            views: 1,
        };
        let spec = ObjectiveSpec::new(ObjectiveKind::SupCon2);
        assert!(matches!(
            composite_loss(&spec, &model, &out),
            Err(Error::InvalidConfiguration(_))
        ));
    }

    #[test]
    fn missing_parts_are_configuration_errors() {
        let model = model_for(ObjectiveKind::SupCon);
        let (x, y) = batch(1);
        let f = model.forward_eval(&x).unwrap();
        let out = BatchOutputs {
            features: &f.features,
            projections: &f.projections,
            labels: &y,
            views: 1,
        };
        for kind in [
            ObjectiveKind::Ce,
            ObjectiveKind::ProxyNca,
            ObjectiveKind::Center,
        ] {
            let spec = ObjectiveSpec::new(kind);
            assert!(matches!(
                composite_loss(&spec, &model, &out),
                Err(Error::InvalidConfiguration(_))
            ));
        }
    }

    #[test]
    fn center_objective_reports_weighted_total() {
        let model = model_for(ObjectiveKind::Center);
        let (x, y) = batch(1);
        let got = run(&ObjectiveSpec::new(ObjectiveKind::Center), &model, &x, &y);
        let c = got.components;
        assert!((got.total - (c.ce.unwrap() + 0.003 * c.center.unwrap())).abs() <= 1e-15);
        assert!(got.center_update.is_some());
    }
}

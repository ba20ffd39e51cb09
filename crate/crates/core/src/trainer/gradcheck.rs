//! Finite-difference verification of every analytic gradient.

use std::fmt;
use std::str::FromStr;

use crate::baselines::{center_loss, cross_entropy, proxy_nca, ClassCenters, ClassProxies};
use crate::embedding::{
    cosine_distance_matrix, l2_normalize_backward, l2_normalize_rows, partition_by_class,
    DistanceMatrix, EmbeddingBatch, LabelVector,
};
use crate::error::{Error, Result};
use crate::model::{Mode, Model, ModelConfig};
use crate::numerics::{finite_diff_grad, max_relative_error, Matrix, SeededRng};
use crate::sil_loss::{soft_silhouette, soft_silhouette_embeddings, SilhouetteParams};
use crate::supcon::{supcon_loss, MultiviewBatch, SupConParams};
use crate::trainer::objective::{composite_loss, BatchOutputs, ObjectiveKind, ObjectiveSpec};

pub const STEP: f64 = 1e-5;
pub const THRESHOLD: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 100;

/// Rectifier inputs closer to zero than this would let a finite-difference
/// step cross the kink; such instances are redrawn.
const KINK_MARGIN: f64 = 2e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    All,
    Sil,
    Supcon,
    Baselines,
    E2e,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Scope::All),
            "sil" => Ok(Scope::Sil),
            "supcon" => Ok(Scope::Supcon),
            "baselines" => Ok(Scope::Baselines),
            "e2e" => Ok(Scope::E2e),
            _ => Err(Error::InvalidConfiguration(format!(
                "scope must be all, sil, supcon, baselines or e2e, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::All => "all",
            Scope::Sil => "sil",
            Scope::Supcon => "supcon",
            Scope::Baselines => "baselines",
            Scope::E2e => "e2e",
        })
    }
}

/// One analytic gradient next to its finite-difference estimate.
pub struct Comparison {
    pub what: String,
    pub analytic: Matrix,
    pub numeric: Matrix,
}

type Check = Box<dyn Fn(&mut SeededRng) -> Result<Vec<Comparison>>>;

pub struct GradTarget {
    pub name: String,
    pub scope: Scope,
    pub check: Check,
}

impl GradTarget {
    pub fn new(
        name: impl Into<String>,
        scope: Scope,
        check: impl Fn(&mut SeededRng) -> Result<Vec<Comparison>> + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            scope,
            check: Box::new(check),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetReport {
    pub name: String,
    pub instances: usize,
    pub worst: f64,
    /// Instance, tensor and entry of the worst error.
    pub location: String,
    /// Gradient entries compared across all instances.
    pub entries: usize,
    /// Entries whose relative error exceeds the threshold.
    pub over_threshold: usize,
    /// Largest analytic magnitude among the entries over the threshold.
    pub largest_failing_magnitude: f64,
    pub passed: bool,
}

impl fmt::Display for TargetReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<32} worst {:.3e} over {} instances at {}",
            if self.passed { "ok" } else { "FAIL" },
            self.name,
            self.worst,
            self.instances,
            self.location
        )?;
        if self.over_threshold > 0 {
            write!(
                f,
                "; {} of {} entries above threshold, largest |analytic| among them {:.3e}",
                self.over_threshold, self.entries, self.largest_failing_magnitude
            )?;
        }
        Ok(())
    }
}

/// Runs each target on `instances` seeded draws.
pub fn run_targets(
    targets: &[GradTarget],
    instances: usize,
    threshold: f64,
    seed: u64,
) -> Vec<TargetReport> {
    targets
        .iter()
        .enumerate()
        .map(|(t, target)| {
            let mut worst = 0.0f64;
            let mut location = String::from("-");
            let mut failed_to_run = None;
            let mut entries = 0;
            let mut over_threshold = 0;
            let mut largest_failing_magnitude = 0.0f64;
            for inst in 0..instances {
                let mut rng = SeededRng::derive(seed.wrapping_add(inst as u64), 0x6c + t as u64);
                match (target.check)(&mut rng) {
                    Ok(comparisons) => {
                        for c in comparisons {
                            for (&g, &n) in c.analytic.as_slice().iter().zip(c.numeric.as_slice()) {
                                entries += 1;
                                let err = (g - n).abs() / (1e-8f64).max(g.abs() + n.abs());
                                if !(err <= threshold) {
                                    over_threshold += 1;
                                    largest_failing_magnitude = largest_failing_magnitude.max(g.abs());
                                }
                            }
                            match max_relative_error(&c.analytic, &c.numeric) {
                                Ok((err, (r, col))) => {
                                    if err > worst || err.is_nan() {
                                        worst = if err.is_nan() { f64::INFINITY } else { err };
                                        location = format!(
                                            "instance {inst}, {} ({r}, {col}): analytic {:e} numeric {:e}",
                                            c.what,
                                            c.analytic[(r, col)],
                                            c.numeric[(r, col)]
                                        );
                                    }
                                }
                                Err(e) => failed_to_run = Some(format!("instance {inst}: {e}")),
                            }
                        }
                    }
                    Err(e) => failed_to_run = Some(format!("instance {inst}: {e}")),
                }
                if failed_to_run.is_some() {
                    break;
                }
            }
            if let Some(msg) = failed_to_run {
                worst = f64::INFINITY;
                location = msg;
            }
            TargetReport {
                name: target.name.clone(),
                instances,
                worst,
                location,
                entries,
                over_threshold,
                largest_failing_magnitude,
                passed: worst <= threshold,
            }
        })
        .collect()
}

pub fn run_gradcheck(scope: Scope, instances: usize, seed: u64) -> Vec<TargetReport> {
    let targets: Vec<GradTarget> = all_targets()
        .into_iter()
        .filter(|t| scope == Scope::All || t.scope == scope)
        .collect();
    run_targets(&targets, instances, THRESHOLD, seed)
}

/// Random labels with `classes ∈ [2, 8]` and 2 to 4 members each, `B ≤ 32`.
fn random_labels(rng: &mut SeededRng) -> LabelVector {
    let classes = 2 + rng.below(7);
    let mut labels = Vec::new();
    for c in 0..classes {
        let k = 2 + rng.below(3);
        labels.extend(std::iter::repeat(c).take(k));
    }
    labels.truncate(32);
    rng.shuffle(&mut labels);
    LabelVector::new(labels, classes).expect("labels below class count")
}

fn random_dim(rng: &mut SeededRng) -> usize {
    2 + rng.below(15)
}

fn unit(x: &Matrix) -> Result<crate::embedding::NormalizedRows> {
    l2_normalize_rows(&EmbeddingBatch::new(x.clone())?)
}

fn compare(
    what: &str,
    analytic: Matrix,
    f: impl Fn(&Matrix) -> Result<f64>,
    at: &Matrix,
) -> Result<Comparison> {
    Ok(Comparison {
        what: what.into(),
        analytic,
        numeric: finite_diff_grad(f, at, STEP)?,
    })
}

fn sil_targets() -> Vec<GradTarget> {
    let p = SilhouetteParams::default();
    vec![
        GradTarget::new("sil_loss/distance", Scope::Sil, move |rng| {
            let y = random_labels(rng);
            let d = random_dim(rng);
            let x = rng.uniform_matrix(y.len(), d, -1.0, 1.0);
            let d = cosine_distance_matrix(&unit(&x)?.batch)?;
            let part = partition_by_class(&y);
            let out = soft_silhouette(&d, &part, &p)?;
            let f = |m: &Matrix| {
                Ok(soft_silhouette(&DistanceMatrix::from_matrix(m.clone())?, &part, &p)?.loss)
            };
            Ok(vec![compare("dL/dD", out.grad, f, d.matrix())?])
        }),
        GradTarget::new("sil_loss/embeddings", Scope::Sil, move |rng| {
            let y = random_labels(rng);
            let d = random_dim(rng);
            let x = rng.uniform_matrix(y.len(), d, -1.0, 1.0);
            let part = partition_by_class(&y);
            let n = unit(&x)?;
            let out = soft_silhouette_embeddings(&n.batch, &part, &p)?;
            let g = l2_normalize_backward(&n, &out.grad)?;
            let f = |m: &Matrix| Ok(soft_silhouette_embeddings(&unit(m)?.batch, &part, &p)?.loss);
            Ok(vec![compare("dL/dX", g, f, &x)?])
        }),
    ]
}

fn supcon_targets() -> Vec<GradTarget> {
    let p = SupConParams::default();
    vec![
        GradTarget::new("supcon/one_view", Scope::Supcon, move |rng| {
            let y = random_labels(rng);
            let d = random_dim(rng);
            let x = rng.uniform_matrix(y.len(), d, -1.0, 1.0);
            let eval = |m: &Matrix| -> Result<(f64, Matrix, crate::embedding::NormalizedRows)> {
                let n = unit(m)?;
                let out = supcon_loss(&MultiviewBatch::single(n.batch.clone(), y.clone())?, &p)?;
                Ok((out.loss, out.grad, n))
            };
            let (_, g, n) = eval(&x)?;
            let g = l2_normalize_backward(&n, &g)?;
            Ok(vec![compare("dL/dX", g, |m| Ok(eval(m)?.0), &x)?])
        }),
        GradTarget::new("supcon/two_view", Scope::Supcon, move |rng| {
            let y = random_labels(rng);
            let b = y.len();
            let dim = random_dim(rng);
            let x = rng.uniform_matrix(2 * b, dim, -1.0, 1.0);
            let eval = |m: &Matrix| -> Result<(f64, Matrix, crate::embedding::NormalizedRows)> {
                let n = unit(m)?;
                let v1 = EmbeddingBatch::new(n.batch.matrix().slice_rows(0, b))?;
                let v2 = EmbeddingBatch::new(n.batch.matrix().slice_rows(b, 2 * b))?;
                let v1 = l2_normalize_rows(&v1)?.batch;
                let v2 = l2_normalize_rows(&v2)?.batch;
                let out = supcon_loss(&MultiviewBatch::from_views(vec![v1, v2], y.clone())?, &p)?;
                Ok((out.loss, out.grad, n))
            };
            let (_, g, n) = eval(&x)?;
            let g = l2_normalize_backward(&n, &g)?;
            Ok(vec![compare("dL/dX", g, |m| Ok(eval(m)?.0), &x)?])
        }),
    ]
}

fn baseline_targets() -> Vec<GradTarget> {
    vec![
        GradTarget::new("cross_entropy", Scope::Baselines, |rng| {
            let y = random_labels(rng);
            let logits = rng.uniform_matrix(y.len(), y.num_classes(), -1.0, 1.0);
            let out = cross_entropy(&logits, &y)?;
            Ok(vec![compare(
                "dL/dlogits",
                out.grad,
                |m| Ok(cross_entropy(m, &y)?.value),
                &logits,
            )?])
        }),
        GradTarget::new("center_loss", Scope::Baselines, |rng| {
            let y = random_labels(rng);
            let dim = random_dim(rng);
            let centers = ClassCenters {
                centers: rng.uniform_matrix(y.num_classes(), dim, -1.0, 1.0),
                learning_rate: 0.5,
            };
            let x = rng.uniform_matrix(y.len(), dim, -1.0, 1.0);
            let out = center_loss(&x, &y, &centers)?;
            let f = |m: &Matrix| Ok(center_loss(m, &y, &centers)?.loss);
            Ok(vec![compare("dL/dX", out.grad_features, f, &x)?])
        }),
        GradTarget::new("proxy_nca", Scope::Baselines, |rng| {
            let y = random_labels(rng);
            let dim = random_dim(rng);
            let x = rng.uniform_matrix(y.len(), dim, -1.0, 1.0);
            let raw = rng.uniform_matrix(y.num_classes(), dim, -1.0, 1.0);
            let eval = |xm: &Matrix, pm: &Matrix| -> Result<f64> {
                let proxies = ClassProxies {
                    proxies: unit(pm)?.batch.into_matrix(),
                };
                Ok(proxy_nca(&unit(xm)?.batch, &y, &proxies)?.loss)
            };
            let nx = unit(&x)?;
            let np = unit(&raw)?;
            let out = proxy_nca(
                &nx.batch,
                &y,
                &ClassProxies {
                    proxies: np.batch.matrix().clone(),
                },
            )?;
            Ok(vec![
                compare(
                    "dL/dX",
                    l2_normalize_backward(&nx, &out.grad_z)?,
                    |m| eval(m, &raw),
                    &x,
                )?,
                compare(
                    "dL/dproxies",
                    l2_normalize_backward(&np, &out.grad_proxies)?,
                    |m| eval(&x, m),
                    &raw,
                )?,
            ])
        }),
    ]
}

/// Composite objective through a tiny network, compared on every trainable
/// tensor. Networks with a rectifier input inside the kink margin, or with
/// a unit inactive on the whole batch, are redrawn.
fn e2e_target(kind: ObjectiveKind) -> GradTarget {
    GradTarget::new(
        format!("composite/{}", kind.tag()),
        Scope::E2e,
        move |rng| {
            let classes = 2 + rng.below(3);
            let k = 3 + rng.below(3);
            let y = LabelVector::new((0..classes * k).map(|i| i % classes).collect(), classes)?;
            let cfg = ModelConfig {
                encoder_widths: vec![4, 8, 6],
                head_widths: vec![5, 4],
                dropout: 0.2,
                classes,
                classifier: kind.has_classifier(),
                proxies: kind == ObjectiveKind::ProxyNca,
                center_lr: (kind == ObjectiveKind::Center).then_some(0.5),
            };
            let mut spec = ObjectiveSpec::new(kind);
            spec.lambda_ce = 0.5 + rng.uniform();
            spec.lambda_sil = 0.5 + rng.uniform();
            spec.center_weight = 0.5;
            let views = kind.views();
            let mask_seed = rng.next_u64();
            let rows = y.len() * views;
            let mut drawn = None;
            for _ in 0..5000 {
                let mut model = Model::init(&cfg, rng)?;
                if let Some(c) = model.centers_mut() {
                    c.centers = rng.uniform_matrix(classes, 6, -1.0, 1.0);
                }
                let x = rng.uniform_matrix(rows, 4, -1.0, 1.0);
                let tape = model
                    .forward(&x, Mode::Train, &mut SeededRng::new(mask_seed))?
                    .tape;
                if tape.min_abs_preactivation() > KINK_MARGIN && tape.dead_units() == 0 {
                    drawn = Some((model, x));
                    break;
                }
            }
            let (model, x) = drawn.ok_or_else(|| {
                Error::NumericalFailure("no kink-free network without dead units found".into())
            })?;
            let loss_of = |m: &Model| -> Result<f64> {
                let fwd = m.forward(&x, Mode::Train, &mut SeededRng::new(mask_seed))?;
                let out = BatchOutputs {
                    features: &fwd.features,
                    projections: &fwd.projections,
                    labels: &y,
                    views,
                };
                Ok(composite_loss(&spec, m, &out)?.total)
            };
            let fwd = model.forward(&x, Mode::Train, &mut SeededRng::new(mask_seed))?;
            let out = BatchOutputs {
                features: &fwd.features,
                projections: &fwd.projections,
                labels: &y,
                views,
            };
            let comp = composite_loss(&spec, &model, &out)?;
            let mut grads = model.backward(
                &fwd.tape,
                comp.grad_features.as_ref(),
                comp.grad_projections.as_ref(),
            )?;
            if comp.classifier.is_some() {
                grads.classifier = comp.classifier;
            }
            if comp.proxies.is_some() {
                grads.proxies = comp.proxies;
            }
            let analytic: Vec<Matrix> = grads.tensors().into_iter().cloned().collect();
            let mut comparisons = Vec::with_capacity(analytic.len());
            for (t, a) in analytic.into_iter().enumerate() {
                let base = model.params()[t].clone();
                let numeric = finite_diff_grad(
                    |m| {
                        let mut probe = model.clone();
                        *probe.params_mut()[t] = m.clone();
                        loss_of(&probe)
                    },
                    &base,
                    STEP,
                )?;
                comparisons.push(Comparison {
                    what: format!("tensor {t}"),
                    analytic: a,
                    numeric,
                });
            }
            Ok(comparisons)
        },
    )
}

pub fn all_targets() -> Vec<GradTarget> {
    let mut t = sil_targets();
    t.extend(supcon_targets());
    t.extend(baseline_targets());
    t.extend(ObjectiveKind::ALL.into_iter().map(e2e_target));
    t
}

//! The training loop and its run artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{augment_batch, balanced_batches, Dataset, Split};
use crate::embedding::LabelVector;
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, AdamW, Checkpoint, Mode, Model, ModelConfig};
use crate::numerics::{Matrix, SeededRng};
use crate::trainer::config::RunConfig;
use crate::trainer::evaluate::{evaluate, fit_linear_probe, EvalMetrics, Scorer};
use crate::trainer::metrics::{
    truncate_after, CsvAppender, EpochMetrics, TimingRow, METRICS_HEADER, TIMING_HEADER,
};
use crate::trainer::objective::{
    composite_loss, BatchOutputs, CompositeOutput, LossComponents, ObjectiveKind,
};

pub const SCHEMA_VERSION: u32 = 1;

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

// stream tags for independent generators derived from the run seed
const TAG_INIT: u64 = 1;
const TAG_TRAIN: u64 = 2;
const TAG_PROBE: u64 = 3;
const TAG_TEST_PROBE: u64 = 4;

/// Final results written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub objective: String,
    pub dataset: String,
    pub seed: u64,
    pub epochs: usize,
    pub test_top1: f64,
    /// `None` when the run did not report a top-5 figure.
    pub test_top5: Option<f64>,
    pub top5_k: usize,
    pub test_silhouette: f64,
    pub final_val_top1: f64,
    pub sil_skipped: u64,
    pub supcon_skipped: u64,
    pub num_params: usize,
    /// Mean optimizer-step time over the epochs trained by this process.
    pub mean_step_seconds: f64,
    pub wall_seconds: f64,
    pub config: BTreeMap<String, String>,
}

pub fn read_summary(path: &Path) -> Result<RunSummary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    match raw.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(SCHEMA_VERSION) => Ok(serde_json::from_value(raw)?),
        other => Err(Error::SchemaMismatch(format!(
            "{} has schema version {other:?}, expected {SCHEMA_VERSION}",
            path.display()
        ))),
    }
}

pub fn model_config(cfg: &RunConfig, data: &Dataset) -> ModelConfig {
    let kind = cfg.objective.kind;
    let mut encoder_widths = vec![data.input_width()];
    encoder_widths.extend(&cfg.encoder);
    ModelConfig {
        encoder_widths,
        head_widths: cfg.head.clone(),
        dropout: cfg.dropout,
        classes: data.num_classes(),
        classifier: kind.has_classifier(),
        proxies: kind == ObjectiveKind::ProxyNca,
        center_lr: (kind == ObjectiveKind::Center).then_some(cfg.center_lr),
    }
}

/// Validates the config, loads its data and trains.
pub fn train(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let data = cfg.data.load(cfg.seed)?;
    train_on(cfg, &data)
}

#[derive(Default)]
struct EpochTotals {
    batches: usize,
    loss: f64,
    sums: [f64; 5],
    counts: [usize; 5],
    sil_skipped: u64,
    supcon_skipped: u64,
    sil_range: Option<(f64, f64)>,
}

impl EpochTotals {
    fn add(
        &mut self,
        total: f64,
        c: &LossComponents,
        sil_skipped: usize,
        supcon_skipped: usize,
        range: Option<(f64, f64)>,
    ) {
        self.batches += 1;
        self.loss += total;
        for (k, v) in [c.ce, c.sil, c.supcon, c.proxy_nca, c.center]
            .into_iter()
            .enumerate()
        {
            if let Some(v) = v {
                self.sums[k] += v;
                self.counts[k] += 1;
            }
        }
        self.sil_skipped += sil_skipped as u64;
        self.supcon_skipped += supcon_skipped as u64;
        if let Some((lo, hi)) = range {
            self.sil_range = Some(match self.sil_range {
                None => (lo, hi),
                Some((a, b)) => (a.min(lo), b.max(hi)),
            });
        }
    }

    fn mean(&self, k: usize) -> Option<f64> {
        (self.counts[k] > 0).then(|| self.sums[k] / self.counts[k] as f64)
    }
}

fn batch_inputs(
    x: &Matrix,
    views: usize,
    cfg: &RunConfig,
    data: &Dataset,
    rng: &mut SeededRng,
) -> Result<Matrix> {
    let mut spec = cfg.augment;
    spec.image = data.image;
    let view = |rng: &mut SeededRng| {
        if spec.is_identity() {
            x.clone()
        } else {
            augment_batch(x, &spec, rng)
        }
    };
    let first = view(rng);
    if views == 1 {
        return Ok(first);
    }
    let second = view(rng);
    first.vstack(&second)
}

/// Test-split metrics for a saved checkpoint. Models without a classifier
/// or proxies are scored through a linear probe fit on the train split.
pub fn evaluate_checkpoint(
    path: &Path,
    data: &Dataset,
    probe_epochs: usize,
    probe_lr: f64,
    seed: u64,
) -> Result<EvalMetrics> {
    let ckpt = load_checkpoint(path)?;
    let model = &ckpt.model;
    if model.input_width() != data.input_width() {
        return Err(Error::InvalidConfiguration(format!(
            "checkpoint expects {} input columns, data has {}",
            model.input_width(),
            data.input_width()
        )));
    }
    let (x, y) = data.subset(Split::Test);
    if y.is_empty() {
        return Err(Error::NoData("test split is empty".into()));
    }
    if model.classifier().is_some() || model.proxies().is_some() {
        return evaluate(model, &x, &y, Scorer::for_model(model, None)?);
    }
    let (xt, yt) = data.subset(Split::Train);
    let mut rng = SeededRng::derive(seed, TAG_TEST_PROBE);
    let probe = fit_linear_probe(model, &xt, &yt, probe_epochs, probe_lr, &mut rng)?;
    evaluate(model, &x, &y, Scorer::Probe(&probe))
}

fn write_failure(
    out_dir: &Path,
    epoch: usize,
    batch: usize,
    indices: &[usize],
    err: &Error,
) -> String {
    let dump = serde_json::json!({
        "epoch": epoch,
        "batch": batch,
        "indices": indices,
        "error": err.to_string(),
    });
    let path = out_dir.join("failure.json");
    // best effort: the error message carries the same facts
    let _ = std::fs::write(
        &path,
        serde_json::to_string_pretty(&dump).unwrap_or_default(),
    );
    format!(
        "epoch {epoch} batch {batch}: {err}; dump in {}",
        path.display()
    )
}

/// Forward, composite loss, backward and parameter update for one batch.
fn train_step(
    cfg: &RunConfig,
    data: &Dataset,
    model: &mut Model,
    opt: &mut AdamW,
    rng: &mut SeededRng,
    xb: &Matrix,
    yb: &LabelVector,
) -> Result<CompositeOutput> {
    let views = cfg.objective.kind.views();
    let inputs = batch_inputs(xb, views, cfg, data, rng)?;
    let fwd = model.forward(&inputs, Mode::Train, rng)?;
    let out = BatchOutputs {
        features: &fwd.features,
        projections: &fwd.projections,
        labels: yb,
        views,
    };
    let mut comp = composite_loss(&cfg.objective, model, &out)?;
    if !comp.total.is_finite() {
        return Err(Error::NumericalFailure(format!(
            "non-finite loss {} (components {:?})",
            comp.total, comp.components
        )));
    }
    let mut grads = model.backward(
        &fwd.tape,
        comp.grad_features.as_ref(),
        comp.grad_projections.as_ref(),
    )?;
    if let Some(c) = comp.classifier.take() {
        grads.classifier = Some(c);
    }
    if let Some(p) = comp.proxies.take() {
        grads.proxies = Some(p);
    }
    model.apply_gradients(opt, &grads)?;
    if let (Some(update), Some(centers)) = (&comp.center_update, model.centers_mut()) {
        centers.apply_update(update)?;
    }
    Ok(comp)
}

fn scored_eval(
    cfg: &RunConfig,
    model: &Model,
    data: &Dataset,
    split: Split,
    probe_rng: &mut SeededRng,
) -> Result<EvalMetrics> {
    let (x, y) = data.subset(split);
    if y.is_empty() {
        return Err(Error::NoData(format!("{} split is empty", split.name())));
    }
    if cfg.objective.kind.uses_probe() {
        let (xt, yt) = data.subset(Split::Train);
        let probe = fit_linear_probe(model, &xt, &yt, cfg.probe_epochs, cfg.probe_lr, probe_rng)?;
        evaluate(model, &x, &y, Scorer::Probe(&probe))
    } else {
        evaluate(model, &x, &y, Scorer::for_model(model, None)?)
    }
}

struct Start {
    model: Model,
    opt: AdamW,
    rng: SeededRng,
    next_epoch: usize,
}

fn start_state(cfg: &RunConfig, data: &Dataset, out_dir: &Path) -> Result<Start> {
    let mcfg = model_config(cfg, data);
    let fresh = Model::init(&mcfg, &mut SeededRng::derive(cfg.seed, TAG_INIT))?;
    let metrics = out_dir.join(METRICS_FILE);
    let timing = out_dir.join(TIMING_FILE);
    match &cfg.resume {
        None => {
            for p in [&metrics, &timing] {
                if p.exists() {
                    std::fs::remove_file(p).map_err(|e| Error::io(p, e))?;
                }
            }
            Ok(Start {
                model: fresh,
                opt: AdamW::new(cfg.lr, cfg.weight_decay),
                rng: SeededRng::derive(cfg.seed, TAG_TRAIN),
                next_epoch: 1,
            })
        }
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let shapes = |m: &Model| m.params().iter().map(|p| p.shape()).collect::<Vec<_>>();
            let same_layout = shapes(&ckpt.model) == shapes(&fresh)
                && ckpt.model.centers().map(|c| c.centers.shape())
                    == fresh.centers().map(|c| c.centers.shape());
            if !same_layout {
                return Err(Error::InvalidConfiguration(format!(
                    "checkpoint {} does not match the configured model",
                    path.display()
                )));
            }
            let done = ckpt.epoch as usize;
            truncate_after::<EpochMetrics>(&metrics, METRICS_HEADER, done, |r| r.epoch)?;
            truncate_after::<TimingRow>(&timing, TIMING_HEADER, done, |r| r.epoch)?;
            Ok(Start {
                model: ckpt.model,
                opt: ckpt.optimizer,
                rng: SeededRng::from_state(ckpt.rng),
                next_epoch: done + 1,
            })
        }
    }
}

/// Trains on an already loaded dataset. Per epoch: balanced batches,
/// forward, composite loss, backward, AdamW (plus center updates), then a
/// validation pass appended to `metrics.csv` and a checkpoint. Test metrics
/// come from the last checkpoint on disk.
pub fn train_on(cfg: &RunConfig, data: &Dataset) -> Result<RunSummary> {
    cfg.validate_values()?;
    let started = Instant::now();
    let out_dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let kind = cfg.objective.kind;
    let Start {
        mut model,
        mut opt,
        mut rng,
        next_epoch,
    } = start_state(cfg, data, &out_dir)?;

    let (x_train, y_train) = data.subset(Split::Train);
    if y_train.is_empty() {
        return Err(Error::NoData("train split is empty".into()));
    }
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let mut metrics = CsvAppender::open(&out_dir.join(METRICS_FILE), METRICS_HEADER)?;
    let mut timing = CsvAppender::open(&out_dir.join(TIMING_FILE), TIMING_HEADER)?;
    let mut step_seconds = 0.0;
    let mut steps_total = 0usize;
    let mut sil_skipped = 0u64;
    let mut supcon_skipped = 0u64;
    let mut final_val_top1 = f64::NAN;

    for epoch in next_epoch..=cfg.epochs {
        let epoch_start = Instant::now();
        let mut totals = EpochTotals::default();
        let mut epoch_step_seconds = 0.0;
        let batches = balanced_batches(&y_train, &cfg.plan, &mut rng)?;
        for (bi, idx) in batches.iter().enumerate() {
            let t0 = Instant::now();
            let xb = x_train.select_rows(idx);
            let yb: LabelVector = y_train.select(idx);
            let comp = match train_step(cfg, data, &mut model, &mut opt, &mut rng, &xb, &yb) {
                Ok(c) => c,
                Err(e) if e.exit_code() == 2 => {
                    return Err(Error::NumericalFailure(write_failure(
                        &out_dir, epoch, bi, idx, &e,
                    )));
                }
                Err(e) => return Err(e),
            };
            epoch_step_seconds += t0.elapsed().as_secs_f64();
            totals.add(
                comp.total,
                &comp.components,
                comp.sil_skipped,
                comp.supcon_skipped,
                comp.sil_score_range,
            );
        }
        let mut probe_rng =
            SeededRng::derive(cfg.seed, TAG_PROBE.wrapping_add((epoch as u64) << 8));
        let val = scored_eval(cfg, &model, data, Split::Val, &mut probe_rng)?;
        final_val_top1 = val.top1;
        sil_skipped += totals.sil_skipped;
        supcon_skipped += totals.supcon_skipped;
        metrics.append(&EpochMetrics {
            epoch,
            objective: kind.to_string(),
            dataset: data.name.clone(),
            seed: cfg.seed,
            train_loss: totals.loss / totals.batches as f64,
            ce: totals.mean(0),
            sil: totals.mean(1),
            supcon: totals.mean(2),
            proxy_nca: totals.mean(3),
            center: totals.mean(4),
            sil_skipped: totals.sil_skipped,
            supcon_skipped: totals.supcon_skipped,
            sil_score_min: totals.sil_range.map(|r| r.0),
            sil_score_max: totals.sil_range.map(|r| r.1),
            val_top1: val.top1,
            val_top5: val.top5,
            top5_k: val.top5_k,
            val_silhouette: val.silhouette,
        })?;
        save_checkpoint(
            &ckpt_path,
            &Checkpoint {
                model: model.clone(),
                optimizer: opt.clone(),
                rng: rng.state(),
                epoch: epoch as u64,
            },
        )?;
        timing.append(&TimingRow {
            epoch,
            steps: totals.batches,
            wall_seconds: epoch_start.elapsed().as_secs_f64(),
            mean_step_seconds: epoch_step_seconds / totals.batches as f64,
        })?;
        step_seconds += epoch_step_seconds;
        steps_total += totals.batches;
    }

    // test metrics come from the checkpoint file, not the in-memory model
    let last = load_checkpoint(&ckpt_path)?;
    let mut probe_rng = SeededRng::derive(cfg.seed, TAG_TEST_PROBE);
    let test = scored_eval(cfg, &last.model, data, Split::Test, &mut probe_rng)?;
    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        objective: kind.to_string(),
        dataset: data.name.clone(),
        seed: cfg.seed,
        epochs: last.epoch as usize,
        test_top1: test.top1,
        test_top5: Some(test.top5),
        top5_k: test.top5_k,
        test_silhouette: test.silhouette,
        final_val_top1,
        sil_skipped,
        supcon_skipped,
        num_params: last.model.num_params(),
        mean_step_seconds: if steps_total > 0 {
            step_seconds / steps_total as f64
        } else {
            0.0
        },
        wall_seconds: started.elapsed().as_secs_f64(),
        config: cfg.echo(),
    };
    let path: PathBuf = out_dir.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussian_mixture, BatchPlan, SyntheticSpec};
    use crate::trainer::metrics::read_metrics;
    use crate::trainer::objective::ObjectiveSpec;

    fn small_data() -> Dataset {
        gen_gaussian_mixture(&SyntheticSpec {
            classes: 4,
            dim: 6,
            per_class: 16,
            spread: 1.0,
            noise: 0.5,
            seed: 2,
        })
        .unwrap()
    }

    fn small_cfg(kind: ObjectiveKind, out: &Path, epochs: usize) -> RunConfig {
        RunConfig {
            encoder: vec![12, 8],
            head: vec![8, 6],
            objective: ObjectiveSpec::new(kind),
            plan: BatchPlan::new(4, 4).unwrap(),
            epochs,
            probe_epochs: 5,
            out_dir: out.to_path_buf(),
            augment: crate::data::AugmentationSpec {
                noise_sigma: 0.02,
                ..Default::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn one_epoch_smoke_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let data = small_data();
        assert_eq!(data.len(), 64);
        let s = train_on(&small_cfg(ObjectiveKind::CeSil, dir.path(), 1), &data).unwrap();
        assert_eq!(
            read_metrics(&dir.path().join(METRICS_FILE)).unwrap().len(),
            1
        );
        assert!(dir.path().join(CHECKPOINT_FILE).exists());
        assert_eq!(read_summary(&dir.path().join(SUMMARY_FILE)).unwrap(), s);
        assert!(s.test_top1 <= s.test_top5.unwrap());
    }

    #[test]
    fn checkpoint_eval_reproduces_summary() {
        let data = small_data();
        for kind in [
            ObjectiveKind::Ce,
            ObjectiveKind::SupCon,
            ObjectiveKind::ProxyNca,
        ] {
            let dir = tempfile::tempdir().unwrap();
            let cfg = small_cfg(kind, dir.path(), 2);
            let s = train_on(&cfg, &data).unwrap();
            let m = evaluate_checkpoint(
                &dir.path().join(CHECKPOINT_FILE),
                &data,
                cfg.probe_epochs,
                cfg.probe_lr,
                cfg.seed,
            )
            .unwrap();
            assert_eq!(
                (m.top1, Some(m.top5), m.silhouette),
                (s.test_top1, s.test_top5, s.test_silhouette),
                "{kind}"
            );
        }
    }

    #[test]
    fn every_objective_runs() {
        let data = small_data();
        for kind in ObjectiveKind::ALL {
            let dir = tempfile::tempdir().unwrap();
            let s = train_on(&small_cfg(kind, dir.path(), 2), &data).unwrap();
            let rows = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
            assert_eq!(rows.len(), 2, "{kind}");
            for r in &rows {
                assert!(
                    r.train_loss.is_finite() && r.val_top1 <= r.val_top5,
                    "{kind}: {r:?}"
                );
                assert_eq!(r.top5_k, 4);
            }
            assert_eq!(s.objective, kind.tag());
        }
    }

    #[test]
    fn same_seed_gives_identical_metrics() {
        let data = small_data();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let kind = ObjectiveKind::CeSilSupCon2;
        train_on(&small_cfg(kind, a.path(), 3), &data).unwrap();
        train_on(&small_cfg(kind, b.path(), 3), &data).unwrap();
        let read = |d: &Path| std::fs::read(d.join(METRICS_FILE)).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = small_data();
        for kind in [ObjectiveKind::Center, ObjectiveKind::SupCon2] {
            let full = tempfile::tempdir().unwrap();
            let part = tempfile::tempdir().unwrap();
            train_on(&small_cfg(kind, full.path(), 4), &data).unwrap();
            train_on(&small_cfg(kind, part.path(), 2), &data).unwrap();
            let mut resumed = small_cfg(kind, part.path(), 4);
            resumed.resume = Some(part.path().join(CHECKPOINT_FILE));
            train_on(&resumed, &data).unwrap();
            let read = |d: &Path| std::fs::read(d.join(METRICS_FILE)).unwrap();
            assert_eq!(read(full.path()), read(part.path()), "{kind}");
            let c1 = std::fs::read(full.path().join(CHECKPOINT_FILE)).unwrap();
            let c2 = std::fs::read(part.path().join(CHECKPOINT_FILE)).unwrap();
            assert_eq!(c1, c2);
        }
    }

    #[test]
    fn resume_rejects_a_different_model() {
        let data = small_data();
        let dir = tempfile::tempdir().unwrap();
        train_on(&small_cfg(ObjectiveKind::Ce, dir.path(), 1), &data).unwrap();
        let mut cfg = small_cfg(ObjectiveKind::Ce, dir.path(), 2);
        cfg.encoder = vec![10, 8];
        cfg.resume = Some(dir.path().join(CHECKPOINT_FILE));
        assert!(matches!(
            train_on(&cfg, &data),
            Err(Error::InvalidConfiguration(_))
        ));
    }

    #[test]
    fn divergence_aborts_with_a_dump() {
        let data = small_data();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg(ObjectiveKind::Ce, dir.path(), 3);
        cfg.lr = 1e300;
        let err = train_on(&cfg, &data).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{err}");
    }

    #[test]
    fn schema_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(SUMMARY_FILE);
        std::fs::write(&p, r#"{"schema_version": 99}"#).unwrap();
        assert!(matches!(read_summary(&p), Err(Error::SchemaMismatch(_))));
    }
}

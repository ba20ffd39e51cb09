//! Run configuration from flat `key = value` files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::{AugmentationSpec, BatchPlan, DataSource, SyntheticSpec};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::sil_loss::SilhouetteParams;
use crate::supcon::SupConParams;
use crate::trainer::objective::{ObjectiveKind, ObjectiveSpec};

/// Every key a config file may contain.
pub const CONFIG_KEYS: &[&str] = &[
    "dataset",
    "synth.classes",
    "synth.dim",
    "synth.per_class",
    "synth.spread",
    "synth.noise",
    "synth.seed",
    "cifar.train_limit",
    "cifar.test_limit",
    "encoder",
    "head",
    "objective",
    "lambda_sil",
    "lambda_ce",
    "center_weight",
    "center_lr",
    "tau_s",
    "tau_m",
    "sil_eps",
    "tau",
    "sil_views",
    "batch_p",
    "batch_k",
    "with_replacement",
    "epochs",
    "lr",
    "weight_decay",
    "dropout",
    "seed",
    "aug.flip_prob",
    "aug.crop_pad",
    "aug.noise_sigma",
    "probe_epochs",
    "probe_lr",
    "out_dir",
    "resume",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataSource,
    /// Hidden and feature widths after the input layer.
    pub encoder: Vec<usize>,
    /// Projection head widths after the features; empty for identity.
    pub head: Vec<usize>,
    pub objective: ObjectiveSpec,
    pub center_lr: f64,
    pub plan: BatchPlan,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub seed: u64,
    pub augment: AugmentationSpec,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic(SyntheticSpec::default()),
            encoder: vec![512, 256],
            head: vec![128, 64],
            objective: ObjectiveSpec::new(ObjectiveKind::CeSil),
            center_lr: 0.5,
            plan: BatchPlan {
                classes_per_batch: 32,
                samples_per_class: 8,
                with_replacement: false,
            },
            epochs: 100,
            lr: 1e-3,
            weight_decay: 1e-4,
            dropout: 0.2,
            seed: 0,
            augment: AugmentationSpec::disabled(),
            probe_epochs: 100,
            probe_lr: 1e-2,
            out_dir: PathBuf::from("runs/latest"),
            resume: None,
        }
    }
}

fn parse_widths(key: &str, s: &str) -> Result<Vec<usize>> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|w| {
            w.trim()
                .parse::<usize>()
                .ok()
                .filter(|&w| w > 0)
                .ok_or_else(|| Error::InvalidConfiguration(format!("{key}: bad width {w:?}")))
        })
        .collect()
}

fn join_widths(w: &[usize]) -> String {
    if w.is_empty() {
        return "none".into();
    }
    w.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// Reads the `dataset` key (`synthetic`, `cifar10:<dir>` or `csv:<path>`)
/// together with its `synth.*` and `cifar.*` options.
pub fn parse_source(kv: &KeyValues) -> Result<DataSource> {
    let raw = kv.get("dataset").unwrap_or("synthetic");
    let (kind, arg) = match raw.split_once(':') {
        Some((k, a)) => (k.trim(), Some(a.trim())),
        None => (raw.trim(), None),
    };
    match (kind, arg) {
        ("synthetic", None) => Ok(DataSource::Synthetic(SyntheticSpec::from_kv(
            kv,
            "synth.",
            SyntheticSpec::default(),
        )?)),
        ("cifar10", Some(dir)) if !dir.is_empty() => Ok(DataSource::Cifar10 {
            dir: PathBuf::from(dir),
            train_limit: kv.parsed("cifar.train_limit")?,
            test_limit: kv.parsed("cifar.test_limit")?,
        }),
        ("csv", Some(path)) if !path.is_empty() => Ok(DataSource::Csv(PathBuf::from(path))),
        _ => Err(Error::InvalidConfiguration(format!(
            "dataset must be synthetic, cifar10:<dir> or csv:<path>, got {raw:?}"
        ))),
    }
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(&KeyValues::read(path)?)
    }

    /// Builds a config from key-value pairs; absent keys take defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(CONFIG_KEYS)?;
        let d = Self::default();
        let kind: ObjectiveKind = kv.parsed_or("objective", d.objective.kind)?;
        let objective = ObjectiveSpec {
            kind,
            lambda_sil: kv.parsed_or("lambda_sil", d.objective.lambda_sil)?,
            lambda_ce: kv.parsed_or("lambda_ce", d.objective.lambda_ce)?,
            center_weight: kv.parsed_or("center_weight", d.objective.center_weight)?,
            sil: SilhouetteParams {
                tau_s: kv.parsed_or("tau_s", d.objective.sil.tau_s)?,
                tau_m: kv.parsed_or("tau_m", d.objective.sil.tau_m)?,
                epsilon: kv.parsed_or("sil_eps", d.objective.sil.epsilon)?,
                fail_on_singleton: false,
            },
            supcon: SupConParams {
                tau: kv.parsed_or("tau", d.objective.supcon.tau)?,
                fail_on_missing_positive: false,
            },
            sil_views: kv.parsed_or("sil_views", d.objective.sil_views)?,
        };
        let cfg = Self {
            data: parse_source(kv)?,
            encoder: match kv.get("encoder") {
                Some(s) => parse_widths("encoder", s)?,
                None => d.encoder,
            },
            head: match kv.get("head") {
                Some(s) => parse_widths("head", s)?,
                None => d.head,
            },
            objective,
            center_lr: kv.parsed_or("center_lr", d.center_lr)?,
            plan: BatchPlan {
                classes_per_batch: kv.parsed_or("batch_p", d.plan.classes_per_batch)?,
                samples_per_class: kv.parsed_or("batch_k", d.plan.samples_per_class)?,
                with_replacement: kv.parsed_or("with_replacement", d.plan.with_replacement)?,
            },
            epochs: kv.parsed_or("epochs", d.epochs)?,
            lr: kv.parsed_or("lr", d.lr)?,
            weight_decay: kv.parsed_or("weight_decay", d.weight_decay)?,
            dropout: kv.parsed_or("dropout", d.dropout)?,
            seed: kv.parsed_or("seed", d.seed)?,
            augment: AugmentationSpec {
                flip_prob: kv.parsed_or("aug.flip_prob", d.augment.flip_prob)?,
                crop_pad: kv.parsed_or("aug.crop_pad", d.augment.crop_pad)?,
                noise_sigma: kv.parsed_or("aug.noise_sigma", d.augment.noise_sigma)?,
                image: None,
            },
            probe_epochs: kv.parsed_or("probe_epochs", d.probe_epochs)?,
            probe_lr: kv.parsed_or("probe_lr", d.probe_lr)?,
            out_dir: kv.get("out_dir").map_or(d.out_dir, PathBuf::from),
            resume: kv
                .get("resume")
                .filter(|s| !s.is_empty())
                .map(PathBuf::from),
        };
        cfg.validate_values()?;
        Ok(cfg)
    }

    /// Value checks that need no filesystem access.
    pub fn validate_values(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfiguration(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.encoder.is_empty() {
            return bad("encoder needs at least one layer".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0,1), got {}", self.dropout));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.probe_lr > 0.0) {
            return bad(format!(
                "lr and probe_lr must be positive and weight_decay >= 0, got {}, {}, {}",
                self.lr, self.probe_lr, self.weight_decay
            ));
        }
        if !(self.center_lr > 0.0) {
            return bad(format!(
                "center_lr must be positive, got {}",
                self.center_lr
            ));
        }
        if self.out_dir.as_os_str().is_empty() {
            return bad("out_dir must not be empty".into());
        }
        if self.objective.kind.uses_probe() && self.probe_epochs == 0 {
            return bad("probe_epochs must be >= 1".into());
        }
        self.objective.validate()?;
        self.plan.validate()?;
        self.augment.validate()
    }

    /// Full validation, including that referenced files exist.
    pub fn validate(&self) -> Result<()> {
        self.validate_values()?;
        self.data.check_exists()?;
        if let Some(r) = &self.resume {
            if !r.exists() {
                return Err(Error::InvalidConfiguration(format!(
                    "resume checkpoint {} does not exist",
                    r.display()
                )));
            }
        }
        Ok(())
    }

    /// Every resolved setting, as written back to `summary.json`.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let o = &self.objective;
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("dataset", self.data.to_string());
        match &self.data {
            DataSource::Synthetic(s) => {
                put("synth.classes", s.classes.to_string());
                put("synth.dim", s.dim.to_string());
                put("synth.per_class", s.per_class.to_string());
                put("synth.spread", s.spread.to_string());
                put("synth.noise", s.noise.to_string());
                put("synth.seed", s.seed.to_string());
            }
            DataSource::Cifar10 {
                train_limit,
                test_limit,
                ..
            } => {
                if let Some(l) = train_limit {
                    put("cifar.train_limit", l.to_string());
                }
                if let Some(l) = test_limit {
                    put("cifar.test_limit", l.to_string());
                }
            }
            DataSource::Csv(_) => {}
        }
        put("encoder", join_widths(&self.encoder));
        put("head", join_widths(&self.head));
        put("objective", o.kind.to_string());
        put("lambda_sil", o.lambda_sil.to_string());
        put("lambda_ce", o.lambda_ce.to_string());
        put("center_weight", o.center_weight.to_string());
        put("center_lr", self.center_lr.to_string());
        put("tau_s", o.sil.tau_s.to_string());
        put("tau_m", o.sil.tau_m.to_string());
        put("sil_eps", o.sil.epsilon.to_string());
        put("tau", o.supcon.tau.to_string());
        put("sil_views", o.sil_views.to_string());
        put("batch_p", self.plan.classes_per_batch.to_string());
        put("batch_k", self.plan.samples_per_class.to_string());
        put("with_replacement", self.plan.with_replacement.to_string());
        put("epochs", self.epochs.to_string());
        put("lr", self.lr.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("dropout", self.dropout.to_string());
        put("seed", self.seed.to_string());
        put("aug.flip_prob", self.augment.flip_prob.to_string());
        put("aug.crop_pad", self.augment.crop_pad.to_string());
        put("aug.noise_sigma", self.augment.noise_sigma.to_string());
        put("probe_epochs", self.probe_epochs.to_string());
        put("probe_lr", self.probe_lr.to_string());
        put("out_dir", self.out_dir.display().to_string());
        m
    }
}

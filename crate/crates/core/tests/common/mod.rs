//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use softsil::trainer::train::{RunSummary, SCHEMA_VERSION, SUMMARY_FILE};

pub const DATASETS: [&str; 7] = [
    "CIFAR-10",
    "CIFAR-100",
    "Caltech-101",
    "FGVC-Aircraft",
    "Oxford Flowers",
    "Caltech-256",
    "Stanford Cars",
];

/// One column pair of the published comparison table.
pub struct Column {
    pub objective: &'static str,
    pub top1: [f64; 7],
    pub top5: Option<[f64; 7]>,
    /// The printed "Average" row.
    pub avg_top1: f64,
    pub avg_top5: Option<f64>,
}

pub const TABLE: [Column; 7] = [
    Column {
        objective: "CE",
        top1: [0.8391, 0.5283, 0.4404, 0.1776, 0.1960, 0.3391, 0.0491],
        top5: Some([0.9938, 0.8057, 0.6347, 0.4821, 0.4721, 0.5521, 0.1505]),
        avg_top1: 0.3671,
        avg_top5: Some(0.5844),
    },
    Column {
        objective: "CE+SIL",
        top1: [0.8393, 0.5322, 0.4595, 0.1704, 0.2656, 0.3278, 0.0596],
        top5: Some([0.9942, 0.8068, 0.6383, 0.4341, 0.5456, 0.5230, 0.1663]),
        avg_top1: 0.3792,
        avg_top5: Some(0.5869),
    },
    Column {
        objective: "SupCon",
        top1: [0.8437, 0.5042, 0.3857, 0.1110, 0.1791, 0.3228, 0.0484],
        top5: Some([0.9924, 0.7981, 0.6007, 0.3738, 0.4654, 0.5279, 0.1578]),
        avg_top1: 0.3421,
        avg_top5: Some(0.5594),
    },
    Column {
        objective: "SupCon2",
        top1: [0.8505, 0.5378, 0.4417, 0.2109, 0.2106, 0.3422, 0.0556],
        top5: Some([0.9939, 0.8144, 0.6404, 0.5209, 0.5025, 0.5480, 0.1566]),
        avg_top1: 0.3785,
        avg_top5: Some(0.5967),
    },
    Column {
        objective: "CE+SIL+SupCon2",
        top1: [0.8514, 0.5386, 0.4692, 0.2043, 0.2740, 0.3393, 0.0585],
        top5: Some([0.9941, 0.8068, 0.6631, 0.4785, 0.5611, 0.5278, 0.1591]),
        avg_top1: 0.3908,
        avg_top5: Some(0.5980),
    },
    Column {
        objective: "ProxyNCA",
        top1: [0.8446, 0.5305, 0.4416, 0.1947, 0.2210, 0.3549, 0.0648],
        top5: None,
        avg_top1: 0.3789,
        avg_top5: None,
    },
    Column {
        objective: "Center",
        top1: [0.8438, 0.5070, 0.3832, 0.1236, 0.2018, 0.3254, 0.0387],
        top5: Some([0.9934, 0.7977, 0.5709, 0.3966, 0.4789, 0.5328, 0.1384]),
        avg_top1: 0.3320,
        avg_top5: Some(0.5580),
    },
];

pub fn column(objective: &str) -> &'static Column {
    TABLE
        .iter()
        .find(|c| c.objective == objective)
        .expect("objective in table")
}

pub fn summary(objective: &str, dataset: &str, top1: f64, top5: Option<f64>) -> RunSummary {
    RunSummary {
        schema_version: SCHEMA_VERSION,
        objective: objective.into(),
        dataset: dataset.into(),
        seed: 0,
        epochs: 100,
        test_top1: top1,
        test_top5: top5,
        top5_k: 5,
        test_silhouette: 0.0,
        final_val_top1: top1,
        sil_skipped: 0,
        supcon_skipped: 0,
        num_params: 0,
        mean_step_seconds: 0.0,
        wall_seconds: 0.0,
        config: BTreeMap::new(),
    }
}

/// Writes one `summary.json` per (objective, dataset) cell under `root`.
pub fn write_table(root: &Path, objectives: &[&str]) -> Vec<PathBuf> {
    let mut dirs = Vec::new();
    for &o in objectives {
        let c = column(o);
        for (i, ds) in DATASETS.iter().enumerate() {
            let dir = root.join(o.replace('+', "_")).join(ds.replace(' ', "_"));
            std::fs::create_dir_all(&dir).unwrap();
            let s = summary(o, ds, c.top1[i], c.top5.map(|t| t[i]));
            std::fs::write(
                dir.join(SUMMARY_FILE),
                serde_json::to_string_pretty(&s).unwrap(),
            )
            .unwrap();
            dirs.push(dir);
        }
    }
    dirs
}

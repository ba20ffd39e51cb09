//! Aggregation of finished runs into a per-objective table.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::trainer::objective::ObjectiveKind;
use crate::trainer::train::{read_summary, RunSummary, SUMMARY_FILE};

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub objective: String,
    pub runs: usize,
    pub datasets: usize,
    pub top1: f64,
    /// `None` when no run of this objective reported top-5.
    pub top5: Option<f64>,
}

/// Summary files under `paths`: a file is read as is, a directory
/// contributes its own summary or, failing that, every summary below it.
pub fn find_summaries(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let own = dir.join(SUMMARY_FILE);
        if own.is_file() {
            out.push(own);
            return Ok(());
        }
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        entries.sort();
        for e in entries {
            walk(&e, out)?;
        }
        Ok(())
    }
    let mut out = Vec::new();
    for p in paths {
        if p.is_file() {
            out.push(p.clone());
        } else if p.is_dir() {
            walk(p, &mut out)?;
        } else {
            return Err(Error::NoData(format!("{} does not exist", p.display())));
        }
    }
    if out.is_empty() {
        return Err(Error::NoData("no completed runs found".into()));
    }
    Ok(out)
}

pub fn load_summaries(paths: &[PathBuf]) -> Result<Vec<RunSummary>> {
    find_summaries(paths)?
        .iter()
        .map(|p| read_summary(p))
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Per objective: seeds are averaged within each dataset, then datasets are
/// averaged with equal weight. Objectives appear in the canonical order,
/// unknown tags after them alphabetically.
pub fn aggregate(runs: &[RunSummary]) -> Result<Vec<ReportRow>> {
    if runs.is_empty() {
        return Err(Error::NoData("no runs to aggregate".into()));
    }
    let mut groups: BTreeMap<&str, BTreeMap<&str, Vec<&RunSummary>>> = BTreeMap::new();
    for r in runs {
        groups
            .entry(r.objective.as_str())
            .or_default()
            .entry(r.dataset.as_str())
            .or_default()
            .push(r);
    }
    let rank = |tag: &str| {
        tag.parse::<ObjectiveKind>()
            .ok()
            .and_then(|k| ObjectiveKind::ALL.iter().position(|&o| o == k))
            .unwrap_or(usize::MAX)
    };
    let mut rows: Vec<ReportRow> = groups
        .into_iter()
        .map(|(objective, by_dataset)| {
            let top1: Vec<f64> = by_dataset
                .values()
                .map(|rs| mean(&rs.iter().map(|r| r.test_top1).collect::<Vec<_>>()))
                .collect();
            let top5: Vec<f64> = by_dataset
                .values()
                .filter_map(|rs| {
                    let v: Vec<f64> = rs.iter().filter_map(|r| r.test_top5).collect();
                    (!v.is_empty()).then(|| mean(&v))
                })
                .collect();
            ReportRow {
                objective: objective.to_string(),
                runs: by_dataset.values().map(Vec::len).sum(),
                datasets: by_dataset.len(),
                top1: mean(&top1),
                top5: (!top5.is_empty()).then(|| mean(&top5)),
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        rank(&a.objective)
            .cmp(&rank(&b.objective))
            .then(a.objective.cmp(&b.objective))
    });
    Ok(rows)
}

pub fn fmt4(v: Option<f64>) -> String {
    v.map_or_else(|| "--".to_string(), |v| format!("{v:.4}"))
}

pub const REPORT_HEADER: &str = "objective,runs,datasets,top1,top5";

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.objective,
            r.runs,
            r.datasets,
            fmt4(Some(r.top1)),
            fmt4(r.top5)
        ));
    }
    out
}

pub fn report_table(rows: &[ReportRow]) -> String {
    let width = rows
        .iter()
        .map(|r| r.objective.len())
        .max()
        .unwrap_or(9)
        .max(9);
    let mut out = format!(
        "{:<width$}  {:>4}  {:>8}  {:>6}  {:>6}\n",
        "objective", "runs", "datasets", "top1", "top5"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<width$}  {:>4}  {:>8}  {:>6}  {:>6}\n",
            r.objective,
            r.runs,
            r.datasets,
            fmt4(Some(r.top1)),
            fmt4(r.top5)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::train::SCHEMA_VERSION;

    fn run(objective: &str, dataset: &str, seed: u64, top1: f64, top5: Option<f64>) -> RunSummary {
        RunSummary {
            schema_version: SCHEMA_VERSION,
            objective: objective.into(),
            dataset: dataset.into(),
            seed,
            epochs: 1,
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

    #[test]
    fn single_run_is_its_own_mean() {
        let rows = aggregate(&[run("CE", "d", 0, 0.25, Some(0.5))]).unwrap();
        assert_eq!(rows[0].top1, 0.25);
        assert_eq!(rows[0].top5, Some(0.5));
    }

    #[test]
    fn seeds_then_datasets() {
        // dataset a: seeds 0.2 and 0.4 -> 0.3; dataset b: 0.5 -> mean 0.4
        let rows = aggregate(&[
            run("CE", "a", 0, 0.2, None),
            run("CE", "a", 1, 0.4, None),
            run("CE", "b", 0, 0.5, None),
        ])
        .unwrap();
        assert!((rows[0].top1 - 0.4).abs() < 1e-15);
        assert_eq!(rows[0].runs, 3);
        assert_eq!(rows[0].datasets, 2);
        assert_eq!(fmt4(rows[0].top5), "--");
    }

    #[test]
    fn canonical_order() {
        let rows = aggregate(&[
            run("Center", "a", 0, 0.1, None),
            run("zeta", "a", 0, 0.1, None),
            run("CE", "a", 0, 0.1, None),
            run("CE+SIL+SupCon2", "a", 0, 0.1, None),
        ])
        .unwrap();
        let order: Vec<_> = rows.iter().map(|r| r.objective.as_str()).collect();
        assert_eq!(order, vec!["CE", "CE+SIL+SupCon2", "Center", "zeta"]);
    }

    #[test]
    fn empty_is_no_data() {
        assert!(matches!(aggregate(&[]), Err(Error::NoData(_))));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            find_summaries(&[dir.path().to_path_buf()]),
            Err(Error::NoData(_))
        ));
    }
}

//! Per-epoch metrics and timing files.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One `metrics.csv` row. Wall-clock figures live in `timing.csv` so that
/// this file is a pure function of the configuration and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub objective: String,
    pub dataset: String,
    pub seed: u64,
    /// Mean composite loss over the epoch's batches.
    pub train_loss: f64,
    pub ce: Option<f64>,
    pub sil: Option<f64>,
    pub supcon: Option<f64>,
    pub proxy_nca: Option<f64>,
    pub center: Option<f64>,
    /// Anchors skipped by the silhouette term (singleton classes), summed.
    pub sil_skipped: u64,
    /// Anchors skipped by the contrastive term (no positive), summed.
    pub supcon_skipped: u64,
    pub sil_score_min: Option<f64>,
    pub sil_score_max: Option<f64>,
    pub val_top1: f64,
    pub val_top5: f64,
    pub top5_k: usize,
    pub val_silhouette: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,objective,dataset,seed,train_loss,ce,sil,supcon,proxy_nca,center,\
sil_skipped,supcon_skipped,sil_score_min,sil_score_max,val_top1,val_top5,top5_k,val_silhouette";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub epoch: usize,
    pub steps: usize,
    pub wall_seconds: f64,
    pub mean_step_seconds: f64,
}

/// Appends rows to a CSV file, writing the header when the file is new,
/// and flushing after every row.
pub struct CsvAppender {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl CsvAppender {
    pub fn open(path: &Path, header: &str) -> Result<Self> {
        let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(file);
        if fresh {
            writer
                .write_record(header.split(','))
                .and_then(|_| writer.flush().map_err(Into::into))
                .map_err(|e| Error::io(path, e.into()))?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn append<T: Serialize>(&mut self, row: &T) -> Result<()> {
        self.writer
            .serialize(row)
            .map_err(|e| Error::io(&self.path, e.into()))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::MalformedRecord {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    reader
        .deserialize()
        .map(|r| {
            r.map_err(|e| Error::MalformedRecord {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    read_rows(path)
}

/// Rewrites a metrics or timing file keeping rows up to `last_epoch`.
pub fn truncate_after<T>(
    path: &Path,
    header: &str,
    last_epoch: usize,
    epoch_of: impl Fn(&T) -> usize,
) -> Result<()>
where
    T: Serialize + DeserializeOwned,
{
    if !path.exists() {
        return Ok(());
    }
    let rows: Vec<T> = read_rows(path)?;
    std::fs::remove_file(path).map_err(|e| Error::io(path, e))?;
    let mut out = CsvAppender::open(path, header)?;
    for row in rows.iter().filter(|r| epoch_of(r) <= last_epoch) {
        out.append(row)?;
    }
    Ok(())
}

pub const TIMING_HEADER: &str = "epoch,steps,wall_seconds,mean_step_seconds";

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize) -> EpochMetrics {
        EpochMetrics {
            epoch,
            objective: "CE+SIL".into(),
            dataset: "synthetic".into(),
            seed: 3,
            train_loss: 1.0 / 3.0,
            ce: Some(0.1),
            sil: None,
            supcon: None,
            proxy_nca: None,
            center: None,
            sil_skipped: 0,
            supcon_skipped: 2,
            sil_score_min: Some(-0.25),
            sil_score_max: Some(0.5),
            val_top1: 0.5,
            val_top5: 1.0,
            top5_k: 5,
            val_silhouette: 0.125,
        }
    }

    #[test]
    fn header_matches_fields_and_rows_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        let mut w = CsvAppender::open(&p, METRICS_HEADER).unwrap();
        w.append(&row(1)).unwrap();
        drop(w);
        // reopening appends without a second header
        let mut w = CsvAppender::open(&p, METRICS_HEADER).unwrap();
        w.append(&row(2)).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRICS_HEADER);
        assert_eq!(text.lines().count(), 3);
        assert_eq!(read_metrics(&p).unwrap(), vec![row(1), row(2)]);
    }

    #[test]
    fn truncation_keeps_early_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        let mut w = CsvAppender::open(&p, METRICS_HEADER).unwrap();
        for e in 1..=4 {
            w.append(&row(e)).unwrap();
        }
        drop(w);
        truncate_after::<EpochMetrics>(&p, METRICS_HEADER, 2, |r| r.epoch).unwrap();
        let rows = read_metrics(&p).unwrap();
        assert_eq!(rows.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn garbage_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        std::fs::write(&p, format!("{METRICS_HEADER}\n1,CE,x\n")).unwrap();
        assert!(matches!(
            read_metrics(&p),
            Err(Error::MalformedRecord { .. })
        ));
    }
}

//! Datasets, splits, ingestion and batch sampling.

pub mod augment;
pub mod cifar;
pub mod sampler;
pub mod synthetic;

use std::fmt;
use std::path::{Path, PathBuf};

use crate::data::augment::ImageShape;
use crate::embedding::LabelVector;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

pub use augment::{augment, augment_batch, AugmentationSpec};
pub use cifar::load_cifar10_binary;
pub use sampler::{balanced_batches, BatchPlan};
pub use synthetic::{gen_gaussian_mixture, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Labeled samples with one split tag per row. Features are scaled to `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub x: Matrix,
    pub y: LabelVector,
    pub splits: Vec<Split>,
    pub image: Option<ImageShape>,
    pub provenance: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn input_width(&self) -> usize {
        self.x.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.y.num_classes()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    /// Features and labels of one split, in dataset order.
    pub fn subset(&self, split: Split) -> (Matrix, LabelVector) {
        let idx = self.indices(split);
        (self.x.select_rows(&idx), self.y.select(&idx))
    }
}

/// Assigns each class's rows to train/val/test by shuffled position.
pub fn stratified_split(y: &LabelVector, train: f64, val: f64, rng: &mut SeededRng) -> Vec<Split> {
    let mut splits = vec![Split::Test; y.len()];
    for c in 0..y.num_classes() {
        let mut members: Vec<usize> = (0..y.len()).filter(|&i| y.as_slice()[i] == c).collect();
        rng.shuffle(&mut members);
        let n = members.len() as f64;
        let n_train = (train * n).round() as usize;
        let n_val = ((val * n).round() as usize).min(members.len() - n_train.min(members.len()));
        for (k, &i) in members.iter().enumerate() {
            splits[i] = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    splits
}

/// Moves `fraction` of each class's `from` rows into `to`.
pub fn stratified_carve(
    y: &LabelVector,
    splits: &mut [Split],
    from: Split,
    to: Split,
    fraction: f64,
    rng: &mut SeededRng,
) {
    for c in 0..y.num_classes() {
        let mut members: Vec<usize> = (0..y.len())
            .filter(|&i| splits[i] == from && y.as_slice()[i] == c)
            .collect();
        rng.shuffle(&mut members);
        let take = (fraction * members.len() as f64).round() as usize;
        for &i in &members[..take] {
            splits[i] = to;
        }
    }
}

/// Reads a dataset CSV: integer label, then feature columns. A first line
/// whose label field is not an integer is taken as a header.
pub fn read_dataset_csv(path: &Path) -> Result<(Matrix, Vec<usize>)> {
    let malformed = |reason: String| Error::MalformedRecord {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| malformed(e.to_string()))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (lineno, record) in reader.records().enumerate() {
        let record = record.map_err(|e| malformed(e.to_string()))?;
        let mut fields = record.iter();
        let Some(first) = fields.next() else { continue };
        let label = match first.parse::<usize>() {
            Ok(l) => l,
            Err(_) if lineno == 0 => continue,
            Err(_) => {
                return Err(malformed(format!(
                    "line {}: bad label {first:?}",
                    lineno + 1
                )))
            }
        };
        let before = data.len();
        for f in fields {
            let v: f64 = f
                .parse()
                .map_err(|_| malformed(format!("line {}: bad value {f:?}", lineno + 1)))?;
            data.push(v);
        }
        let w = data.len() - before;
        match width {
            None => width = Some(w),
            Some(prev) if prev != w => {
                return Err(malformed(format!(
                    "line {}: {w} features, expected {prev}",
                    lineno + 1
                )))
            }
            _ => {}
        }
        labels.push(label);
    }
    let width = width.ok_or_else(|| Error::NoData(format!("{} has no records", path.display())))?;
    if width == 0 {
        return Err(malformed("rows carry no features".into()));
    }
    Ok((Matrix::from_vec(labels.len(), width, data)?, labels))
}

pub fn write_dataset_csv(path: &Path, x: &Matrix, y: &LabelVector) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let mut fields = Vec::with_capacity(x.cols() + 1);
    for r in 0..x.rows() {
        fields.clear();
        fields.push(y.as_slice()[r].to_string());
        fields.extend(x.row(r).iter().map(|v| v.to_string()));
        w.write_record(&fields)
            .map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `train.csv`, `val.csv` and `test.csv` into `dir`.
pub fn write_dataset_dir(dir: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let (x, y) = ds.subset(split);
        write_dataset_csv(&dir.join(format!("{}.csv", split.name())), &x, &y)?;
    }
    Ok(())
}

/// Loads CSV data: a single file (split 70/15/15) or a directory holding
/// `train.csv`, `test.csv` and optionally `val.csv` (otherwise 10% of train).
pub fn load_csv_dataset(path: &Path, seed: u64) -> Result<Dataset> {
    let mut rng = SeededRng::derive(seed, 0xc5f);
    let (x, labels, mut splits) = if path.is_dir() {
        let mut parts = Vec::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            let file = path.join(format!("{}.csv", split.name()));
            if file.exists() {
                parts.push((split, read_dataset_csv(&file)?));
            } else if split != Split::Val {
                return Err(Error::NoData(format!("missing {}", file.display())));
            }
        }
        let mut x: Option<Matrix> = None;
        let mut labels = Vec::new();
        let mut splits = Vec::new();
        for (split, (px, py)) in parts {
            splits.extend(std::iter::repeat(split).take(py.len()));
            labels.extend(py);
            x = Some(match x {
                None => px,
                Some(acc) => acc.vstack(&px)?,
            });
        }
        (x.expect("train split present"), labels, splits)
    } else {
        let (x, labels) = read_dataset_csv(path)?;
        (x, labels, Vec::new())
    };
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let y = LabelVector::new(labels, num_classes)?;
    if splits.is_empty() {
        splits = stratified_split(&y, 0.7, 0.15, &mut rng);
    } else if !splits.contains(&Split::Val) {
        stratified_carve(&y, &mut splits, Split::Train, Split::Val, 0.1, &mut rng);
    }
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("csv")
        .to_string();
    Ok(Dataset {
        name,
        x,
        y,
        splits,
        image: None,
        provenance: format!("csv from {}", path.display()),
    })
}

/// Where a run's data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Cifar10 {
        dir: PathBuf,
        train_limit: Option<usize>,
        test_limit: Option<usize>,
    },
    Csv(PathBuf),
}

impl DataSource {
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match self {
            DataSource::Synthetic(spec) => gen_gaussian_mixture(spec),
            DataSource::Cifar10 {
                dir,
                train_limit,
                test_limit,
            } => load_cifar10_binary(dir, *train_limit, *test_limit, seed),
            DataSource::Csv(path) => load_csv_dataset(path, seed),
        }
    }

    /// Checks referenced files exist without loading them.
    pub fn check_exists(&self) -> Result<()> {
        let path = match self {
            DataSource::Synthetic(spec) => return spec.validate(),
            DataSource::Cifar10 { dir, .. } => dir,
            DataSource::Csv(path) => path,
        };
        if !path.exists() {
            return Err(Error::InvalidConfiguration(format!(
                "data path {} does not exist",
                path.display()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Synthetic(_) => write!(f, "synthetic"),
            DataSource::Cifar10 { dir, .. } => write!(f, "cifar10:{}", dir.display()),
            DataSource::Csv(p) => write!(f, "csv:{}", p.display()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_gaussian_mixture(&SyntheticSpec {
            classes: 3,
            dim: 4,
            per_class: 20,
            ..Default::default()
        })
        .unwrap();
        write_dataset_dir(dir.path(), &ds).unwrap();
        let back = load_csv_dataset(dir.path(), 0).unwrap();
        for split in [Split::Train, Split::Val, Split::Test] {
            assert_eq!(back.subset(split), ds.subset(split));
        }
    }

    #[test]
    fn csv_header_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "label,f0,f1\n0,0.5,0.25\n1,1.0,0.0\n").unwrap();
        let (x, y) = read_dataset_csv(&p).unwrap();
        assert_eq!(y, vec![0, 1]);
        assert_eq!(x.row(0), &[0.5, 0.25]);

        std::fs::write(&p, "0,0.5,0.25\n1,1.0\n").unwrap();
        assert!(matches!(
            read_dataset_csv(&p),
            Err(Error::MalformedRecord { .. })
        ));
        std::fs::write(&p, "0,0.5\nx,1.0\n").unwrap();
        assert!(matches!(
            read_dataset_csv(&p),
            Err(Error::MalformedRecord { .. })
        ));
    }

    #[test]
    fn single_csv_file_gets_stratified_splits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data.csv");
        let rows: String = (0..40)
            .map(|i| format!("{},{}\n", i % 2, i as f64 / 40.0))
            .collect();
        std::fs::write(&p, rows).unwrap();
        let ds = load_csv_dataset(&p, 1).unwrap();
        assert_eq!(ds.indices(Split::Train).len(), 28);
        assert_eq!(ds.num_classes(), 2);
        assert_eq!(ds.name, "data");
    }

    #[test]
    fn split_determinism() {
        let y = LabelVector::new((0..90).map(|i| i % 3).collect(), 3).unwrap();
        let a = stratified_split(&y, 0.7, 0.15, &mut SeededRng::new(4));
        let b = stratified_split(&y, 0.7, 0.15, &mut SeededRng::new(4));
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|&&s| s == Split::Train).count(), 63);
    }
}

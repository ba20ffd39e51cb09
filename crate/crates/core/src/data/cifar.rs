//! CIFAR-10 binary batches.
//!
//! Each record is 3073 bytes: one label byte in `0..=9` followed by 3072
//! pixel bytes, channel-major (1024 red, 1024 green, 1024 blue), each channel
//! row-major 32×32. The files can be obtained from
//! <https://www.cs.toronto.edu/~kriz/cifar.html> (binary version).

use std::path::Path;

use crate::data::augment::ImageShape;
use crate::data::{stratified_carve, Dataset, Split};
use crate::embedding::LabelVector;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

pub const IMAGE_BYTES: usize = 3072;
pub const RECORD_BYTES: usize = IMAGE_BYTES + 1;
pub const NUM_CLASSES: usize = 10;

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// Parses a whole binary batch. Pixels are scaled to `[0,1]`.
pub fn parse_records(
    bytes: &[u8],
    path: &Path,
    limit: Option<usize>,
) -> Result<(Vec<f64>, Vec<usize>)> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::MalformedRecord {
            path: path.to_path_buf(),
            reason: format!("length {} is not a multiple of {RECORD_BYTES}", bytes.len()),
        });
    }
    let total = bytes.len() / RECORD_BYTES;
    let take = limit.map_or(total, |l| l.min(total));
    let mut pixels = Vec::with_capacity(take * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(take);
    for record in bytes.chunks_exact(RECORD_BYTES).take(take) {
        let label = record[0] as usize;
        if label >= NUM_CLASSES {
            return Err(Error::InvalidLabel {
                label,
                num_classes: NUM_CLASSES,
            });
        }
        labels.push(label);
        pixels.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((pixels, labels))
}

fn read_file(path: &Path, limit: Option<usize>) -> Result<(Vec<f64>, Vec<usize>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_records(&bytes, path, limit)
}

/// Loads whichever `data_batch_*.bin` files exist plus `test_batch.bin`,
/// keeping at most `train_limit` / `test_limit` records. Validation is a
/// stratified 10% carve-out of the kept training records.
pub fn load_cifar10_binary(
    dir: &Path,
    train_limit: Option<usize>,
    test_limit: Option<usize>,
    seed: u64,
) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut found = 0;
    for name in TRAIN_FILES {
        let path = dir.join(name);
        if !path.exists() {
            continue;
        }
        found += 1;
        let remaining = train_limit.map(|l| l.saturating_sub(labels.len()));
        if remaining == Some(0) {
            break;
        }
        let (px, y) = read_file(&path, remaining)?;
        pixels.extend(px);
        labels.extend(y);
    }
    if found == 0 {
        return Err(Error::NoData(format!(
            "no data_batch_*.bin files in {}",
            dir.display()
        )));
    }
    let n_train = labels.len();
    let (px, y) = read_file(&dir.join(TEST_FILE), test_limit)?;
    pixels.extend(px);
    labels.extend(y);

    let n = labels.len();
    let x = Matrix::from_vec(n, IMAGE_BYTES, pixels)?;
    let y = LabelVector::new(labels, NUM_CLASSES)?;
    let mut splits = vec![Split::Train; n_train];
    splits.extend(std::iter::repeat(Split::Test).take(n - n_train));
    let mut rng = SeededRng::derive(seed, 0xc1fa);
    stratified_carve(&y, &mut splits, Split::Train, Split::Val, 0.1, &mut rng);
    Ok(Dataset {
        name: "cifar10".into(),
        x,
        y,
        splits,
        image: Some(ImageShape::CIFAR),
        provenance: format!(
            "CIFAR-10 binary from {} ({} train incl. validation, {} test)",
            dir.display(),
            n_train,
            n - n_train
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..IMAGE_BYTES).map(fill));
        r
    }

    #[test]
    fn golden_first_record() {
        let mut bytes = record(7, |i| (i % 256) as u8);
        bytes.extend(record(0, |_| 255));
        let (px, y) = parse_records(&bytes, Path::new("fixture"), None).unwrap();
        assert_eq!(y, vec![7, 0]);
        assert_eq!(px.len(), 2 * IMAGE_BYTES);
        assert_eq!(px[0], 0.0);
        assert_eq!(px[1], 1.0 / 255.0);
        assert_eq!(px[255], 1.0);
        assert_eq!(px[256], 0.0);
        // first green pixel sits at offset 1024
        assert_eq!(px[1024], 0.0);
        assert_eq!(px[1024 + 5], 5.0 / 255.0);
        assert_eq!(px[IMAGE_BYTES], 1.0);
    }

    #[test]
    fn full_batch_size() {
        let bytes: Vec<u8> = (0..10_000)
            .flat_map(|i| record((i % 10) as u8, |_| 3))
            .collect();
        let (px, y) = parse_records(&bytes, Path::new("batch"), None).unwrap();
        assert_eq!(y.len(), 10_000);
        assert_eq!(px.len() / y.len(), 3072);
    }

    #[test]
    fn rejects_bad_length_and_label() {
        let short = vec![0u8; 3072];
        assert!(matches!(
            parse_records(&short, Path::new("x"), None),
            Err(Error::MalformedRecord { .. })
        ));
        let bad = record(10, |_| 0);
        assert!(matches!(
            parse_records(&bad, Path::new("x"), None),
            Err(Error::InvalidLabel { label: 10, .. })
        ));
    }

    #[test]
    fn honours_limit() {
        let bytes: Vec<u8> = (0..5).flat_map(|i| record(i as u8, |_| 0)).collect();
        let (_, y) = parse_records(&bytes, Path::new("x"), Some(3)).unwrap();
        assert_eq!(y, vec![0, 1, 2]);
    }
}

//! Binary checkpoint format, all little-endian:
//!
//! ```text
//! magic        8 bytes  "SILCKPT1"
//! version      u32      1
//! epoch        u64
//! rng          u64 seed, u64 stream, u128 word position
//! dropout      f64
//! flags        u8       1 classifier, 2 proxies, 4 centers
//! center_lr    f64
//! layers       u32 encoder, u32 head
//! optimizer    u64 step, f64 lr, wd, beta1, beta2, eps, u8 has_moments
//! tensors      u32 count, then count × (u32 rows, u32 cols)
//! payload      f64 values of every tensor, then first and second moments
//!              of the trainable tensors when present
//! ```
//!
//! Tensor order is the model's trainable order followed by the centers.

use std::path::Path;

use crate::baselines::{ClassCenters, ClassifierHead};
use crate::error::{Error, Result};
use crate::model::{AdamW, Linear, MlpEncoder, Model, ProjectionHead};
use crate::numerics::{Matrix, RngState};

pub const MAGIC: &[u8; 8] = b"SILCKPT1";
pub const VERSION: u32 = 1;

const FLAG_CLASSIFIER: u8 = 1;
const FLAG_PROXIES: u8 = 2;
const FLAG_CENTERS: u8 = 4;

/// Complete training state at the end of an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: AdamW,
    pub rng: RngState,
    pub epoch: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let opt = &self.optimizer;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.rng.seed.to_le_bytes());
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&m.encoder().dropout.to_le_bytes());
        let mut flags = 0u8;
        if m.classifier().is_some() {
            flags |= FLAG_CLASSIFIER;
        }
        if m.proxies().is_some() {
            flags |= FLAG_PROXIES;
        }
        if m.centers().is_some() {
            flags |= FLAG_CENTERS;
        }
        out.push(flags);
        out.extend_from_slice(&m.centers().map_or(0.0, |c| c.learning_rate).to_le_bytes());
        out.extend_from_slice(&(m.encoder().layers.len() as u32).to_le_bytes());
        out.extend_from_slice(&(m.head().layers.len() as u32).to_le_bytes());
        out.extend_from_slice(&opt.step.to_le_bytes());
        for v in [opt.lr, opt.weight_decay, opt.beta1, opt.beta2, opt.eps] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(u8::from(!opt.m.is_empty()));
        let mut tensors = m.params();
        tensors.extend(m.centers().map(|c| &c.centers));
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in &tensors {
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        }
        for t in tensors.iter().copied().chain(&opt.m).chain(&opt.v) {
            for v in t.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::CorruptHeader("bad magic tag".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let epoch = r.u64()?;
        let rng = RngState {
            seed: r.u64()?,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes")),
        };
        let dropout = r.f64()?;
        let flags = r.u8()?;
        if flags & !(FLAG_CLASSIFIER | FLAG_PROXIES | FLAG_CENTERS) != 0 {
            return Err(Error::CorruptHeader(format!("unknown flags {flags:#x}")));
        }
        let center_lr = r.f64()?;
        let n_enc = r.u32()? as usize;
        let n_head = r.u32()? as usize;
        let step = r.u64()?;
        let (lr, weight_decay, beta1, beta2, eps) =
            (r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let has_moments = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(Error::CorruptHeader(format!("bad moment flag {b}"))),
        };
        let count = r.u32()? as usize;
        let has = |f: u8| usize::from(flags & f != 0);
        let trainable = 2 * (n_enc + n_head + has(FLAG_CLASSIFIER)) + has(FLAG_PROXIES);
        let expected_count = trainable + has(FLAG_CENTERS);
        if count != expected_count {
            return Err(Error::CorruptHeader(format!(
                "{count} tensors listed, layout implies {expected_count}"
            )));
        }
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            shapes.push((r.u32()? as usize, r.u32()? as usize));
        }
        let values: usize = shapes.iter().map(|(a, b)| a * b).sum();
        let moment_values: usize = shapes[..trainable].iter().map(|(a, b)| a * b).sum();
        let payload = 8 * (values + if has_moments { 2 * moment_values } else { 0 });
        let expected_len = r.pos + payload;
        if bytes.len() < expected_len {
            return Err(Error::TruncatedPayload {
                expected: expected_len,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected_len {
            return Err(Error::CorruptHeader(format!(
                "{} trailing bytes after payload",
                bytes.len() - expected_len
            )));
        }
        let mut tensors = Vec::with_capacity(count);
        for &(rows, cols) in &shapes {
            tensors.push(r.matrix(rows, cols)?);
        }
        let (m, v) = if has_moments {
            let mut m = Vec::with_capacity(trainable);
            for &(rows, cols) in &shapes[..trainable] {
                m.push(r.matrix(rows, cols)?);
            }
            let mut v = Vec::with_capacity(trainable);
            for &(rows, cols) in &shapes[..trainable] {
                v.push(r.matrix(rows, cols)?);
            }
            (m, v)
        } else {
            (Vec::new(), Vec::new())
        };

        let mut it = tensors.into_iter();
        let mut linear = || Linear {
            weight: it.next().expect("counted"),
            bias: it.next().expect("counted"),
        };
        let enc_layers = (0..n_enc).map(|_| linear()).collect();
        let head_layers = (0..n_head).map(|_| linear()).collect();
        let classifier =
            (flags & FLAG_CLASSIFIER != 0).then(|| ClassifierHead { linear: linear() });
        let proxies = (flags & FLAG_PROXIES != 0).then(|| it.next().expect("counted"));
        let centers = (flags & FLAG_CENTERS != 0).then(|| ClassCenters {
            centers: it.next().expect("counted"),
            learning_rate: center_lr,
        });
        let model = Model::from_parts(
            MlpEncoder {
                layers: enc_layers,
                dropout,
            },
            ProjectionHead {
                layers: head_layers,
            },
            classifier,
            proxies,
            centers,
        )
        .map_err(|e| Error::CorruptHeader(e.to_string()))?;
        Ok(Self {
            model,
            optimizer: AdamW {
                lr,
                weight_decay,
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            },
            rng,
            epoch,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::TruncatedPayload {
                expected: end,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let raw = self.take(8 * rows * cols)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

/// Writes through a sibling temporary file so a crash never leaves a
/// half-written checkpoint behind.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("bin.tmp");
    std::fs::write(&tmp, ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::SeededRng;

    fn sample(proxies: bool, centers: bool) -> Checkpoint {
        let cfg = ModelConfig {
            encoder_widths: vec![5, 7, 4],
            head_widths: vec![6, 3],
            dropout: 0.2,
            classes: 3,
            classifier: true,
            proxies,
            center_lr: centers.then_some(0.5),
        };
        let mut rng = SeededRng::new(17);
        let mut model = Model::init(&cfg, &mut rng).unwrap();
        let mut optimizer = AdamW::new(1e-3, 1e-4);
        let grads: Vec<Matrix> = model
            .params()
            .iter()
            .map(|p| rng.uniform_matrix(p.rows(), p.cols(), -1.0, 1.0))
            .collect();
        optimizer.step(model.params_mut(), &grads).unwrap();
        if let Some(c) = model.centers_mut() {
            c.centers = rng.uniform_matrix(3, 4, -1.0, 1.0);
        }
        rng.next_u64();
        Checkpoint {
            model,
            optimizer,
            rng: rng.state(),
            epoch: 7,
        }
    }

    fn same_state(a: &Checkpoint, b: &Checkpoint) -> bool {
        a.model.params() == b.model.params()
            && a.model.centers() == b.model.centers()
            && a.optimizer == b.optimizer
            && a.rng == b.rng
            && a.epoch == b.epoch
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        for (proxies, centers) in [(false, false), (true, false), (false, true), (true, true)] {
            let ckpt = sample(proxies, centers);
            let p1 = dir.path().join("a.bin");
            let p2 = dir.path().join("b.bin");
            save_checkpoint(&p1, &ckpt).unwrap();
            let back = load_checkpoint(&p1).unwrap();
            assert!(same_state(&ckpt, &back));
            save_checkpoint(&p2, &back).unwrap();
            assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        }
    }

    #[test]
    fn fresh_optimizer_roundtrips() {
        let mut ckpt = sample(false, false);
        ckpt.optimizer = AdamW::new(1e-3, 1e-4);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert!(same_state(&ckpt, &back));
    }

    #[test]
    fn restored_rng_continues_the_stream() {
        let ckpt = sample(false, false);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        let mut a = SeededRng::from_state(ckpt.rng);
        let mut b = SeededRng::from_state(back.rng);
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn every_truncation_is_detected() {
        let bytes = sample(true, true).to_bytes();
        for cut in (0..bytes.len()).step_by(13).chain([bytes.len() - 1]) {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::TruncatedPayload { found, .. }) => assert_eq!(found, cut),
                // short prefixes cannot hold the magic tag
                Err(Error::CorruptHeader(_)) if cut < 8 => {}
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn distinct_errors() {
        let bytes = sample(false, false).to_bytes();
        let mut bad_version = bytes.clone();
        bad_version[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bad_version),
            Err(Error::VersionMismatch {
                found: 2,
                expected: 1
            })
        ));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad_magic),
            Err(Error::CorruptHeader(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&extra),
            Err(Error::CorruptHeader(_))
        ));
    }

    #[test]
    fn inconsistent_shapes_are_corrupt() {
        let ckpt = sample(false, false);
        let mut bytes = ckpt.to_bytes();
        // first shape entry sits right after the tensor count
        let header = 8 + 4 + 8 + 32 + 8 + 1 + 8 + 8 + 8 + 40 + 1;
        let count = u32::from_le_bytes(bytes[header..header + 4].try_into().unwrap()) as usize;
        assert_eq!(count, ckpt.model.params().len());
        // swap rows and cols of the first weight: same payload length, broken chain
        let s = header + 4;
        let rows = bytes[s..s + 4].to_vec();
        let cols = bytes[s + 4..s + 8].to_vec();
        bytes[s..s + 4].copy_from_slice(&cols);
        bytes[s + 4..s + 8].copy_from_slice(&rows);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CorruptHeader(_))
        ));
    }
}

//! Binary checkpoint archives for training state and the trained selection
//! classifier.
//!
//! The format is a little-endian stream: a magic line, a version word, then
//! length-prefixed tensor lists. Restores are strict — any mismatch in
//! magic, version, counts, or shapes is a [`Error::Checkpoint`].

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const TRAIN_MAGIC: &[u8; 14] = b"tcgan-ckpt-v1\n";
const MSM_MAGIC: &[u8; 13] = b"tcgan-msm-v1\n";
const VERSION: u32 = 1;
const MAX_NDIM: u32 = 8;

/// Serializable position of a counter-based RNG stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngSnapshot {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngSnapshot {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngSnapshot {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Adam accumulator state for one parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimSnapshot {
    pub step: u64,
    pub m: Vec<ArrayD<f32>>,
    pub v: Vec<ArrayD<f32>>,
}

/// Everything needed to resume training bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSnapshot {
    pub epoch: u32,
    pub iteration: u64,
    pub seed1: u64,
    pub seed2: u64,
    pub g1: Vec<ArrayD<f32>>,
    pub g2: Vec<ArrayD<f32>>,
    pub d1: Vec<ArrayD<f32>>,
    pub d2: Vec<ArrayD<f32>>,
    pub gen_opt: OptimSnapshot,
    pub disc_opt: OptimSnapshot,
    pub data_rng: RngSnapshot,
}

/// Trained selection-classifier parameters plus its held-out accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct MsmSnapshot {
    pub params: Vec<ArrayD<f32>>,
    pub holdout_accuracy: f64,
}

// ---- primitive codec ----------------------------------------------------

struct Sink<W: Write>(W);

impl<W: Write> Sink<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.0
            .write_all(b)
            .map_err(|e| Error::Checkpoint(format!("write failed: {e}")))
    }

    fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn u128(&mut self, v: u128) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn tensor(&mut self, t: &ArrayD<f32>) -> Result<()> {
        self.u32(t.ndim() as u32)?;
        for &d in t.shape() {
            self.u64(d as u64)?;
        }
        // iterate in logical order so layout does not leak into the file
        for &x in t.iter() {
            self.bytes(&x.to_le_bytes())?;
        }
        Ok(())
    }

    fn tensor_list(&mut self, list: &[ArrayD<f32>]) -> Result<()> {
        self.u32(list.len() as u32)?;
        for t in list {
            self.tensor(t)?;
        }
        Ok(())
    }

    fn optim(&mut self, o: &OptimSnapshot) -> Result<()> {
        self.u64(o.step)?;
        self.tensor_list(&o.m)?;
        self.tensor_list(&o.v)
    }

    fn rng(&mut self, r: &RngSnapshot) -> Result<()> {
        self.bytes(&r.seed)?;
        self.u128(r.word_pos)?;
        self.u64(r.stream)
    }
}

struct Source<R: Read>(R);

impl<R: Read> Source<R> {
    fn bytes(&mut self, buf: &mut [u8]) -> Result<()> {
        self.0
            .read_exact(buf)
            .map_err(|e| Error::Checkpoint(format!("read failed (truncated archive?): {e}")))
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.bytes(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn u128(&mut self) -> Result<u128> {
        let mut b = [0u8; 16];
        self.bytes(&mut b)?;
        Ok(u128::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    fn tensor(&mut self) -> Result<ArrayD<f32>> {
        let ndim = self.u32()?;
        if ndim > MAX_NDIM {
            return Err(Error::Checkpoint(format!(
                "tensor rank {ndim} exceeds limit {MAX_NDIM}"
            )));
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        let mut count = 1usize;
        for _ in 0..ndim {
            let d = self.u64()? as usize;
            count = count.checked_mul(d).ok_or_else(|| {
                Error::Checkpoint("tensor size overflows".into())
            })?;
            shape.push(d);
        }
        if count > 1 << 28 {
            return Err(Error::Checkpoint(format!(
                "tensor with {count} elements exceeds size limit"
            )));
        }
        let mut data = vec![0f32; count];
        let mut b = [0u8; 4];
        for x in &mut data {
            self.bytes(&mut b)?;
            *x = f32::from_le_bytes(b);
        }
        ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| Error::Checkpoint(format!("tensor shape rebuild: {e}")))
    }

    fn tensor_list(&mut self) -> Result<Vec<ArrayD<f32>>> {
        let n = self.u32()?;
        if n > 4096 {
            return Err(Error::Checkpoint(format!("tensor list of {n} entries")));
        }
        (0..n).map(|_| self.tensor()).collect()
    }

    fn optim(&mut self) -> Result<OptimSnapshot> {
        Ok(OptimSnapshot {
            step: self.u64()?,
            m: self.tensor_list()?,
            v: self.tensor_list()?,
        })
    }

    fn rng(&mut self) -> Result<RngSnapshot> {
        let mut seed = [0u8; 32];
        self.bytes(&mut seed)?;
        Ok(RngSnapshot {
            seed,
            word_pos: self.u128()?,
            stream: self.u64()?,
        })
    }
}

fn check_header<R: Read>(src: &mut Source<R>, magic: &[u8], kind: &str) -> Result<()> {
    let mut got = vec![0u8; magic.len()];
    src.bytes(&mut got)?;
    if got != magic {
        return Err(Error::Checkpoint(format!("not a {kind} archive")));
    }
    let version = src.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported {kind} version {version}, expected {VERSION}"
        )));
    }
    Ok(())
}

/// Writes to `path` atomically (temp file + rename in the same directory).
fn atomic_write(path: &Path, write: impl FnOnce(&mut Sink<BufWriter<fs::File>>) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut sink = Sink(BufWriter::new(file));
        write(&mut sink)?;
        sink.0
            .flush()
            .map_err(|e| Error::Checkpoint(format!("flush failed: {e}")))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_train_snapshot(path: &Path, s: &TrainSnapshot) -> Result<()> {
    atomic_write(path, |w| {
        w.bytes(TRAIN_MAGIC)?;
        w.u32(VERSION)?;
        w.u32(s.epoch)?;
        w.u64(s.iteration)?;
        w.u64(s.seed1)?;
        w.u64(s.seed2)?;
        for list in [&s.g1, &s.g2, &s.d1, &s.d2] {
            w.tensor_list(list)?;
        }
        w.optim(&s.gen_opt)?;
        w.optim(&s.disc_opt)?;
        w.rng(&s.data_rng)
    })
}

pub fn read_train_snapshot(path: &Path) -> Result<TrainSnapshot> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut src = Source(BufReader::new(file));
    check_header(&mut src, TRAIN_MAGIC, "training checkpoint")?;
    Ok(TrainSnapshot {
        epoch: src.u32()?,
        iteration: src.u64()?,
        seed1: src.u64()?,
        seed2: src.u64()?,
        g1: src.tensor_list()?,
        g2: src.tensor_list()?,
        d1: src.tensor_list()?,
        d2: src.tensor_list()?,
        gen_opt: src.optim()?,
        disc_opt: src.optim()?,
        data_rng: src.rng()?,
    })
}

pub fn write_msm_snapshot(path: &Path, s: &MsmSnapshot) -> Result<()> {
    atomic_write(path, |w| {
        w.bytes(MSM_MAGIC)?;
        w.u32(VERSION)?;
        w.f64(s.holdout_accuracy)?;
        w.tensor_list(&s.params)
    })
}

pub fn read_msm_snapshot(path: &Path) -> Result<MsmSnapshot> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut src = Source(BufReader::new(file));
    check_header(&mut src, MSM_MAGIC, "classifier checkpoint")?;
    Ok(MsmSnapshot {
        holdout_accuracy: src.f64()?,
        params: src.tensor_list()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    fn tensor(shape: &[usize], scale: f32) -> ArrayD<f32> {
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(
            IxDyn(shape),
            (0..n).map(|i| (i as f32 * 0.37 - 1.0) * scale).collect(),
        )
        .unwrap()
    }

    fn sample_snapshot() -> TrainSnapshot {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let _ = rand::Rng::random::<u64>(&mut rng); // advance the stream
        TrainSnapshot {
            epoch: 17,
            iteration: 4242,
            seed1: 5,
            seed2: 6,
            g1: vec![tensor(&[4, 3, 3, 3], 1.0), tensor(&[4], 0.1)],
            g2: vec![tensor(&[4, 3, 3, 3], 0.5)],
            d1: vec![tensor(&[2, 2], 2.0)],
            d2: vec![tensor(&[7], 0.3)],
            gen_opt: OptimSnapshot {
                step: 9,
                m: vec![tensor(&[4, 3, 3, 3], 0.01), tensor(&[4], 0.02)],
                v: vec![tensor(&[4, 3, 3, 3], 0.03), tensor(&[4], 0.04)],
            },
            disc_opt: OptimSnapshot {
                step: 2,
                m: vec![tensor(&[2, 2], 0.05)],
                v: vec![tensor(&[2, 2], 0.06)],
            },
            data_rng: RngSnapshot::capture(&rng),
        }
    }

    #[test]
    fn train_snapshot_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        let snap = sample_snapshot();
        write_train_snapshot(&path, &snap).unwrap();
        let back = read_train_snapshot(&path).unwrap();
        assert_eq!(snap, back);
    }

    #[test]
    fn rng_snapshot_resumes_the_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..37 {
            let _ = rand::Rng::random::<f64>(&mut rng);
        }
        let snap = RngSnapshot::capture(&rng);
        let mut resumed = snap.restore();
        for _ in 0..10 {
            let a: u64 = rand::Rng::random(&mut rng);
            let b: u64 = rand::Rng::random(&mut resumed);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn msm_snapshot_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("msm.ckpt");
        let snap = MsmSnapshot {
            params: vec![tensor(&[3, 3], 1.0), tensor(&[], 0.5)],
            holdout_accuracy: 0.9375,
        };
        write_msm_snapshot(&path, &snap).unwrap();
        let back = read_msm_snapshot(&path).unwrap();
        assert_eq!(snap, back);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(
            read_train_snapshot(&path),
            Err(Error::Checkpoint(_))
        ));

        let good = dir.path().join("good.ckpt");
        write_train_snapshot(&good, &sample_snapshot()).unwrap();
        let bytes = fs::read(&good).unwrap();
        let cut = dir.path().join("cut.ckpt");
        fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(read_train_snapshot(&cut), Err(Error::Checkpoint(_))));

        // a training archive is not a classifier archive
        assert!(read_msm_snapshot(&good).is_err());
    }
}

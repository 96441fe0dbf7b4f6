//! Binary batch dumps.
//!
//! Layout (all little-endian):
//!
//! | field          | type            |
//! |----------------|-----------------|
//! | magic          | `b"ADUN"`       |
//! | version        | `u32` (= 1)     |
//! | n              | `u64`           |
//! | m              | `u64`           |
//! | batch_size     | `u64`           |
//! | snr_millibel   | `i64`, `i64::MIN` when noiseless |
//! | matrix_kind    | `u8`            |
//!
//! followed by `A` row-major (`n*m` f64) and then, per sample, `x` (`m` f64)
//! and `y` (`n` f64). `n` and `m` are the stored (real) matrix dimensions.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::problems::{Batch, MatrixKind, MeasurementMatrix};

pub const DATASET_MAGIC: &[u8; 4] = b"ADUN";
pub const DATASET_VERSION: u32 = 1;
const NOISELESS: i64 = i64::MIN;

pub(crate) struct BinWriter<W: Write> {
    inner: W,
    path: PathBuf,
}

impl<W: Write> BinWriter<W> {
    pub(crate) fn new(inner: W, path: &Path) -> Self {
        BinWriter {
            inner,
            path: path.to_path_buf(),
        }
    }

    pub(crate) fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b).map_err(|e| Error::io(&self.path, e))
    }

    pub(crate) fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }

    pub(crate) fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub(crate) fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub(crate) fn i64(&mut self, v: i64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub(crate) fn f64s<'a>(&mut self, vals: impl IntoIterator<Item = &'a f64>) -> Result<()> {
        for v in vals {
            self.bytes(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub(crate) fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub(crate) struct BinReader<R: Read> {
    inner: R,
    path: PathBuf,
}

impl<R: Read> BinReader<R> {
    pub(crate) fn new(inner: R, path: &Path) -> Self {
        BinReader {
            inner,
            path: path.to_path_buf(),
        }
    }

    pub(crate) fn format_err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            msg: msg.into(),
        }
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                self.format_err("file is truncated")
            } else {
                Error::io(&self.path, e)
            }
        })?;
        Ok(buf)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub(crate) fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.format_err(format!("size {v} does not fit in memory")))
    }

    pub(crate) fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.array()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub(crate) fn fill(&mut self, out: &mut [f64]) -> Result<()> {
        for v in out.iter_mut() {
            *v = self.f64()?;
        }
        Ok(())
    }

    pub(crate) fn expect_eof(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(self.format_err("trailing bytes after payload")),
            Err(e) => Err(Error::io(&self.path, e)),
        }
    }
}

fn snr_to_millibel(snr_db: Option<f64>) -> i64 {
    snr_db.map_or(NOISELESS, |s| (s * 100.0).round() as i64)
}

fn millibel_to_snr(mb: i64) -> Option<f64> {
    (mb != NOISELESS).then(|| mb as f64 / 100.0)
}

pub fn write_batch(path: &Path, batch: &Batch) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BinWriter::new(BufWriter::new(file), path);
    let a = &batch.matrix.entries;
    w.bytes(DATASET_MAGIC)?;
    w.u32(DATASET_VERSION)?;
    w.u64(a.nrows() as u64)?;
    w.u64(a.ncols() as u64)?;
    w.u64(batch.len() as u64)?;
    w.i64(snr_to_millibel(batch.snr_db))?;
    w.u8(batch.matrix.kind.code())?;
    w.f64s(a.iter())?;
    for i in 0..batch.len() {
        w.f64s(batch.signals.row(i).iter())?;
        w.f64s(batch.measurements.row(i).iter())?;
    }
    w.finish()
}

fn count_sparsity(x: &[f64], paired: bool) -> usize {
    if paired {
        let half = x.len() / 2;
        (0..half).filter(|&k| x[k] != 0.0 || x[k + half] != 0.0).count()
    } else {
        x.iter().filter(|v| **v != 0.0).count()
    }
}

/// Reads a dump. Sparsity levels are recovered from the stored signals; the
/// matrix seed is not stored and reads back as 0.
pub fn read_batch(path: &Path) -> Result<Batch> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BinReader::new(BufReader::new(file), path);
    if &r.array::<4>()? != DATASET_MAGIC {
        return Err(r.format_err("bad magic, expected ADUN"));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(r.format_err(format!("unsupported dataset version {version}")));
    }
    let n = r.usize()?;
    let m = r.usize()?;
    let size = r.usize()?;
    let snr_db = millibel_to_snr(r.i64()?);
    let code = r.u8()?;
    let kind = MatrixKind::from_code(code).ok_or_else(|| r.format_err(format!("unknown matrix kind {code}")))?;
    let mut a = Array2::zeros((n, m));
    r.fill(a.as_slice_mut().expect("standard layout"))?;
    let mut signals = Array2::zeros((size, m));
    let mut measurements = Array2::zeros((size, n));
    for i in 0..size {
        r.fill(signals.row_mut(i).as_slice_mut().expect("row is contiguous"))?;
        r.fill(measurements.row_mut(i).as_slice_mut().expect("row is contiguous"))?;
    }
    r.expect_eof()?;
    let paired = kind == MatrixKind::QpskStacked;
    let sparsities = signals
        .rows()
        .into_iter()
        .map(|x| count_sparsity(x.as_slice().expect("row is contiguous"), paired))
        .collect();
    Ok(Batch {
        index: 0,
        matrix: Arc::new(MeasurementMatrix {
            entries: a,
            kind,
            seed: 0,
        }),
        signals,
        measurements,
        sparsities,
        snr_db,
    })
}

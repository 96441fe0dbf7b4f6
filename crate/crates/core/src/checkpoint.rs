//! Binary network checkpoints.
//!
//! Layout (little-endian): `b"ADNW"`, version `u32`, kind `u8`, depth `u64`,
//! n `u64`, m `u64`, shared `u8`; then the f64 blocks `W[..]`, `B[..]`,
//! thresholds and (LISTA-CPSS) support fractions. A `u8` flag follows; when
//! set, the halting block is design `u8`, `h_last` f64 and the halting
//! parameter blocks (`Q`, `phi`, `psi` or the per-layer MLP weights).

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::dataset::{BinReader, BinWriter};
use crate::error::{Error, Result};
use crate::halting::{HaltingDesign, HaltingParams};
use crate::nets::{NetKind, UnfoldedNet};
use crate::training::{halting_blocks, halting_blocks_mut, net_blocks};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ADNW";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, net: &UnfoldedNet, hp: Option<&HaltingParams>) -> Result<()> {
    net.validate()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BinWriter::new(BufWriter::new(file), path);
    w.bytes(CHECKPOINT_MAGIC)?;
    w.u32(CHECKPOINT_VERSION)?;
    w.u8(net.kind.code())?;
    w.u64(net.depth as u64)?;
    w.u64(net.n as u64)?;
    w.u64(net.m as u64)?;
    w.u8(net.shared as u8)?;
    for (_, block) in net_blocks(net) {
        w.f64s(block)?;
    }
    if let Some(p) = &net.support_fractions {
        w.f64s(p.iter())?;
    }
    match hp {
        None => w.u8(0)?,
        Some(hp) => {
            hp.validate()?;
            w.u8(1)?;
            w.u8(hp.design.code())?;
            w.f64s([hp.h_last].iter())?;
            for (_, block) in halting_blocks(hp) {
                w.f64s(block)?;
            }
        }
    }
    w.finish()
}

fn read_matrix<R: std::io::Read>(r: &mut BinReader<R>, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let mut a = Array2::zeros((rows, cols));
    r.fill(a.as_slice_mut().expect("standard layout"))?;
    Ok(a)
}

fn read_vector<R: std::io::Read>(r: &mut BinReader<R>, len: usize) -> Result<Array1<f64>> {
    let mut v = Array1::zeros(len);
    r.fill(v.as_slice_mut().expect("standard layout"))?;
    Ok(v)
}

pub fn load_checkpoint(path: &Path) -> Result<(UnfoldedNet, Option<HaltingParams>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BinReader::new(BufReader::new(file), path);
    if &r.array::<4>()? != CHECKPOINT_MAGIC {
        return Err(r.format_err("bad magic, expected ADNW"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.format_err(format!("unsupported checkpoint version {version}")));
    }
    let code = r.u8()?;
    let kind = NetKind::from_code(code).ok_or_else(|| r.format_err(format!("unknown network kind {code}")))?;
    let depth = r.usize()?;
    let n = r.usize()?;
    let m = r.usize()?;
    let shared = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(r.format_err(format!("bad sharing flag {v}"))),
    };
    if depth == 0 || n == 0 || m == 0 {
        return Err(r.format_err("zero depth or dimension"));
    }
    let copies = if shared { 1 } else { depth };
    let mut weights_w = Vec::new();
    if kind == NetKind::Lista {
        for _ in 0..copies {
            weights_w.push(read_matrix(&mut r, m, m)?);
        }
    }
    let mut weights_b = Vec::new();
    for _ in 0..copies {
        weights_b.push(read_matrix(&mut r, m, n)?);
    }
    let thresholds = read_vector(&mut r, depth)?;
    let support_fractions = match kind {
        NetKind::ListaCpss => Some(read_vector(&mut r, depth)?),
        NetKind::Lista => None,
    };
    let net = UnfoldedNet {
        kind,
        depth,
        shared,
        n,
        m,
        weights_w,
        weights_b,
        thresholds,
        support_fractions,
    };
    net.validate().map_err(|e| r.format_err(e.to_string()))?;
    let hp = match r.u8()? {
        0 => None,
        1 => {
            let code = r.u8()?;
            let design = HaltingDesign::from_code(code).ok_or_else(|| r.format_err(format!("unknown halting design {code}")))?;
            let mut hp = HaltingParams::new(design, n, depth, 0)?;
            hp.h_last = r.f64()?;
            for block in halting_blocks_mut(&mut hp) {
                r.fill(block)?;
            }
            hp.validate().map_err(|e| r.format_err(e.to_string()))?;
            Some(hp)
        }
        v => return Err(r.format_err(format!("bad halting flag {v}"))),
    };
    r.expect_eof()?;
    Ok((net, hp))
}

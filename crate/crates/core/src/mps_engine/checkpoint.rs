//! Binary MPS checkpoints.
//!
//! Layout (little endian): magic `BRMPS1`, u8 format version, u8 dtype
//! (1 = real f64 on the six-dimensional sector), u32 site count, then per
//! site three u32 dims (left, physical, right) followed by row-major f64
//! data; then f64 log_magnitude, i64 canonical center (-1 for none), and
//! the two tracked invariants as (u8 present, f64 ln_abs, f64 sign).

use std::io::{Read, Write};

use ndarray::Array3;

use super::mps::Invariants;
use super::{LogAmp, ReplicaMPS};
use crate::error::{Error, Result};
use crate::replica_algebra::SECTOR_DIM;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"BRMPS1";
const VERSION: u8 = 1;
const DTYPE_REAL_SECTOR: u8 = 1;

pub fn write_checkpoint<W: Write>(mps: &ReplicaMPS, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&[VERSION, DTYPE_REAL_SECTOR])?;
    w.write_all(&(mps.len() as u32).to_le_bytes())?;
    for t in mps.tensors() {
        let (l, d, r) = t.dim();
        for x in [l, d, r] {
            w.write_all(&(x as u32).to_le_bytes())?;
        }
        for x in t.as_standard_layout().iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.write_all(&mps.log_magnitude.to_le_bytes())?;
    let center = mps.canonical_center().map(|c| c as i64).unwrap_or(-1);
    w.write_all(&center.to_le_bytes())?;
    let inv = mps.invariants();
    for item in [inv.id, inv.swap] {
        match item {
            Some(a) => {
                w.write_all(&[1])?;
                w.write_all(&a.ln_abs.to_le_bytes())?;
                w.write_all(&a.sign.to_le_bytes())?;
            }
            None => {
                w.write_all(&[0])?;
                w.write_all(&0f64.to_le_bytes())?;
                w.write_all(&0f64.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ReplicaMPS> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u8(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let dtype = read_u8(&mut r)?;
    if dtype != DTYPE_REAL_SECTOR {
        return Err(Error::Checkpoint(format!("unsupported dtype {dtype}")));
    }
    let n = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(n);
    let mut prev_right = 1;
    for i in 0..n {
        let l = read_u32(&mut r)? as usize;
        let d = read_u32(&mut r)? as usize;
        let rt = read_u32(&mut r)? as usize;
        if d != SECTOR_DIM || l != prev_right || (i == n - 1 && rt != 1) || l * rt > 1 << 24 {
            return Err(Error::Checkpoint(format!("inconsistent shape at site {i}")));
        }
        let mut data = Vec::with_capacity(l * d * rt);
        for _ in 0..l * d * rt {
            data.push(read_f64(&mut r)?);
        }
        tensors.push(
            Array3::from_shape_vec((l, d, rt), data).map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
        prev_right = rt;
    }
    let log_magnitude = read_f64(&mut r)?;
    let center = {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let c = i64::from_le_bytes(b);
        if c < 0 {
            None
        } else {
            Some(c as usize)
        }
    };
    let mut inv = [None, None];
    for slot in inv.iter_mut() {
        let present = read_u8(&mut r)?;
        let ln_abs = read_f64(&mut r)?;
        let sign = read_f64(&mut r)?;
        if present == 1 {
            *slot = Some(LogAmp { ln_abs, sign });
        }
    }
    Ok(ReplicaMPS::from_parts(tensors, log_magnitude, center, Invariants { id: inv[0], swap: inv[1] }))
}

//! Flat binary parameter snapshots.
//!
//! Layout (all little-endian):
//!
//! ```text
//! b"RSLB1" | L: u64 | m: u64 | p: u64 | d: u64 | τ: f64 | A | W_1 .. W_L | B
//! ```
//!
//! Matrices are row-major `f64`. The header has no architecture field, so a
//! snapshot always reads back as a ResNet.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::model::{NetworkConfig, NetworkParams};
use crate::scalar::Real;
use crate::tensor::Mat;

pub const MAGIC: &[u8; 5] = b"RSLB1";

pub fn write_snapshot<T: Real, W: Write>(params: &NetworkParams<T>, mut out: W) -> Result<()> {
    let c = &params.config;
    out.write_all(MAGIC)?;
    for v in [c.depth, c.width, c.input_dim, c.output_dim] {
        out.write_all(&(v as u64).to_le_bytes())?;
    }
    out.write_all(&c.tau.to_le_bytes())?;
    let mats = std::iter::once(&params.a).chain(&params.w).chain(std::iter::once(&params.b));
    for m in mats {
        for &x in m.as_slice() {
            out.write_all(&x.as_f64().to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Snapshot(format!("truncated header: {e}")))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_matrix<T: Real, R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Mat<T>> {
    let mut bytes = vec![0u8; rows * cols * 8];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Snapshot(format!("truncated payload: {e}")))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
        .collect();
    Mat::from_vec(rows, cols, data)
}

pub fn read_snapshot<T: Real, R: Read>(mut input: R) -> Result<NetworkParams<T>> {
    let mut magic = [0u8; 5];
    input
        .read_exact(&mut magic)
        .map_err(|e| Error::Snapshot(format!("truncated magic: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::Snapshot(format!("bad magic {magic:?}")));
    }
    let depth = read_u64(&mut input)? as usize;
    let width = read_u64(&mut input)? as usize;
    let input_dim = read_u64(&mut input)? as usize;
    let output_dim = read_u64(&mut input)? as usize;
    let tau = f64::from_bits(read_u64(&mut input)?);
    let config = NetworkConfig::resnet(depth, width, input_dim, output_dim, tau);
    config.validate()?;
    let a = read_matrix(&mut input, width, input_dim)?;
    let w = (0..depth)
        .map(|_| read_matrix(&mut input, width, width))
        .collect::<Result<Vec<_>>>()?;
    let b = read_matrix(&mut input, output_dim, width)?;
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Snapshot(format!("{} trailing bytes", rest.len())));
    }
    Ok(NetworkParams { config, a, w, b })
}

//! "MVDT" binary tensor container.
//!
//! Layout: magic `MVDT` (4 bytes), u32 version (= 1), u32 ndims, then
//! `ndims` u32 dimensions (outermost first) and a little-endian f32 payload
//! in row-major order. A raster or feature grid serializes with ndims = 3,
//! a square matrix with ndims = 2.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::grid::{FeatureGrid, GridError, Raster};

pub const MAGIC: [u8; 4] = *b"MVDT";
pub const VERSION: u32 = 1;

// Corrupt headers must not be able to request absurd allocations.
const MAX_NDIMS: u32 = 8;
const MAX_ELEMENTS: u64 = 1 << 30;

#[derive(Debug, Error)]
pub enum MvdtError {
    #[error("bad magic, not an MVDT file")]
    BadMagic,
    #[error("unsupported MVDT version {0}")]
    UnsupportedVersion(u32),
    #[error("invalid header: {0}")]
    BadHeader(String),
    #[error("payload length mismatch: header declares {expected} values, file holds {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("expected {expected} dimensions, file has {actual}")]
    WrongRank { expected: usize, actual: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Writes an arbitrary-rank tensor. Fails before touching the filesystem if
/// the payload holds a non-finite value or disagrees with `dims`.
pub fn write_tensor(path: &Path, dims: &[u32], data: &[f32]) -> Result<(), MvdtError> {
    if dims.is_empty() || dims.len() as u32 > MAX_NDIMS {
        return Err(MvdtError::BadHeader(format!("ndims {}", dims.len())));
    }
    let expected: u64 = dims.iter().map(|&d| d as u64).product();
    if dims.iter().any(|&d| d == 0) || expected > MAX_ELEMENTS {
        return Err(MvdtError::BadHeader(format!("dims {dims:?}")));
    }
    if data.len() as u64 != expected {
        return Err(MvdtError::Truncated {
            expected,
            actual: data.len() as u64,
        });
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(MvdtError::NonFinite(i));
    }

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a tensor of any rank, validating magic, version, payload length
/// (the file must hold exactly the declared number of values) and finiteness.
pub fn read_tensor(path: &Path) -> Result<(Vec<u32>, Vec<f32>), MvdtError> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic, 0)?;
    if magic != MAGIC {
        return Err(MvdtError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(MvdtError::UnsupportedVersion(version));
    }
    let ndims = read_u32(&mut r)?;
    if ndims == 0 || ndims > MAX_NDIMS {
        return Err(MvdtError::BadHeader(format!("ndims {ndims}")));
    }
    let mut dims = Vec::with_capacity(ndims as usize);
    for _ in 0..ndims {
        dims.push(read_u32(&mut r)?);
    }
    let expected: u64 = dims.iter().map(|&d| d as u64).product();
    if dims.iter().any(|&d| d == 0) || expected > MAX_ELEMENTS {
        return Err(MvdtError::BadHeader(format!("dims {dims:?}")));
    }

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() as u64 != expected * 4 {
        return Err(MvdtError::Truncated {
            expected,
            actual: payload.len() as u64 / 4,
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(MvdtError::NonFinite(i));
    }
    Ok((dims, data))
}

fn read_u32(r: &mut impl Read) -> Result<u32, MvdtError> {
    let mut b = [0u8; 4];
    read_exact_or_truncated(r, &mut b, 0)?;
    Ok(u32::from_le_bytes(b))
}

fn read_exact_or_truncated(
    r: &mut impl Read,
    buf: &mut [u8],
    expected: u64,
) -> Result<(), MvdtError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            MvdtError::Truncated {
                expected,
                actual: 0,
            }
        } else {
            MvdtError::Io(e)
        }
    })
}

/// Writes a raster with dims `[height, width, channels]`.
pub fn write_raster(r: &Raster, path: &Path) -> Result<(), MvdtError> {
    write_tensor(
        path,
        &[r.height() as u32, r.width() as u32, r.channels() as u32],
        r.data(),
    )
}

pub fn read_raster(path: &Path) -> Result<Raster, MvdtError> {
    let (dims, data) = read_tensor(path)?;
    if dims.len() != 3 {
        return Err(MvdtError::WrongRank {
            expected: 3,
            actual: dims.len(),
        });
    }
    Ok(Raster::new(
        dims[1] as usize,
        dims[0] as usize,
        dims[2] as usize,
        data,
    )?)
}

/// Writes a feature grid with dims `[grid_h, grid_w, dim]`.
pub fn write_feature_grid(g: &FeatureGrid, path: &Path) -> Result<(), MvdtError> {
    write_tensor(
        path,
        &[g.grid_h() as u32, g.grid_w() as u32, g.dim() as u32],
        g.data(),
    )
}

pub fn read_feature_grid(path: &Path) -> Result<FeatureGrid, MvdtError> {
    let (dims, data) = read_tensor(path)?;
    if dims.len() != 3 {
        return Err(MvdtError::WrongRank {
            expected: 3,
            actual: dims.len(),
        });
    }
    Ok(FeatureGrid::new(
        dims[1] as usize,
        dims[0] as usize,
        dims[2] as usize,
        data,
    )?)
}

/// Writes a `rows x cols` matrix with ndims = 2.
pub fn write_matrix(rows: usize, cols: usize, data: &[f32], path: &Path) -> Result<(), MvdtError> {
    write_tensor(path, &[rows as u32, cols as u32], data)
}

pub fn read_matrix(path: &Path) -> Result<(usize, usize, Vec<f32>), MvdtError> {
    let (dims, data) = read_tensor(path)?;
    if dims.len() != 2 {
        return Err(MvdtError::WrongRank {
            expected: 2,
            actual: dims.len(),
        });
    }
    Ok((dims[0] as usize, dims[1] as usize, data))
}

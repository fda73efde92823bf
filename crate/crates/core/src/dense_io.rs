//! Dense binary matrices: little-endian `u64` header followed by row-major
//! little-endian `f64` values.
//!
//! Square matrices use an 8-byte header `{d}`; general matrices a 16-byte
//! header `{rows, cols}`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

fn write_values<W: Write>(w: &mut W, m: &DMatrix<f64>) -> Result<()> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64(bytes: &[u8], at: usize) -> Result<u64> {
    bytes
        .get(at..at + 8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8-byte slice")))
        .ok_or_else(|| Error::DimensionMismatch("truncated dense header".into()))
}

fn values_from(bytes: &[u8], rows: u64, cols: u64) -> Result<DMatrix<f64>> {
    let bytes_needed = (rows as u128 * cols as u128).checked_mul(8);
    if bytes_needed != Some(bytes.len() as u128) {
        return Err(Error::DimensionMismatch(format!(
            "header declares {rows}x{cols} but payload holds {} bytes",
            bytes.len()
        )));
    }
    let (rows, cols) = (rows as usize, cols as usize);
    Ok(DMatrix::from_row_iterator(
        rows,
        cols,
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))),
    ))
}

pub fn write_dense<W: Write>(mut w: W, m: &DMatrix<f64>) -> Result<()> {
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    write_values(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn write_dense_square<W: Write>(mut w: W, m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "square format needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    write_values(&mut w, m)?;
    w.flush()?;
    Ok(())
}

/// Decode a `{rows, cols}`-header matrix. The payload length must match the
/// header exactly.
pub fn parse_dense(bytes: &[u8]) -> Result<DMatrix<f64>> {
    let rows = read_u64(bytes, 0)?;
    let cols = read_u64(bytes, 8)?;
    values_from(&bytes[16..], rows, cols)
}

/// Decode a `{d}`-header square matrix.
pub fn parse_dense_square(bytes: &[u8]) -> Result<DMatrix<f64>> {
    let d = read_u64(bytes, 0)?;
    values_from(&bytes[8..], d, d)
}

pub fn save_dense(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_dense(BufWriter::new(File::create(path)?), m)
}

pub fn save_dense_square(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_dense_square(BufWriter::new(File::create(path)?), m)
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

pub fn load_dense(path: &Path) -> Result<DMatrix<f64>> {
    parse_dense(&read_all(path)?)
}

pub fn load_dense_square(path: &Path) -> Result<DMatrix<f64>> {
    parse_dense_square(&read_all(path)?)
}

//! Binary portable graymap (P5) and pixmap (P6) encoders, maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub fn encode_pgm(cols: usize, rows: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != cols * rows {
        return Err(Error::shape(format!("{} gray pixels for a {cols}x{rows} image", pixels.len())));
    }
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// `pixels` is interleaved RGB, row-major.
pub fn encode_ppm(cols: usize, rows: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != 3 * cols * rows {
        return Err(Error::shape(format!("{} rgb bytes for a {cols}x{rows} image", pixels.len())));
    }
    let mut out = format!("P6\n{cols} {rows}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Quantizes a `[0, 1]` value to a byte.
pub fn to_byte(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Planar `[3, rows, cols]` values in `[0, 1]` to interleaved RGB bytes.
pub fn planar_to_rgb(planar: &[f64], rows: usize, cols: usize) -> Vec<u8> {
    let hw = rows * cols;
    let mut out = Vec::with_capacity(3 * hw);
    for i in 0..hw {
        for c in 0..3 {
            out.push(to_byte(planar[c * hw + i]));
        }
    }
    out
}

pub fn write_pgm(path: &Path, cols: usize, rows: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(cols, rows, pixels)?)?;
    Ok(())
}

pub fn write_ppm(path: &Path, cols: usize, rows: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, encode_ppm(cols, rows, pixels)?)?;
    Ok(())
}

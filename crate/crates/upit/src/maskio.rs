//! Binary mask files: the magic `UPITMASK`, `u32` bins and `u32` frames
//! (little-endian), then `bins * frames` little-endian `f64` values, one row
//! per frequency bin.

use std::fs;
use std::path::Path;

use upit_core::dsp::Grid;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"UPITMASK";

pub fn encode(mask: &Grid<f64>) -> Vec<u8> {
    let (bins, frames) = mask.shape();
    let mut out = Vec::with_capacity(16 + 8 * bins * frames);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(bins as u32).to_le_bytes());
    out.extend_from_slice(&(frames as u32).to_le_bytes());
    for f in 0..bins {
        for t in 0..frames {
            out.extend_from_slice(&mask[(t, f)].to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Grid<f64>> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(CliError::format("mask", path, "missing UPITMASK magic"));
    }
    let bins = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let frames = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + 8 * bins * frames {
        return Err(CliError::format("mask", path, "data length does not match the header"));
    }
    let values: Vec<f64> = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Grid::from_fn(bins, frames, |t, f| values[f * frames + t]))
}

pub fn save(path: &Path, mask: &Grid<f64>) -> Result<()> {
    fs::write(path, encode(mask)).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> Result<Grid<f64>> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes, path)
}

//! Saliency map files: a 16-bit binary PGM scaled by the map's maximum, plus
//! a JSON sidecar holding that maximum.
//!
//! Values are stored as `q = round(v / max · 65535)` and read back as
//! `max · q / 65535`. [`quantize`] snaps a map onto that lattice, and maps on
//! the lattice round-trip bit-exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::saliency::SaliencyMap;
use crate::tensor::Tensor;

pub const MAXVAL: u16 = u16::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSidecar {
    pub image_id: String,
    pub class_id: usize,
    pub max_value: f32,
}

/// The JSON sidecar path for a `.pgm` file: the same path with a `.json`
/// extension.
pub fn sidecar_path(pgm: &Path) -> PathBuf {
    pgm.with_extension("json")
}

fn level(v: f32, max: f32) -> u16 {
    if max > 0.0 {
        ((v as f64 / max as f64) * MAXVAL as f64).round().clamp(0.0, MAXVAL as f64) as u16
    } else {
        0
    }
}

fn value(q: u16, max: f32) -> f32 {
    (max as f64 * q as f64 / MAXVAL as f64) as f32
}

/// Snaps every value onto the 16-bit lattice used by the file format.
pub fn quantize(map: &SaliencyMap) -> Result<SaliencyMap> {
    let max = map.values().max_value();
    let values = map.values().map(|v| value(level(v, max), max));
    SaliencyMap::new(map.image_id.clone(), map.class_id, values)
}

/// Encodes `values` (`[H,W]`, non-negative) as binary PGM bytes.
pub fn encode_pgm(values: &Tensor, max: f32) -> Result<Vec<u8>> {
    let (h, w) = values.dims2()?;
    let mut out = format!("P5\n{w} {h}\n{MAXVAL}\n").into_bytes();
    out.reserve(2 * h * w);
    for &v in values.data() {
        out.extend_from_slice(&level(v, max).to_be_bytes());
    }
    Ok(out)
}

/// Decodes binary 16-bit PGM bytes to raw levels and the image shape.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("PGM", "truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::format("PGM", "non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(Error::format("PGM", format!("expected magic P5, got {:?}", fields[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format("PGM", format!("bad header number {s:?}")))
    };
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != MAXVAL as usize {
        return Err(Error::format("PGM", format!("expected maxval {MAXVAL}, got {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != 2 * w * h {
        return Err(Error::format(
            "PGM",
            format!("raster has {} bytes, expected {}", raster.len(), 2 * w * h),
        ));
    }
    let levels = raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok((h, w, levels))
}

/// Writes `<path>` (PGM) and its JSON sidecar.
pub fn write_map(path: &Path, map: &SaliencyMap) -> Result<()> {
    let max = map.values().max_value();
    let bytes = encode_pgm(map.values(), max)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let sidecar = MapSidecar {
        image_id: map.image_id.clone(),
        class_id: map.class_id,
        max_value: max,
    };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))
}

pub fn read_map(path: &Path) -> Result<SaliencyMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (h, w, levels) = decode_pgm(&bytes)?;
    let side = sidecar_path(path);
    let sidecar: MapSidecar = serde_json::from_slice(&fs::read(&side).map_err(|e| Error::io(&side, e))?)?;
    let values = Tensor::new([h, w], levels.into_iter().map(|q| value(q, sidecar.max_value)).collect())?;
    SaliencyMap::new(sidecar.image_id, sidecar.class_id, values)
}

/// Reads every `*.pgm` map in a directory, sorted by file name.
pub fn read_map_dir(dir: &Path) -> Result<Vec<SaliencyMap>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "pgm"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_map(p)).collect()
}

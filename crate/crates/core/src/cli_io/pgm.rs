use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, IoError};
use crate::rank_eval::RegionMask;
use crate::scorer::Heatmap;

/// A decoded 8-bit greyscale image, top-down row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: u32,
    pub height: u32,
    pub maxval: u8,
    pub data: Vec<u8>,
}

pub fn encode_pgm(width: u32, height: u32, data: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

/// Header token reader that skips whitespace and `#` comments.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        match bytes.get(*pos)? {
            b'#' => {
                while bytes.get(*pos).is_some_and(|b| *b != b'\n') {
                    *pos += 1;
                }
            }
            b if b.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Some(&bytes[start..*pos])
}

/// Decodes binary PGM (`P5`) with a maximum value of at most 255.
pub fn decode_pgm(bytes: &[u8]) -> Result<Pgm, String> {
    let mut pos = 0;
    if next_token(bytes, &mut pos) != Some(b"P5") {
        return Err("not a binary PGM file".into());
    }
    let mut number = |what: &str| -> Result<u32, String> {
        next_token(bytes, &mut pos)
            .and_then(|t| std::str::from_utf8(t).ok())
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| format!("bad PGM {what}"))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maximum value")?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported PGM maximum value {maxval}"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let n = width as usize * height as usize;
    let data = bytes.get(pos..pos + n).ok_or("PGM raster is truncated")?;
    Ok(Pgm { width, height, maxval: maxval as u8, data: data.to_vec() })
}

/// Any non-zero pixel is inside the region.
pub fn mask_from_pgm(p: &Pgm) -> RegionMask {
    RegionMask { width: p.width, height: p.height, bits: p.data.iter().map(|&v| v > 0).collect() }
}

pub fn mask_to_pgm(m: &RegionMask) -> Vec<u8> {
    m.bits.iter().map(|&b| if b { 255 } else { 0 }).collect()
}

/// Sidecar stored next to an exported heatmap: `value ~= pixel * scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapScale {
    pub image_id: String,
    pub category: String,
    pub width: u32,
    pub height: u32,
    pub scale: f64,
}

/// Quantizes so that the raster maximum maps to 255. An all-zero raster
/// encodes to all zeros with scale 0.
pub fn encode_heatmap(h: &Heatmap) -> Result<(Vec<u8>, HeatmapScale), IoError> {
    if h.width == 0 || h.height == 0 {
        return Err(IoError::Contract("cannot export a zero-size heatmap".into()));
    }
    let max = h.max();
    let pixels: Vec<u8> = if max > 0.0 {
        h.values.iter().map(|&v| (v.max(0.0) / max * 255.0).round() as u8).collect()
    } else {
        vec![0; h.values.len()]
    };
    let scale = HeatmapScale {
        image_id: h.image_id.clone(),
        category: h.category.clone(),
        width: h.width,
        height: h.height,
        scale: max / 255.0,
    };
    Ok((encode_pgm(h.width, h.height, &pixels), scale))
}

pub fn decode_heatmap(pgm: &Pgm, scale: &HeatmapScale) -> Heatmap {
    Heatmap {
        image_id: scale.image_id.clone(),
        category: scale.category.clone(),
        width: pgm.width,
        height: pgm.height,
        values: pgm.data.iter().map(|&p| p as f64 * scale.scale).collect(),
    }
}

/// Writes `path` and a JSON sidecar with the same stem.
pub fn write_heatmap(h: &Heatmap, path: &Path) -> Result<(), IoError> {
    let (bytes, scale) = encode_heatmap(h)?;
    fs::write(path, bytes).map_err(io_err(path))?;
    let side = path.with_extension("json");
    let json = serde_json::to_vec_pretty(&scale).map_err(|e| IoError::Contract(e.to_string()))?;
    fs::write(&side, json).map_err(io_err(&side))
}

//! Object-ID maps as 16-bit binary PGM and RGB images as 8-bit binary PPM.

use std::path::Path;

use super::{read_bytes, write_atomic};
use crate::error::{Error, Result};
use crate::scene::IdMap;

/// Parses `magic width height maxval` plus the single whitespace byte that
/// precedes the raster. Returns the values and the raster offset.
fn header(bytes: &[u8]) -> Result<(String, u32, u32, u32, usize)> {
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse { offset: pos, message: "truncated header".into() });
        }
        tokens.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    if pos >= bytes.len() {
        return Err(Error::Parse { offset: pos, message: "no raster after header".into() });
    }
    let num = |k: usize| -> Result<u32> {
        let (off, t) = &tokens[k];
        t.parse().map_err(|_| Error::Parse { offset: *off, message: format!("bad number '{t}'") })
    };
    Ok((tokens[0].1.clone(), num(1)?, num(2)?, num(3)?, pos + 1))
}

pub fn encode_idmap(map: &IdMap) -> Result<Vec<u8>> {
    let mut out = format!("P5\n{} {}\n65535\n", map.width, map.height).into_bytes();
    out.reserve(2 * map.ids.len());
    for &id in &map.ids {
        let v = u16::try_from(id).map_err(|_| Error::Format(format!("object id {id} exceeds 16 bits")))?;
        out.extend_from_slice(&v.to_be_bytes());
    }
    Ok(out)
}

pub fn decode_idmap(bytes: &[u8]) -> Result<IdMap> {
    let (magic, w, h, maxval, start) = header(bytes)?;
    if magic != "P5" {
        return Err(Error::Format(format!("expected binary PGM 'P5', found '{magic}'")));
    }
    if maxval != 65535 {
        return Err(Error::Format(format!("ID maps need 16-bit samples (maxval 65535), found maxval {maxval}")));
    }
    let n = w as usize * h as usize;
    let raster = &bytes[start..];
    if raster.len() < 2 * n {
        return Err(Error::Parse { offset: start + raster.len() / 2 * 2, message: format!("raster holds {} of {n} samples", raster.len() / 2) });
    }
    let ids = raster[..2 * n].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as u32).collect();
    IdMap::new(w, h, ids)
}

/// Values are clamped to `[0, 1]` and rounded to 8 bits.
pub fn encode_rgb(width: u32, height: u32, rgb: &[f64]) -> Result<Vec<u8>> {
    let n = width as usize * height as usize * 3;
    if rgb.len() != n {
        return Err(Error::Usage(format!("{width}×{height} RGB image needs {n} values, got {}", rgb.len())));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(rgb.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Returns `(width, height, values in [0, 1])`.
pub fn decode_rgb(bytes: &[u8]) -> Result<(u32, u32, Vec<f64>)> {
    let (magic, w, h, maxval, start) = header(bytes)?;
    if magic != "P6" || maxval != 255 {
        return Err(Error::Format(format!("expected 8-bit binary PPM, found '{magic}' with maxval {maxval}")));
    }
    let n = w as usize * h as usize * 3;
    let raster = &bytes[start..];
    if raster.len() < n {
        return Err(Error::Parse { offset: bytes.len(), message: format!("raster holds {} of {n} samples", raster.len()) });
    }
    Ok((w, h, raster[..n].iter().map(|&b| b as f64 / 255.0).collect()))
}

pub fn write_idmap(path: &Path, map: &IdMap) -> Result<()> {
    write_atomic(path, &encode_idmap(map)?)
}

pub fn read_idmap(path: &Path) -> Result<IdMap> {
    decode_idmap(&read_bytes(path)?)
}

pub fn write_rgb(path: &Path, width: u32, height: u32, rgb: &[f64]) -> Result<()> {
    write_atomic(path, &encode_rgb(width, height, rgb)?)
}

pub fn read_rgb(path: &Path) -> Result<(u32, u32, Vec<f64>)> {
    decode_rgb(&read_bytes(path)?)
}

//! Binary 8-bit greyscale PGM (P5) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(width, height, pixels)).map_err(|e| Error::io(path, e))
}

/// Parse a P5 image with maxval 255. Returns `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8], origin: &str) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
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
            return Err(Error::parse(origin, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::parse(origin, format!("expected P5, found {}", fields[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::parse(origin, format!("bad PGM header field {s:?}")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::parse(origin, format!("unsupported maxval {maxval}")));
    }
    let raster = bytes.get(pos..pos + w * h).ok_or_else(|| {
        Error::parse(origin, format!("raster shorter than {w}x{h}"))
    })?;
    Ok((w, h, raster.to_vec()))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, &path.display().to_string())
}

/// Load a PGM as a `1 × H × W` tensor with values `k / 255`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let (w, h, px) = read_pgm(path)?;
    Tensor::new(&[1, h, w], px.iter().map(|&p| p as f32 / 255.0).collect())
}

/// Map values so the maximum becomes 255 and 0 stays 0; negatives clamp to 0.
pub fn scale_to_max(values: &[f32]) -> Vec<u8> {
    let max = values.iter().copied().fold(0.0f32, f32::max);
    if max <= 0.0 {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|&v| ((v.max(0.0) / max) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

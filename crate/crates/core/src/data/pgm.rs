//! Binary PGM (P5, maxval 255) and raw probability-map files.

use std::path::Path;

use super::{BinaryMask, GrayImage, ProbMap};
use crate::error::{Error, Result};

const IVPM_MAGIC: &[u8; 4] = b"IVPM";

/// Parses a P5 header and returns `(width, height, payload)`.
pub(crate) fn decode_pgm(buf: &[u8]) -> Result<(usize, usize, &[u8])> {
    if buf.len() < 2 || &buf[..2] != b"P5" {
        return Err(Error::format(0, "not a binary PGM (expected magic P5)"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match buf.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while buf.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while buf.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            let what = ["width", "height", "maxval"][i];
            return Err(Error::format(pos as u64, format!("expected {what}")));
        }
        *field = std::str::from_utf8(&buf[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::format(start as u64, "header number out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(pos as u64, format!("maxval must be 255, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(pos as u64, "zero image dimension"));
    }
    if !buf.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(pos as u64, "missing whitespace after header"));
    }
    pos += 1;
    let n = width * height;
    if buf.len() - pos < n {
        return Err(Error::format(
            buf.len() as u64,
            format!("payload truncated: need {n} bytes, found {}", buf.len() - pos),
        ));
    }
    Ok((width, height, &buf[pos..pos + n]))
}

pub(crate) fn encode_pgm(width: usize, height: usize, bytes: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    out
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let buf = std::fs::read(path)?;
    let (w, h, bytes) = decode_pgm(&buf)?;
    GrayImage::new(w, h, bytes.iter().map(|&b| b as f32 / 255.0).collect())
}

/// Quantizes to 8 bits with rounding.
pub fn write_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = img
        .pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    std::fs::write(path, encode_pgm(img.width, img.height, &bytes))?;
    Ok(())
}

/// Any nonzero byte is foreground.
pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let buf = std::fs::read(path)?;
    let (w, h, bytes) = decode_pgm(&buf)?;
    BinaryMask::new(w, h, bytes.iter().map(|&b| b != 0).collect())
}

/// Foreground as 255, background as 0.
pub fn write_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    std::fs::write(path, encode_pgm(mask.width, mask.height, &bytes))?;
    Ok(())
}

/// `"IVPM" | u32 height | u32 width | f32 values`, little-endian.
pub fn write_ivpm(map: &ProbMap, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::with_capacity(12 + 4 * map.values.len());
    out.extend_from_slice(IVPM_MAGIC);
    out.extend_from_slice(&(map.height as u32).to_le_bytes());
    out.extend_from_slice(&(map.width as u32).to_le_bytes());
    for v in &map.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_ivpm(path: impl AsRef<Path>) -> Result<ProbMap> {
    let buf = std::fs::read(path)?;
    if buf.len() < 12 {
        return Err(Error::format(buf.len() as u64, "truncated probability-map header"));
    }
    if &buf[..4] != IVPM_MAGIC {
        return Err(Error::format(0, "bad magic, not an IVPM file"));
    }
    let h = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let payload = &buf[12..];
    if payload.len() != 4 * w * h {
        return Err(Error::format(
            buf.len() as u64,
            format!("expected {} payload bytes for {w}x{h}, found {}", 4 * w * h, payload.len()),
        ));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ProbMap::new(w, h, values)
}

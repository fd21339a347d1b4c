//! Binary PGM/PPM (P5/P6) reading and writing.
//!
//! The dataset lives on disk in these formats because they are bit-exact
//! and parseable without codec dependencies: a tiny ASCII header followed by
//! raw bytes. Only 8-bit depth (maxval ≤ 255) is supported.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// A decoded image: `channels` is 1 (PGM) or 3 (PPM), data is row-major
/// with interleaved channels.
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

/// Read a P5 (grayscale) or P6 (RGB) file.
pub fn read(path: &Path) -> Result<PnmImage> {
    let bytes = fs::read(path)?;
    parse(&bytes).map_err(|msg| Error::data(format!("{}: {msg}", path.display())))
}

/// Write a P5 file (1 channel) or P6 file (3 channels).
pub fn write(path: &Path, width: usize, height: usize, channels: usize, data: &[u8]) -> Result<()> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        other => {
            return Err(Error::usage(format!(
                "can only write 1- or 3-channel images, got {other}"
            )))
        }
    };
    if data.len() != width * height * channels {
        return Err(Error::usage(format!(
            "{}×{}×{channels} image needs {} bytes, got {}",
            width,
            height,
            width * height * channels,
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(data.len() + 32);
    write!(out, "{magic}\n{width} {height}\n255\n").expect("in-memory write");
    out.extend_from_slice(data);
    fs::write(path, out)?;
    Ok(())
}

fn parse(bytes: &[u8]) -> std::result::Result<PnmImage, String> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err("not a binary PGM/PPM (P5/P6) file".into()),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        *field = read_header_int(bytes, &mut pos)?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval} (only 8-bit depth)"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err("missing whitespace before raster data".into()),
    }
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or("image dimensions overflow")?;
    let data = bytes
        .get(pos..pos + expected)
        .ok_or_else(|| format!("raster truncated: expected {expected} bytes"))?;
    Ok(PnmImage {
        width,
        height,
        channels,
        data: data.to_vec(),
    })
}

/// Read the next header integer, skipping whitespace and `#` comments.
fn read_header_int(bytes: &[u8], pos: &mut usize) -> std::result::Result<usize, String> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(b) = bytes.get(*pos) {
                    *pos += 1;
                    if *b == b'\n' {
                        break;
                    }
                }
            }
            Some(_) => break,
            None => return Err("header ended early".into()),
        }
    }
    let start = *pos;
    while let Some(b) = bytes.get(*pos) {
        if b.is_ascii_digit() {
            *pos += 1;
        } else {
            break;
        }
    }
    if *pos == start {
        return Err("expected an integer in the header".into());
    }
    std::str::from_utf8(&bytes[start..*pos])
        .map_err(|_| "non-UTF8 header".to_string())?
        .parse()
        .map_err(|_| "header integer out of range".to_string())
}

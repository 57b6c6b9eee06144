//! Binary PPM (P6) and PGM (P5) writers and readers, 8-bit only.

use crate::error::{Error, Result};

/// Interleaved RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    debug_assert_eq!(gray.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

/// Splits a binary netpbm file into `(magic, width, height, payload)`.
fn decode_netpbm(bytes: &[u8]) -> Result<(&str, usize, usize, &[u8])> {
    let bad = |m: &str| Error::Format { what: "netpbm", message: m.to_owned() };
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
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let payload = bytes.get(pos..).ok_or_else(|| bad("missing raster"))?;
    Ok((fields[0], w, h, payload))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let (magic, width, height, payload) = decode_netpbm(bytes)?;
    if magic != "P6" || payload.len() != width * height * 3 {
        return Err(Error::Format {
            what: "ppm",
            message: format!("{magic} {width}x{height} with {} bytes", payload.len()),
        });
    }
    Ok(RgbImage { width, height, pixels: payload.to_vec() })
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let (magic, width, height, payload) = decode_netpbm(bytes)?;
    if magic != "P5" || payload.len() != width * height {
        return Err(Error::Format {
            what: "pgm",
            message: format!("{magic} {width}x{height} with {} bytes", payload.len()),
        });
    }
    Ok((width, height, payload.to_vec()))
}

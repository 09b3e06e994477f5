//! Binary Netpbm I/O: P6 (RGB) for frames, P5 (gray) for masks and probability maps,
//! and little-endian PFM for raw float planes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::colorspace::RgbImage;
use crate::dataset::BinaryMask;
use crate::error::{Error, Result};

/// Decoded raster with 1 (P5) or 3 (P6) samples per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_ws_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_ws_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::parse(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(start, format!("{what} out of range")))
    }
}

/// Parses a binary P5 or P6 file. Samples with `maxval < 255` are rescaled to 0..=255.
pub fn decode(bytes: &[u8]) -> Result<Pnm> {
    if bytes.len() < 2 {
        return Err(Error::parse(bytes.len(), "file too short for a magic number"));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(Error::parse(0, "expected magic P5 or P6")),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval_pos = cur.pos;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::parse(maxval_pos, "zero image dimension"));
    }
    if !(1..=255).contains(&maxval) {
        return Err(Error::parse(maxval_pos, format!("unsupported maxval {maxval}")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::parse(cur.pos, "expected single whitespace before raster")),
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::parse(cur.pos, "image dimensions overflow"))?;
    let raster = &bytes[cur.pos..];
    if raster.len() < need {
        return Err(Error::parse(
            bytes.len(),
            format!("truncated raster: {} of {need} bytes", raster.len()),
        ));
    }
    let mut samples = raster[..need].to_vec();
    if maxval != 255 {
        for s in &mut samples {
            if *s as usize > maxval {
                return Err(Error::parse(cur.pos, format!("sample {s} exceeds maxval {maxval}")));
            }
            *s = ((*s as usize * 255 + maxval / 2) / maxval) as u8;
        }
    }
    Ok(Pnm { width, height, channels, samples })
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    let pnm = decode(bytes)?;
    let pixels = match pnm.channels {
        3 => pnm.samples.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        _ => pnm.samples.iter().map(|&v| [v, v, v]).collect(),
    };
    RgbImage::new(pnm.width, pnm.height, pixels)
}

/// Gray values `>= 128` become 1, everything else 0.
pub fn decode_mask(bytes: &[u8]) -> Result<BinaryMask> {
    let pnm = decode(bytes)?;
    if pnm.channels != 1 {
        return Err(Error::parse(0, "mask must be a P5 graymap"));
    }
    let data = pnm.samples.iter().map(|&v| u8::from(v >= 128)).collect();
    BinaryMask::new(pnm.width, pnm.height, data)
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    decode_rgb(&fs::read(path)?)
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    decode_mask(&fs::read(path)?)
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.pixels().iter().flatten());
    out
}

pub fn encode_pgm(width: usize, height: usize, values: &[u8]) -> Vec<u8> {
    assert_eq!(values.len(), width * height, "pgm raster size");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(values);
    out
}

/// Mask as 0/255 graymap.
pub fn encode_mask(mask: &BinaryMask) -> Vec<u8> {
    let values: Vec<u8> = mask.data().iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    encode_pgm(mask.width(), mask.height(), &values)
}

/// Probability plane quantized to 8 bits (`round(p * 255)`).
pub fn encode_probability_pgm(width: usize, height: usize, probs: &[f32]) -> Vec<u8> {
    let values: Vec<u8> =
        probs.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    encode_pgm(width, height, &values)
}

/// Single-channel PFM, little-endian (negative scale), rows stored bottom to top.
pub fn encode_pfm(width: usize, height: usize, values: &[f32]) -> Vec<u8> {
    assert_eq!(values.len(), width * height, "pfm raster size");
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    for row in values.chunks_exact(width).rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    if !bytes.starts_with(b"Pf") {
        return Err(Error::parse(0, "expected magic Pf"));
    }
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    cur.skip_ws_and_comments();
    let start = cur.pos;
    while bytes.get(cur.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        cur.pos += 1;
    }
    let scale: f32 = std::str::from_utf8(&bytes[start..cur.pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse(start, "bad scale"))?;
    if scale >= 0.0 {
        return Err(Error::parse(start, "only little-endian PFM is supported"));
    }
    cur.pos += 1;
    let need = width * height * 4;
    let raster = bytes.get(cur.pos..cur.pos + need).ok_or_else(|| {
        Error::parse(bytes.len(), "truncated PFM raster")
    })?;
    let rows: Vec<Vec<f32>> = raster
        .chunks_exact(width * 4)
        .map(|r| r.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
        .collect();
    Ok((width, height, rows.into_iter().rev().flatten().collect()))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

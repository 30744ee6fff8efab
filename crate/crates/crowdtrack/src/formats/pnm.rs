//! Binary PGM (P5) and PPM (P6) images with maxval 255.

use std::path::Path;

use crowdtrack_core::synth::ImageFrame;

use crate::error::{Error, Result};

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0; 3]; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.data[y * self.width + x]
    }

    /// Ignores coordinates outside the raster.
    pub fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.data[y as usize * self.width + x as usize] = c;
        }
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_pgm(path: &Path, frame: &ImageFrame) -> Result<()> {
    let px: Vec<u8> = frame.data.iter().map(|&v| quantize(v)).collect();
    std::fs::write(path, encode_pgm(frame.width, frame.height, &px)).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().flatten());
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Header fields and the offset of the raster.
fn parse_header(path: &Path, bytes: &[u8], magic: &str) -> Result<(usize, usize, usize)> {
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
            return Err(Error::format(path, 0, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != magic {
        return Err(Error::format(path, 0, format!("expected magic {magic}, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, 0, format!("bad header field `{s}`")));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(Error::format(path, 0, format!("unsupported maxval {max}")));
    }
    Ok((w, h, pos + 1))
}

pub fn read_pgm(path: &Path) -> Result<ImageFrame> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, start) = parse_header(path, &bytes, "P5")?;
    let raster = bytes.get(start..start + w * h).ok_or_else(|| Error::format(path, 0, "truncated raster"))?;
    Ok(ImageFrame::new(w, h, raster.iter().map(|&b| b as f64 / 255.0).collect())?)
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, start) = parse_header(path, &bytes, "P6")?;
    let raster = bytes.get(start..start + 3 * w * h).ok_or_else(|| Error::format(path, 0, "truncated raster"))?;
    Ok(RgbImage {
        width: w,
        height: h,
        data: raster.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
    })
}

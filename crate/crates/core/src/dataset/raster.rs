//! 8-bit rasters and their binary PPM (P6) / PGM (P5) encodings.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Single-channel class-index map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage { width, height, data: vec![0; width * height * 3] }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let (width, height, data) = parse_pnm(bytes, b"P6", 3)?;
        Ok(RgbImage { width, height, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

impl LabelMap {
    pub fn new(width: usize, height: usize, fill: u8) -> Self {
        LabelMap { width, height, data: vec![fill; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let (width, height, data) = parse_pnm(bytes, b"P5", 1)?;
        Ok(LabelMap { width, height, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// Pixel count per value.
    pub fn histogram(&self) -> [usize; 256] {
        let mut h = [0; 256];
        self.data.iter().for_each(|&v| h[v as usize] += 1);
        h
    }
}

fn parse_pnm(bytes: &[u8], magic: &[u8], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let fmt = |m: &str| Error::Format(m.to_string());
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(fmt(&format!("expected {} header", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(fmt("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fmt("malformed header number"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(fmt(&format!("only 8-bit rasters are supported (maxval {maxval})")));
    }
    if width == 0 || height == 0 {
        return Err(fmt("raster has a zero extent"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(fmt("missing separator after header"));
    }
    pos += 1;
    let len = width * height * channels;
    let data = bytes.get(pos..pos + len).ok_or_else(|| fmt("truncated pixel data"))?;
    Ok((width, height, data.to_vec()))
}

/// ISPRS-style palette; void and unknown classes render black.
pub fn class_color(c: u8) -> [u8; 3] {
    match c {
        0 => [255, 255, 255],
        1 => [0, 0, 255],
        2 => [0, 255, 255],
        3 => [0, 255, 0],
        4 => [255, 255, 0],
        5 => [255, 0, 0],
        _ => [0, 0, 0],
    }
}

pub fn colorize(labels: &LabelMap) -> RgbImage {
    let mut img = RgbImage::new(labels.width, labels.height);
    for (px, &c) in img.data.chunks_mut(3).zip(&labels.data) {
        px.copy_from_slice(&class_color(c));
    }
    img
}

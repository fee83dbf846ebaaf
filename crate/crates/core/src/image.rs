//! 8-bit grayscale images and binary PGM (P5) I/O.
//!
//! Pixels are row-major with the origin at the top-left corner, matching
//! raster storage. The writer emits a canonical header (`P5\n{w} {h}\n255\n`)
//! so identical pixel data always produces identical bytes; the reader
//! tolerates comments and flexible whitespace but accepts only P5 with
//! maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Image {
    /// Black image of the given size.
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        Ok(Image { width, height, pixels: vec![0; width * height] })
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::shape(format!(
                "pixel buffer holds {} bytes, {width}x{height} needs {}",
                pixels.len(),
                width * height
            )));
        }
        Ok(Image { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    /// Pixel at column `x`, row `y`. Callers guarantee bounds.
    pub fn get(&self, x: usize, y: usize) -> u8 {
        debug_assert!(x < self.width && y < self.height);
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        debug_assert!(x < self.width && y < self.height);
        self.pixels[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        let mut acc = 0u64;
        for &p in &self.pixels {
            acc += p as u64;
        }
        acc as f64 / self.pixels.len() as f64
    }

    pub fn histogram(&self) -> [u64; 256] {
        let mut h = [0u64; 256];
        for &p in &self.pixels {
            h[p as usize] += 1;
        }
        h
    }
}

pub fn write_pgm(img: &Image, path: &Path) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend_from_slice(&img.pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Header scanner: yields whitespace-separated tokens, skipping `#` comments
/// through end of line, and reports the offset just past the single
/// whitespace byte that terminates the last token read.
struct TokenScanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> TokenScanner<'a> {
    fn next_token(&mut self) -> Option<&'a [u8]> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        if self.pos >= self.bytes.len() {
            return None;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let tok = &self.bytes[start..self.pos];
        // Exactly one whitespace byte separates the maxval from pixel data.
        if self.pos < self.bytes.len() {
            self.pos += 1;
        }
        Some(tok)
    }
}

pub fn read_pgm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut scan = TokenScanner { bytes: &bytes, pos: 0 };
    let parse_err = |what: &str| Error::parse(format!("{}: {what}", path.display()));

    let magic = scan.next_token().ok_or_else(|| parse_err("empty file"))?;
    if magic != b"P5" {
        return Err(parse_err(&format!(
            "unsupported format {:?} (only binary P5 is supported)",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut field = |name: &str| -> Result<usize> {
        let tok = scan
            .next_token()
            .ok_or_else(|| parse_err(&format!("missing {name}")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(&format!("bad {name} {:?}", String::from_utf8_lossy(tok))))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if maxval != 255 {
        return Err(parse_err(&format!("maxval {maxval} unsupported, expected 255")));
    }
    let need = width
        .checked_mul(height)
        .ok_or_else(|| parse_err("dimensions overflow"))?;
    let data = &bytes[scan.pos.min(bytes.len())..];
    if data.len() < need {
        return Err(parse_err(&format!(
            "truncated pixel data: header promises {need} bytes, {} remain",
            data.len()
        )));
    }
    Image::from_pixels(width, height, data[..need].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("pgm-tests-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let pixels: Vec<u8> = (0..=255).cycle().take(31 * 17).map(|v| v as u8).collect();
        let img = Image::from_pixels(31, 17, pixels).unwrap();
        let path = tmp("roundtrip.pgm");
        write_pgm(&img, &path).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back, img);
        // And the file itself is byte-stable across writes.
        let first = fs::read(&path).unwrap();
        write_pgm(&img, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }

    #[test]
    fn writes_canonical_header() {
        let img = Image::from_pixels(2, 3, vec![9; 6]).unwrap();
        let path = tmp("header.pgm");
        write_pgm(&img, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n2 3\n255\n"));
        assert_eq!(bytes.len(), b"P5\n2 3\n255\n".len() + 6);
    }

    #[test]
    fn rejects_ascii_pgm() {
        let path = tmp("ascii.pgm");
        fs::write(&path, b"P2\n2 2\n255\n0 1 2 3\n").unwrap();
        let err = read_pgm(&path).unwrap_err().to_string();
        assert!(err.contains("P5"), "{err}");
    }

    #[test]
    fn rejects_truncated_data() {
        let path = tmp("short.pgm");
        let mut bytes = b"P5\n10 10\n255\n".to_vec();
        bytes.extend_from_slice(&[7; 99]);
        fs::write(&path, bytes).unwrap();
        let err = read_pgm(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn rejects_wrong_maxval() {
        let path = tmp("maxval.pgm");
        fs::write(&path, b"P5\n1 1\n65535\n\x00\x00").unwrap();
        assert!(read_pgm(&path).is_err());
    }

    #[test]
    fn tolerates_header_comments() {
        let path = tmp("comments.pgm");
        let mut bytes = b"P5\n# made by hand\n2 # width\n2\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4]);
        fs::write(&path, bytes).unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!((img.width(), img.height()), (2, 2));
        assert_eq!(img.pixels(), &[1, 2, 3, 4]);
    }

    #[test]
    fn binary_pixels_survive_even_when_whitespace_valued() {
        // Pixel values that collide with ASCII whitespace (10, 13, 32) must
        // pass through untouched.
        let img = Image::from_pixels(2, 2, vec![10, 13, 32, 0]).unwrap();
        let path = tmp("binary.pgm");
        write_pgm(&img, &path).unwrap();
        assert_eq!(read_pgm(&path).unwrap().pixels(), &[10, 13, 32, 0]);
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(Image::new(0, 5).is_err());
        assert!(Image::from_pixels(2, 2, vec![0; 3]).is_err());
    }

    #[test]
    fn mean_and_histogram() {
        let img = Image::from_pixels(2, 2, vec![0, 0, 10, 30]).unwrap();
        assert_eq!(img.mean(), 10.0);
        let h = img.histogram();
        assert_eq!(h[0], 2);
        assert_eq!(h[10], 1);
        assert_eq!(h[30], 1);
    }
}

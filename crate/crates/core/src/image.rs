//! 8-bit RGB raster storage, cropping, and the binary PPM codec used for
//! dataset images.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGB image. Fields stay private so the `len = w*h*3` invariant
/// cannot be broken from outside.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

/// Pixel-space rectangle, top-left anchored.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct PxRect {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl PxRect {
    pub fn fits_in(&self, frame_w: usize, frame_h: usize) -> bool {
        self.w > 0
            && self.h > 0
            && self.x0.checked_add(self.w).is_some_and(|x| x <= frame_w)
            && self.y0.checked_add(self.h).is_some_and(|y| y <= frame_h)
    }
}

impl std::fmt::Display for PxRect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}+{}+{}", self.w, self.h, self.x0, self.y0)
    }
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height * 3, "pixel buffer length");
        Image {
            width,
            height,
            pixels,
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Image {
            width,
            height,
            pixels,
        }
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

    #[inline]
    fn idx(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        (y * self.width + x) * 3
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = self.idx(x, y);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = self.idx(x, y);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn crop(&self, rect: PxRect) -> Result<Image> {
        if !rect.fits_in(self.width, self.height) {
            return Err(Error::CropOutOfBounds {
                window: rect.to_string(),
                frame_w: self.width,
                frame_h: self.height,
            });
        }
        let mut pixels = Vec::with_capacity(rect.w * rect.h * 3);
        for y in rect.y0..rect.y0 + rect.h {
            let start = (y * self.width + rect.x0) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + rect.w * 3]);
        }
        Ok(Image::new(rect.w, rect.h, pixels))
    }

    /// Writes the canonical binary form: `P6\n{w} {h}\n255\n` then raw
    /// row-major RGB bytes, no comments.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::ImageFile {
            path: path.into(),
            message: e.to_string(),
        })?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e: std::io::Error| Error::ImageFile {
            path: path.into(),
            message: e.to_string(),
        };
        write!(w, "P6\n{} {}\n255\n", self.width, self.height).map_err(io)?;
        w.write_all(&self.pixels).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn read_ppm(path: &Path) -> Result<Image> {
        let data = fs::read(path).map_err(|e| Error::ImageFile {
            path: path.into(),
            message: e.to_string(),
        })?;
        parse_ppm(&data).map_err(|message| Error::ImageFile {
            path: path.into(),
            message,
        })
    }
}

fn parse_ppm(data: &[u8]) -> std::result::Result<Image, String> {
    if data.len() < 2 || &data[..2] != b"P6" {
        return Err("not a binary P6 ppm".to_string());
    }
    let mut pos = 2;
    let mut token = || -> std::result::Result<usize, String> {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            return Err("ppm comments are not supported".to_string());
        }
        let start = pos;
        while pos < data.len() && data[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err("malformed ppm header".to_string());
        }
        std::str::from_utf8(&data[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| "malformed ppm header".to_string())
    };
    let width = token()?;
    let height = token()?;
    let maxval = token()?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}, expected 255"));
    }
    if width == 0 || height == 0 || width > 65_535 || height > 65_535 {
        return Err(format!("unreasonable dimensions {width}x{height}"));
    }
    if pos >= data.len() || !data[pos].is_ascii_whitespace() {
        return Err("missing separator after maxval".to_string());
    }
    pos += 1;
    let expected = width * height * 3;
    let body = &data[pos..];
    if body.len() < expected {
        return Err(format!(
            "truncated pixel data: expected {expected} bytes, got {}",
            body.len()
        ));
    }
    if body.len() > expected {
        return Err(format!(
            "{} trailing bytes after pixel data",
            body.len() - expected
        ));
    }
    Ok(Image::new(width, height, body.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_extracts_the_right_window() {
        let mut img = Image::filled(10, 8, [1, 2, 3]);
        img.put(4, 3, [9, 9, 9]);
        let sub = img
            .crop(PxRect {
                x0: 3,
                y0: 2,
                w: 4,
                h: 3,
            })
            .unwrap();
        assert_eq!(sub.width(), 4);
        assert_eq!(sub.height(), 3);
        assert_eq!(sub.get(1, 1), [9, 9, 9]);
        assert_eq!(sub.get(0, 0), [1, 2, 3]);
    }

    #[test]
    fn crop_outside_the_frame_fails() {
        let img = Image::filled(10, 8, [0, 0, 0]);
        let err = img
            .crop(PxRect {
                x0: 8,
                y0: 0,
                w: 4,
                h: 4,
            })
            .unwrap_err();
        assert!(err.to_string().contains("10x8"), "{err}");
    }

    #[test]
    fn ppm_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let mut img = Image::filled(7, 5, [10, 20, 30]);
        img.put(6, 4, [255, 0, 128]);
        img.write_ppm(&path).unwrap();
        let back = Image::read_ppm(&path).unwrap();
        assert_eq!(back, img);
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n7 5\n255\n"));
        assert_eq!(bytes.len(), 11 + 7 * 5 * 3);
    }

    #[test]
    fn truncated_ppm_reports_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        let img = Image::filled(4, 4, [50, 50, 50]);
        img.write_ppm(&path).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 5]).unwrap();
        let err = Image::read_ppm(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad.ppm") && msg.contains("truncated"), "{msg}");
    }

    #[test]
    fn non_ppm_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        std::fs::write(&path, b"P5\n4 4\n255\n").unwrap();
        assert!(Image::read_ppm(&path).is_err());
        std::fs::write(&path, b"P6\n# hi\n4 4\n255\n").unwrap();
        assert!(Image::read_ppm(&path).is_err());
    }
}

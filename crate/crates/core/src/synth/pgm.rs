//! Binary PGM (P5) reading and writing, 8 or 16 bits per pixel.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::GrayImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Depth {
    Eight,
    Sixteen,
}

impl Depth {
    pub fn maxval(self) -> u32 {
        match self {
            Depth::Eight => 255,
            Depth::Sixteen => 65535,
        }
    }
}

/// Quantizes `[0, 1]` values (clamped) to the given depth.
pub fn encode_pgm(img: &GrayImage, depth: Depth) -> Vec<u8> {
    let max = depth.maxval();
    let mut out = format!("P5\n{} {}\n{}\n", img.width, img.height, max).into_bytes();
    for &v in &img.pixels {
        let q = (v.clamp(0.0, 1.0) * max as f64).round() as u32;
        match depth {
            Depth::Eight => out.push(q as u8),
            Depth::Sixteen => out.extend_from_slice(&(q as u16).to_be_bytes()),
        }
    }
    out
}

pub fn save_pgm(img: &GrayImage, path: impl AsRef<Path>, depth: Depth) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(img, depth)).map_err(|e| Error::io(path, e))
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes, path)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos,
            message: message.into(),
        }
    }

    /// Skips whitespace and `#` comments running to end of line.
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Parse {
                path: self.path.to_path_buf(),
                offset: start,
                message: format!("{what} out of range"),
            })
    }
}

/// Decodes a P5 file; `path` is only used in error messages.
pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let mut c = Cursor { bytes, pos: 0, path };
    if !bytes.starts_with(b"P5") {
        return Err(c.err("missing P5 magic"));
    }
    c.pos = 2;
    let width = c.number("width")? as usize;
    let height = c.number("height")? as usize;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(c.err("zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(c.err(format!("maxval {maxval} outside 1..=65535")));
    }
    if !bytes.get(c.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(c.err("expected a single whitespace byte after maxval"));
    }
    c.pos += 1;
    let wide = maxval > 255;
    let need = width * height * if wide { 2 } else { 1 };
    let data = &bytes[c.pos..];
    if data.len() < need {
        c.pos = bytes.len();
        return Err(c.err(format!("pixel data truncated: need {need} bytes, found {}", data.len())));
    }
    let scale = 1.0 / maxval as f64;
    let pixels = if wide {
        data[..need]
            .chunks_exact(2)
            .map(|p| u16::from_be_bytes([p[0], p[1]]) as f64 * scale)
            .collect()
    } else {
        data[..need].iter().map(|&b| b as f64 * scale).collect()
    };
    GrayImage::new(height, width, pixels)
}

//! Binary greyscale PGM (`P5`), 8- or 16-bit.

use std::path::Path;

use crate::error::{Error, Result};
use crate::group_action::PlanarImage;

fn parse_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Pgm { offset, message: message.into() })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    /// Skips whitespace and `#` comments up to the next token.
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return parse_err(start, format!("expected {what}"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .map_or_else(|| parse_err(start, format!("{what} out of range")), Ok)
    }
}

/// Values are scaled to `[0, 1]` by dividing by maxval.
pub fn decode_pgm(bytes: &[u8]) -> Result<PlanarImage<f64>> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return parse_err(0, "missing P5 magic");
    }
    let mut c = Cursor { bytes, pos: 2 };
    let width = c.number("width")?;
    let height = c.number("height")?;
    let max_at = c.pos;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return parse_err(max_at, "zero image dimension");
    }
    if maxval == 0 || maxval > 65535 {
        return parse_err(max_at, format!("maxval {maxval} outside 1..=65535"));
    }
    if c.pos >= bytes.len() || !bytes[c.pos].is_ascii_whitespace() {
        return parse_err(c.pos, "expected a single whitespace byte before the raster");
    }
    let start = c.pos + 1;
    let bpp = if maxval < 256 { 1 } else { 2 };
    let need = width * height * bpp;
    if bytes.len() < start + need {
        return parse_err(bytes.len(), format!("raster truncated: need {need} bytes after offset {start}"));
    }
    let raster = &bytes[start..start + need];
    let scale = 1.0 / maxval as f64;
    let mut values = Vec::with_capacity(width * height);
    for i in 0..width * height {
        let v = if bpp == 1 { raster[i] as usize } else { (raster[2 * i] as usize) << 8 | raster[2 * i + 1] as usize };
        if v > maxval {
            return parse_err(start + i * bpp, format!("sample {v} exceeds maxval {maxval}"));
        }
        values.push(v as f64 * scale);
    }
    PlanarImage::new(height, width, 1, values)
}

pub fn read_pgm(path: &Path) -> Result<PlanarImage<f64>> {
    decode_pgm(&std::fs::read(path)?)
}

/// Quantizes a single-channel image (clamped to `[0, 1]`) at `maxval`.
pub fn encode_pgm(img: &PlanarImage<f64>, maxval: u16) -> Result<Vec<u8>> {
    encode_pgm_annotated(img, maxval, &[])
}

/// As `encode_pgm`, with one `#` comment line per entry after the magic.
pub fn encode_pgm_annotated(img: &PlanarImage<f64>, maxval: u16, comments: &[String]) -> Result<Vec<u8>> {
    if img.channels != 1 {
        return Err(Error::Shape(format!("PGM holds one channel, image has {}", img.channels)));
    }
    if maxval == 0 {
        return Err(Error::InvalidArgument("maxval must be positive".into()));
    }
    if comments.iter().any(|c| c.contains(['\n', '\r'])) {
        return Err(Error::InvalidArgument("PGM comments must be single lines".into()));
    }
    let mut header = String::from("P5\n");
    for c in comments {
        header.push_str(&format!("# {c}\n"));
    }
    header.push_str(&format!("{} {}\n{}\n", img.width, img.height, maxval));
    let mut out = header.into_bytes();
    let mv = maxval as f64;
    for &v in &img.values {
        let q = (v.clamp(0.0, 1.0) * mv).round() as u16;
        if maxval < 256 {
            out.push(q as u8);
        } else {
            out.extend_from_slice(&q.to_be_bytes());
        }
    }
    Ok(out)
}

pub fn write_pgm(path: &Path, img: &PlanarImage<f64>, maxval: u16) -> Result<()> {
    super::write_atomic(path, &encode_pgm(img, maxval)?)
}

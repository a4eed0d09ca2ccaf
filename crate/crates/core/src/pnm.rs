//! Minimal binary PNM image I/O: 8-bit grayscale P5 and 8-bit RGB P6.
//!
//! Headers may contain `#` comments anywhere whitespace is allowed.
//! Only maxval <= 255 is supported; everything else is rejected as an
//! I/O error naming the offending file.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PnmImage {
    /// Row-major luminance bytes, `width * height` of them.
    Gray { width: usize, height: usize, data: Vec<u8> },
    /// Row-major interleaved RGB bytes, `3 * width * height` of them.
    Rgb { width: usize, height: usize, data: Vec<u8> },
}

impl PnmImage {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            PnmImage::Gray { width, height, .. } | PnmImage::Rgb { width, height, .. } => {
                (*width, *height)
            }
        }
    }
}

pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    write_raw(path, b"P5", width, height, 1, data)
}

pub fn write_ppm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    write_raw(path, b"P6", width, height, 3, data)
}

fn write_raw(
    path: &Path,
    magic: &[u8],
    width: usize,
    height: usize,
    channels: usize,
    data: &[u8],
) -> Result<()> {
    if data.len() != width * height * channels {
        return Err(Error::dim(format!(
            "pnm payload has {} bytes, {}x{} with {channels} channel(s) needs {}",
            data.len(),
            width,
            height,
            width * height * channels
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        w.write_all(magic)?;
        write!(w, "\n{width} {height}\n255\n")?;
        w.write_all(data)?;
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

struct HeaderScanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderScanner<'a> {
    /// Next whitespace-delimited token, skipping `#` comments to end of line.
    fn token(&mut self) -> Option<&'a [u8]> {
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
        while self.pos < self.bytes.len()
            && !self.bytes[self.pos].is_ascii_whitespace()
            && self.bytes[self.pos] != b'#'
        {
            self.pos += 1;
        }
        Some(&self.bytes[start..self.pos])
    }
}

pub fn read_pnm(path: &Path) -> Result<PnmImage> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes).map(|_| ()))
        .map_err(|e| Error::io(path, e))?;
    parse_pnm(&bytes).map_err(|msg| Error::io(path, msg))
}

fn parse_pnm(bytes: &[u8]) -> Result<PnmImage, String> {
    let mut scan = HeaderScanner { bytes, pos: 0 };
    let magic = scan.token().ok_or("empty file")?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(format!(
                "unsupported magic {:?}, only binary P5/P6 are handled",
                String::from_utf8_lossy(other)
            ))
        }
    };
    let mut field = |name: &str| -> Result<usize, String> {
        let tok = scan.token().ok_or_else(|| format!("missing {name}"))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| format!("malformed {name}"))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("maxval {maxval} unsupported, need 1..=255"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    let start = scan.pos + 1;
    let need = width * height * channels;
    if bytes.len() < start + need {
        return Err(format!(
            "payload truncated: need {need} bytes, found {}",
            bytes.len().saturating_sub(start)
        ));
    }
    let mut data = bytes[start..start + need].to_vec();
    if maxval != 255 {
        for v in &mut data {
            *v = ((*v as usize * 255 + maxval / 2) / maxval).min(255) as u8;
        }
    }
    Ok(match channels {
        1 => PnmImage::Gray { width, height, data },
        _ => PnmImage::Rgb { width, height, data },
    })
}

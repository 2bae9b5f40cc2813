//! Binary PNM readers/writers.
//!
//! Panoptic label rasters travel as 16-bit P5 PGM (big-endian samples, maxval
//! 65535, per the PGM convention) and RGB images as 8-bit P6 PPM. Both are
//! line-diffable with standard tools and need no image stack.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

/// An 8-bit RGB raster, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::ShapeMismatch {
                context: "rgb image",
                expected: format!("{} bytes", height * width * 3),
                got: format!("{}", pixels.len()),
            });
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            pixels.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

fn parse_header<'a>(
    data: &'a [u8],
    magic: &str,
    format: &'static str,
    path: &Path,
) -> Result<(usize, usize, usize, &'a [u8])> {
    let bad = |reason: &str| Error::Format {
        format,
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if data.len() < 2 || &data[..2] != magic.as_bytes() {
        return Err(bad(&format!("missing {magic} magic")));
    }
    // Header tokens are separated by whitespace; '#' starts a comment to EOL.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < data.len() && data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < data.len() && data[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        let text = std::str::from_utf8(&data[start..pos]).map_err(|_| bad("non-ascii header"))?;
        *field = text.parse().map_err(|_| bad("bad header integer"))?;
    }
    if pos >= data.len() || !data[pos].is_ascii_whitespace() {
        return Err(bad("missing header terminator"));
    }
    pos += 1; // single whitespace byte before the raster
    Ok((fields[0], fields[1], fields[2], &data[pos..]))
}

/// Write a 16-bit grayscale raster as binary PGM (P5, maxval 65535,
/// big-endian samples).
pub fn write_pgm16(path: &Path, width: usize, height: usize, samples: &[u16]) -> Result<()> {
    assert_eq!(samples.len(), width * height, "sample count");
    let mut out = Vec::with_capacity(20 + samples.len() * 2);
    write!(out, "P5\n{width} {height}\n65535\n").expect("vec write");
    for s in samples {
        out.extend_from_slice(&s.to_be_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a binary PGM. 8-bit (maxval < 256) and 16-bit files are both
/// accepted; samples are widened to u16.
pub fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (width, height, maxval, raster) = parse_header(&data, "P5", "pgm", path)?;
    let n = width * height;
    let bad = |reason: &str| Error::Format {
        format: "pgm",
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let samples = if maxval < 256 {
        if raster.len() < n {
            return Err(bad("truncated raster"));
        }
        raster[..n].iter().map(|&b| b as u16).collect()
    } else {
        if raster.len() < 2 * n {
            return Err(bad("truncated raster"));
        }
        raster[..2 * n]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]))
            .collect()
    };
    Ok((width, height, samples))
}

/// Write an RGB raster as binary PPM (P6, maxval 255).
pub fn write_ppm(path: &Path, image: &RgbImage) -> Result<()> {
    let mut out = Vec::with_capacity(20 + image.pixels.len());
    write!(out, "P6\n{} {}\n255\n", image.width, image.height).expect("vec write");
    out.extend_from_slice(&image.pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a binary PPM (P6, maxval 255).
pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (width, height, maxval, raster) = parse_header(&data, "P6", "ppm", path)?;
    let bad = |reason: &str| Error::Format {
        format: "ppm",
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if maxval != 255 {
        return Err(bad("only maxval 255 supported"));
    }
    let n = width * height * 3;
    if raster.len() < n {
        return Err(bad("truncated raster"));
    }
    RgbImage::new(height, width, raster[..n].to_vec())
}

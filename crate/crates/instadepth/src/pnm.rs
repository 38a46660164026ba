//! Binary Netpbm images: P6 (8-bit RGB) and P5 (8- or 16-bit gray,
//! 16-bit samples big-endian).

use std::fs;
use std::path::Path;

use crate::error::{format_err, io_err, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// 1..=65535; above 255 samples take two bytes.
    pub maxval: u16,
    pub data: Vec<u16>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, maxval: u16, data: Vec<u16>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        GrayImage {
            width,
            height,
            maxval,
            data,
        }
    }
}

struct Header {
    width: usize,
    height: usize,
    maxval: u16,
    /// Offset of the first raster byte.
    offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format_err(path, "magic", format!("expected {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut field = |name: &'static str| -> Result<usize> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(path, name, "missing or not a number"))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if width == 0 || height == 0 {
        return Err(format_err(path, "width", format!("empty image {width}x{height}")));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(format_err(path, "maxval", format!("{maxval} outside 1..=65535")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err(path, "maxval", "no whitespace before the raster"));
    }
    Ok(Header {
        width,
        height,
        maxval: maxval as u16,
        offset: pos + 1,
    })
}

fn raster<'a>(bytes: &'a [u8], h: &Header, bytes_per_pixel: usize, path: &Path) -> Result<&'a [u8]> {
    let need = h.width * h.height * bytes_per_pixel;
    let body = &bytes[h.offset..];
    if body.len() != need {
        return Err(format_err(
            path,
            "raster",
            format!("{}x{} needs {need} bytes, found {}", h.width, h.height, body.len()),
        ));
    }
    Ok(body)
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// `path` only labels errors.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let h = parse_header(bytes, b"P6", path)?;
    if h.maxval > 255 {
        return Err(format_err(path, "maxval", "16-bit PPM is not supported"));
    }
    let data = raster(bytes, &h, 3, path)?.to_vec();
    Ok(RgbImage {
        width: h.width,
        height: h.height,
        data,
    })
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    if img.maxval > 255 {
        out.extend(img.data.iter().flat_map(|v| v.to_be_bytes()));
    } else {
        out.extend(img.data.iter().map(|&v| v as u8));
    }
    out
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let h = parse_header(bytes, b"P5", path)?;
    let data: Vec<u16> = if h.maxval > 255 {
        raster(bytes, &h, 2, path)?
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]))
            .collect()
    } else {
        raster(bytes, &h, 1, path)?.iter().map(|&b| b as u16).collect()
    };
    if let Some(v) = data.iter().find(|&&v| v > h.maxval) {
        return Err(format_err(path, "raster", format!("sample {v} exceeds maxval {}", h.maxval)));
    }
    Ok(GrayImage {
        width: h.width,
        height: h.height,
        maxval: h.maxval,
        data,
    })
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&fs::read(path).map_err(io_err(path))?, path)
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(io_err(path))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    decode_pgm(&fs::read(path).map_err(io_err(path))?, path)
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    fs::write(path, encode_pgm(img)).map_err(io_err(path))
}

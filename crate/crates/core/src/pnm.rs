//! Minimal PNM image encoding: binary PPM (P6) for RGB output and binary
//! PGM (P5) for single-channel rasters. Header plus raw bytes, so outputs are
//! byte-exact across platforms with no codec dependency.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("malformed {kind} data: {detail}")]
    Malformed { kind: &'static str, detail: String },
}

/// Interleaved 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    /// 3 bytes per pixel, row-major.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width as usize * height as usize);
        for _ in 0..(width as usize * height as usize) {
            data.extend_from_slice(&rgb);
        }
        RgbImage {
            width,
            height,
            data,
        }
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

pub fn write_ppm(path: impl AsRef<Path>, image: &RgbImage) -> Result<(), PnmError> {
    write_bytes(path.as_ref(), &encode_ppm(image))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage, PnmError> {
    let (width, height, maxval, data) = decode_pnm_header(bytes, b"P6", "PPM")?;
    if maxval != 255 {
        return Err(PnmError::Malformed {
            kind: "PPM",
            detail: format!("unsupported maxval {maxval}"),
        });
    }
    let expected = 3 * width as usize * height as usize;
    if data.len() != expected {
        return Err(PnmError::Malformed {
            kind: "PPM",
            detail: format!("expected {expected} data bytes, got {}", data.len()),
        });
    }
    Ok(RgbImage {
        width,
        height,
        data: data.to_vec(),
    })
}

/// 8-bit single-channel raster (used for category ids).
pub fn encode_pgm8(width: u32, height: u32, data: &[u8]) -> Vec<u8> {
    assert_eq!(data.len(), width as usize * height as usize);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

pub fn write_pgm8(
    path: impl AsRef<Path>,
    width: u32,
    height: u32,
    data: &[u8],
) -> Result<(), PnmError> {
    write_bytes(path.as_ref(), &encode_pgm8(width, height, data))
}

pub fn decode_pgm8(bytes: &[u8]) -> Result<(u32, u32, Vec<u8>), PnmError> {
    let (width, height, maxval, data) = decode_pnm_header(bytes, b"P5", "PGM")?;
    if maxval != 255 {
        return Err(PnmError::Malformed {
            kind: "PGM",
            detail: format!("unsupported maxval {maxval}"),
        });
    }
    let expected = width as usize * height as usize;
    if data.len() != expected {
        return Err(PnmError::Malformed {
            kind: "PGM",
            detail: format!("expected {expected} data bytes, got {}", data.len()),
        });
    }
    Ok((width, height, data.to_vec()))
}

/// 16-bit single-channel raster, big-endian samples per the PNM spec
/// (used for depth images).
pub fn encode_pgm16(width: u32, height: u32, data: &[u16]) -> Vec<u8> {
    assert_eq!(data.len(), width as usize * height as usize);
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for v in data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn write_pgm16(
    path: impl AsRef<Path>,
    width: u32,
    height: u32,
    data: &[u16],
) -> Result<(), PnmError> {
    write_bytes(path.as_ref(), &encode_pgm16(width, height, data))
}

fn decode_pnm_header<'a>(
    bytes: &'a [u8],
    magic: &[u8],
    kind: &'static str,
) -> Result<(u32, u32, u32, &'a [u8]), PnmError> {
    let malformed = |detail: &str| PnmError::Malformed {
        kind,
        detail: detail.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(malformed("bad magic"));
    }
    // Tokenize: magic, width, height, maxval, then exactly one whitespace byte.
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for f in &mut fields {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("missing header field"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        *f = text.parse().map_err(|_| malformed("header field overflow"))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(malformed("missing separator after maxval"));
    }
    pos += 1;
    Ok((fields[0], fields[1], fields[2], &bytes[pos..]))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), PnmError> {
    let mut f = fs::File::create(path).map_err(|source| PnmError::Io {
        path: path.to_owned(),
        source,
    })?;
    f.write_all(bytes).map_err(|source| PnmError::Io {
        path: path.to_owned(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip() {
        let mut img = RgbImage::filled(3, 2, [10, 20, 30]);
        img.set(2, 1, [255, 0, 0]);
        let bytes = encode_ppm(&img);
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        let back = decode_ppm(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.get(2, 1), [255, 0, 0]);
    }

    #[test]
    fn pgm8_roundtrip() {
        let data = vec![0u8, 1, 2, 3, 4, 5];
        let bytes = encode_pgm8(3, 2, &data);
        let (w, h, back) = decode_pgm8(&bytes).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(back, data);
    }

    #[test]
    fn pgm16_is_big_endian() {
        let bytes = encode_pgm16(1, 1, &[0x0102]);
        assert!(bytes.ends_with(&[0x01, 0x02]));
    }

    #[test]
    fn truncated_ppm_rejected() {
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00").is_err());
        assert!(decode_ppm(b"P5\n1 1\n255\n\x00").is_err());
    }
}

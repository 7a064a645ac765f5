//! Binary PGM (P5) image I/O, fixed to the 32x32 8-bit patches the corpus
//! uses. Written files have the exact header `P5\n32 32 255\n` followed by
//! 1024 raw bytes; the reader accepts any whitespace between header tokens
//! but rejects wrong magic, dimensions, maxval, or a short body, naming the
//! offending field.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_EXTENT: usize = 32;
const PIXELS: usize = IMAGE_EXTENT * IMAGE_EXTENT;

/// Loads a 32x32 P5 file as a `[32, 32, 1]` tensor with values `byte / 255`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(path, &bytes)
}

fn parse_pgm(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    let bad = |field: &'static str, details: String| Error::ImageFormat {
        path: path.to_path_buf(),
        field,
        details,
    };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(bad("magic", "expected binary PGM magic `P5`".into()));
    }
    let mut pos = 2;
    let mut next_token = |field: &'static str| -> Result<usize> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad(field, "missing header token".into()));
        }
        std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(field, "header token is not a number".into()))
    };
    let width = next_token("width")?;
    let height = next_token("height")?;
    let maxval = next_token("maxval")?;
    if width != IMAGE_EXTENT {
        return Err(bad("width", format!("expected {IMAGE_EXTENT}, got {width}")));
    }
    if height != IMAGE_EXTENT {
        return Err(bad(
            "height",
            format!("expected {IMAGE_EXTENT}, got {height}"),
        ));
    }
    if maxval != 255 {
        return Err(bad("maxval", format!("expected 255, got {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the pixel data.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("pixel data", "missing separator after header".into()));
    }
    pos += 1;
    let body = &bytes[pos..];
    if body.len() != PIXELS {
        return Err(bad(
            "pixel data",
            format!("expected {PIXELS} bytes, got {}", body.len()),
        ));
    }
    let data = body.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![IMAGE_EXTENT, IMAGE_EXTENT, 1], data)
}

/// Writes a `[32, 32, 1]` tensor as P5, mapping values through
/// `round(v * 255)` with clamping into [0, 255].
pub fn save_image(path: &Path, img: &Tensor) -> Result<()> {
    if img.shape() != [IMAGE_EXTENT, IMAGE_EXTENT, 1] {
        return Err(Error::shape(
            "save_image",
            format!(
                "expects [{IMAGE_EXTENT}, {IMAGE_EXTENT}, 1], got {:?}",
                img.shape()
            ),
        ));
    }
    let mut bytes = Vec::with_capacity(PIXELS + 16);
    bytes.extend_from_slice(format!("P5\n{IMAGE_EXTENT} {IMAGE_EXTENT} 255\n").as_bytes());
    for &v in img.data() {
        bytes.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

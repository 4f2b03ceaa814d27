//! `FFL1` tiny-image container.
//!
//! Layout (little-endian): magic `b"FFL1"`, then `u32` N, H, W, D, C, then
//! `N*H*W*D` pixel bytes (row-major `n, h, w, d`), then N label bytes.
//! Pixels are scaled to `[0, 1]` on load.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FFL1";
const HEADER_LEN: usize = 4 + 5 * 4;

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        msg: msg.into(),
    }
}

pub fn decode_tiny_images(bytes: &[u8], name: &str) -> Result<Dataset> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(format_err(0, "missing FFL1 magic"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (n, h, w, d, c) = (field(0), field(1), field(2), field(3), field(4));
    if n == 0 {
        return Err(format_err(4, "image count must be positive"));
    }
    if !matches!(h, 8 | 16) {
        return Err(format_err(8, format!("height {h} is not 8 or 16")));
    }
    if w != h {
        return Err(format_err(12, format!("width {w} differs from height {h}")));
    }
    if d != 1 {
        return Err(format_err(16, format!("expected 1 grayscale channel, got {d}")));
    }
    if c == 0 || c > 256 {
        return Err(format_err(20, format!("class count {c} must be in 1..=256")));
    }
    let pixels = n * h * w * d;
    let expected = HEADER_LEN + pixels + n;
    if bytes.len() < expected {
        return Err(format_err(bytes.len(), format!("truncated payload, expected {expected} bytes")));
    }
    if bytes.len() > expected {
        return Err(format_err(expected, "trailing bytes after labels"));
    }
    let data = bytes[HEADER_LEN..HEADER_LEN + pixels]
        .iter()
        .map(|&p| p as f64 / 255.0)
        .collect();
    let label_base = HEADER_LEN + pixels;
    let mut labels = Vec::with_capacity(n);
    for (i, &l) in bytes[label_base..].iter().enumerate() {
        if l as usize >= c {
            return Err(format_err(label_base + i, format!("label {l} out of range for {c} classes")));
        }
        labels.push(l as usize);
    }
    Dataset::new(Tensor::new(vec![n, h, w, d], data)?, labels, c, name)
}

pub fn read_tiny_images(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "tiny-images".into());
    decode_tiny_images(&bytes, &name)
}

/// Inverse of [`decode_tiny_images`]; pixel values are clamped to `[0, 1]`
/// and quantized to bytes.
pub fn encode_tiny_images(d: &Dataset) -> Result<Vec<u8>> {
    let (h, w, depth) = d.input_shape();
    if d.class_count > 256 {
        return Err(Error::input("at most 256 classes fit in a label byte"));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + d.examples.len() + d.len());
    out.extend_from_slice(MAGIC);
    for v in [d.len(), h, w, depth, d.class_count] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend(d.examples.data().iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8));
    out.extend(d.labels.iter().map(|&l| l as u8));
    Ok(out)
}

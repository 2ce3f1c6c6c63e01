//! IDX image files (`0x00000803`: unsigned bytes, rank 3), as used by MNIST.

use std::path::Path;

use crate::data::Glyph;
use crate::error::{format_err, Result};

const MAGIC_U8_RANK3: u32 = 0x0000_0803;

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err("IDX header truncated"))
}

/// Decode an in-memory IDX image file into `[0, 1]` bitmaps.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Glyph>> {
    let magic = read_u32(bytes, 0)?;
    if magic != MAGIC_U8_RANK3 {
        return Err(format_err(format!("IDX magic {magic:#010x}, expected {MAGIC_U8_RANK3:#010x}")));
    }
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let per = rows * cols;
    let payload = &bytes[16..];
    if payload.len() < n * per {
        return Err(format_err(format!(
            "IDX payload truncated: {n} images of {rows}x{cols} need {} bytes, found {}",
            n * per,
            payload.len()
        )));
    }
    if n > 0 && per == 0 {
        return Err(format_err("IDX images have zero area"));
    }
    payload
        .chunks_exact(per.max(1))
        .take(n)
        .map(|img| Glyph::new(rows, cols, img.iter().map(|&b| b as f64 / 255.0).collect()))
        .collect()
}

pub fn load_idx_images(path: &Path) -> Result<Vec<Glyph>> {
    parse_idx_images(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(n: u32, rows: u32, cols: u32) -> Vec<u8> {
        [MAGIC_U8_RANK3, n, rows, cols].iter().flat_map(|v| v.to_be_bytes()).collect()
    }

    #[test]
    fn parses_single_image() {
        let mut bytes = header(1, 2, 2);
        bytes.extend([0, 255, 128, 64]);
        let g = parse_idx_images(&bytes).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!((g[0].rows(), g[0].cols()), (2, 2));
        let expected = [0.0, 1.0, 0.50196, 0.25098];
        for (a, b) in g[0].pixels().iter().zip(expected) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn empty_set_is_ok() {
        assert!(parse_idx_images(&header(0, 28, 28)).unwrap().is_empty());
    }

    #[test]
    fn rejects_bad_files() {
        assert!(matches!(parse_idx_images(&[]), Err(crate::Error::Format(_))));
        let mut wrong = header(1, 1, 1);
        wrong[3] = 0x01;
        wrong.push(0);
        assert!(matches!(parse_idx_images(&wrong), Err(crate::Error::Format(_))));
        let mut short = header(2, 2, 2);
        short.extend([1, 2, 3, 4, 5]);
        assert!(matches!(parse_idx_images(&short), Err(crate::Error::Format(_))));
    }
}

//! Binary PGM (`P5`, maxval 255) reading and writing.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{format_err, usage_err, Result};
use crate::tensor::{Shape, Tensor};
use crate::Real;

/// 8-bit grayscale raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(usage_err(format!(
                "{width}x{height} image cannot hold {} pixels",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    /// Quantise a single-channel frame: `round(v·255)` with halves rounded up.
    pub fn from_frame<T: Real>(frame: &Tensor<T>) -> Result<Self> {
        if frame.channels() != 1 {
            return Err(usage_err(format!("PGM needs a single-channel frame, got {}", frame.shape())));
        }
        let pixels = frame
            .data()
            .iter()
            .map(|&v| {
                let v = v.as_f64();
                if !(0.0..=1.0).contains(&v) {
                    return Err(usage_err(format!("pixel value {v} outside [0, 1]")));
                }
                Ok((v * 255.0 + 0.5).floor() as u8)
            })
            .collect::<Result<_>>()?;
        Self::new(frame.width(), frame.height(), pixels)
    }

    pub fn to_frame<T: Real>(&self) -> Tensor<T> {
        let data = self.pixels.iter().map(|&p| T::from_f64(p as f64 / 255.0)).collect();
        Tensor::from_vec(Shape::new(self.height, self.width, 1), data).expect("image dimensions are positive")
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

    /// Place images left to right, top-aligned, separated by `gap` black
    /// columns.
    pub fn hstack(images: &[GrayImage], gap: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(usage_err("montage needs at least one image"));
        }
        let height = images.iter().map(|i| i.height).max().unwrap_or(0);
        let width = images.iter().map(|i| i.width).sum::<usize>() + gap * (images.len() - 1);
        let mut pixels = vec![0u8; width * height];
        let mut x0 = 0;
        for img in images {
            for y in 0..img.height {
                let src = &img.pixels[y * img.width..(y + 1) * img.width];
                pixels[y * width + x0..y * width + x0 + img.width].copy_from_slice(src);
            }
            x0 += img.width + gap;
        }
        Self::new(width, height, pixels)
    }

    /// Stack images top to bottom, left-aligned, separated by `gap` black rows.
    pub fn vstack(images: &[GrayImage], gap: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(usage_err("montage needs at least one image"));
        }
        let width = images.iter().map(|i| i.width).max().unwrap_or(0);
        let height = images.iter().map(|i| i.height).sum::<usize>() + gap * (images.len() - 1);
        let mut pixels = vec![0u8; width * height];
        let mut y0 = 0;
        for img in images {
            for y in 0..img.height {
                let dst = (y0 + y) * width;
                pixels[dst..dst + img.width].copy_from_slice(&img.pixels[y * img.width..(y + 1) * img.width]);
            }
            y0 += img.height + gap;
        }
        Self::new(width, height, pixels)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = next_token(bytes, &mut pos)?;
        if magic != b"P5" {
            return Err(format_err("not a binary PGM (missing P5 magic)"));
        }
        let width = parse_header_number(next_token(bytes, &mut pos)?)?;
        let height = parse_header_number(next_token(bytes, &mut pos)?)?;
        let maxval = parse_header_number(next_token(bytes, &mut pos)?)?;
        if maxval != 255 {
            return Err(format_err(format!("PGM maxval must be 255, got {maxval}")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let n = width * height;
        let raster = bytes
            .get(pos..pos + n)
            .ok_or_else(|| format_err(format!("PGM raster truncated: need {n} bytes")))?;
        Self::new(width, height, raster.to_vec()).map_err(|e| format_err(e.to_string()))
    }

    /// Atomic write through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(format_err("PGM header truncated")),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(&bytes[start..*pos])
}

fn parse_header_number(tok: &[u8]) -> Result<usize> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format_err(format!("bad PGM header field {:?}", String::from_utf8_lossy(tok))))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Write a single-channel frame with values in `[0, 1]` as binary PGM.
pub fn write_pgm<T: Real>(frame: &Tensor<T>, path: &Path) -> Result<()> {
    GrayImage::from_frame(frame)?.save(path)
}

/// Read a binary PGM back into a `[0, 1]` frame.
pub fn read_pgm<T: Real>(path: &Path) -> Result<Tensor<T>> {
    Ok(GrayImage::load(path)?.to_frame())
}

/// Write frames as `{prefix}_00.pgm`, `{prefix}_01.pgm`, ... with the index
/// zero-padded to the width of the largest index (at least two digits).
pub fn dump_sequence<T: Real>(frames: &[Tensor<T>], dir: &Path, prefix: &str) -> Result<Vec<std::path::PathBuf>> {
    let width = frames.len().saturating_sub(1).to_string().len().max(2);
    let images = frames.iter().map(GrayImage::from_frame).collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(dir)?;
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let path = dir.join(format!("{prefix}_{i:0width$}.pgm"));
            img.save(&path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scaling_rounds_half_up() {
        let f = Tensor::<f64>::from_vec(Shape::new(2, 2, 1), vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        let img = GrayImage::from_frame(&f).unwrap();
        assert_eq!(img.pixels(), &[0, 255, 128, 64]);
        let bytes = img.encode();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 255, 128, 64]);
    }

    #[test]
    fn zero_frame_gives_zero_raster() {
        let img = GrayImage::from_frame(&Tensor::<f32>::zeros(Shape::new(3, 5, 1))).unwrap();
        let bytes = img.encode();
        assert!(bytes[bytes.len() - 15..].iter().all(|&b| b == 0));
    }

    #[test]
    fn decode_accepts_comments() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([7, 9]);
        let img = GrayImage::decode(&bytes).unwrap();
        assert_eq!((img.width(), img.height(), img.pixels()), (2, 1, &[7u8, 9][..]));
    }

    #[test]
    fn decode_rejects_bad_input() {
        assert!(matches!(GrayImage::decode(b"P2\n1 1\n255\n0"), Err(crate::Error::Format(_))));
        assert!(matches!(GrayImage::decode(b"P5\n1 1\n65535\n\0\0"), Err(crate::Error::Format(_))));
        assert!(matches!(GrayImage::decode(b"P5\n2 2\n255\n\0"), Err(crate::Error::Format(_))));
        assert!(matches!(GrayImage::decode(b""), Err(crate::Error::Format(_))));
    }

    #[test]
    fn out_of_range_values_rejected() {
        let f = Tensor::<f64>::from_vec(Shape::new(1, 1, 1), vec![1.5]).unwrap();
        assert!(GrayImage::from_frame(&f).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.pgm");
        let f = Tensor::<f64>::from_vec(Shape::new(1, 3, 1), vec![0.1, 0.6, 1.0]).unwrap();
        write_pgm(&f, &path).unwrap();
        let back: Tensor<f64> = read_pgm(&path).unwrap();
        assert!(back.max_abs_diff(&f) <= 1.0 / 510.0);
    }

    #[test]
    fn montage_layout() {
        let a = GrayImage::new(2, 2, vec![1; 4]).unwrap();
        let b = GrayImage::new(1, 1, vec![2]).unwrap();
        let m = GrayImage::hstack(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!((m.width(), m.height()), (4, 2));
        assert_eq!(m.pixels(), &[1, 1, 0, 2, 1, 1, 0, 0]);
        let v = GrayImage::vstack(&[a, b], 0).unwrap();
        assert_eq!(v.pixels(), &[1, 1, 1, 1, 2, 0]);
    }

    #[test]
    fn sequence_dump_names() {
        let dir = tempfile::tempdir().unwrap();
        let frames = vec![Tensor::<f64>::zeros(Shape::new(2, 2, 1)); 3];
        let paths = dump_sequence(&frames, dir.path(), "frame").unwrap();
        let names: Vec<_> = paths.iter().map(|p| p.file_name().unwrap().to_str().unwrap().to_owned()).collect();
        assert_eq!(names, ["frame_00.pgm", "frame_01.pgm", "frame_02.pgm"]);
    }

    proptest! {
        #[test]
        fn quantisation_error_bounded(vals in proptest::collection::vec(0.0f64..=1.0, 12)) {
            let f = Tensor::from_vec(Shape::new(3, 4, 1), vals).unwrap();
            let back: Tensor<f64> = GrayImage::decode(&GrayImage::from_frame(&f).unwrap().encode()).unwrap().to_frame();
            prop_assert!(back.max_abs_diff(&f) <= 1.0 / 510.0 + 1e-12);
        }
    }
}

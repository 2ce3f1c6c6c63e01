//! Glyph bitmaps: the built-in binary shapes and the common container for
//! MNIST digits.

use crate::error::{config_err, Result};

/// A `rows × cols` bitmap with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Glyph {
    rows: usize,
    cols: usize,
    pixels: Vec<f64>,
}

impl Glyph {
    pub fn new(rows: usize, cols: usize, pixels: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || pixels.len() != rows * cols {
            return Err(config_err(format!("{rows}x{cols} glyph cannot hold {} pixels", pixels.len())));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(config_err("glyph pixels must lie in [0, 1]"));
        }
        Ok(Self { rows, cols, pixels })
    }

    fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let pixels = (0..size * size)
            .map(|i| if f(i / size, i % size) { 1.0 } else { 0.0 })
            .collect();
        Self {
            rows: size,
            cols: size,
            pixels,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.cols + c]
    }
}

/// Square, cross, diagonal bar and ring at the default 12×12 size.
pub fn builtin_glyphs() -> Vec<Glyph> {
    builtin_glyphs_sized(12)
}

/// The built-in shapes drawn on a `size × size` canvas (`size ≥ 4`).
pub fn builtin_glyphs_sized(size: usize) -> Vec<Glyph> {
    assert!(size >= 4, "built-in glyphs need at least 4x4 pixels");
    let n = size as isize;
    let m = (size / 6).max(1) as isize; // margin
    let t = (size / 6).max(1) as isize; // stroke thickness
    let mid = (n - 1) as f64 / 2.0;
    let inside = |r: isize, c: isize| r >= m && r < n - m && c >= m && c < n - m;
    let square = Glyph::from_fn(size, |r, c| inside(r as isize, c as isize));
    let cross = Glyph::from_fn(size, |r, c| {
        let (r, c) = (r as f64, c as f64);
        ((r - mid).abs() < t as f64 || (c - mid).abs() < t as f64) && inside(r as isize, c as isize)
    });
    let bar = Glyph::from_fn(size, |r, c| {
        let (r, c) = (r as isize, c as isize);
        (r - c).abs() < t && inside(r, c)
    });
    let outer = mid - m as f64 + 0.5;
    let inner = outer - t as f64 - 0.5;
    let ring = Glyph::from_fn(size, |r, c| {
        let d = ((r as f64 - mid).powi(2) + (c as f64 - mid).powi(2)).sqrt();
        d <= outer && d > inner
    });
    vec![square, cross, bar, ring]
}

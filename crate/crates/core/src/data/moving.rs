//! Bouncing-glyph video synthesis.
//!
//! Each glyph starts at a uniform random position with a uniform random
//! heading and speed. Per frame the position advances by the velocity; a
//! component that would leave the frame is clamped to the wall and its
//! velocity negated. Glyphs are drawn at the nearest integer offset and
//! composited by per-pixel maximum.

use std::f64::consts::TAU;

use rand::Rng;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::data::Glyph;
use crate::error::{config_err, usage_err, Result};
use crate::tensor::{Shape, Tensor};
use crate::Real;

/// An ordered frame list split into context and target segments.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample<T> {
    pub frames: Vec<Tensor<T>>,
    pub context_len: usize,
    pub predict_len: usize,
    pub seed: u64,
}

impl<T> SequenceSample<T> {
    pub fn context(&self) -> &[Tensor<T>] {
        &self.frames[..self.context_len]
    }

    pub fn target(&self) -> &[Tensor<T>] {
        &self.frames[self.context_len..]
    }
}

/// A glyph in flight. Positions are the real-valued top-left corner as
/// `(row, col)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphSprite {
    pub bitmap: Glyph,
    pub position: (f64, f64),
    pub velocity: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MovingGlyphsConfig {
    pub frame_size: usize,
    pub num_glyphs: usize,
    pub context_len: usize,
    pub predict_len: usize,
    /// Speed range in pixels per frame.
    pub speed_min: f64,
    pub speed_max: f64,
}

impl Default for MovingGlyphsConfig {
    fn default() -> Self {
        Self {
            frame_size: 64,
            num_glyphs: 2,
            context_len: 10,
            predict_len: 10,
            speed_min: 2.0,
            speed_max: 5.0,
        }
    }
}

impl MovingGlyphsConfig {
    pub fn seq_len(&self) -> usize {
        self.context_len + self.predict_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_size == 0 || self.num_glyphs == 0 {
            return Err(config_err("frame_size and num_glyphs must be positive"));
        }
        if self.context_len == 0 {
            return Err(config_err("context_len must be positive"));
        }
        if !(self.speed_min >= 0.0 && self.speed_min <= self.speed_max && self.speed_max.is_finite()) {
            return Err(config_err(format!(
                "speed range [{}, {}] must satisfy 0 <= min <= max < inf",
                self.speed_min, self.speed_max
            )));
        }
        Ok(())
    }
}

/// Advance a position component by one frame, bouncing off `[0, bound]`.
fn bounce(p: &mut f64, v: &mut f64, bound: f64) {
    *p += *v;
    if *p < 0.0 {
        *p = 0.0;
        *v = -*v;
    } else if *p > bound {
        *p = bound;
        *v = -*v;
    }
}

fn check_fits(g: &Glyph, frame_size: usize) -> Result<()> {
    if g.rows() > frame_size || g.cols() > frame_size {
        return Err(config_err(format!(
            "{}x{} glyph does not fit a {frame_size}x{frame_size} frame",
            g.rows(),
            g.cols()
        )));
    }
    Ok(())
}

fn rasterize<T: Real>(sprites: &[GlyphSprite], frame_size: usize) -> Tensor<T> {
    let mut canvas = vec![0.0f64; frame_size * frame_size];
    for s in sprites {
        let r0 = s.position.0.round() as usize;
        let c0 = s.position.1.round() as usize;
        for r in 0..s.bitmap.rows() {
            for c in 0..s.bitmap.cols() {
                let px = &mut canvas[(r0 + r) * frame_size + c0 + c];
                *px = px.max(s.bitmap.get(r, c));
            }
        }
    }
    let data = canvas.into_iter().map(|v| T::from_f64(v.clamp(0.0, 1.0))).collect();
    Tensor::from_vec(Shape::new(frame_size, frame_size, 1), data).expect("canvas matches frame shape")
}

/// Render `seq_len` frames starting from the given sprite states. Frame 0
/// shows the initial positions.
pub fn simulate<T: Real>(sprites: &[GlyphSprite], frame_size: usize, seq_len: usize) -> Result<Vec<Tensor<T>>> {
    let mut sprites = sprites.to_vec();
    for s in &sprites {
        check_fits(&s.bitmap, frame_size)?;
        let (br, bc) = bounds(&s.bitmap, frame_size);
        let (r, c) = s.position;
        if !(0.0..=br).contains(&r) || !(0.0..=bc).contains(&c) || !s.velocity.0.is_finite() || !s.velocity.1.is_finite() {
            return Err(usage_err(format!("sprite at ({r}, {c}) lies outside [0, {br}]x[0, {bc}]")));
        }
    }
    let mut frames = Vec::with_capacity(seq_len);
    for t in 0..seq_len {
        if t > 0 {
            for s in &mut sprites {
                let (br, bc) = bounds(&s.bitmap, frame_size);
                bounce(&mut s.position.0, &mut s.velocity.0, br);
                bounce(&mut s.position.1, &mut s.velocity.1, bc);
            }
        }
        frames.push(rasterize(&sprites, frame_size));
    }
    Ok(frames)
}

fn bounds(g: &Glyph, frame_size: usize) -> (f64, f64) {
    ((frame_size - g.rows()) as f64, (frame_size - g.cols()) as f64)
}

/// Draw the initial sprite states for `seed`.
pub fn random_sprites(seed: u64, cfg: &MovingGlyphsConfig, glyphs: &[Glyph]) -> Result<Vec<GlyphSprite>> {
    cfg.validate()?;
    if glyphs.is_empty() {
        return Err(config_err("glyph source is empty"));
    }
    for g in glyphs {
        check_fits(g, cfg.frame_size)?;
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let sprites = (0..cfg.num_glyphs)
        .map(|_| {
            let bitmap = glyphs[rng.gen_range(0..glyphs.len())].clone();
            let (br, bc) = bounds(&bitmap, cfg.frame_size);
            let position = (rng.gen_range(0.0..=br), rng.gen_range(0.0..=bc));
            let theta = rng.gen_range(0.0..TAU);
            let speed = rng.gen_range(cfg.speed_min..=cfg.speed_max);
            GlyphSprite {
                bitmap,
                position,
                velocity: (speed * theta.sin(), speed * theta.cos()),
            }
        })
        .collect();
    Ok(sprites)
}

/// Generate one sequence of `context_len + predict_len` frames.
pub fn gen_sequence<T: Real>(seed: u64, cfg: &MovingGlyphsConfig, glyphs: &[Glyph]) -> Result<SequenceSample<T>> {
    let sprites = random_sprites(seed, cfg, glyphs)?;
    Ok(SequenceSample {
        frames: simulate(&sprites, cfg.frame_size, cfg.seq_len())?,
        context_len: cfg.context_len,
        predict_len: cfg.predict_len,
        seed,
    })
}

/// Anything that yields a sequence per seed.
pub trait SequenceSource<T> {
    fn sample(&self, seed: u64) -> Result<SequenceSample<T>>;
}

/// The bouncing-glyph generator bound to a glyph set.
#[derive(Clone, Debug)]
pub struct MovingGlyphs {
    pub config: MovingGlyphsConfig,
    pub glyphs: Vec<Glyph>,
}

impl MovingGlyphs {
    pub fn new(config: MovingGlyphsConfig, glyphs: Vec<Glyph>) -> Result<Self> {
        config.validate()?;
        if glyphs.is_empty() {
            return Err(config_err("glyph source is empty"));
        }
        for g in &glyphs {
            check_fits(g, config.frame_size)?;
        }
        Ok(Self { config, glyphs })
    }
}

impl<T: Real> SequenceSource<T> for MovingGlyphs {
    fn sample(&self, seed: u64) -> Result<SequenceSample<T>> {
        gen_sequence(seed, &self.config, &self.glyphs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::builtin_glyphs;
    use proptest::prelude::*;

    fn dot() -> Glyph {
        Glyph::new(1, 1, vec![1.0]).unwrap()
    }

    fn column_of(frame: &Tensor<f64>) -> usize {
        frame.data().iter().position(|&v| v == 1.0).unwrap() % frame.width()
    }

    #[test]
    fn static_glyph_gives_identical_frames() {
        let s = GlyphSprite {
            bitmap: builtin_glyphs()[1].clone(),
            position: (3.0, 7.0),
            velocity: (0.0, 0.0),
        };
        let frames: Vec<Tensor<f64>> = simulate(&[s], 32, 6).unwrap();
        assert!(frames.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn constant_velocity_walks_one_column_per_frame() {
        let s = GlyphSprite {
            bitmap: dot(),
            position: (0.0, 0.0),
            velocity: (0.0, 1.0),
        };
        let frames: Vec<Tensor<f64>> = simulate(&[s], 64, 64).unwrap();
        for (t, f) in frames.iter().enumerate() {
            assert_eq!(column_of(f), t);
        }
    }

    #[test]
    fn wall_clamps_then_reverses() {
        let s = GlyphSprite {
            bitmap: dot(),
            position: (0.0, 62.0),
            velocity: (0.0, 3.0),
        };
        let frames: Vec<Tensor<f64>> = simulate(&[s], 64, 4).unwrap();
        let cols: Vec<_> = frames.iter().map(column_of).collect();
        assert_eq!(cols, vec![62, 63, 60, 57]);
    }

    #[test]
    fn left_wall_bounce() {
        let mut p = 1.0;
        let mut v = -4.0;
        bounce(&mut p, &mut v, 10.0);
        assert_eq!((p, v), (0.0, 4.0));
        bounce(&mut p, &mut v, 10.0);
        assert_eq!((p, v), (4.0, 4.0));
    }

    #[test]
    fn overlap_composites_by_max() {
        let half = Glyph::new(1, 1, vec![0.5]).unwrap();
        let a = GlyphSprite {
            bitmap: half.clone(),
            position: (1.0, 1.0),
            velocity: (0.0, 0.0),
        };
        let b = GlyphSprite { bitmap: dot(), ..a.clone() };
        let f: Vec<Tensor<f64>> = simulate(&[a.clone(), a, b], 3, 1).unwrap();
        assert_eq!(f[0].get(1, 1, 0), 1.0);
        assert_eq!(f[0].sum(), 1.0);
    }

    #[test]
    fn oversized_glyph_is_config_error() {
        let cfg = MovingGlyphsConfig {
            frame_size: 8,
            ..Default::default()
        };
        assert!(matches!(
            gen_sequence::<f64>(0, &cfg, &builtin_glyphs()),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn sample_layout() {
        let cfg = MovingGlyphsConfig {
            frame_size: 32,
            context_len: 4,
            predict_len: 3,
            ..Default::default()
        };
        let s: SequenceSample<f32> = gen_sequence(9, &cfg, &builtin_glyphs()).unwrap();
        assert_eq!(s.frames.len(), 7);
        assert_eq!((s.context().len(), s.target().len(), s.seed), (4, 3, 9));
        assert_eq!(s.frames[0].shape(), Shape::new(32, 32, 1));
    }

    #[test]
    fn distinct_seeds_distinct_first_frames() {
        let cfg = MovingGlyphsConfig {
            context_len: 1,
            predict_len: 0,
            ..Default::default()
        };
        let glyphs = builtin_glyphs();
        let mut firsts: Vec<Vec<u64>> = (0..100u64)
            .map(|s| {
                let f = gen_sequence::<f64>(s, &cfg, &glyphs).unwrap();
                f.frames[0].data().iter().map(|v| v.to_bits()).collect()
            })
            .collect();
        firsts.sort();
        firsts.dedup();
        assert!(firsts.len() >= 99, "only {} distinct first frames", firsts.len());
    }

    proptest! {
        #[test]
        fn generation_is_deterministic_contained_and_in_range(seed in any::<u64>(), n in 1usize..4) {
            let cfg = MovingGlyphsConfig { frame_size: 24, num_glyphs: n, context_len: 6, predict_len: 6, ..Default::default() };
            let glyphs = builtin_glyphs();
            let a: SequenceSample<f64> = gen_sequence(seed, &cfg, &glyphs).unwrap();
            let b: SequenceSample<f64> = gen_sequence(seed, &cfg, &glyphs).unwrap();
            prop_assert_eq!(&a, &b);
            for f in &a.frames {
                prop_assert!(f.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
            // Containment: replay the sprite trajectories and check every box.
            let mut sprites = random_sprites(seed, &cfg, &glyphs).unwrap();
            for _ in 0..cfg.seq_len() {
                for s in &mut sprites {
                    let (br, bc) = bounds(&s.bitmap, cfg.frame_size);
                    prop_assert!((0.0..=br).contains(&s.position.0) && (0.0..=bc).contains(&s.position.1));
                    bounce(&mut s.position.0, &mut s.velocity.0, br);
                    bounce(&mut s.position.1, &mut s.velocity.1, bc);
                }
            }
        }

        #[test]
        fn speed_stays_in_range(seed in any::<u64>()) {
            let cfg = MovingGlyphsConfig { frame_size: 32, num_glyphs: 3, ..Default::default() };
            for s in random_sprites(seed, &cfg, &builtin_glyphs()).unwrap() {
                let speed = s.velocity.0.hypot(s.velocity.1);
                prop_assert!((2.0 - 1e-12..=5.0 + 1e-12).contains(&speed));
            }
        }
    }
}

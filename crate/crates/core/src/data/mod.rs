//! Synthetic bouncing-glyph video and the two file formats around it.

pub mod glyphs;
pub mod idx;
pub mod moving;
pub mod pgm;

pub use glyphs::{builtin_glyphs, builtin_glyphs_sized, Glyph};
pub use idx::{load_idx_images, parse_idx_images};
pub use moving::{gen_sequence, random_sprites, simulate, GlyphSprite, MovingGlyphs, MovingGlyphsConfig, SequenceSample, SequenceSource};
pub use pgm::{dump_sequence, read_pgm, write_pgm, GrayImage};

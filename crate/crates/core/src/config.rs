//! Run configuration: flat `key = value` lines with `#` comments and dotted
//! section prefixes (`grid.`, `data.`, `train.`, `paths.`).
//!
//! A bare key such as `total_iterations` resolves to the one section that
//! defines it. Errors name the source and line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{builtin_glyphs_sized, load_idx_images, Glyph, MovingGlyphs, MovingGlyphsConfig};
use crate::error::{config_err, Error, Result};
use crate::grid::GridConfig;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Glorot,
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub enum GlyphSource {
    /// The built-in shapes drawn at the given size.
    Builtin(usize),
    /// An IDX image file (MNIST digits).
    Idx(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub num_glyphs: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    pub glyphs: GlyphSource,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_glyphs: 2,
            speed_min: 2.0,
            speed_max: 5.0,
            glyphs: GlyphSource::Builtin(12),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathsConfig {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("run.ckpt"),
            metrics: PathBuf::from("metrics.csv"),
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
    pub precision: Precision,
    pub init: Init,
    /// Save a checkpoint every this many updates (0: only at the end).
    pub checkpoint_interval: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            paths: PathsConfig::default(),
            precision: Precision::F32,
            init: Init::Glorot,
            checkpoint_interval: 500,
        }
    }
}

const KEYS: &[&str] = &[
    "grid.spatial_layers",
    "grid.output_layers",
    "grid.state_channels",
    "grid.frame_size",
    "grid.temporal_kernel",
    "grid.spatial_kernel",
    "grid.context_len",
    "grid.predict_len",
    "grid.forget_bias",
    "grid.share_encoder_decoder",
    "grid.init",
    "data.num_glyphs",
    "data.speed_min",
    "data.speed_max",
    "data.glyphs",
    "train.lr",
    "train.lr_switch_at",
    "train.lr_after",
    "train.beta1",
    "train.beta2",
    "train.epsilon",
    "train.batch_size",
    "train.total_iterations",
    "train.loss",
    "train.seed",
    "train.clip_norm",
    "train.val_interval",
    "train.val_seed_start",
    "train.val_count",
    "train.fixed_seed",
    "train.record_wall_time",
    "train.precision",
    "train.checkpoint_interval",
    "paths.checkpoint",
    "paths.metrics",
    "paths.output_dir",
];

fn resolve_key(key: &str) -> std::result::Result<&'static str, String> {
    if let Some(k) = KEYS.iter().find(|k| **k == key) {
        return Ok(k);
    }
    if !key.contains('.') {
        let hits: Vec<_> = KEYS.iter().filter(|k| k.rsplit('.').next() == Some(key)).collect();
        if let [only] = hits.as_slice() {
            return Ok(only);
        }
    }
    Err(format!("unknown key {key:?}"))
}

fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<N, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
}

fn parse_bool(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {v:?}")),
    }
}

fn parse_optional<N: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<Option<N>, String> {
    if v == "none" {
        Ok(None)
    } else {
        parse_num(key, v).map(Some)
    }
}

impl RunConfig {
    fn set(&mut self, key: &'static str, v: &str) -> std::result::Result<(), String> {
        let g = &mut self.grid;
        let t = &mut self.train;
        match key {
            "grid.spatial_layers" => g.spatial_layers = parse_num(key, v)?,
            "grid.output_layers" => g.output_layers = parse_num(key, v)?,
            "grid.state_channels" => g.state_channels = parse_num(key, v)?,
            "grid.frame_size" => {
                let n = parse_num(key, v)?;
                g.frame_height = n;
                g.frame_width = n;
            }
            "grid.temporal_kernel" => g.temporal_kernel = parse_num(key, v)?,
            "grid.spatial_kernel" => g.spatial_kernel = parse_num(key, v)?,
            "grid.context_len" => g.context_len = parse_num(key, v)?,
            "grid.predict_len" => g.predict_len = parse_num(key, v)?,
            "grid.forget_bias" => g.forget_bias = parse_num(key, v)?,
            "grid.share_encoder_decoder" => g.share_encoder_decoder = parse_bool(key, v)?,
            "grid.init" => {
                self.init = match v {
                    "glorot" => Init::Glorot,
                    "zeros" => Init::Zeros,
                    _ => return Err(format!("{key}: expected glorot or zeros, got {v:?}")),
                }
            }
            "data.num_glyphs" => self.data.num_glyphs = parse_num(key, v)?,
            "data.speed_min" => self.data.speed_min = parse_num(key, v)?,
            "data.speed_max" => self.data.speed_max = parse_num(key, v)?,
            "data.glyphs" => {
                self.data.glyphs = match v.strip_prefix("builtin") {
                    Some("") => GlyphSource::Builtin(12),
                    Some(rest) => match rest.strip_prefix(':').and_then(|n| n.parse().ok()) {
                        Some(n) => GlyphSource::Builtin(n),
                        None => return Err(format!("{key}: expected builtin or builtin:<size>, got {v:?}")),
                    },
                    None => GlyphSource::Idx(PathBuf::from(v)),
                }
            }
            "train.lr" => t.schedule.lr = parse_num(key, v)?,
            "train.lr_switch_at" => t.schedule.switch_at = parse_num(key, v)?,
            "train.lr_after" => t.schedule.after = parse_num(key, v)?,
            "train.beta1" => t.adam.beta1 = parse_num(key, v)?,
            "train.beta2" => t.adam.beta2 = parse_num(key, v)?,
            "train.epsilon" => t.adam.epsilon = parse_num(key, v)?,
            "train.batch_size" => t.batch_size = parse_num(key, v)?,
            "train.total_iterations" => t.total_iterations = parse_num(key, v)?,
            "train.loss" => t.loss_kind = v.parse().map_err(|e: Error| e.to_string())?,
            "train.seed" => t.seed = parse_num(key, v)?,
            "train.clip_norm" => t.clip_norm = parse_optional(key, v)?,
            "train.val_interval" => t.val_interval = parse_num(key, v)?,
            "train.val_seed_start" => t.val_seed_start = parse_num(key, v)?,
            "train.val_count" => t.val_count = parse_num(key, v)?,
            "train.fixed_seed" => t.fixed_seed = parse_optional(key, v)?,
            "train.record_wall_time" => t.record_wall_time = parse_bool(key, v)?,
            "train.precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(format!("{key}: expected f32 or f64, got {v:?}")),
                }
            }
            "train.checkpoint_interval" => self.checkpoint_interval = parse_num(key, v)?,
            "paths.checkpoint" => self.paths.checkpoint = PathBuf::from(v),
            "paths.metrics" => self.paths.metrics = PathBuf::from(v),
            "paths.output_dir" => self.paths.output_dir = PathBuf::from(v),
            _ => unreachable!("resolve_key only yields known keys"),
        }
        Ok(())
    }

    /// Apply `key = value` lines from `text` on top of `self`. `origin`
    /// prefixes error messages.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| config_err(format!("{origin}:{}: {msg}", i + 1));
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got {line:?}")))?;
            let key = resolve_key(k.trim()).map_err(at)?;
            if !seen.insert(key) {
                return Err(at(format!("duplicate key {key}")));
            }
            self.set(key, v.trim()).map_err(at)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text, origin)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        let mut c = Self::default();
        c.apply_text(&text, &path.display().to_string())?;
        Ok(c)
    }

    /// Apply one `key=value` command-line override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| config_err(format!("--set {kv:?}: expected key=value")))?;
        let key = resolve_key(k.trim()).map_err(|m| config_err(format!("--set: {m}")))?;
        self.set(key, v.trim()).map_err(|m| config_err(format!("--set: {m}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.train.validate()?;
        if self.grid.frame_channels != 1 {
            return Err(config_err("glyph video has one channel"));
        }
        if self.grid.frame_height != self.grid.frame_width {
            return Err(config_err("frames must be square"));
        }
        self.data_config().validate()?;
        if let GlyphSource::Builtin(size) = self.data.glyphs {
            if size < 4 || size > self.grid.frame_height {
                return Err(config_err(format!(
                    "builtin glyph size {size} must lie in [4, frame_size = {}]",
                    self.grid.frame_height
                )));
            }
        }
        Ok(())
    }

    pub fn data_config(&self) -> MovingGlyphsConfig {
        MovingGlyphsConfig {
            frame_size: self.grid.frame_height,
            num_glyphs: self.data.num_glyphs,
            context_len: self.grid.context_len,
            predict_len: self.grid.predict_len,
            speed_min: self.data.speed_min,
            speed_max: self.data.speed_max,
        }
    }

    pub fn glyphs(&self) -> Result<Vec<Glyph>> {
        match &self.data.glyphs {
            GlyphSource::Builtin(size) => Ok(builtin_glyphs_sized(*size)),
            GlyphSource::Idx(path) => load_idx_images(path),
        }
    }

    pub fn source(&self) -> Result<MovingGlyphs> {
        MovingGlyphs::new(self.data_config(), self.glyphs()?)
    }

    /// Canonical text form: every key, fixed order. Parsing it back gives
    /// an equal config.
    pub fn to_text(&self) -> String {
        let g = &self.grid;
        let t = &self.train;
        let opt = |o: Option<String>| o.unwrap_or_else(|| "none".into());
        let glyphs = match &self.data.glyphs {
            GlyphSource::Builtin(n) => format!("builtin:{n}"),
            GlyphSource::Idx(p) => p.display().to_string(),
        };
        let values: Vec<String> = vec![
            g.spatial_layers.to_string(),
            g.output_layers.to_string(),
            g.state_channels.to_string(),
            g.frame_height.to_string(),
            g.temporal_kernel.to_string(),
            g.spatial_kernel.to_string(),
            g.context_len.to_string(),
            g.predict_len.to_string(),
            g.forget_bias.to_string(),
            g.share_encoder_decoder.to_string(),
            match self.init {
                Init::Glorot => "glorot".into(),
                Init::Zeros => "zeros".into(),
            },
            self.data.num_glyphs.to_string(),
            self.data.speed_min.to_string(),
            self.data.speed_max.to_string(),
            glyphs,
            t.schedule.lr.to_string(),
            t.schedule.switch_at.to_string(),
            t.schedule.after.to_string(),
            t.adam.beta1.to_string(),
            t.adam.beta2.to_string(),
            t.adam.epsilon.to_string(),
            t.batch_size.to_string(),
            t.total_iterations.to_string(),
            t.loss_kind.to_string(),
            t.seed.to_string(),
            opt(t.clip_norm.map(|v| v.to_string())),
            t.val_interval.to_string(),
            t.val_seed_start.to_string(),
            t.val_count.to_string(),
            opt(t.fixed_seed.map(|v| v.to_string())),
            t.record_wall_time.to_string(),
            match self.precision {
                Precision::F32 => "f32".into(),
                Precision::F64 => "f64".into(),
            },
            self.checkpoint_interval.to_string(),
            self.paths.checkpoint.display().to_string(),
            self.paths.metrics.display().to_string(),
            self.paths.output_dir.display().to_string(),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_text(&c.to_text(), "echo").unwrap(), c);
    }

    #[test]
    fn comments_blank_lines_and_bare_keys() {
        let text = "# a run\n\ngrid.spatial_layers = 2  # two layers\ntotal_iterations=7\ntrain.clip_norm = 1.5\n";
        let c = RunConfig::from_text(text, "run.cfg").unwrap();
        assert_eq!(c.grid.spatial_layers, 2);
        assert_eq!(c.train.total_iterations, 7);
        assert_eq!(c.train.clip_norm, Some(1.5));
    }

    #[test]
    fn errors_are_line_anchored() {
        let e = RunConfig::from_text("grid.spatial_layers = 2\n\ngrid.bogus = 1\n", "run.cfg").unwrap_err();
        assert!(e.to_string().contains("run.cfg:3:"), "{e}");
        let e = RunConfig::from_text("train.seed = x\n", "f").unwrap_err();
        assert!(e.to_string().contains("f:1:"), "{e}");
        let e = RunConfig::from_text("no equals sign\n", "f").unwrap_err();
        assert!(e.to_string().contains("f:1:"), "{e}");
        let e = RunConfig::from_text("seed = 1\nseed = 2\n", "f").unwrap_err();
        assert!(e.to_string().contains("f:2: duplicate"), "{e}");
    }

    #[test]
    fn overrides_win() {
        let mut c = RunConfig::from_text("train.seed = 4\n", "f").unwrap();
        c.apply_override("seed=9").unwrap();
        c.apply_override("data.glyphs = builtin:8").unwrap();
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.data.glyphs, GlyphSource::Builtin(8));
        assert!(c.apply_override("nonsense").is_err());
        assert!(c.apply_override("lr").is_err());
    }

    #[test]
    fn cross_field_validation() {
        assert!(RunConfig::from_text("grid.context_len = 2\ngrid.spatial_layers = 3\n", "f").is_err());
        assert!(RunConfig::from_text("grid.frame_size = 10\n", "f").is_err());
        assert!(RunConfig::from_text("data.speed_min = 6\n", "f").is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let e = RunConfig::load(Path::new("/definitely/not/here.cfg")).unwrap_err();
        assert!(e.to_string().contains("/definitely/not/here.cfg"));
    }

    proptest! {
        #[test]
        fn text_round_trip(
            l in 1usize..4, j in 1usize..4, c in 1usize..40, seed in any::<u64>(),
            lr in 1e-6f64..1.0, clip in proptest::option::of(0.1f64..10.0), fixed in proptest::option::of(any::<u64>()),
            bce in any::<bool>(), shared in any::<bool>(),
        ) {
            let mut cfg = RunConfig::default();
            cfg.grid.spatial_layers = l;
            cfg.grid.output_layers = j;
            cfg.grid.state_channels = c;
            cfg.grid.share_encoder_decoder = shared;
            cfg.train.seed = seed;
            cfg.train.schedule.lr = lr;
            cfg.train.clip_norm = clip;
            cfg.train.fixed_seed = fixed;
            cfg.train.loss_kind = if bce { crate::train::LossKind::Bce } else { crate::train::LossKind::Mse };
            let back = RunConfig::from_text(&cfg.to_text(), "echo").unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}

//! Training loop, validation and evaluation.
//!
//! Each iteration draws `batch_size` sequences, runs encode/decode on the
//! context, takes the loss on the predicted frames only, backpropagates
//! through the whole rollout and applies one ADAM update with the batch-mean
//! gradient. Everything runs serially so a `(seed, config)` pair fixes the
//! log bit for bit.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use crate::data::{SequenceSample, SequenceSource};
use crate::error::{config_err, usage_err, Error, Result};
use crate::loss::{bce_loss, mse_loss, per_step_losses};
use crate::model::CubicRnn;
use crate::optim::{clip_global_norm, Adam, AdamConfig, LrSchedule};
use crate::tensor::Tensor;
use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Bce,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Bce => "bce",
        }
    }

    pub fn evaluate<T: Real>(self, pred: &[Tensor<T>], target: &[Tensor<T>]) -> Result<(f64, Vec<Tensor<T>>)> {
        match self {
            LossKind::Mse => mse_loss(pred, target),
            LossKind::Bce => bce_loss(pred, target),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "bce" => Ok(LossKind::Bce),
            other => Err(config_err(format!("unknown loss {other:?} (expected mse or bce)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub total_iterations: u64,
    pub loss_kind: LossKind,
    pub seed: u64,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Validate every this many updates (0: only after the last one).
    pub val_interval: u64,
    pub val_seed_start: u64,
    pub val_count: u64,
    /// Train on this one sequence instead of fresh samples.
    pub fixed_seed: Option<u64>,
    /// Fill `wall_ms` with elapsed time. Off by default so logs are
    /// byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: LrSchedule {
                lr: 1e-3,
                switch_at: 1000,
                after: 1e-4,
            },
            adam: AdamConfig::default(),
            batch_size: 4,
            total_iterations: 2000,
            loss_kind: LossKind::Mse,
            seed: 0,
            clip_norm: None,
            val_interval: 100,
            val_seed_start: 1_000_000,
            val_count: 8,
            fixed_seed: None,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(config_err("clip_norm must be positive"));
            }
        }
        Ok(())
    }

    pub fn val_seeds(&self) -> std::ops::Range<u64> {
        self.val_seed_start..self.val_seed_start + self.val_count
    }

    /// Seed of sample `b` in the batch of update `iteration`.
    pub fn sample_seed(&self, iteration: u64, b: usize) -> u64 {
        match self.fixed_seed {
            Some(s) => s,
            None => splitmix64(splitmix64(self.seed ^ 0x5EED_0000_0000_0000) ^ splitmix64(iteration) ^ b as u64),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Val,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Val => "val",
        }
    }
}

/// One metrics row. Train rows carry the batch loss measured before update
/// `iteration`; val rows carry the validation loss after `iteration`
/// updates.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub iteration: u64,
    pub phase: Phase,
    pub loss_kind: LossKind,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

pub const CSV_HEADER: &str = "iteration,phase,loss_kind,loss,lr,wall_ms";

impl MetricRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iteration,
            self.phase.as_str(),
            self.loss_kind,
            self.loss,
            self.lr,
            self.wall_ms
        )
    }
}

/// CSV sink that flushes after every row.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    /// Write `echo` lines as `# ` comments, then the header.
    pub fn new(mut out: W, echo: &str) -> Result<Self> {
        for line in echo.lines() {
            writeln!(out, "# {line}")?;
        }
        writeln!(out, "{CSV_HEADER}")?;
        out.flush()?;
        Ok(Self { out })
    }

    /// Continue an existing file without a new header.
    pub fn append(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, r: &MetricRecord) -> Result<()> {
        writeln!(self.out, "{}", r.csv_row())?;
        self.out.flush()?;
        Ok(())
    }
}

fn check_sample<T: Real>(model: &CubicRnn<T>, s: &SequenceSample<T>) -> Result<()> {
    let cfg = model.config();
    if s.context_len != cfg.context_len || s.predict_len != cfg.predict_len || s.frames.len() != s.context_len + s.predict_len
    {
        return Err(usage_err(format!(
            "sample has {}+{} frames, model expects {}+{}",
            s.context_len, s.predict_len, cfg.context_len, cfg.predict_len
        )));
    }
    Ok(())
}

/// Loss on one sequence and its parameter gradient.
pub fn sequence_loss_and_grad<T: Real>(
    model: &CubicRnn<T>,
    sample: &SequenceSample<T>,
    kind: LossKind,
) -> Result<(f64, CubicRnn<T>)> {
    check_sample(model, sample)?;
    let trace = model.forward(sample.context(), sample.predict_len)?;
    let (loss, d_pred) = kind.evaluate(&trace.predictions, sample.target())?;
    let grads = model.backward(&trace, &d_pred)?;
    Ok((loss, grads))
}

/// Mean loss over `seeds` without gradients.
pub fn mean_loss<T: Real>(
    model: &CubicRnn<T>,
    source: &dyn SequenceSource<T>,
    seeds: std::ops::Range<u64>,
    kind: LossKind,
) -> Result<f64> {
    if seeds.is_empty() {
        return Err(usage_err("empty seed range"));
    }
    let n = (seeds.end - seeds.start) as f64;
    let mut total = 0.0;
    for seed in seeds {
        let s = source.sample(seed)?;
        check_sample(model, &s)?;
        let preds = model.forward(s.context(), s.predict_len)?.predictions;
        total += kind.evaluate(&preds, s.target())?.0;
    }
    Ok(total / n)
}

pub struct Trainer<T> {
    pub model: CubicRnn<T>,
    pub adam: Adam<T>,
    pub config: TrainConfig,
    /// Number of updates applied so far.
    pub iteration: u64,
    started: Instant,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: CubicRnn<T>, config: TrainConfig) -> Result<Self> {
        let adam = Adam::new(&model, config.adam);
        Self::resume(model, adam, config, 0)
    }

    pub fn resume(model: CubicRnn<T>, adam: Adam<T>, config: TrainConfig, iteration: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model,
            adam,
            config,
            iteration,
            started: Instant::now(),
        })
    }

    fn wall_ms(&self) -> u64 {
        if self.config.record_wall_time {
            self.started.elapsed().as_millis() as u64
        } else {
            0
        }
    }

    fn diverged(&self, e: Error) -> Error {
        match e {
            Error::Numeric(_) => Error::Divergence {
                iteration: self.iteration,
                loss: f64::NAN,
            },
            other => other,
        }
    }

    /// Apply one update and return its train record.
    pub fn step(&mut self, source: &dyn SequenceSource<T>) -> Result<MetricRecord> {
        let b = self.config.batch_size;
        let mut loss = 0.0;
        let mut grads: Option<CubicRnn<T>> = None;
        for i in 0..b {
            let sample = source.sample(self.config.sample_seed(self.iteration, i))?;
            let (l, g) = sequence_loss_and_grad(&self.model, &sample, self.config.loss_kind).map_err(|e| self.diverged(e))?;
            loss += l;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => acc.add_assign(&g),
            }
        }
        loss /= b as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                iteration: self.iteration,
                loss,
            });
        }
        let mut grads = grads.expect("batch_size > 0");
        let inv = T::from_f64(1.0 / b as f64);
        for (_, k) in grads.named_kernels_mut() {
            k.scale(inv);
        }
        if let Some(max_norm) = self.config.clip_norm {
            clip_global_norm(&mut grads, max_norm);
        }
        let lr = self.config.schedule.at(self.iteration);
        self.adam.step(&mut self.model, &grads, lr)?;
        let record = MetricRecord {
            iteration: self.iteration,
            phase: Phase::Train,
            loss_kind: self.config.loss_kind,
            loss,
            lr,
            wall_ms: self.wall_ms(),
        };
        self.iteration += 1;
        Ok(record)
    }

    /// Validation record for the current parameters.
    pub fn validate(&self, source: &dyn SequenceSource<T>) -> Result<MetricRecord> {
        let loss = mean_loss(&self.model, source, self.config.val_seeds(), self.config.loss_kind).map_err(|e| self.diverged(e))?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                iteration: self.iteration,
                loss,
            });
        }
        Ok(MetricRecord {
            iteration: self.iteration,
            phase: Phase::Val,
            loss_kind: self.config.loss_kind,
            loss,
            lr: self.config.schedule.at(self.iteration),
            wall_ms: self.wall_ms(),
        })
    }

    fn wants_validation(&self) -> bool {
        let i = self.iteration;
        self.config.val_count > 0
            && (i == self.config.total_iterations || (self.config.val_interval > 0 && i.is_multiple_of(self.config.val_interval)))
    }

    /// Train until `total_iterations`, handing every record to `sink` as it
    /// is produced. The run always ends with a validation record (when
    /// validation seeds exist).
    pub fn run(
        &mut self,
        source: &dyn SequenceSource<T>,
        mut sink: impl FnMut(&Self, &MetricRecord) -> Result<()>,
    ) -> Result<()> {
        while self.iteration < self.config.total_iterations {
            let r = self.step(source)?;
            sink(self, &r)?;
            if self.wants_validation() {
                let v = self.validate(source)?;
                sink(self, &v)?;
            }
        }
        if self.iteration == 0 && self.config.val_count > 0 {
            let v = self.validate(source)?;
            sink(self, &v)?;
        }
        Ok(())
    }
}

/// Train `model` in place and return the full log.
pub fn train<T: Real>(model: &mut CubicRnn<T>, source: &dyn SequenceSource<T>, config: &TrainConfig) -> Result<Vec<MetricRecord>> {
    let mut trainer = Trainer::new(model.clone(), config.clone())?;
    let mut log = Vec::new();
    trainer.run(source, |_, r| {
        log.push(r.clone());
        Ok(())
    })?;
    *model = trainer.model;
    Ok(log)
}

/// Per-frame MSE and BCE averaged over sequences, with a per-horizon-step
/// breakdown.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub sequences: u64,
    pub mse: f64,
    pub bce: f64,
    pub per_step: Vec<(f64, f64)>,
}

pub fn evaluate<T: Real>(model: &CubicRnn<T>, source: &dyn SequenceSource<T>, seeds: std::ops::Range<u64>) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(usage_err("empty seed range: nothing to evaluate"));
    }
    let n = seeds.end - seeds.start;
    let horizon = model.config().predict_len;
    let mut per_step = vec![(0.0, 0.0); horizon];
    let (mut mse, mut bce) = (0.0, 0.0);
    for seed in seeds {
        let s = source.sample(seed)?;
        check_sample(model, &s)?;
        let preds = model.forward(s.context(), s.predict_len)?.predictions;
        mse += mse_loss(&preds, s.target())?.0;
        bce += bce_loss(&preds, s.target())?.0;
        for (acc, (m, b)) in per_step.iter_mut().zip(per_step_losses(&preds, s.target())?) {
            acc.0 += m;
            acc.1 += b;
        }
    }
    let nf = n as f64;
    for acc in &mut per_step {
        acc.0 /= nf;
        acc.1 /= nf;
    }
    Ok(EvalReport {
        sequences: n,
        mse: mse / nf,
        bce: bce / nf,
        per_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{builtin_glyphs_sized, MovingGlyphs, MovingGlyphsConfig};
    use crate::grid::GridConfig;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn setup() -> (CubicRnn<f64>, MovingGlyphs) {
        let grid = GridConfig {
            spatial_layers: 2,
            output_layers: 1,
            state_channels: 3,
            frame_height: 8,
            frame_width: 8,
            frame_channels: 1,
            spatial_kernel: 3,
            context_len: 3,
            predict_len: 2,
            ..GridConfig::default()
        };
        let data = MovingGlyphs::new(
            MovingGlyphsConfig {
                frame_size: 8,
                num_glyphs: 1,
                context_len: 3,
                predict_len: 2,
                speed_min: 1.0,
                speed_max: 2.0,
            },
            builtin_glyphs_sized(4),
        )
        .unwrap();
        let mut r = Xoshiro256PlusPlus::seed_from_u64(0);
        (CubicRnn::glorot(&grid, &mut r).unwrap(), data)
    }

    fn config(iters: u64) -> TrainConfig {
        TrainConfig {
            total_iterations: iters,
            batch_size: 2,
            val_interval: 5,
            val_count: 2,
            schedule: LrSchedule::constant(1e-2),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_iterations_leave_parameters() {
        let (mut m, data) = setup();
        let before = m.clone();
        let log = train(&mut m, &data, &config(0)).unwrap();
        assert_eq!(m, before);
        assert_eq!(log.len(), 1);
        assert_eq!((log[0].phase, log[0].iteration), (Phase::Val, 0));
    }

    #[test]
    fn identical_seeds_identical_logs() {
        let (m0, data) = setup();
        let (mut a, mut b) = (m0.clone(), m0);
        let la = train(&mut a, &data, &config(6)).unwrap();
        let lb = train(&mut b, &data, &config(6)).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a, b);
        let phases: Vec<_> = la.iter().map(|r| (r.phase, r.iteration)).collect();
        assert_eq!(phases[4], (Phase::Train, 4));
        assert_eq!(phases[5], (Phase::Val, 5));
        assert_eq!(*phases.last().unwrap(), (Phase::Val, 6));
    }

    #[test]
    fn fixed_sample_loss_drops() {
        let (mut m, data) = setup();
        let cfg = TrainConfig {
            fixed_seed: Some(3),
            batch_size: 1,
            total_iterations: 200,
            val_count: 0,
            schedule: LrSchedule::constant(1e-2),
            ..TrainConfig::default()
        };
        let log = train(&mut m, &data, &cfg).unwrap();
        assert_eq!(log.len(), 200);
        assert!(log[199].loss < log[0].loss, "{} !< {}", log[199].loss, log[0].loss);
    }

    #[test]
    fn final_validation_matches_evaluate() {
        let (mut m, data) = setup();
        let cfg = config(3);
        let log = train(&mut m, &data, &cfg).unwrap();
        let last = log.last().unwrap();
        let report = evaluate(&m, &data, cfg.val_seeds()).unwrap();
        assert_eq!(last.loss, report.mse);
        let mean_step: f64 = report.per_step.iter().map(|s| s.0).sum::<f64>() / report.per_step.len() as f64;
        assert!((mean_step - report.mse).abs() < 1e-12);
    }

    #[test]
    fn zero_model_bce_is_ln2_per_pixel() {
        let (m, data) = setup();
        let z = m.zeros_like();
        let r = evaluate(&z, &data, 0..3).unwrap();
        // Builtin glyphs are binary, so every pixel contributes ln 2.
        let pixels = 64.0;
        assert!((r.bce / pixels - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn empty_seed_range_rejected() {
        let (m, data) = setup();
        assert!(matches!(evaluate(&m, &data, 4..4), Err(Error::Usage(_))));
    }

    #[test]
    fn sample_seeds_vary() {
        let c = TrainConfig::default();
        assert_ne!(c.sample_seed(0, 0), c.sample_seed(0, 1));
        assert_ne!(c.sample_seed(0, 0), c.sample_seed(1, 0));
        let fixed = TrainConfig {
            fixed_seed: Some(9),
            ..c
        };
        assert_eq!(fixed.sample_seed(5, 3), 9);
    }

    #[test]
    fn csv_layout() {
        let mut buf = Vec::new();
        let mut w = MetricsWriter::new(&mut buf, "a = 1\nb = 2").unwrap();
        w.write(&MetricRecord {
            iteration: 3,
            phase: Phase::Val,
            loss_kind: LossKind::Bce,
            loss: 0.5,
            lr: 1e-3,
            wall_ms: 0,
        })
        .unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "# a = 1\n# b = 2\niteration,phase,loss_kind,loss,lr,wall_ms\n3,val,bce,0.5,0.001,0\n"
        );
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { clip_norm: Some(-1.0), ..Default::default() }.validate().is_err());
        assert_eq!("bce".parse::<LossKind>().unwrap(), LossKind::Bce);
        assert!("l1".parse::<LossKind>().is_err());
    }
}

//! `cubicrnn`: train, evaluate and inspect CubicRNN video predictors.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage, configuration
//! or input-format error, 3 numeric divergence.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cubicrnn::checkpoint::Checkpoint;
use cubicrnn::config::{Init, Precision, RunConfig};
use cubicrnn::data::{GrayImage, SequenceSource};
use cubicrnn::gradcheck::{run_suite, SuiteOptions, TOLERANCE};
use cubicrnn::train::{evaluate, MetricsWriter, Phase, Trainer};
use cubicrnn::{visualize_states, CubicRnn, Error, Real, Tensor};
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

#[derive(Parser)]
#[command(name = "cubicrnn", version, about = "CubicLSTM/CubicRNN spatio-temporal sequence prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on synthetic bouncing-glyph video.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Continue from `paths.checkpoint` if it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Report per-frame MSE and BCE of a checkpoint on a seed range.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Use this config instead of the one stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        /// First sequence seed (default: train.val_seed_start).
        #[arg(long)]
        seed_start: Option<u64>,
        /// Number of sequences (default: train.val_count).
        #[arg(long)]
        count: Option<u64>,
        /// Where to write the report (default: <output_dir>/eval.csv).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Predict future frames from a seeded sequence or a directory of PGMs.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "input_dir", required_unless_present = "input_dir")]
        seed: Option<u64>,
        /// Directory holding exactly context_len PGM frames (sorted by name).
        #[arg(long)]
        input_dir: Option<PathBuf>,
        #[arg(long)]
        output_dir: PathBuf,
    },
    /// Compare every analytic gradient with central finite differences.
    Gradcheck {
        /// Recurrent unit steps only.
        #[arg(long)]
        quick: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Dump the hidden states of one cell at the first decoder step as PGMs.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Cell as `j,l` (output layer, spatial layer).
        #[arg(long, value_parser = parse_cell)]
        cell: (usize, usize),
        #[arg(long)]
        output_dir: PathBuf,
    },
}

#[derive(Args)]
struct Overrides {
    /// Override one config key, e.g. `--set total_iterations=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn parse_cell(s: &str) -> Result<(usize, usize), String> {
    let (j, l) = s.split_once(',').ok_or("expected j,l")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad index {v:?}"));
    Ok((p(j)?, p(l)?))
}

enum Failure {
    Verification(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            overrides,
            resume,
        } => cmd_train(&config, &overrides.set, resume),
        Command::Eval {
            checkpoint,
            config,
            overrides,
            seed_start,
            count,
            report,
        } => cmd_eval(&checkpoint, config.as_deref(), &overrides.set, seed_start, count, report),
        Command::Predict {
            checkpoint,
            seed,
            input_dir,
            output_dir,
        } => cmd_predict(&checkpoint, seed, input_dir.as_deref(), &output_dir),
        Command::Gradcheck {
            quick,
            seed,
            inject_fault,
        } => cmd_gradcheck(quick, seed, inject_fault),
        Command::Viz {
            checkpoint,
            seed,
            cell,
            output_dir,
        } => cmd_viz(&checkpoint, seed, cell, &output_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Numeric(_) | Error::Divergence { .. } => 3,
                _ => 2,
            })
        }
    }
}

fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(path)?;
    for kv in overrides {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_parent(path: &Path) -> std::io::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p),
        _ => Ok(()),
    }
}

fn cmd_train(config: &Path, overrides: &[String], resume: bool) -> CmdResult {
    let cfg = load_config(config, overrides)?;
    match cfg.precision {
        Precision::F32 => train_as::<f32>(&cfg, resume),
        Precision::F64 => train_as::<f64>(&cfg, resume),
    }
}

fn train_as<T: Real>(cfg: &RunConfig, resume: bool) -> CmdResult {
    let source = cfg.source()?;
    let previous = if resume && cfg.paths.checkpoint.exists() {
        Some(Checkpoint::load(&cfg.paths.checkpoint)?)
    } else {
        None
    };
    let mut trainer = match &previous {
        Some(ck) => {
            let mut model = CubicRnn::<T>::zeros(&cfg.grid)?;
            ck.restore_model(&mut model)?;
            let adam = ck.restore_adam(&model, cfg.train.adam)?;
            Trainer::resume(model, adam, cfg.train.clone(), ck.iteration)?
        }
        None => {
            let model = match cfg.init {
                Init::Glorot => CubicRnn::glorot(&cfg.grid, &mut Xoshiro256PlusPlus::seed_from_u64(cfg.train.seed))?,
                Init::Zeros => CubicRnn::zeros(&cfg.grid)?,
            };
            Trainer::new(model, cfg.train.clone())?
        }
    };

    // Everything is validated; outputs may be touched from here on.
    create_parent(&cfg.paths.metrics)?;
    create_parent(&cfg.paths.checkpoint)?;
    let mut metrics = if previous.is_some() && cfg.paths.metrics.exists() {
        MetricsWriter::append(OpenOptions::new().append(true).open(&cfg.paths.metrics)?)
    } else {
        MetricsWriter::new(fs::File::create(&cfg.paths.metrics)?, &cfg.to_text())?
    };
    eprintln!(
        "training {} parameters from iteration {} to {}",
        trainer.model.num_parameters(),
        trainer.iteration,
        cfg.train.total_iterations
    );
    let interval = cfg.checkpoint_interval;
    trainer.run(&source, |t, r| {
        metrics.write(r)?;
        if r.phase == Phase::Val {
            eprintln!("iter {:>7}  val {} {:.6}", r.iteration, r.loss_kind, r.loss);
        }
        if r.phase == Phase::Train && interval > 0 && t.iteration % interval == 0 {
            Checkpoint::capture(cfg, &t.model, &t.adam, t.iteration).save(&cfg.paths.checkpoint)?;
        }
        Ok(())
    })?;
    Checkpoint::capture(cfg, &trainer.model, &trainer.adam, trainer.iteration).save(&cfg.paths.checkpoint)?;
    eprintln!("wrote {}", cfg.paths.checkpoint.display());
    Ok(())
}

/// Config and model from a checkpoint, optionally under a different config.
fn open_checkpoint<T: Real>(path: &Path, config: Option<&Path>, overrides: &[String]) -> Result<(RunConfig, CubicRnn<T>), Error> {
    let ck = Checkpoint::load(path)?;
    let cfg = match config {
        Some(p) => load_config(p, overrides)?,
        None => {
            let mut c = ck.config()?;
            for kv in overrides {
                c.apply_override(kv)?;
            }
            c.validate()?;
            c
        }
    };
    let mut model = CubicRnn::zeros(&cfg.grid)?;
    ck.restore_model(&mut model)?;
    Ok((cfg, model))
}

fn cmd_eval(
    checkpoint: &Path,
    config: Option<&Path>,
    overrides: &[String],
    seed_start: Option<u64>,
    count: Option<u64>,
    report: Option<PathBuf>,
) -> CmdResult {
    let precision = match config {
        Some(p) => load_config(p, overrides)?.precision,
        None => Checkpoint::load(checkpoint)?.config()?.precision,
    };
    match precision {
        Precision::F32 => eval_as::<f32>(checkpoint, config, overrides, seed_start, count, report),
        Precision::F64 => eval_as::<f64>(checkpoint, config, overrides, seed_start, count, report),
    }
}

fn eval_as<T: Real>(
    checkpoint: &Path,
    config: Option<&Path>,
    overrides: &[String],
    seed_start: Option<u64>,
    count: Option<u64>,
    report: Option<PathBuf>,
) -> CmdResult {
    let (cfg, model) = open_checkpoint::<T>(checkpoint, config, overrides)?;
    let start = seed_start.unwrap_or(cfg.train.val_seed_start);
    let n = count.unwrap_or(cfg.train.val_count);
    let source = cfg.source()?;
    let r = evaluate(&model, &source, start..start.saturating_add(n))?;

    let mut text = format!("# seeds {start}..{}\nstep,mse,bce\n", start + n);
    for (k, (mse, bce)) in r.per_step.iter().enumerate() {
        text.push_str(&format!("{},{mse},{bce}\n", k + 1));
    }
    text.push_str(&format!("mean,{},{}\n", r.mse, r.bce));
    print!("{text}");
    let path = report.unwrap_or_else(|| cfg.paths.output_dir.join("eval.csv"));
    create_parent(&path)?;
    fs::write(&path, text)?;
    Ok(())
}

fn frames_dir(dir: &Path, cfg: &RunConfig) -> Result<Vec<GrayImage>, Error> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Usage(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    paths.sort();
    if paths.len() != cfg.grid.context_len {
        return Err(Error::Usage(format!(
            "{} holds {} PGM frames, the model needs context_len = {}",
            dir.display(),
            paths.len(),
            cfg.grid.context_len
        )));
    }
    let n = cfg.grid.frame_height;
    paths
        .iter()
        .map(|p| {
            let img = GrayImage::load(p).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
            if img.width() != n || img.height() != n {
                return Err(Error::Usage(format!(
                    "{} is {}x{}, the model needs {n}x{n}",
                    p.display(),
                    img.width(),
                    img.height()
                )));
            }
            Ok(img)
        })
        .collect()
}

fn cmd_predict(checkpoint: &Path, seed: Option<u64>, input_dir: Option<&Path>, output_dir: &Path) -> CmdResult {
    let precision = Checkpoint::load(checkpoint)?.config()?.precision;
    match precision {
        Precision::F32 => predict_as::<f32>(checkpoint, seed, input_dir, output_dir),
        Precision::F64 => predict_as::<f64>(checkpoint, seed, input_dir, output_dir),
    }
}

fn predict_as<T: Real>(checkpoint: &Path, seed: Option<u64>, input_dir: Option<&Path>, output_dir: &Path) -> CmdResult {
    let (cfg, model) = open_checkpoint::<T>(checkpoint, None, &[])?;
    let (context, truth): (Vec<Tensor<T>>, Vec<Tensor<T>>) = match (seed, input_dir) {
        (_, Some(dir)) => (frames_dir(dir, &cfg)?.iter().map(|i| i.to_frame()).collect(), Vec::new()),
        (Some(seed), None) => {
            let s = SequenceSource::<T>::sample(&cfg.source()?, seed)?;
            (s.context().to_vec(), s.target().to_vec())
        }
        (None, None) => return Err(Error::Usage("give --seed or --input-dir".into()).into()),
    };
    let preds = model.forward(&context, cfg.grid.predict_len)?.predictions;
    let to_images = |frames: &[Tensor<T>]| frames.iter().map(GrayImage::from_frame).collect::<Result<Vec<_>, _>>();
    let pred_images = to_images(&preds)?;
    let mut strips = vec![GrayImage::hstack(&to_images(&context)?, 1)?];
    if !truth.is_empty() {
        strips.push(GrayImage::hstack(&to_images(&truth)?, 1)?);
    }
    if !pred_images.is_empty() {
        strips.push(GrayImage::hstack(&pred_images, 1)?);
    }
    let montage = GrayImage::hstack(&strips, 4)?;

    fs::create_dir_all(output_dir)?;
    let written = cubicrnn::data::dump_sequence(&preds, output_dir, "pred")?;
    montage.save(&output_dir.join("montage.pgm"))?;
    println!("wrote {} predicted frames and montage.pgm to {}", written.len(), output_dir.display());
    Ok(())
}

fn cmd_gradcheck(quick: bool, seed: u64, inject_fault: bool) -> CmdResult {
    let results = run_suite(&SuiteOptions {
        quick,
        seed,
        inject_fault,
    })?;
    let mut failed = Vec::new();
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<48} {:>12.3e}  {verdict}", r.target, r.max_rel_error);
        if !r.passed() {
            failed.push(format!("{} ({:.3e})", r.target, r.max_rel_error));
        }
    }
    if failed.is_empty() {
        println!("all {} targets within {TOLERANCE:e}", results.len());
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "{} gradient check(s) above {TOLERANCE:e}: {}",
            failed.len(),
            failed.join(", ")
        )))
    }
}

fn cmd_viz(checkpoint: &Path, seed: u64, cell: (usize, usize), output_dir: &Path) -> CmdResult {
    let precision = Checkpoint::load(checkpoint)?.config()?.precision;
    match precision {
        Precision::F32 => viz_as::<f32>(checkpoint, seed, cell, output_dir),
        Precision::F64 => viz_as::<f64>(checkpoint, seed, cell, output_dir),
    }
}

fn viz_as<T: Real>(checkpoint: &Path, seed: u64, (j, l): (usize, usize), output_dir: &Path) -> CmdResult {
    let (cfg, model) = open_checkpoint::<T>(checkpoint, None, &[])?;
    let sample = SequenceSource::<T>::sample(&cfg.source()?, seed)?;
    let trace = model.forward(sample.context(), cfg.grid.predict_len.max(1))?;
    let state = trace.first_decoder_state.expect("horizon of at least one step");
    let images = visualize_states(&state, j, l)?;
    let c = cfg.grid.state_channels;

    fs::create_dir_all(output_dir)?;
    for (i, img) in images.iter().enumerate() {
        let name = if i < c {
            format!("h_temporal_{i:02}.pgm")
        } else {
            format!("h_spatial_{:02}.pgm", i - c)
        };
        img.save(&output_dir.join(name))?;
    }
    println!("wrote {} state images to {}", images.len(), output_dir.display());
    Ok(())
}

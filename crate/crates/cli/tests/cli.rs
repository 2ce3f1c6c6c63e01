use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_cubicrnn");

const RUN: &str = "\
# small run
grid.spatial_layers = 2
grid.output_layers = 1
grid.state_channels = 3
grid.frame_size = 10
grid.context_len = 3
grid.predict_len = 2
data.num_glyphs = 1
data.glyphs = builtin:4
train.batch_size = 1
train.total_iterations = 6
train.val_interval = 3
train.val_count = 2
train.checkpoint_interval = 2
paths.checkpoint = ck/run.ckpt
paths.metrics = metrics.csv
paths.output_dir = out
";

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).current_dir(dir).output().unwrap()
}

fn setup(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), format!("{RUN}{extra}")).unwrap();
    dir
}

fn trained(extra: &str) -> tempfile::TempDir {
    let dir = setup(extra);
    let out = cli(dir.path(), &["train", "--config", "run.cfg"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn data_rows(csv: &str) -> Vec<&str> {
    csv.lines().filter(|l| !l.starts_with('#') && !l.starts_with("iteration")).collect()
}

#[test]
fn zero_iterations_writes_iteration_zero_checkpoint() {
    let dir = setup("");
    let out = cli(dir.path(), &["train", "--config", "run.cfg", "--set", "total_iterations=0"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let ck = cubicrnn::checkpoint::Checkpoint::load(&dir.path().join("ck/run.ckpt")).unwrap();
    assert_eq!(ck.iteration, 0);
    assert!(ck.config_text.contains("train.total_iterations = 0"));
}

#[test]
fn missing_config_exits_2_naming_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(dir.path(), &["train", "--config", "absent.cfg"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("absent.cfg"));
}

#[test]
fn bad_config_line_is_reported_and_nothing_is_written() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), "grid.spatial_layers = 2\n\ngrid.state_channels = many\n").unwrap();
    let out = cli(dir.path(), &["train", "--config", "run.cfg"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("run.cfg:3:"), "{}", stderr(&out));
    let listing: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(listing.len(), 1, "only the config file may exist");
}

#[test]
fn cross_field_violation_exits_2() {
    let dir = setup("");
    let out = cli(dir.path(), &["train", "--config", "run.cfg", "--set", "grid.context_len=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("metrics.csv").exists());
}

#[test]
fn metrics_header_echoes_effective_config() {
    let dir = setup("");
    let out = cli(dir.path(), &["train", "--config", "run.cfg", "--set", "seed=77"]);
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(csv.contains("# train.seed = 77\n"));
    assert!(csv.contains("\niteration,phase,loss_kind,loss,lr,wall_ms\n"));
    let rows = data_rows(&csv);
    assert_eq!(rows.iter().filter(|r| r.contains(",train,")).count(), 6);
    assert_eq!(rows.iter().filter(|r| r.contains(",val,")).count(), 2);
}

#[test]
fn repeated_training_is_byte_identical() {
    let (a, b) = (trained(""), trained(""));
    for f in ["metrics.csv", "ck/run.ckpt"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn resume_continues_and_appends() {
    let dir = trained("");
    let out = cli(dir.path(), &["train", "--config", "run.cfg", "--resume", "--set", "total_iterations=9"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.matches("iteration,phase").count(), 1);
    let rows = data_rows(&csv);
    assert!(rows.last().unwrap().starts_with("9,val,"));
    assert!(rows.iter().any(|r| r.starts_with("8,train,")));
    let ck = cubicrnn::checkpoint::Checkpoint::load(&dir.path().join("ck/run.ckpt")).unwrap();
    assert_eq!(ck.iteration, 9);
}

#[test]
fn divergence_exits_3() {
    let dir = setup("");
    let out = cli(dir.path(), &["train", "--config", "run.cfg", "--set", "lr=10000", "--set", "loss=bce"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn eval_matches_last_validation_entry() {
    let dir = trained("");
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let last: f64 = data_rows(&csv).last().unwrap().split(',').nth(3).unwrap().parse().unwrap();
    let out = cli(dir.path(), &["eval", "--checkpoint", "ck/run.ckpt"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let mean: f64 = stdout.lines().find_map(|l| l.strip_prefix("mean,")).unwrap().split(',').next().unwrap().parse().unwrap();
    assert!((mean - last).abs() <= 1e-6, "{mean} vs {last}");
    let report = fs::read_to_string(dir.path().join("out/eval.csv")).unwrap();
    assert_eq!(report, stdout);
    assert_eq!(report.lines().filter(|l| l.starts_with(char::is_numeric)).count(), 2);
}

#[test]
fn eval_rejects_empty_range_and_shape_mismatch() {
    let dir = trained("");
    let out = cli(dir.path(), &["eval", "--checkpoint", "ck/run.ckpt", "--count", "0"]);
    assert_eq!(out.status.code(), Some(2));
    let out = cli(dir.path(), &["eval", "--checkpoint", "ck/run.ckpt", "--config", "run.cfg", "--set", "state_channels=4"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("does not match"), "{}", stderr(&out));
    let out = cli(dir.path(), &["eval", "--checkpoint", "missing.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn predict_from_seed_and_from_frames() {
    let dir = trained("");
    let out = cli(dir.path(), &["predict", "--checkpoint", "ck/run.ckpt", "--seed", "4", "--output-dir", "p1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let mut names: Vec<String> = fs::read_dir(dir.path().join("p1"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["montage.pgm", "pred_00.pgm", "pred_01.pgm"]);
    let frame = cubicrnn::data::GrayImage::load(&dir.path().join("p1/pred_00.pgm")).unwrap();
    assert_eq!((frame.width(), frame.height()), (10, 10));
    // context (3) + truth (2) + prediction (2) frames of width 10
    let montage = cubicrnn::data::GrayImage::load(&dir.path().join("p1/montage.pgm")).unwrap();
    assert_eq!(montage.height(), 10);
    assert_eq!(montage.width(), 7 * 10 + 4 + 2 * 4);

    // Feed the same context back in as PGM files.
    let frames_dir = dir.path().join("ctx");
    fs::create_dir(&frames_dir).unwrap();
    let cfg = cubicrnn::config::RunConfig::load(&dir.path().join("run.cfg")).unwrap();
    let sample = cubicrnn::data::SequenceSource::<f32>::sample(&cfg.source().unwrap(), 4).unwrap();
    cubicrnn::data::dump_sequence(sample.context(), &frames_dir, "in").unwrap();
    let out = cli(dir.path(), &["predict", "--checkpoint", "ck/run.ckpt", "--input-dir", "ctx", "--output-dir", "p2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let again = cli(dir.path(), &["predict", "--checkpoint", "ck/run.ckpt", "--input-dir", "ctx", "--output-dir", "p3"]);
    assert!(again.status.success());
    for f in ["pred_00.pgm", "pred_01.pgm", "montage.pgm"] {
        assert_eq!(fs::read(dir.path().join("p2").join(f)).unwrap(), fs::read(dir.path().join("p3").join(f)).unwrap());
    }
}

#[test]
fn predict_rejects_wrong_frame_count_and_size() {
    let dir = trained("");
    let ctx = dir.path().join("ctx");
    fs::create_dir(&ctx).unwrap();
    let img = cubicrnn::data::GrayImage::new(10, 10, vec![0; 100]).unwrap();
    for i in 0..2 {
        img.save(&ctx.join(format!("f{i}.pgm"))).unwrap();
    }
    let out = cli(dir.path(), &["predict", "--checkpoint", "ck/run.ckpt", "--input-dir", "ctx", "--output-dir", "p"]);
    assert_eq!(out.status.code(), Some(2));
    cubicrnn::data::GrayImage::new(9, 10, vec![0; 90]).unwrap().save(&ctx.join("f2.pgm")).unwrap();
    let out = cli(dir.path(), &["predict", "--checkpoint", "ck/run.ckpt", "--input-dir", "ctx", "--output-dir", "p"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("p").exists());
}

#[test]
fn gradcheck_quick_passes() {
    let out = Command::new(BIN).args(["gradcheck", "--quick"]).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("cubic_lstm.spatial_kernel.weights"));
    assert!(!stdout.contains("conv2d.") && !stdout.contains("grid."));
}

#[test]
fn gradcheck_catches_perturbed_backward() {
    let out = Command::new(BIN).args(["gradcheck", "--quick", "--inject-fault"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("cubic_lstm.temporal_kernel.weights"), "{}", stderr(&out));
}

#[test]
fn viz_writes_two_images_per_channel() {
    let dir = trained("");
    let out = cli(dir.path(), &["viz", "--checkpoint", "ck/run.ckpt", "--cell", "0,1", "--output-dir", "v"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let mut names: Vec<String> = fs::read_dir(dir.path().join("v"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["h_spatial_00.pgm", "h_spatial_01.pgm", "h_spatial_02.pgm", "h_temporal_00.pgm", "h_temporal_01.pgm", "h_temporal_02.pgm"]
    );
    let again = cli(dir.path(), &["viz", "--checkpoint", "ck/run.ckpt", "--cell", "0,1", "--output-dir", "w"]);
    assert!(again.status.success());
    for n in &names {
        assert_eq!(fs::read(dir.path().join("v").join(n)).unwrap(), fs::read(dir.path().join("w").join(n)).unwrap());
    }
}

#[test]
fn viz_of_zero_model_is_uniform_128() {
    let dir = setup("grid.init = zeros\n");
    assert!(cli(dir.path(), &["train", "--config", "run.cfg", "--set", "total_iterations=0"]).status.success());
    let out = cli(dir.path(), &["viz", "--checkpoint", "ck/run.ckpt", "--cell", "0,0", "--output-dir", "v"]);
    assert!(out.status.success(), "{}", stderr(&out));
    for e in fs::read_dir(dir.path().join("v")).unwrap() {
        let img = cubicrnn::data::GrayImage::load(&e.unwrap().path()).unwrap();
        assert!(img.pixels().iter().all(|&p| p == 128));
    }
}

#[test]
fn viz_rejects_bad_cell_without_writing() {
    let dir = trained("");
    let out = cli(dir.path(), &["viz", "--checkpoint", "ck/run.ckpt", "--cell", "1,0", "--output-dir", "v"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("v").exists());
    let out = cli(dir.path(), &["viz", "--checkpoint", "ck/run.ckpt", "--cell", "zero", "--output-dir", "v"]);
    assert_eq!(out.status.code(), Some(2));
}

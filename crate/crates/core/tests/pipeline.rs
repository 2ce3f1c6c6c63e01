use cubicrnn::checkpoint::Checkpoint;
use cubicrnn::config::RunConfig;
use cubicrnn::data::SequenceSource;
use cubicrnn::grid::{grid_forward, init_state};
use cubicrnn::optim::Adam;
use cubicrnn::train::{evaluate, train};
use cubicrnn::{encode_decode, CubicGrid, CubicRnn, GridConfig, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

fn small_run() -> RunConfig {
    let text = "\
grid.spatial_layers = 2
grid.output_layers = 2
grid.state_channels = 2
grid.frame_size = 8
grid.context_len = 3
grid.predict_len = 2
data.num_glyphs = 1
data.glyphs = builtin:4
train.batch_size = 2
train.total_iterations = 5
train.val_interval = 5
train.val_count = 3
";
    RunConfig::from_text(text, "inline").unwrap()
}

#[test]
fn trained_model_survives_checkpoint() {
    let cfg = small_run();
    let source = cfg.source().unwrap();
    let mut model = CubicRnn::<f32>::glorot(&cfg.grid, &mut Xoshiro256PlusPlus::seed_from_u64(1)).unwrap();
    let log = train(&mut model, &source, &cfg.train).unwrap();
    assert_eq!(log.len(), 6);

    let adam = Adam::new(&model, cfg.train.adam);
    let bytes = Checkpoint::capture(&cfg, &model, &adam, 5).encode();
    let ck = Checkpoint::decode(&bytes).unwrap();
    let mut restored = CubicRnn::<f32>::zeros(&ck.config().unwrap().grid).unwrap();
    ck.restore_model(&mut restored).unwrap();
    assert_eq!(restored, model);

    let seeds = cfg.train.val_seeds();
    let a = evaluate(&model, &source, seeds.clone()).unwrap();
    let b = evaluate(&restored, &source, seeds).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.mse, log.last().unwrap().loss);
}

#[test]
fn samples_match_configured_lengths() {
    let cfg = small_run();
    let s = SequenceSource::<f64>::sample(&cfg.source().unwrap(), 9).unwrap();
    assert_eq!(s.context().len(), 3);
    assert_eq!(s.target().len(), 2);
    assert!(s.frames.iter().all(|f| f.shape() == cfg.grid.frame_shape()));
}

fn grid_config(j: usize, l: usize, c: usize) -> GridConfig {
    GridConfig {
        output_layers: j,
        spatial_layers: l,
        state_channels: c,
        frame_height: 5,
        frame_width: 4,
        spatial_kernel: 3,
        context_len: l,
        predict_len: 1,
        ..GridConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn predictions_are_probabilities(j in 1usize..3, l in 1usize..4, c in 1usize..4, horizon in 0usize..4, seed in any::<u64>()) {
        let mut cfg = grid_config(j, l, c);
        cfg.context_len = l + 1;
        let mut r = Xoshiro256PlusPlus::seed_from_u64(seed);
        let model = CubicRnn::<f64>::glorot(&cfg, &mut r).unwrap();
        let context: Vec<Tensor<f64>> = (0..cfg.context_len)
            .map(|_| Tensor::random_uniform(cfg.frame_shape(), 0.0, 1.0, &mut r))
            .collect();
        let preds = encode_decode(&model, &context, horizon).unwrap();
        prop_assert_eq!(preds.len(), horizon);
        for p in &preds {
            prop_assert_eq!(p.shape(), cfg.frame_shape());
            prop_assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        prop_assert_eq!(encode_decode(&model, &context, horizon).unwrap(), preds);
    }

    #[test]
    fn spatial_state_wraps_to_row_start(j in 1usize..3, l in 1usize..4, steps in 2usize..5, seed in any::<u64>()) {
        let cfg = grid_config(j, l, 2);
        let mut r = Xoshiro256PlusPlus::seed_from_u64(seed);
        let grid = CubicGrid::<f64>::glorot(&cfg, &mut r).unwrap();
        let frames: Vec<Tensor<f64>> = (0..l + steps)
            .map(|_| Tensor::random_uniform(cfg.frame_shape(), 0.0, 1.0, &mut r))
            .collect();
        let mut state = init_state(&grid);
        let mut prev = None;
        for t in 0..steps {
            let window: Vec<&Tensor<f64>> = frames[t..t + l].iter().collect();
            let (next, _, cache) = grid_forward(&grid, &state, &window, true).unwrap();
            for row in 0..j {
                if let Some(p) = &prev {
                    let p: &cubicrnn::grid::GridStepCache<f64> = p;
                    prop_assert!(cache.cell(row, 0).spatial_in() == p.cell(row, l - 1).spatial_out());
                }
                prop_assert!(next.spatial_carry(row) == cache.cell(row, l - 1).spatial_out());
            }
            state = next;
            prev = Some(cache);
        }
    }
}

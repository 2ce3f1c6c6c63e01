//! Central finite differences and the relative-error metric used to check
//! every hand-written backward pass.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::conv::{conv2d, conv2d_backward, ConvKernel};
use crate::error::Result;
use crate::grid::GridConfig;
use crate::loss::mse_loss;
use crate::model::CubicRnn;
use crate::tensor::{
    concat_channels, elementwise_add, elementwise_add_backward, elementwise_mul, elementwise_mul_backward, sigmoid,
    sigmoid_backward, split_channels, tanh_act, tanh_backward, Shape, Tensor,
};
use crate::units::{
    conv_lstm_backward, conv_lstm_forward, cubic_lstm_backward, cubic_lstm_forward, fc_lstm_backward, fc_lstm_forward,
    CubicCellParams, FcLstmParams, FcLstmState, LstmState,
};
use crate::Real;

/// Default step for [`finite_diff_grad`].
pub const DEFAULT_EPS: f64 = 1e-5;

/// Pass threshold for [`max_relative_error`].
pub const TOLERANCE: f64 = 1e-4;

/// Step for the end-to-end grid check. A loss evaluated through a whole
/// encoder/decoder rollout carries about 1e-15 of round-off, so at 1e-5 the
/// central difference itself is off by ~1e-10; 1e-4 balances round-off
/// against truncation.
pub const GRID_EPS: f64 = 1e-4;

/// Central-difference estimate of `∇f(x)`, one element at a time:
/// `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)`.
pub fn finite_diff_grad<T: Real>(mut f: impl FnMut(&Tensor<T>) -> f64, x: &Tensor<T>, eps: f64) -> Tensor<T> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.data().len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = T::from_f64(orig.as_f64() + eps);
        let plus = f(&probe);
        probe.data_mut()[i] = T::from_f64(orig.as_f64() - eps);
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = T::from_f64((plus - minus) / (2.0 * eps));
    }
    grad
}

/// `max_i |a_i − b_i| / max(|a_i|, |b_i|, 1e-8)`.
pub fn max_relative_error<T: Real>(analytic: &[T], numeric: &[T]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| {
            let (a, b) = (a.as_f64(), b.as_f64());
            (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
        })
        .fold(0.0, f64::max)
}

/// Outcome of one gradient target.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub target: String,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SuiteOptions {
    /// Unit steps only.
    pub quick: bool,
    pub seed: u64,
    /// Corrupt one analytic gradient so the suite must fail.
    pub inject_fault: bool,
}

/// Finite differences over a flat parameter vector.
fn numeric(x0: &[f64], f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    numeric_with(x0, DEFAULT_EPS, f)
}

fn numeric_with(x0: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let x = Tensor::from_vec(Shape::new(1, 1, x0.len()), x0.to_vec()).expect("non-empty probe");
    finite_diff_grad(|t| f(t.data()), &x, eps).into_vec()
}

fn uniform(shape: Shape, r: &mut Xoshiro256PlusPlus) -> Tensor<f64> {
    Tensor::random_uniform(shape, -1.0, 1.0, r)
}

fn random_kernel(kh: usize, ci: usize, co: usize, scale: f64, r: &mut Xoshiro256PlusPlus) -> ConvKernel<f64> {
    let mut k = ConvKernel::zeros(kh, kh, ci, co).expect("valid geometry");
    let (w, b) = k.params_mut();
    for v in w.iter_mut().chain(b.iter_mut()) {
        *v = r.gen_range(-scale..scale);
    }
    k
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn with_data(t: &Tensor<f64>, data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(t.shape(), data.to_vec()).expect("same length")
}

fn with_params(k: &ConvKernel<f64>, w: Option<&[f64]>, b: Option<&[f64]>) -> ConvKernel<f64> {
    let mut k = k.clone();
    if let Some(w) = w {
        k.weights_mut().copy_from_slice(w);
    }
    if let Some(b) = b {
        k.bias_mut().copy_from_slice(b);
    }
    k
}

struct Collector {
    results: Vec<CheckResult>,
}

impl Collector {
    fn add(&mut self, target: &str, analytic: &[f64], numeric: &[f64]) {
        self.results.push(CheckResult {
            target: target.to_string(),
            max_rel_error: max_relative_error(analytic, numeric),
        });
    }
}

fn check_tensor_ops(out: &mut Collector, r: &mut Xoshiro256PlusPlus) -> Result<()> {
    let x = uniform(Shape::new(4, 4, 2), r);
    let k = random_kernel(3, 2, 3, 0.5, r);
    let w_out = uniform(Shape::new(4, 4, 3), r);
    let (dx, dk) = conv2d_backward(&x, &k, &w_out)?;
    let f_x = numeric(x.data(), |v| dot(&conv2d(&with_data(&x, v), &k).unwrap(), &w_out));
    out.add("conv2d.input", dx.data(), &f_x);
    let f_w = numeric(k.weights(), |v| dot(&conv2d(&x, &with_params(&k, Some(v), None)).unwrap(), &w_out));
    out.add("conv2d.weights", dk.weights(), &f_w);
    let f_b = numeric(k.bias(), |v| dot(&conv2d(&x, &with_params(&k, None, Some(v))).unwrap(), &w_out));
    out.add("conv2d.bias", dk.bias(), &f_b);

    let shape = Shape::new(6, 6, 4);
    let x = Tensor::random_uniform(shape, -3.0, 3.0, r);
    let w = uniform(shape, r);
    let d = sigmoid_backward(&sigmoid(&x), &w)?;
    out.add("sigmoid", d.data(), &numeric(x.data(), |v| dot(&sigmoid(&with_data(&x, v)), &w)));
    let d = tanh_backward(&tanh_act(&x), &w)?;
    out.add("tanh", d.data(), &numeric(x.data(), |v| dot(&tanh_act(&with_data(&x, v)), &w)));

    let a = uniform(shape, r);
    let b = uniform(shape, r);
    let (da, db) = elementwise_mul_backward(&a, &b, &w)?;
    out.add("mul.a", da.data(), &numeric(a.data(), |v| dot(&elementwise_mul(&with_data(&a, v), &b).unwrap(), &w)));
    out.add("mul.b", db.data(), &numeric(b.data(), |v| dot(&elementwise_mul(&a, &with_data(&b, v)).unwrap(), &w)));
    let (da, db) = elementwise_add_backward(&w);
    out.add("add.a", da.data(), &numeric(a.data(), |v| dot(&elementwise_add(&with_data(&a, v), &b).unwrap(), &w)));
    out.add("add.b", db.data(), &numeric(b.data(), |v| dot(&elementwise_add(&a, &with_data(&b, v)).unwrap(), &w)));

    let p = uniform(Shape::new(3, 3, 1), r);
    let q = uniform(Shape::new(3, 3, 2), r);
    let wc = uniform(Shape::new(3, 3, 3), r);
    let parts = split_channels(&wc, &[1, 2])?;
    let f_p = numeric(p.data(), |v| dot(&concat_channels(&[&with_data(&p, v), &q]).unwrap(), &wc));
    let f_q = numeric(q.data(), |v| dot(&concat_channels(&[&p, &with_data(&q, v)]).unwrap(), &wc));
    out.add("concat.first", parts[0].data(), &f_p);
    out.add("concat.second", parts[1].data(), &f_q);
    Ok(())
}

fn check_fc_lstm(out: &mut Collector, r: &mut Xoshiro256PlusPlus) -> Result<()> {
    let (d, h) = (3, 4);
    let mut params = FcLstmParams::<f64>::zeros(d, h)?;
    for v in params.weight_mut() {
        *v = r.gen_range(-0.8..0.8);
    }
    for v in params.bias_mut() {
        *v = r.gen_range(-0.8..0.8);
    }
    let vec = |n: usize, r: &mut Xoshiro256PlusPlus| (0..n).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let x = vec(d, r);
    let prev = FcLstmState {
        cell: vec(h, r),
        hidden: vec(h, r),
    };
    let w = FcLstmState {
        cell: vec(h, r),
        hidden: vec(h, r),
    };
    let probe = |s: &FcLstmState<f64>| {
        s.cell.iter().zip(&w.cell).map(|(a, b)| a * b).sum::<f64>()
            + s.hidden.iter().zip(&w.hidden).map(|(a, b)| a * b).sum::<f64>()
    };
    let (_, cache) = fc_lstm_forward(&x, &prev, &params)?;
    let mut grads = params.zeros_like();
    let (dx, dprev) = fc_lstm_backward(&cache, &params, &w, &mut grads)?;
    let run = |x: &[f64], prev: &FcLstmState<f64>, p: &FcLstmParams<f64>| probe(&fc_lstm_forward(x, prev, p).unwrap().0);

    out.add("fc_lstm.x", &dx, &numeric(&x, |v| run(v, &prev, &params)));
    let f_c = numeric(&prev.cell, |v| run(&x, &FcLstmState { cell: v.to_vec(), hidden: prev.hidden.clone() }, &params));
    out.add("fc_lstm.cell", &dprev.cell, &f_c);
    let f_h = numeric(&prev.hidden, |v| run(&x, &FcLstmState { cell: prev.cell.clone(), hidden: v.to_vec() }, &params));
    out.add("fc_lstm.hidden", &dprev.hidden, &f_h);
    let f_w = numeric(params.weight(), |v| {
        let mut p = params.clone();
        p.weight_mut().copy_from_slice(v);
        run(&x, &prev, &p)
    });
    out.add("fc_lstm.weights", grads.weight(), &f_w);
    let f_b = numeric(params.bias(), |v| {
        let mut p = params.clone();
        p.bias_mut().copy_from_slice(v);
        run(&x, &prev, &p)
    });
    out.add("fc_lstm.bias", grads.bias(), &f_b);
    Ok(())
}

fn random_state(shape: Shape, r: &mut Xoshiro256PlusPlus) -> LstmState<f64> {
    LstmState {
        cell: uniform(shape, r),
        hidden: uniform(shape, r),
    }
}

fn state_dot(s: &LstmState<f64>, w: &LstmState<f64>) -> f64 {
    dot(&s.cell, &w.cell) + dot(&s.hidden, &w.hidden)
}

fn check_conv_lstm(out: &mut Collector, r: &mut Xoshiro256PlusPlus) -> Result<()> {
    let c = 3;
    let x = uniform(Shape::new(5, 5, 2), r);
    let prev = random_state(Shape::new(5, 5, c), r);
    let k = random_kernel(3, 2 + c, 4 * c, 0.5, r);
    let w = random_state(Shape::new(5, 5, c), r);
    let (_, cache) = conv_lstm_forward(&x, &prev, &k)?;
    let mut gk = k.zeros_like();
    let (dx, dprev) = conv_lstm_backward(&cache, &k, &w, &mut gk)?;
    let run = |x: &Tensor<f64>, prev: &LstmState<f64>, k: &ConvKernel<f64>| state_dot(&conv_lstm_forward(x, prev, k).unwrap().0, &w);

    out.add("conv_lstm.x", dx.data(), &numeric(x.data(), |v| run(&with_data(&x, v), &prev, &k)));
    let f_c = numeric(prev.cell.data(), |v| {
        run(&x, &LstmState { cell: with_data(&prev.cell, v), hidden: prev.hidden.clone() }, &k)
    });
    out.add("conv_lstm.cell", dprev.cell.data(), &f_c);
    let f_h = numeric(prev.hidden.data(), |v| {
        run(&x, &LstmState { cell: prev.cell.clone(), hidden: with_data(&prev.hidden, v) }, &k)
    });
    out.add("conv_lstm.hidden", dprev.hidden.data(), &f_h);
    out.add("conv_lstm.weights", gk.weights(), &numeric(k.weights(), |v| run(&x, &prev, &with_params(&k, Some(v), None))));
    out.add("conv_lstm.bias", gk.bias(), &numeric(k.bias(), |v| run(&x, &prev, &with_params(&k, None, Some(v)))));
    Ok(())
}

fn check_cubic_lstm(out: &mut Collector, r: &mut Xoshiro256PlusPlus, inject_fault: bool) -> Result<()> {
    let (c, cx) = (2, 2);
    let shape = Shape::new(6, 6, c);
    let x = uniform(shape.with_channels(cx), r);
    let t_prev = random_state(shape, r);
    let s_prev = random_state(shape, r);
    let params = CubicCellParams {
        temporal: random_kernel(1, cx + 2 * c, 4 * c, 0.6, r),
        spatial: random_kernel(5, cx + 2 * c, 4 * c, 0.3, r),
        output: random_kernel(1, 2 * c, 3, 0.6, r),
    };
    let w_t = random_state(shape, r);
    let w_s = random_state(shape, r);
    let w_y = uniform(shape.with_channels(3), r);
    let (_, cache) = cubic_lstm_forward(&x, &t_prev, &s_prev, &params, true)?;
    let mut grads = params.zeros_like();
    let d = cubic_lstm_backward(&cache, &params, &w_t, &w_s, Some(&w_y), &mut grads)?;
    if inject_fault {
        for g in grads.temporal.weights_mut() {
            *g *= 1.001;
        }
    }
    let run = |x: &Tensor<f64>, t: &LstmState<f64>, s: &LstmState<f64>, p: &CubicCellParams<f64>| {
        let (o, _) = cubic_lstm_forward(x, t, s, p, true).unwrap();
        state_dot(&o.temporal, &w_t) + state_dot(&o.spatial, &w_s) + dot(o.y.as_ref().unwrap(), &w_y)
    };

    out.add("cubic_lstm.x", d.x.data(), &numeric(x.data(), |v| run(&with_data(&x, v), &t_prev, &s_prev, &params)));
    let states: [(&str, &LstmState<f64>, &LstmState<f64>, bool); 2] =
        [("temporal", &t_prev, &d.temporal_prev, true), ("spatial", &s_prev, &d.spatial_prev, false)];
    for (name, base, grad, is_temporal) in states {
        for (part, analytic) in [("cell", &grad.cell), ("hidden", &grad.hidden)] {
            let src = if part == "cell" { &base.cell } else { &base.hidden };
            let f = numeric(src.data(), |v| {
                let mut s = base.clone();
                let t = if part == "cell" { &mut s.cell } else { &mut s.hidden };
                *t = with_data(src, v);
                if is_temporal {
                    run(&x, &s, &s_prev, &params)
                } else {
                    run(&x, &t_prev, &s, &params)
                }
            });
            out.add(&format!("cubic_lstm.{name}_state.{part}"), analytic.data(), &f);
        }
    }
    for idx in 0..3 {
        let (name, k) = params.kernels()[idx];
        let (_, gk) = grads.kernels()[idx];
        let f_w = numeric(k.weights(), |v| {
            let mut p = params.clone();
            p.kernels_mut()[idx].1.weights_mut().copy_from_slice(v);
            run(&x, &t_prev, &s_prev, &p)
        });
        out.add(&format!("cubic_lstm.{name}_kernel.weights"), gk.weights(), &f_w);
        let f_b = numeric(k.bias(), |v| {
            let mut p = params.clone();
            p.kernels_mut()[idx].1.bias_mut().copy_from_slice(v);
            run(&x, &t_prev, &s_prev, &p)
        });
        out.add(&format!("cubic_lstm.{name}_kernel.bias"), gk.bias(), &f_b);
    }
    Ok(())
}

/// Configuration of the end-to-end grid check: one output layer, two
/// spatial layers, two state channels, 6×6 frames; one encoder step and
/// two closed-loop decoder steps.
pub fn end_to_end_config() -> GridConfig {
    GridConfig {
        spatial_layers: 2,
        output_layers: 1,
        state_channels: 2,
        frame_height: 6,
        frame_width: 6,
        frame_channels: 1,
        context_len: 2,
        predict_len: 2,
        ..GridConfig::default()
    }
}

fn check_grid(out: &mut Collector, r: &mut Xoshiro256PlusPlus) -> Result<()> {
    let cfg = end_to_end_config();
    let mut model = CubicRnn::<f64>::zeros(&cfg)?;
    for (name, k) in model.named_kernels_mut() {
        let scale = if name.ends_with("spatial") { 0.3 } else { 0.6 };
        let (w, b) = k.params_mut();
        for v in w.iter_mut().chain(b.iter_mut()) {
            *v = r.gen_range(-scale..scale);
        }
    }
    let frame = cfg.frame_shape();
    let context: Vec<_> = (0..cfg.context_len).map(|_| Tensor::random_uniform(frame, 0.0, 1.0, r)).collect();
    let target: Vec<_> = (0..cfg.predict_len).map(|_| Tensor::random_uniform(frame, 0.0, 1.0, r)).collect();
    let loss = |m: &CubicRnn<f64>| mse_loss(&m.forward(&context, cfg.predict_len).unwrap().predictions, &target).unwrap().0;

    let trace = model.forward(&context, cfg.predict_len)?;
    let (_, d_pred) = mse_loss(&trace.predictions, &target)?;
    let grads = model.backward(&trace, &d_pred)?;
    let names: Vec<String> = model.named_kernels().into_iter().map(|(n, _)| n).collect();
    for (idx, name) in names.iter().enumerate() {
        let (_, k) = &model.named_kernels()[idx];
        let (_, gk) = &grads.named_kernels()[idx];
        // The top row's output branch never reaches the loss.
        if name.ends_with(".output") && gk.weights().iter().chain(gk.bias()).all(|&v| v == 0.0) {
            continue;
        }
        let f_w = numeric_with(k.weights(), GRID_EPS, |v| {
            let mut m = model.clone();
            m.named_kernels_mut()[idx].1.weights_mut().copy_from_slice(v);
            loss(&m)
        });
        out.add(&format!("grid.{name}.weights"), gk.weights(), &f_w);
        let f_b = numeric_with(k.bias(), GRID_EPS, |v| {
            let mut m = model.clone();
            m.named_kernels_mut()[idx].1.bias_mut().copy_from_slice(v);
            loss(&m)
        });
        out.add(&format!("grid.{name}.bias"), gk.bias(), &f_b);
    }
    Ok(())
}

/// Run every finite-difference check in 64-bit and report the worst
/// relative error per target.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CheckResult>> {
    let mut r = Xoshiro256PlusPlus::seed_from_u64(opts.seed);
    let mut out = Collector { results: Vec::new() };
    if !opts.quick {
        check_tensor_ops(&mut out, &mut r)?;
    }
    check_fc_lstm(&mut out, &mut r)?;
    check_conv_lstm(&mut out, &mut r)?;
    check_cubic_lstm(&mut out, &mut r, opts.inject_fault)?;
    if !opts.quick {
        check_grid(&mut out, &mut r)?;
    }
    Ok(out.results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{sigmoid, Shape};
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    #[test]
    fn linear_function_has_unit_gradient() {
        let mut r = Xoshiro256PlusPlus::seed_from_u64(1);
        let x = Tensor::<f64>::random_uniform(Shape::new(2, 3, 2), -1.0, 1.0, &mut r);
        let g = finite_diff_grad(|t| t.sum(), &x, DEFAULT_EPS);
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn half_squared_norm_has_identity_gradient() {
        let mut r = Xoshiro256PlusPlus::seed_from_u64(2);
        let x = Tensor::<f64>::random_uniform(Shape::new(3, 3, 1), -2.0, 2.0, &mut r);
        let g = finite_diff_grad(|t| 0.5 * t.data().iter().map(|v| v * v).sum::<f64>(), &x, DEFAULT_EPS);
        assert!(g.max_abs_diff(&x) < 1e-8);
    }

    #[test]
    fn sigmoid_sum_at_zero() {
        let x = Tensor::<f64>::zeros(Shape::new(2, 2, 2));
        let g = finite_diff_grad(|t| sigmoid(t).sum(), &x, DEFAULT_EPS);
        assert!(g.data().iter().all(|&v| (v - 0.25).abs() < 1e-9));
    }

    #[test]
    fn quick_suite_passes_and_covers_cubic() {
        let res = run_suite(&SuiteOptions { quick: true, ..Default::default() }).unwrap();
        for r in &res {
            assert!(r.passed(), "{}: {:e}", r.target, r.max_rel_error);
        }
        assert!(res.iter().any(|r| r.target == "cubic_lstm.spatial_kernel.weights"));
        assert!(!res.iter().any(|r| r.target.starts_with("grid.") || r.target.starts_with("conv2d")));
    }

    #[test]
    fn injected_fault_is_caught() {
        let res = run_suite(&SuiteOptions { quick: true, inject_fault: true, ..Default::default() }).unwrap();
        let bad: Vec<_> = res.iter().filter(|r| !r.passed()).collect();
        assert_eq!(bad.len(), 1);
        assert_eq!(bad[0].target, "cubic_lstm.temporal_kernel.weights");
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(max_relative_error(&[0.0f64], &[0.0]), 0.0);
        assert!((max_relative_error(&[1.0f64], &[1.1]) - 0.1 / 1.1).abs() < 1e-15);
        assert!((max_relative_error(&[0.0f64], &[1e-12]) - 1e-4).abs() < 1e-12);
    }
}

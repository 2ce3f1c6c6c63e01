//! Per-frame losses: summed over the pixels of a frame, averaged over
//! frames. Values are accumulated in `f64` regardless of `T`.

use crate::error::{usage_err, Error, Result};
use crate::tensor::Tensor;
use crate::Real;

/// Neumaier-compensated running sum.
#[derive(Default)]
struct Accumulator {
    sum: f64,
    carry: f64,
}

impl Accumulator {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

fn check_pairs<T: Real>(pred: &[Tensor<T>], target: &[Tensor<T>]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(usage_err(format!("{} predicted frames vs {} targets", pred.len(), target.len())));
    }
    if pred.is_empty() {
        return Err(usage_err("loss over an empty frame list"));
    }
    for (p, t) in pred.iter().zip(target) {
        if p.shape() != t.shape() {
            return Err(usage_err(format!("prediction {} vs target {}", p.shape(), t.shape())));
        }
    }
    Ok(())
}

/// Mean over frames of each frame's summed squared error, with gradient
/// `2·(p − y)/F`.
pub fn mse_loss<T: Real>(pred: &[Tensor<T>], target: &[Tensor<T>]) -> Result<(f64, Vec<Tensor<T>>)> {
    check_pairs(pred, target)?;
    let frames = pred.len() as f64;
    let mut total = Accumulator::default();
    let mut grads = Vec::with_capacity(pred.len());
    for (p, y) in pred.iter().zip(target) {
        let mut g = p.clone();
        for (gv, (&pv, &yv)) in g.data_mut().iter_mut().zip(p.data().iter().zip(y.data())) {
            let diff = pv.as_f64() - yv.as_f64();
            total.add(diff * diff);
            *gv = T::from_f64(2.0 * diff / frames);
        }
        grads.push(g);
    }
    Ok((total.value() / frames, grads))
}

/// Mean over frames of each frame's summed binary cross-entropy, with
/// gradient `(p − y)/(p·(1 − p))/F`. Predictions must lie strictly inside
/// `(0, 1)`.
pub fn bce_loss<T: Real>(pred: &[Tensor<T>], target: &[Tensor<T>]) -> Result<(f64, Vec<Tensor<T>>)> {
    check_pairs(pred, target)?;
    let frames = pred.len() as f64;
    let mut total = Accumulator::default();
    let mut grads = Vec::with_capacity(pred.len());
    for (p, y) in pred.iter().zip(target) {
        let mut g = p.clone();
        for (gv, (&pv, &yv)) in g.data_mut().iter_mut().zip(p.data().iter().zip(y.data())) {
            let (pv, yv) = (pv.as_f64(), yv.as_f64());
            if !(pv > 0.0 && pv < 1.0) {
                return Err(Error::Numeric(format!("BCE needs predictions in (0, 1), got {pv}")));
            }
            total.add(-(yv * pv.ln() + (1.0 - yv) * (1.0 - pv).ln()));
            *gv = T::from_f64((pv - yv) / (pv * (1.0 - pv)) / frames);
        }
        grads.push(g);
    }
    Ok((total.value() / frames, grads))
}

/// Per-frame MSE and BCE of each predicted frame separately.
pub fn per_step_losses<T: Real>(pred: &[Tensor<T>], target: &[Tensor<T>]) -> Result<Vec<(f64, f64)>> {
    check_pairs(pred, target)?;
    pred.iter()
        .zip(target)
        .map(|(p, y)| {
            let (p, y) = (std::slice::from_ref(p), std::slice::from_ref(y));
            Ok((mse_loss(p, y)?.0, bce_loss(p, y)?.0))
        })
        .collect()
}

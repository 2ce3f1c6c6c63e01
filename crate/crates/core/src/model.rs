//! Encoder/decoder wrapper around two grids.
//!
//! The encoder steps over every full window of the context without
//! emitting frames. The decoder starts from the encoder's final state and
//! predicts one frame per step; its window always holds the `L` most recent
//! frames, with its own predictions standing in once the context runs out.

use rand::Rng;

use crate::conv::ConvKernel;
use crate::error::{usage_err, Result};
use crate::grid::{grid_backward, grid_forward, init_state, CubicGrid, GridConfig, GridState, GridStepCache, StateGrad};
use crate::tensor::Tensor;
use crate::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct CubicRnn<T> {
    config: GridConfig,
    encoder: CubicGrid<T>,
    /// `None` when encoder and decoder share one parameter set.
    decoder: Option<CubicGrid<T>>,
}

/// Forward residue of [`CubicRnn::forward`], consumed by
/// [`CubicRnn::backward`].
#[derive(Clone, Debug)]
pub struct SequenceTrace<T> {
    context_len: usize,
    encoder_steps: Vec<GridStepCache<T>>,
    decoder_steps: Vec<GridStepCache<T>>,
    pub predictions: Vec<Tensor<T>>,
    /// State after the first decoder step, kept for inspection.
    pub first_decoder_state: Option<GridState<T>>,
}

impl<T: Real> CubicRnn<T> {
    pub fn zeros(config: &GridConfig) -> Result<Self> {
        let encoder = CubicGrid::zeros(config)?;
        let decoder = (!config.share_encoder_decoder).then(|| encoder.clone());
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
        })
    }

    /// Glorot initialisation, encoder first.
    pub fn glorot<R: Rng + ?Sized>(config: &GridConfig, rng: &mut R) -> Result<Self> {
        let encoder = CubicGrid::glorot(config, rng)?;
        let decoder = if config.share_encoder_decoder {
            None
        } else {
            Some(CubicGrid::glorot(config, rng)?)
        };
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn encoder(&self) -> &CubicGrid<T> {
        &self.encoder
    }

    pub fn decoder(&self) -> &CubicGrid<T> {
        self.decoder.as_ref().unwrap_or(&self.encoder)
    }

    pub fn encoder_mut(&mut self) -> &mut CubicGrid<T> {
        &mut self.encoder
    }

    pub fn decoder_mut(&mut self) -> &mut CubicGrid<T> {
        self.decoder.as_mut().unwrap_or(&mut self.encoder)
    }

    pub fn is_shared(&self) -> bool {
        self.decoder.is_none()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.as_ref().map(CubicGrid::zeros_like),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.encoder.add_assign(&other.encoder);
        if let (Some(a), Some(b)) = (&mut self.decoder, &other.decoder) {
            a.add_assign(b);
        }
    }

    /// Every kernel, prefixed `encoder.` / `decoder.` (or `shared.`).
    pub fn named_kernels(&self) -> Vec<(String, &ConvKernel<T>)> {
        match &self.decoder {
            None => prefixed("shared", self.encoder.named_kernels()),
            Some(d) => {
                let mut v = prefixed("encoder", self.encoder.named_kernels());
                v.extend(prefixed("decoder", d.named_kernels()));
                v
            }
        }
    }

    pub fn named_kernels_mut(&mut self) -> Vec<(String, &mut ConvKernel<T>)> {
        match &mut self.decoder {
            None => prefixed("shared", self.encoder.named_kernels_mut()),
            Some(d) => {
                let mut v = prefixed("encoder", self.encoder.named_kernels_mut());
                v.extend(prefixed("decoder", d.named_kernels_mut()));
                v
            }
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.named_kernels().iter().map(|(_, k)| k.weights().len() + k.bias().len()).sum()
    }

    fn check_context(&self, context: &[Tensor<T>]) -> Result<()> {
        let l = self.config.spatial_layers;
        if context.len() < l {
            return Err(usage_err(format!(
                "context holds {} frames, the grid needs at least {l}",
                context.len()
            )));
        }
        let shape = self.config.frame_shape();
        if let Some(f) = context.iter().find(|f| f.shape() != shape) {
            return Err(usage_err(format!("context frame is {}, expected {shape}", f.shape())));
        }
        Ok(())
    }

    /// Run the encoder over the context and return its final state.
    pub fn encode(&self, context: &[Tensor<T>]) -> Result<GridState<T>> {
        self.check_context(context)?;
        let l = self.config.spatial_layers;
        let mut state = init_state(&self.encoder);
        for t in l..=context.len() {
            let window: Vec<&Tensor<T>> = context[t - l..t].iter().collect();
            state = grid_forward(&self.encoder, &state, &window, false)?.0;
        }
        Ok(state)
    }

    /// Encode `context`, then predict `horizon` frames closed-loop.
    pub fn forward(&self, context: &[Tensor<T>], horizon: usize) -> Result<SequenceTrace<T>> {
        self.check_context(context)?;
        let l = self.config.spatial_layers;
        let n = context.len();
        let mut trace = SequenceTrace {
            context_len: n,
            encoder_steps: Vec::with_capacity(n + 1 - l),
            decoder_steps: Vec::with_capacity(horizon),
            predictions: Vec::with_capacity(horizon),
            first_decoder_state: None,
        };
        if horizon == 0 {
            return Ok(trace);
        }
        let mut state = init_state(&self.encoder);
        for t in l..=n {
            let window: Vec<&Tensor<T>> = context[t - l..t].iter().collect();
            let (next, _, cache) = grid_forward(&self.encoder, &state, &window, false)?;
            trace.encoder_steps.push(cache);
            state = next;
        }
        let decoder = self.decoder();
        for k in 0..horizon {
            let window: Vec<&Tensor<T>> = (n + k - l..n + k)
                .map(|s| if s < n { &context[s] } else { &trace.predictions[s - n] })
                .collect();
            let (next, pred, cache) = grid_forward(decoder, &state, &window, true)?;
            trace.decoder_steps.push(cache);
            trace.predictions.push(pred.expect("decoder runs the head"));
            if k == 0 {
                trace.first_decoder_state = Some(next.clone());
            }
            state = next;
        }
        Ok(trace)
    }

    /// Full backpropagation through time, including through predictions fed
    /// back into later decoder windows. `d_predictions[k]` is the loss
    /// cotangent on the `k`-th predicted frame. Gradients on context frames
    /// are discarded.
    pub fn backward(&self, trace: &SequenceTrace<T>, d_predictions: &[Tensor<T>]) -> Result<Self> {
        if d_predictions.len() != trace.predictions.len() {
            return Err(usage_err(format!(
                "{} prediction cotangents for {} predictions",
                d_predictions.len(),
                trace.predictions.len()
            )));
        }
        let mut grads = self.zeros_like();
        if trace.predictions.is_empty() {
            return Ok(grads);
        }
        let l = self.config.spatial_layers;
        let n = trace.context_len;
        let mut d_pred: Vec<Tensor<T>> = d_predictions.to_vec();
        let mut d_state = StateGrad::zeros(&self.encoder);

        let decoder = self.decoder();
        for k in (0..trace.decoder_steps.len()).rev() {
            let dec_grads = grads.decoder_mut();
            let (d_prev, d_window) = grid_backward(decoder, &trace.decoder_steps[k], &d_state, Some(&d_pred[k]), dec_grads)?;
            for (pos, d) in d_window.iter().enumerate() {
                let s = n + k - l + pos;
                if s >= n {
                    d_pred[s - n].add_assign(d)?;
                }
            }
            d_state = d_prev;
        }
        for cache in trace.encoder_steps.iter().rev() {
            d_state = grid_backward(&self.encoder, cache, &d_state, None, &mut grads.encoder)?.0;
        }
        Ok(grads)
    }
}

fn prefixed<K>(prefix: &str, v: Vec<(String, K)>) -> Vec<(String, K)> {
    v.into_iter().map(|(name, k)| (format!("{prefix}.{name}"), k)).collect()
}

/// Predict `horizon` frames after `context`.
pub fn encode_decode<T: Real>(model: &CubicRnn<T>, context: &[Tensor<T>], horizon: usize) -> Result<Vec<Tensor<T>>> {
    Ok(model.forward(context, horizon)?.predictions)
}

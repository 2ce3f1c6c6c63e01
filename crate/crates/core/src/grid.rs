//! The CubicRNN grid: `J` output layers by `L` spatial layers of CubicLSTM
//! cells, stepped along time.
//!
//! Per step, row 0 sees the `L` most recent frames (one per spatial layer,
//! oldest first) and every higher row sees the `𝒴` outputs of the row
//! below. Inside a row the spatial state flows left to right; the state
//! leaving the last spatial layer re-enters the first one at the next step.
//! Temporal states stay with their cell. The frame head reads both hidden
//! states of the last cell of the top row.

use rand::Rng;

use crate::conv::{conv2d, conv2d_backward_accumulate, ConvKernel};
use crate::data::pgm::GrayImage;
use crate::error::{config_err, usage_err, Result};
use crate::tensor::{sigmoid, split_channels, Shape, Tensor};
use crate::units::{cubic_lstm_backward, cubic_lstm_forward, CubicCache, CubicCellParams, LstmState, SpatialState, TemporalState};
use crate::Real;

/// Grid topology, frame geometry and sequence split.
#[derive(Clone, Debug, PartialEq)]
pub struct GridConfig {
    /// `L`, the sliding-window length.
    pub spatial_layers: usize,
    /// `J`.
    pub output_layers: usize,
    pub state_channels: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub frame_channels: usize,
    pub temporal_kernel: usize,
    pub spatial_kernel: usize,
    pub context_len: usize,
    pub predict_len: usize,
    /// Initial bias of both forget-gate blocks.
    pub forget_bias: f64,
    /// Use one parameter set for encoder and decoder.
    pub share_encoder_decoder: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            spatial_layers: 3,
            output_layers: 1,
            state_channels: 32,
            frame_height: 64,
            frame_width: 64,
            frame_channels: 1,
            temporal_kernel: 1,
            spatial_kernel: 5,
            context_len: 10,
            predict_len: 10,
            forget_bias: 0.0,
            share_encoder_decoder: false,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("spatial_layers", self.spatial_layers),
            ("output_layers", self.output_layers),
            ("state_channels", self.state_channels),
            ("frame_height", self.frame_height),
            ("frame_width", self.frame_width),
            ("frame_channels", self.frame_channels),
            ("context_len", self.context_len),
            ("predict_len", self.predict_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(config_err(format!("{name} must be positive")));
            }
        }
        for (name, k) in [("temporal_kernel", self.temporal_kernel), ("spatial_kernel", self.spatial_kernel)] {
            if k % 2 == 0 {
                return Err(config_err(format!("{name} must be odd, got {k}")));
            }
        }
        if self.context_len < self.spatial_layers {
            return Err(config_err(format!(
                "context_len ({}) must be at least spatial_layers ({})",
                self.context_len, self.spatial_layers
            )));
        }
        if !self.forget_bias.is_finite() {
            return Err(config_err("forget_bias must be finite"));
        }
        Ok(())
    }

    pub fn frame_shape(&self) -> Shape {
        Shape::new(self.frame_height, self.frame_width, self.frame_channels)
    }

    pub fn state_shape(&self) -> Shape {
        Shape::new(self.frame_height, self.frame_width, self.state_channels)
    }
}

/// One parameter set for the whole grid. Cells are reused at every time
/// step and never shared between grid positions.
#[derive(Clone, Debug, PartialEq)]
pub struct CubicGrid<T> {
    spatial_layers: usize,
    output_layers: usize,
    state_shape: Shape,
    frame_channels: usize,
    cells: Vec<CubicCellParams<T>>,
    frame_head: ConvKernel<T>,
}

impl<T: Real> CubicGrid<T> {
    pub fn zeros(config: &GridConfig) -> Result<Self> {
        config.validate()?;
        let c = config.state_channels;
        let cells = cell_inputs(config)
            .map(|cx| CubicCellParams::zeros(cx, c, c, config.temporal_kernel, config.spatial_kernel))
            .collect::<Result<_>>()?;
        let head = ConvKernel::zeros(1, 1, 2 * c, config.frame_channels)?;
        Ok(Self::assemble(config, cells, head))
    }

    /// Glorot-uniform kernels drawn cell by cell in row-major order, then
    /// the head.
    pub fn glorot<R: Rng + ?Sized>(config: &GridConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.state_channels;
        let mut cells = Vec::new();
        for cx in cell_inputs(config) {
            cells.push(CubicCellParams::glorot(
                cx,
                c,
                c,
                config.temporal_kernel,
                config.spatial_kernel,
                config.forget_bias,
                rng,
            )?);
        }
        let head = ConvKernel::glorot(1, 1, 2 * c, config.frame_channels, rng)?;
        Ok(Self::assemble(config, cells, head))
    }

    fn assemble(config: &GridConfig, cells: Vec<CubicCellParams<T>>, frame_head: ConvKernel<T>) -> Self {
        Self {
            spatial_layers: config.spatial_layers,
            output_layers: config.output_layers,
            state_shape: config.state_shape(),
            frame_channels: config.frame_channels,
            cells,
            frame_head,
        }
    }

    pub fn spatial_layers(&self) -> usize {
        self.spatial_layers
    }

    pub fn output_layers(&self) -> usize {
        self.output_layers
    }

    pub fn state_shape(&self) -> Shape {
        self.state_shape
    }

    pub fn frame_shape(&self) -> Shape {
        self.state_shape.with_channels(self.frame_channels)
    }

    fn index(&self, j: usize, l: usize) -> Result<usize> {
        if j >= self.output_layers || l >= self.spatial_layers {
            return Err(usage_err(format!(
                "cell ({j},{l}) outside a {}x{} grid",
                self.output_layers, self.spatial_layers
            )));
        }
        Ok(j * self.spatial_layers + l)
    }

    pub fn cell(&self, j: usize, l: usize) -> Result<&CubicCellParams<T>> {
        self.index(j, l).map(|i| &self.cells[i])
    }

    pub fn cell_mut(&mut self, j: usize, l: usize) -> Result<&mut CubicCellParams<T>> {
        let i = self.index(j, l)?;
        Ok(&mut self.cells[i])
    }

    pub fn frame_head(&self) -> &ConvKernel<T> {
        &self.frame_head
    }

    pub fn frame_head_mut(&mut self) -> &mut ConvKernel<T> {
        &mut self.frame_head
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            cells: self.cells.iter().map(CubicCellParams::zeros_like).collect(),
            frame_head: self.frame_head.zeros_like(),
            ..*self
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            a.add_assign(b);
        }
        self.frame_head.add_assign(&other.frame_head);
    }

    /// Every kernel with a stable dotted name (`cell.J.L.branch`, `head`).
    pub fn named_kernels(&self) -> Vec<(String, &ConvKernel<T>)> {
        let mut out = Vec::with_capacity(self.cells.len() * 3 + 1);
        for (i, cell) in self.cells.iter().enumerate() {
            let (j, l) = (i / self.spatial_layers, i % self.spatial_layers);
            for (branch, k) in cell.kernels() {
                out.push((format!("cell.{j}.{l}.{branch}"), k));
            }
        }
        out.push(("head".to_string(), &self.frame_head));
        out
    }

    pub fn named_kernels_mut(&mut self) -> Vec<(String, &mut ConvKernel<T>)> {
        let spatial_layers = self.spatial_layers;
        let mut out = Vec::with_capacity(self.cells.len() * 3 + 1);
        for (i, cell) in self.cells.iter_mut().enumerate() {
            let (j, l) = (i / spatial_layers, i % spatial_layers);
            for (branch, k) in cell.kernels_mut() {
                out.push((format!("cell.{j}.{l}.{branch}"), k));
            }
        }
        out.push(("head".to_string(), &mut self.frame_head));
        out
    }
}

/// Input channel count of each cell, row-major: frames feed row 0, the
/// `𝒴` outputs of the row below feed every other row.
fn cell_inputs(config: &GridConfig) -> impl Iterator<Item = usize> + '_ {
    (0..config.output_layers).flat_map(move |j| {
        let cx = if j == 0 { config.frame_channels } else { config.state_channels };
        std::iter::repeat_n(cx, config.spatial_layers)
    })
}

/// Recurrent state of a grid between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct GridState<T> {
    spatial_layers: usize,
    /// `J × L`, row-major.
    temporal: Vec<TemporalState<T>>,
    /// Per-row spatial state handed from the last spatial layer of one step
    /// to the first spatial layer of the next.
    spatial_carry: Vec<SpatialState<T>>,
    /// Spatial states emitted by every cell at the latest step. Read-only
    /// snapshot for inspection; the recurrence only consumes the carry.
    spatial_latest: Vec<SpatialState<T>>,
}

impl<T: Real> GridState<T> {
    pub fn output_layers(&self) -> usize {
        self.spatial_carry.len()
    }

    pub fn spatial_layers(&self) -> usize {
        self.spatial_layers
    }

    pub fn temporal(&self, j: usize, l: usize) -> &TemporalState<T> {
        &self.temporal[j * self.spatial_layers + l]
    }

    pub fn spatial_carry(&self, j: usize) -> &SpatialState<T> {
        &self.spatial_carry[j]
    }

    /// Spatial state most recently emitted by cell `(j, l)`.
    pub fn spatial_latest(&self, j: usize, l: usize) -> &SpatialState<T> {
        &self.spatial_latest[j * self.spatial_layers + l]
    }

    pub fn check_against(&self, grid: &CubicGrid<T>) -> Result<()> {
        if self.spatial_layers != grid.spatial_layers
            || self.spatial_carry.len() != grid.output_layers
            || self.temporal.len() != grid.cells.len()
            || self.spatial_latest.len() != grid.cells.len()
        {
            return Err(usage_err("grid state was not initialised for this grid"));
        }
        let shape = grid.state_shape;
        let all = self.temporal.iter().chain(&self.spatial_carry).chain(&self.spatial_latest);
        if all.into_iter().any(|s| s.cell.shape() != shape || s.hidden.shape() != shape) {
            return Err(usage_err(format!("grid state tensors must all be {shape}")));
        }
        Ok(())
    }
}

/// All-zero cell and hidden states shaped for `grid`.
pub fn init_state<T: Real>(grid: &CubicGrid<T>) -> GridState<T> {
    let zero = LstmState::zeros(grid.state_shape);
    GridState {
        spatial_layers: grid.spatial_layers,
        temporal: vec![zero.clone(); grid.cells.len()],
        spatial_carry: vec![zero.clone(); grid.output_layers],
        spatial_latest: vec![zero; grid.cells.len()],
    }
}

/// Cotangents flowing into a [`GridState`]: only the parts a later step
/// actually reads.
#[derive(Clone, Debug)]
pub struct StateGrad<T> {
    pub temporal: Vec<TemporalState<T>>,
    pub spatial_carry: Vec<SpatialState<T>>,
}

impl<T: Real> StateGrad<T> {
    pub fn zeros(grid: &CubicGrid<T>) -> Self {
        let zero = LstmState::zeros(grid.state_shape);
        Self {
            temporal: vec![zero.clone(); grid.cells.len()],
            spatial_carry: vec![zero; grid.output_layers],
        }
    }
}

/// Forward residue of one [`grid_step`].
#[derive(Clone, Debug)]
pub struct GridStepCache<T> {
    spatial_layers: usize,
    cells: Vec<CubicCache<T>>,
    /// Address of the parameter block each cell evaluated with.
    param_ids: Vec<usize>,
    prediction: Option<Tensor<T>>,
}

impl<T: Real> GridStepCache<T> {
    pub fn cell(&self, j: usize, l: usize) -> &CubicCache<T> {
        &self.cells[j * self.spatial_layers + l]
    }

    /// Identity of the parameter block used by cell `(j, l)` in this step.
    pub fn param_id(&self, j: usize, l: usize) -> usize {
        self.param_ids[j * self.spatial_layers + l]
    }

    pub fn prediction(&self) -> Option<&Tensor<T>> {
        self.prediction.as_ref()
    }
}

fn check_window<T: Real>(grid: &CubicGrid<T>, window: &[&Tensor<T>]) -> Result<()> {
    if window.len() != grid.spatial_layers {
        return Err(usage_err(format!(
            "window holds {} frames, grid has {} spatial layers",
            window.len(),
            grid.spatial_layers
        )));
    }
    let shape = grid.frame_shape();
    if let Some(f) = window.iter().find(|f| f.shape() != shape) {
        return Err(usage_err(format!("window frame is {}, expected {shape}", f.shape())));
    }
    Ok(())
}

/// One grid step with cache. `with_head = false` skips the frame head (the
/// encoder never reads its predictions).
pub fn grid_forward<T: Real>(
    grid: &CubicGrid<T>,
    state: &GridState<T>,
    window: &[&Tensor<T>],
    with_head: bool,
) -> Result<(GridState<T>, Option<Tensor<T>>, GridStepCache<T>)> {
    check_window(grid, window)?;
    state.check_against(grid)?;
    let (rows, cols) = (grid.output_layers, grid.spatial_layers);
    let mut temporal = Vec::with_capacity(rows * cols);
    let mut spatial_latest = Vec::with_capacity(rows * cols);
    let mut carry = Vec::with_capacity(rows);
    let mut caches = Vec::with_capacity(rows * cols);
    let mut param_ids = Vec::with_capacity(rows * cols);
    let mut below: Vec<Tensor<T>> = Vec::new();

    for j in 0..rows {
        let needs_y = j + 1 < rows;
        let mut spatial = state.spatial_carry[j].clone();
        let mut row_y = Vec::with_capacity(cols);
        for l in 0..cols {
            let i = j * cols + l;
            let params = &grid.cells[i];
            let x = if j == 0 { window[l] } else { &below[l] };
            let (out, cache) = cubic_lstm_forward(x, &state.temporal[i], &spatial, params, needs_y)?;
            temporal.push(out.temporal);
            spatial_latest.push(out.spatial.clone());
            spatial = out.spatial;
            if let Some(y) = out.y {
                row_y.push(y);
            }
            caches.push(cache);
            param_ids.push(params as *const CubicCellParams<T> as usize);
        }
        carry.push(spatial);
        below = row_y;
    }

    let prediction = if with_head {
        let last = caches.last().expect("grid has at least one cell");
        Some(sigmoid(&conv2d(last.joined_hidden(), &grid.frame_head)?))
    } else {
        None
    };
    let next = GridState {
        spatial_layers: cols,
        temporal,
        spatial_carry: carry,
        spatial_latest,
    };
    let cache = GridStepCache {
        spatial_layers: cols,
        cells: caches,
        param_ids,
        prediction: prediction.clone(),
    };
    Ok((next, prediction, cache))
}

/// Advance the grid one time step on a window of `L` frames (oldest
/// first) and return the new state with the predicted next frame.
pub fn grid_step<T: Real>(
    grid: &CubicGrid<T>,
    state: &GridState<T>,
    window: &[Tensor<T>],
) -> Result<(GridState<T>, Tensor<T>)> {
    let refs: Vec<&Tensor<T>> = window.iter().collect();
    let (next, pred, _) = grid_forward(grid, state, &refs, true)?;
    Ok((next, pred.expect("head requested")))
}

/// Reverse pass of [`grid_forward`]. `d_next` holds cotangents on the
/// state the step produced and `d_prediction` the cotangent on its frame.
/// Parameter gradients accumulate into `grads`; returns the cotangents on
/// the incoming state and on each window frame.
pub fn grid_backward<T: Real>(
    grid: &CubicGrid<T>,
    cache: &GridStepCache<T>,
    d_next: &StateGrad<T>,
    d_prediction: Option<&Tensor<T>>,
    grads: &mut CubicGrid<T>,
) -> Result<(StateGrad<T>, Vec<Tensor<T>>)> {
    let (rows, cols) = (grid.output_layers, grid.spatial_layers);
    let c = grid.state_shape.channels;

    let head_grads = match (d_prediction, &cache.prediction) {
        (Some(d), Some(p)) => {
            if d.shape() != p.shape() {
                return Err(config_err(format!(
                    "prediction cotangent {} does not match frame {}",
                    d.shape(),
                    p.shape()
                )));
            }
            let one = T::one();
            let mut d_pre = d.clone();
            for (g, &y) in d_pre.data_mut().iter_mut().zip(p.data()) {
                *g *= y * (one - y);
            }
            let last = cache.cells.last().expect("grid has at least one cell");
            let d_joined = conv2d_backward_accumulate(last.joined_hidden(), &grid.frame_head, &d_pre, &mut grads.frame_head)?;
            let mut parts = split_channels(&d_joined, &[c, c])?.into_iter();
            Some((parts.next().unwrap(), parts.next().unwrap()))
        }
        (Some(_), None) => return Err(usage_err("prediction cotangent given for a step run without the head")),
        (None, _) => None,
    };

    let zero = LstmState::zeros(grid.state_shape);
    let mut d_temporal_in = vec![zero.clone(); rows * cols];
    let mut d_carry_in = vec![zero; rows];
    let mut d_above: Vec<Tensor<T>> = Vec::new();

    for j in (0..rows).rev() {
        let mut d_spatial = d_next.spatial_carry[j].clone();
        let mut d_row: Vec<Option<Tensor<T>>> = vec![None; cols];
        for l in (0..cols).rev() {
            let i = j * cols + l;
            let mut d_temporal = d_next.temporal[i].clone();
            if let (true, Some((dh, dh_s))) = (j + 1 == rows && l + 1 == cols, &head_grads) {
                d_temporal.hidden.add_assign(dh)?;
                d_spatial.hidden.add_assign(dh_s)?;
            }
            let d_y = if j + 1 < rows { Some(&d_above[l]) } else { None };
            let g = cubic_lstm_backward(&cache.cells[i], &grid.cells[i], &d_temporal, &d_spatial, d_y, &mut grads.cells[i])?;
            d_temporal_in[i] = g.temporal_prev;
            d_spatial = g.spatial_prev;
            d_row[l] = Some(g.x);
        }
        d_carry_in[j] = d_spatial;
        d_above = d_row.into_iter().map(|d| d.expect("every column visited")).collect();
    }

    Ok((
        StateGrad {
            temporal: d_temporal_in,
            spatial_carry: d_carry_in,
        },
        d_above,
    ))
}

/// Channel images of cell `(j, l)`: each value mapped through `σ(v)·255`
/// and rounded half-up. Temporal hidden channels come first, then spatial.
pub fn visualize_states<T: Real>(state: &GridState<T>, j: usize, l: usize) -> Result<Vec<GrayImage>> {
    if j >= state.output_layers() || l >= state.spatial_layers {
        return Err(usage_err(format!(
            "cell ({j},{l}) outside a {}x{} grid",
            state.output_layers(),
            state.spatial_layers
        )));
    }
    let mut images = channel_images(&state.temporal(j, l).hidden);
    images.extend(channel_images(&state.spatial_latest(j, l).hidden));
    Ok(images)
}

fn channel_images<T: Real>(t: &Tensor<T>) -> Vec<GrayImage> {
    (0..t.channels())
        .map(|ch| {
            let pixels = t
                .data()
                .iter()
                .skip(ch)
                .step_by(t.channels())
                .map(|&v| {
                    let s = crate::tensor::sigmoid_scalar(v.as_f64());
                    (s * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
                })
                .collect();
            GrayImage::new(t.width(), t.height(), pixels).expect("dimensions match data")
        })
        .collect()
}

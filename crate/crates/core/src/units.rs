//! Recurrent state transitions: FC-LSTM, ConvLSTM and the three-branch
//! CubicLSTM, each with a forward pass that records what its backward pass
//! needs.
//!
//! All three share one gate algebra. A pre-activation tensor with `4·c`
//! channels is split into blocks in the fixed order `(i, f, o, c̃)`:
//!
//! ```text
//! i = σ(·)   f = σ(·)   o = σ(·)   c̃ = tanh(·)
//! C_new = f ⊙ C_prev + i ⊙ c̃
//! H_new = o ⊙ tanh(C_new)
//! ```
//!
//! The units differ only in how the pre-activation is produced: a matrix
//! product for FC-LSTM, a convolution for ConvLSTM, and two independent
//! convolutions (temporal and spatial branch) for CubicLSTM.

use rand::Rng;

use crate::conv::{affine_rows, affine_rows_backward, conv2d, conv2d_backward_accumulate, ConvKernel};
use crate::error::{config_err, Result};
use crate::tensor::{concat_channels, sigmoid_scalar, split_channels, Shape, Tensor};
use crate::Real;

/// A `(cell, hidden)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState<T> {
    pub cell: Tensor<T>,
    pub hidden: Tensor<T>,
}

/// `(𝓒, 𝓗)`, carried along the time axis.
pub type TemporalState<T> = LstmState<T>;

/// `(𝓒′, 𝓗′)`, carried along the spatial-layer axis.
pub type SpatialState<T> = LstmState<T>;

impl<T: Real> LstmState<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            cell: Tensor::zeros(shape),
            hidden: Tensor::zeros(shape),
        }
    }

    pub fn new(cell: Tensor<T>, hidden: Tensor<T>) -> Result<Self> {
        if cell.shape() != hidden.shape() {
            return Err(config_err(format!(
                "state cell {} and hidden {} differ in shape",
                cell.shape(),
                hidden.shape()
            )));
        }
        Ok(Self { cell, hidden })
    }

    pub fn shape(&self) -> Shape {
        self.cell.shape()
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.cell.add_assign(&other.cell)?;
        self.hidden.add_assign(&other.hidden)
    }
}

/// Activated gates of one LSTM update.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmGatePack<T> {
    pub input: Tensor<T>,
    pub forget: Tensor<T>,
    pub output: Tensor<T>,
    pub candidate: Tensor<T>,
}

/// Forward-pass residue of one gated update.
#[derive(Clone, Debug)]
pub struct GateCache<T> {
    /// Activated gates, same `(i, f, o, c̃)` channel layout as the
    /// pre-activation.
    gates: Tensor<T>,
    cell_prev: Tensor<T>,
    cell_tanh: Tensor<T>,
}

impl<T: Real> GateCache<T> {
    pub fn gate_pack(&self) -> LstmGatePack<T> {
        let c = self.cell_prev.channels();
        let mut parts = split_channels(&self.gates, &[c, c, c, c])
            .expect("gate tensor has 4·c channels")
            .into_iter();
        let mut next = || parts.next().expect("four gate blocks");
        LstmGatePack {
            input: next(),
            forget: next(),
            output: next(),
            candidate: next(),
        }
    }
}

fn lstm_update<T: Real>(mut preact: Tensor<T>, cell_prev: &Tensor<T>) -> Result<(LstmState<T>, GateCache<T>)> {
    let shape = cell_prev.shape();
    let c = shape.channels;
    if preact.shape() != shape.with_channels(4 * c) {
        return Err(config_err(format!(
            "gate pre-activation {} does not match state {shape} (need {} channels)",
            preact.shape(),
            4 * c
        )));
    }
    let mut cell = Tensor::zeros(shape);
    let mut cell_tanh = Tensor::zeros(shape);
    let mut hidden = Tensor::zeros(shape);
    let prev = cell_prev.data();
    for (p, g) in preact.data_mut().chunks_exact_mut(4 * c).enumerate() {
        let (gi, rest) = g.split_at_mut(c);
        let (gf, rest) = rest.split_at_mut(c);
        let (go, gc) = rest.split_at_mut(c);
        for ch in 0..c {
            let i = sigmoid_scalar(gi[ch]);
            let f = sigmoid_scalar(gf[ch]);
            let o = sigmoid_scalar(go[ch]);
            let cand = gc[ch].tanh();
            gi[ch] = i;
            gf[ch] = f;
            go[ch] = o;
            gc[ch] = cand;
            let k = p * c + ch;
            let cn = f * prev[k] + i * cand;
            let tc = cn.tanh();
            cell.data_mut()[k] = cn;
            cell_tanh.data_mut()[k] = tc;
            hidden.data_mut()[k] = o * tc;
        }
    }
    Ok((
        LstmState { cell, hidden },
        GateCache {
            gates: preact,
            cell_prev: cell_prev.clone(),
            cell_tanh,
        },
    ))
}

/// Returns `(d_preact, d_cell_prev)` for cotangents on the new state.
fn lstm_update_backward<T: Real>(cache: &GateCache<T>, d_state: &LstmState<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let shape = cache.cell_prev.shape();
    if d_state.cell.shape() != shape || d_state.hidden.shape() != shape {
        return Err(config_err(format!(
            "state cotangent {} does not match state {shape}",
            d_state.cell.shape()
        )));
    }
    let c = shape.channels;
    let one = T::one();
    let mut d_pre = Tensor::zeros(shape.with_channels(4 * c));
    let mut d_prev = Tensor::zeros(shape);
    let (gates, prev, tc) = (cache.gates.data(), cache.cell_prev.data(), cache.cell_tanh.data());
    let (dc, dh) = (d_state.cell.data(), d_state.hidden.data());
    for (p, dg) in d_pre.data_mut().chunks_exact_mut(4 * c).enumerate() {
        let g = &gates[p * 4 * c..(p + 1) * 4 * c];
        for ch in 0..c {
            let k = p * c + ch;
            let (i, f, o, cand) = (g[ch], g[c + ch], g[2 * c + ch], g[3 * c + ch]);
            let dct = dc[k] + dh[k] * o * (one - tc[k] * tc[k]);
            let d_o = dh[k] * tc[k];
            dg[ch] = dct * cand * i * (one - i);
            dg[c + ch] = dct * prev[k] * f * (one - f);
            dg[2 * c + ch] = d_o * o * (one - o);
            dg[3 * c + ch] = dct * i * (one - cand * cand);
            d_prev.data_mut()[k] = dct * f;
        }
    }
    Ok((d_pre, d_prev))
}

/// A convolution-gated LSTM update: gates from `kernel ∗ input`.
#[derive(Clone, Debug)]
pub struct BranchCache<T> {
    input: Tensor<T>,
    gates: GateCache<T>,
}

impl<T: Real> BranchCache<T> {
    pub fn gates(&self) -> &GateCache<T> {
        &self.gates
    }
}

fn branch_forward<T: Real>(
    input: Tensor<T>,
    cell_prev: &Tensor<T>,
    kernel: &ConvKernel<T>,
) -> Result<(LstmState<T>, BranchCache<T>)> {
    let preact = conv2d(&input, kernel)?;
    let (state, gates) = lstm_update(preact, cell_prev)?;
    Ok((state, BranchCache { input, gates }))
}

fn branch_backward<T: Real>(
    cache: &BranchCache<T>,
    kernel: &ConvKernel<T>,
    d_state: &LstmState<T>,
    grads: &mut ConvKernel<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (d_pre, d_cell_prev) = lstm_update_backward(&cache.gates, d_state)?;
    let d_input = conv2d_backward_accumulate(&cache.input, kernel, &d_pre, grads)?;
    Ok((d_input, d_cell_prev))
}

// ---------------------------------------------------------------------------
// FC-LSTM

/// Fully-connected LSTM parameters: a `(input_dim + hidden_dim) × 4·hidden_dim`
/// matrix (row-major) and a `4·hidden_dim` bias.
#[derive(Clone, Debug, PartialEq)]
pub struct FcLstmParams<T> {
    input_dim: usize,
    hidden_dim: usize,
    // Stored as a 1×1 kernel: same memory layout as the matrix.
    matrix: ConvKernel<T>,
}

impl<T: Real> FcLstmParams<T> {
    pub fn new(input_dim: usize, hidden_dim: usize, weight: Vec<T>, bias: Vec<T>) -> Result<Self> {
        let matrix = ConvKernel::from_parts(1, 1, input_dim + hidden_dim, 4 * hidden_dim, weight, bias)?;
        Ok(Self {
            input_dim,
            hidden_dim,
            matrix,
        })
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Result<Self> {
        let n = (input_dim + hidden_dim) * 4 * hidden_dim;
        Self::new(input_dim, hidden_dim, vec![T::zero(); n], vec![T::zero(); 4 * hidden_dim])
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn weight(&self) -> &[T] {
        self.matrix.weights()
    }

    pub fn bias(&self) -> &[T] {
        self.matrix.bias()
    }

    pub fn weight_mut(&mut self) -> &mut [T] {
        self.matrix.weights_mut()
    }

    pub fn bias_mut(&mut self) -> &mut [T] {
        self.matrix.bias_mut()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            matrix: self.matrix.zeros_like(),
            ..*self
        }
    }
}

/// Vector-valued `(C, H)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FcLstmState<T> {
    pub cell: Vec<T>,
    pub hidden: Vec<T>,
}

impl<T: Real> FcLstmState<T> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            cell: vec![T::zero(); dim],
            hidden: vec![T::zero(); dim],
        }
    }
}

#[derive(Clone, Debug)]
pub struct FcLstmCache<T> {
    input: Vec<T>,
    gates: GateCache<T>,
}

impl<T: Real> FcLstmCache<T> {
    pub fn gates(&self) -> &GateCache<T> {
        &self.gates
    }
}

fn vec_tensor<T: Real>(v: Vec<T>) -> Result<Tensor<T>> {
    Tensor::from_vec(Shape::new(1, 1, v.len()), v)
}

pub fn fc_lstm_forward<T: Real>(
    x: &[T],
    prev: &FcLstmState<T>,
    params: &FcLstmParams<T>,
) -> Result<(FcLstmState<T>, FcLstmCache<T>)> {
    if x.len() != params.input_dim || prev.hidden.len() != params.hidden_dim || prev.cell.len() != params.hidden_dim {
        return Err(config_err(format!(
            "fc_lstm_step: got x={}, H={}, C={}; params expect x={}, state={}",
            x.len(),
            prev.hidden.len(),
            prev.cell.len(),
            params.input_dim,
            params.hidden_dim
        )));
    }
    let input: Vec<T> = x.iter().chain(&prev.hidden).copied().collect();
    let preact = vec_tensor(affine_rows(&input, 1, &params.matrix))?;
    let (state, gates) = lstm_update(preact, &vec_tensor(prev.cell.clone())?)?;
    Ok((
        FcLstmState {
            cell: state.cell.into_vec(),
            hidden: state.hidden.into_vec(),
        },
        FcLstmCache { input, gates },
    ))
}

/// One FC-LSTM step: `𝒲·[x, H_prev] + b` through the shared gate algebra.
pub fn fc_lstm_step<T: Real>(x: &[T], prev: &FcLstmState<T>, params: &FcLstmParams<T>) -> Result<FcLstmState<T>> {
    fc_lstm_forward(x, prev, params).map(|(s, _)| s)
}

/// Returns `(d_x, d_prev_state)`; parameter gradients accumulate into `grads`.
pub fn fc_lstm_backward<T: Real>(
    cache: &FcLstmCache<T>,
    params: &FcLstmParams<T>,
    d_state: &FcLstmState<T>,
    grads: &mut FcLstmParams<T>,
) -> Result<(Vec<T>, FcLstmState<T>)> {
    let d = LstmState::new(vec_tensor(d_state.cell.clone())?, vec_tensor(d_state.hidden.clone())?)?;
    let (d_pre, d_cell_prev) = lstm_update_backward(&cache.gates, &d)?;
    let mut d_input = affine_rows_backward(&cache.input, 1, &params.matrix, d_pre.data(), &mut grads.matrix);
    let d_hidden = d_input.split_off(params.input_dim);
    Ok((
        d_input,
        FcLstmState {
            cell: d_cell_prev.into_vec(),
            hidden: d_hidden,
        },
    ))
}

// ---------------------------------------------------------------------------
// ConvLSTM

#[derive(Clone, Debug)]
pub struct ConvLstmCache<T> {
    x_channels: usize,
    branch: BranchCache<T>,
}

impl<T: Real> ConvLstmCache<T> {
    pub fn gates(&self) -> &GateCache<T> {
        &self.branch.gates
    }
}

pub fn conv_lstm_forward<T: Real>(
    x: &Tensor<T>,
    prev: &TemporalState<T>,
    kernel: &ConvKernel<T>,
) -> Result<(TemporalState<T>, ConvLstmCache<T>)> {
    let c = prev.hidden.channels();
    if prev.cell.shape() != prev.hidden.shape() {
        return Err(config_err("conv_lstm_step: cell and hidden differ in shape"));
    }
    if kernel.in_channels() != x.channels() + c || kernel.out_channels() != 4 * c {
        return Err(config_err(format!(
            "conv_lstm_step: kernel {}→{} does not fit x with {} channels and state with {c}",
            kernel.in_channels(),
            kernel.out_channels(),
            x.channels()
        )));
    }
    let input = concat_channels(&[x, &prev.hidden])?;
    let (state, branch) = branch_forward(input, &prev.cell, kernel)?;
    Ok((
        state,
        ConvLstmCache {
            x_channels: x.channels(),
            branch,
        },
    ))
}

/// One ConvLSTM step: gates from `kernel ∗ [x, H_prev]`.
pub fn conv_lstm_step<T: Real>(x: &Tensor<T>, prev: &TemporalState<T>, kernel: &ConvKernel<T>) -> Result<TemporalState<T>> {
    conv_lstm_forward(x, prev, kernel).map(|(s, _)| s)
}

pub fn conv_lstm_backward<T: Real>(
    cache: &ConvLstmCache<T>,
    kernel: &ConvKernel<T>,
    d_state: &TemporalState<T>,
    grads: &mut ConvKernel<T>,
) -> Result<(Tensor<T>, TemporalState<T>)> {
    let (d_input, d_cell) = branch_backward(&cache.branch, kernel, d_state, grads)?;
    let c = d_cell.channels();
    let mut parts = split_channels(&d_input, &[cache.x_channels, c])?;
    let d_hidden = parts.pop().expect("two blocks");
    let d_x = parts.pop().expect("two blocks");
    Ok((d_x, LstmState::new(d_cell, d_hidden)?))
}

// ---------------------------------------------------------------------------
// CubicLSTM

/// Parameters of one CubicLSTM unit: independent temporal and spatial gate
/// kernels over the same `[x, 𝓗, 𝓗′]` arity, and a 1×1 output kernel over
/// `[𝓗_new, 𝓗′_new]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CubicCellParams<T> {
    pub temporal: ConvKernel<T>,
    pub spatial: ConvKernel<T>,
    pub output: ConvKernel<T>,
}

impl<T: Real> CubicCellParams<T> {
    pub fn zeros(
        input_channels: usize,
        state_channels: usize,
        output_channels: usize,
        temporal_kernel: usize,
        spatial_kernel: usize,
    ) -> Result<Self> {
        let gate_in = input_channels + 2 * state_channels;
        Ok(Self {
            temporal: ConvKernel::zeros(temporal_kernel, temporal_kernel, gate_in, 4 * state_channels)?,
            spatial: ConvKernel::zeros(spatial_kernel, spatial_kernel, gate_in, 4 * state_channels)?,
            output: ConvKernel::zeros(1, 1, 2 * state_channels, output_channels)?,
        })
    }

    /// Glorot-uniform weights; gate biases zero except the forget block,
    /// which is set to `forget_bias` in both gated branches.
    pub fn glorot<R: Rng + ?Sized>(
        input_channels: usize,
        state_channels: usize,
        output_channels: usize,
        temporal_kernel: usize,
        spatial_kernel: usize,
        forget_bias: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let gate_in = input_channels + 2 * state_channels;
        let c = state_channels;
        let mut temporal = ConvKernel::glorot(temporal_kernel, temporal_kernel, gate_in, 4 * c, rng)?;
        let mut spatial = ConvKernel::glorot(spatial_kernel, spatial_kernel, gate_in, 4 * c, rng)?;
        let output = ConvKernel::glorot(1, 1, 2 * c, output_channels, rng)?;
        for k in [&mut temporal, &mut spatial] {
            for b in &mut k.bias_mut()[c..2 * c] {
                *b = T::from_f64(forget_bias);
            }
        }
        Ok(Self {
            temporal,
            spatial,
            output,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            temporal: self.temporal.zeros_like(),
            spatial: self.spatial.zeros_like(),
            output: self.output.zeros_like(),
        }
    }

    pub fn state_channels(&self) -> usize {
        self.temporal.out_channels() / 4
    }

    pub fn input_channels(&self) -> usize {
        self.temporal.in_channels() - 2 * self.state_channels()
    }

    pub fn output_channels(&self) -> usize {
        self.output.out_channels()
    }

    pub fn kernels(&self) -> [(&'static str, &ConvKernel<T>); 3] {
        [
            ("temporal", &self.temporal),
            ("spatial", &self.spatial),
            ("output", &self.output),
        ]
    }

    pub fn kernels_mut(&mut self) -> [(&'static str, &mut ConvKernel<T>); 3] {
        [
            ("temporal", &mut self.temporal),
            ("spatial", &mut self.spatial),
            ("output", &mut self.output),
        ]
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.temporal.add_assign(&other.temporal);
        self.spatial.add_assign(&other.spatial);
        self.output.add_assign(&other.output);
    }

    fn validate(&self) -> Result<()> {
        let c = self.temporal.out_channels() / 4;
        if self.temporal.out_channels() != 4 * c || self.spatial.out_channels() != 4 * c {
            return Err(config_err("cubic cell: gate kernels must emit 4·c channels"));
        }
        if self.temporal.in_channels() != self.spatial.in_channels() {
            return Err(config_err(format!(
                "cubic cell: temporal kernel reads {} channels, spatial kernel {}",
                self.temporal.in_channels(),
                self.spatial.in_channels()
            )));
        }
        if self.temporal.in_channels() <= 2 * c {
            return Err(config_err("cubic cell: gate kernels leave no room for the input"));
        }
        if self.output.in_channels() != 2 * c || self.output.kh() != 1 || self.output.kw() != 1 {
            return Err(config_err(format!(
                "cubic cell: output kernel must be 1x1 over {} channels",
                2 * c
            )));
        }
        Ok(())
    }
}

/// Everything a [`cubic_lstm_backward`] call needs, plus the consumed and
/// produced states for inspection.
#[derive(Clone, Debug)]
pub struct CubicCache<T> {
    x_channels: usize,
    temporal: BranchCache<T>,
    spatial: BranchCache<T>,
    spatial_in: SpatialState<T>,
    temporal_out: TemporalState<T>,
    spatial_out: SpatialState<T>,
    /// `[𝓗_new, 𝓗′_new]`, the output-branch input.
    joined: Tensor<T>,
}

impl<T: Real> CubicCache<T> {
    pub fn temporal_gates(&self) -> &GateCache<T> {
        &self.temporal.gates
    }

    pub fn spatial_gates(&self) -> &GateCache<T> {
        &self.spatial.gates
    }

    /// The spatial state this unit consumed.
    pub fn spatial_in(&self) -> &SpatialState<T> {
        &self.spatial_in
    }

    pub fn temporal_out(&self) -> &TemporalState<T> {
        &self.temporal_out
    }

    pub fn spatial_out(&self) -> &SpatialState<T> {
        &self.spatial_out
    }

    pub(crate) fn joined_hidden(&self) -> &Tensor<T> {
        &self.joined
    }
}

#[derive(Clone, Debug)]
pub struct CubicOutput<T> {
    pub temporal: TemporalState<T>,
    pub spatial: SpatialState<T>,
    /// `None` when the output branch was skipped.
    pub y: Option<Tensor<T>>,
}

/// Cotangents with respect to the inputs of one CubicLSTM step.
#[derive(Clone, Debug)]
pub struct CubicInputGrads<T> {
    pub x: Tensor<T>,
    pub temporal_prev: TemporalState<T>,
    pub spatial_prev: SpatialState<T>,
}

/// Forward pass with cache. `with_output = false` skips the output branch,
/// for grid cells whose `𝒴` nothing consumes.
pub fn cubic_lstm_forward<T: Real>(
    x: &Tensor<T>,
    temporal_prev: &TemporalState<T>,
    spatial_prev: &SpatialState<T>,
    params: &CubicCellParams<T>,
    with_output: bool,
) -> Result<(CubicOutput<T>, CubicCache<T>)> {
    params.validate()?;
    let c = params.state_channels();
    let state_shape = x.shape().with_channels(c);
    for (name, s) in [("temporal", temporal_prev), ("spatial", spatial_prev)] {
        if s.cell.shape() != state_shape || s.hidden.shape() != state_shape {
            return Err(config_err(format!(
                "cubic_lstm_step: {name} state is {} / {}, expected {state_shape}",
                s.cell.shape(),
                s.hidden.shape()
            )));
        }
    }
    if x.channels() != params.input_channels() {
        return Err(config_err(format!(
            "cubic_lstm_step: x has {} channels, cell expects {}",
            x.channels(),
            params.input_channels()
        )));
    }

    let temporal_input = concat_channels(&[x, &spatial_prev.hidden, &temporal_prev.hidden])?;
    let spatial_input = concat_channels(&[x, &temporal_prev.hidden, &spatial_prev.hidden])?;
    let (temporal, t_cache) = branch_forward(temporal_input, &temporal_prev.cell, &params.temporal)?;
    let (spatial, s_cache) = branch_forward(spatial_input, &spatial_prev.cell, &params.spatial)?;
    let joined = concat_channels(&[&temporal.hidden, &spatial.hidden])?;
    let y = if with_output {
        Some(conv2d(&joined, &params.output)?)
    } else {
        None
    };
    let cache = CubicCache {
        x_channels: x.channels(),
        temporal: t_cache,
        spatial: s_cache,
        spatial_in: spatial_prev.clone(),
        temporal_out: temporal.clone(),
        spatial_out: spatial.clone(),
        joined,
    };
    Ok((CubicOutput { temporal, spatial, y }, cache))
}

/// One CubicLSTM step returning the new temporal state, the new spatial
/// state and the output-branch prediction `𝒴`.
pub fn cubic_lstm_step<T: Real>(
    x: &Tensor<T>,
    temporal_prev: &TemporalState<T>,
    spatial_prev: &SpatialState<T>,
    params: &CubicCellParams<T>,
) -> Result<(TemporalState<T>, SpatialState<T>, Tensor<T>)> {
    let (out, _) = cubic_lstm_forward(x, temporal_prev, spatial_prev, params, true)?;
    let y = out.y.expect("output branch requested");
    Ok((out.temporal, out.spatial, y))
}

/// Reverse pass of one CubicLSTM step. Parameter gradients accumulate into
/// `grads`; a `None` cotangent for `𝒴` skips the output branch.
pub fn cubic_lstm_backward<T: Real>(
    cache: &CubicCache<T>,
    params: &CubicCellParams<T>,
    d_temporal: &TemporalState<T>,
    d_spatial: &SpatialState<T>,
    d_y: Option<&Tensor<T>>,
    grads: &mut CubicCellParams<T>,
) -> Result<CubicInputGrads<T>> {
    let c = params.state_channels();
    let mut d_t = d_temporal.clone();
    let mut d_s = d_spatial.clone();
    if let Some(d_y) = d_y {
        let d_joined = conv2d_backward_accumulate(&cache.joined, &params.output, d_y, &mut grads.output)?;
        let mut parts = split_channels(&d_joined, &[c, c])?.into_iter();
        d_t.hidden.add_assign(&parts.next().expect("two blocks"))?;
        d_s.hidden.add_assign(&parts.next().expect("two blocks"))?;
    }

    let (d_t_in, d_t_cell) = branch_backward(&cache.temporal, &params.temporal, &d_t, &mut grads.temporal)?;
    let (d_s_in, d_s_cell) = branch_backward(&cache.spatial, &params.spatial, &d_s, &mut grads.spatial)?;

    // Temporal input is [x, 𝓗′, 𝓗]; spatial input is [x, 𝓗, 𝓗′].
    let blocks = [cache.x_channels, c, c];
    let mut t = split_channels(&d_t_in, &blocks)?.into_iter();
    let mut s = split_channels(&d_s_in, &blocks)?.into_iter();
    let (mut dx, mut d_sh, mut d_th) = (t.next().unwrap(), t.next().unwrap(), t.next().unwrap());
    let (dx_s, d_th_s, d_sh_s) = (s.next().unwrap(), s.next().unwrap(), s.next().unwrap());
    dx.add_assign(&dx_s)?;
    d_th.add_assign(&d_th_s)?;
    d_sh.add_assign(&d_sh_s)?;

    Ok(CubicInputGrads {
        x: dx,
        temporal_prev: LstmState::new(d_t_cell, d_th)?,
        spatial_prev: LstmState::new(d_s_cell, d_sh)?,
    })
}

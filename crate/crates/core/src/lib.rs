//! CubicLSTM recurrent units and CubicRNN grids for spatio-temporal sequence
//! prediction.
//!
//! Everything is built from dense rank-3 arrays with hand-composed backward
//! passes:
//!
//! * [`tensor`] and [`conv`]: the array type, elementwise ops, "same"
//!   convolution and their reverse-mode counterparts.
//! * [`units`]: FC-LSTM, ConvLSTM and CubicLSTM state transitions.
//! * [`grid`] and [`model`]: the 2D cell grid with sliding-window input and
//!   spatial-state carryover, and the encoder/decoder wrapper.
//! * [`data`]: bouncing-glyph video synthesis, IDX ingestion, PGM export.
//! * [`loss`], [`optim`], [`train`]: per-frame losses, ADAM and the training loop.
//! * [`config`] and [`checkpoint`]: run configuration and the binary
//!   checkpoint format.
//! * [`gradcheck`]: finite-difference oracle and the verification suite.

pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod data;
mod error;
pub mod gradcheck;
pub mod grid;
pub mod loss;
pub mod model;
pub mod optim;
mod real;
pub mod tensor;
pub mod train;
pub mod units;

pub use conv::{conv2d, conv2d_backward, ConvKernel};
pub use error::{Error, Result};
pub use grid::{init_state, visualize_states, CubicGrid, GridConfig, GridState};
pub use model::{encode_decode, CubicRnn};
pub use real::Real;
pub use tensor::{Shape, Tensor};
pub use units::{CubicCellParams, LstmState, SpatialState, TemporalState};

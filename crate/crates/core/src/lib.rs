//! Convolutional recurrent layers for sequence classification.
//!
//! A CRNN layer slides a window of `r1` frames (advancing `r2` frames at a
//! time) over a `k x l` input sequence, extracts `n` features from each
//! window and optionally max-pools the resulting feature sequence. The
//! extractor is either a classic convolution or a recurrent network run from
//! a fresh zero state over the window's frames:
//!
//! - `conv`: `f(w)_j = act(sum(W_j * w) + b_j)`
//! - `clstm`: a peephole LSTM, reduced over the window by max, mean or last
//! - `extended_clstm`: like `clstm` but with one copy of the input matrices
//!   per frame position
//! - `cblstm`: a bidirectional LSTM whose directions are combined by learned
//!   projections of either the hidden or the cell states
//!
//! Every forward pass has a hand-derived backward pass. The [`training`]
//! module checks them against central finite differences and drives Adam.
//!
//! All numerics are `f64` and deterministic: the same seed, configuration
//! and data give bit-identical parameters and metric histories.

pub mod cells;
pub mod data;
pub mod error;
pub mod framing;
pub mod io;
pub mod kv;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod training;

pub use error::{Error, ErrorKind, Result};
pub use numerics::{Activation, Matrix, Rng};
pub use params::Parameters;

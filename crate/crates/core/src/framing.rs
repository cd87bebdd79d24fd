//! Windowing and max-pooling along the time axis.
//!
//! Windows start every `shift` frames and span `width` frames. Trailing
//! frames that do not fill a whole window are dropped; there is no padding.

use serde::{Deserialize, Serialize};

use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub width: usize,
    pub shift: usize,
}

impl WindowSpec {
    pub fn new(width: usize, shift: usize) -> Result<Self> {
        if width == 0 || shift == 0 {
            return Err(Error::Config(format!(
                "window width and shift must be >= 1 (got width {width}, shift {shift})"
            )));
        }
        Ok(Self { width, shift })
    }

    /// Start offset of window `i`.
    #[inline]
    pub fn start(&self, i: usize) -> usize {
        i * self.shift
    }
}

pub fn window_count(len: usize, spec: WindowSpec) -> usize {
    if len < spec.width {
        0
    } else {
        (len - spec.width) / spec.shift + 1
    }
}

/// Copies out every complete window of the `k x l` sequence `x`.
pub fn make_windows(x: &Matrix, spec: WindowSpec) -> Vec<Matrix> {
    (0..window_count(x.cols(), spec))
        .map(|i| x.column_slice(spec.start(i), spec.width))
        .collect()
}

/// Per-feature max over each pooling window.
pub fn max_pool_sequence(x: &Matrix, spec: WindowSpec) -> Matrix {
    max_pool_with_argmax(x, spec).0
}

/// Max-pooling that also returns, for every output cell, the source column
/// holding the maximum. Ties resolve to the earliest column.
pub fn max_pool_with_argmax(x: &Matrix, spec: WindowSpec) -> (Matrix, Vec<usize>) {
    let n = x.rows();
    let m = window_count(x.cols(), spec);
    let mut out = Matrix::zeros(n, m);
    let mut arg = vec![0; n * m];
    for f in 0..n {
        let row = x.row(f);
        for j in 0..m {
            let start = spec.start(j);
            let mut best = start;
            for c in start + 1..start + spec.width {
                if row[c] > row[best] {
                    best = c;
                }
            }
            out.set(f, j, row[best]);
            arg[f * m + j] = best;
        }
    }
    (out, arg)
}

/// Routes `grad_out` (n x m) back to the pooled input columns.
pub fn max_pool_backward(grad_out: &Matrix, argmax: &[usize], input_cols: usize) -> Matrix {
    let (n, m) = grad_out.shape();
    let mut dx = Matrix::zeros(n, input_cols);
    for f in 0..n {
        for j in 0..m {
            dx.add_at(f, argmax[f * m + j], grad_out.get(f, j));
        }
    }
    dx
}

//! Window-level feature extractors and the classifier head.
//!
//! A CRNN layer turns a `k x l` sequence into an `n x l'` sequence:
//! windows of `r1` frames every `r2` frames are each mapped to `n` features,
//! then the feature sequence is optionally max-pooled with `(p1, p2)`.
//! Recurrent extractors start from a zero state in every window and share
//! their parameters across windows.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cells::{
    blstm_backward, blstm_forward, lstm_backward, lstm_backward_positional, lstm_forward,
    lstm_forward_positional, BlstmOutput, BlstmParams, BlstmSource, GateInputs, LstmParams,
    LstmTrace, RecurrentWeights, StateGrads,
};
use crate::framing::{max_pool_backward, max_pool_with_argmax, window_count, WindowSpec};
use crate::numerics::init_params;
use crate::params::{impl_parameters, join, Parameters};
use crate::{Activation, Error, Matrix, Result, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    Conv,
    Clstm,
    ExtendedClstm,
    Cblstm,
}

/// Which recurrent sequence a window's features are read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateSource {
    Hidden,
    Cell,
    /// `y_t = W_hy h_t + b_y`. For `cblstm` this is not available; the
    /// combiner output is always used there.
    Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Max,
    Mean,
    Last,
}

macro_rules! keyword_enum {
    ($ty:ty, $what:literal, { $($name:literal => $variant:expr),* $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)*
                    other => Err(Error::Config(format!(concat!("unknown ", $what, " `{}`"), other))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $variant { return f.write_str($name); })*
                unreachable!()
            }
        }
    };
}

keyword_enum!(ExtractorKind, "layer kind", {
    "conv" => ExtractorKind::Conv,
    "clstm" => ExtractorKind::Clstm,
    "extended_clstm" => ExtractorKind::ExtendedClstm,
    "cblstm" => ExtractorKind::Cblstm,
});
keyword_enum!(StateSource, "state source", {
    "hidden" => StateSource::Hidden,
    "cell" => StateSource::Cell,
    "output" => StateSource::Output,
});
keyword_enum!(Reduction, "reduction", {
    "max" => Reduction::Max,
    "mean" => Reduction::Mean,
    "last" => Reduction::Last,
});

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrnnLayerConfig {
    pub kind: ExtractorKind,
    pub window: WindowSpec,
    pub pool: Option<WindowSpec>,
    /// Extracted features per window, `n`.
    pub features: usize,
    /// Recurrent state size. Must equal `features` unless the features come
    /// from a projection (`source = output`, or any `cblstm`).
    pub hidden: usize,
    pub source: StateSource,
    pub reduction: Reduction,
    /// Conv nonlinearity.
    pub activation: Activation,
}

impl CrnnLayerConfig {
    /// A layer whose recurrent size equals its feature count, tanh for conv.
    pub fn new(
        kind: ExtractorKind,
        window: WindowSpec,
        pool: Option<WindowSpec>,
        features: usize,
        source: StateSource,
        reduction: Reduction,
    ) -> Self {
        Self {
            kind,
            window,
            pool,
            features,
            hidden: features,
            source,
            reduction,
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.features == 0 || self.hidden == 0 {
            return Err(Error::Config("layer dimensions must be >= 1".into()));
        }
        WindowSpec::new(self.window.width, self.window.shift)?;
        if let Some(p) = self.pool {
            WindowSpec::new(p.width, p.shift)?;
        }
        match self.kind {
            ExtractorKind::Clstm | ExtractorKind::ExtendedClstm => {
                if self.source != StateSource::Output && self.hidden != self.features {
                    return Err(Error::Config(format!(
                        "{} reading {} states needs hidden = features (got {} vs {})",
                        self.kind, self.source, self.hidden, self.features
                    )));
                }
            }
            ExtractorKind::Cblstm => {
                if self.source == StateSource::Output {
                    return Err(Error::Config(
                        "cblstm combines hidden or cell states; source must be hidden or cell"
                            .into(),
                    ));
                }
            }
            ExtractorKind::Conv => {}
        }
        Ok(())
    }

    fn uses_projection(&self) -> bool {
        matches!(
            self.kind,
            ExtractorKind::Clstm | ExtractorKind::ExtendedClstm
        ) && self.source == StateSource::Output
    }

    /// Output length for an input of `len` frames.
    pub fn output_len(&self, len: usize) -> usize {
        let m = window_count(len, self.window);
        match self.pool {
            Some(p) => window_count(m, p),
            None => m,
        }
    }

    /// Smallest input length that yields `out` output frames (`out >= 1`).
    pub fn min_input_len(&self, out: usize) -> usize {
        let windows = match self.pool {
            Some(p) => p.width + (out - 1) * p.shift,
            None => out,
        };
        self.window.width + (windows - 1) * self.window.shift
    }
}

// ---------------------------------------------------------------------------
// Parameters

/// `n` convolution kernels of shape `k x r1`, stored one flattened
/// (row-major) kernel per row of `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub w: Matrix,
    pub b: Matrix,
    pub k: usize,
    pub width: usize,
    pub activation: Activation,
}

impl Parameters for ConvParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        out.push((join(prefix, "w"), &self.w));
        out.push((join(prefix, "b"), &self.b));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix)>) {
        out.push((join(prefix, "w"), &mut self.w));
        out.push((join(prefix, "b"), &mut self.b));
    }
}

impl ConvParams {
    pub fn zeros(k: usize, width: usize, n: usize, activation: Activation) -> Self {
        Self {
            w: Matrix::zeros(n, k * width),
            b: Matrix::zeros(n, 1),
            k,
            width,
            activation,
        }
    }

    pub fn new(k: usize, width: usize, n: usize, activation: Activation, rng: &mut Rng) -> Self {
        Self {
            w: init_params(n, k * width, rng),
            ..Self::zeros(k, width, n, activation)
        }
    }

    /// Sets kernel `j` from a `k x r1` matrix.
    pub fn set_kernel(&mut self, j: usize, kernel: &Matrix) -> Result<()> {
        if kernel.shape() != (self.k, self.width) {
            return Err(Error::Shape {
                op: "set_kernel",
                left: (self.k, self.width),
                right: kernel.shape(),
            });
        }
        let cols = self.w.cols();
        self.w.data_mut()[j * cols..(j + 1) * cols].copy_from_slice(kernel.data());
        Ok(())
    }
}

/// Output map `y_t = W_hy h_t + b_y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub w_hy: Matrix,
    pub b_y: Matrix,
}

impl_parameters!(Projection { w_hy, b_y });

impl Projection {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            w_hy: Matrix::zeros(d, n),
            b_y: Matrix::zeros(d, 1),
        }
    }

    pub fn new(n: usize, d: usize, rng: &mut Rng) -> Self {
        Self {
            w_hy: init_params(d, n, rng),
            b_y: Matrix::zeros(d, 1),
        }
    }

    fn apply(&self, h: &[f64]) -> Vec<f64> {
        let mut y = self.b_y.data().to_vec();
        self.w_hy.matvec_acc(h, &mut y);
        y
    }
}

/// LSTM with one copy of the input matrices per window position.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedLstmParams {
    pub inputs: Vec<GateInputs>,
    pub rec: RecurrentWeights,
}

impl Parameters for ExtendedLstmParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        for (t, w) in self.inputs.iter().enumerate() {
            w.visit(&join(prefix, &format!("pos{t}")), out);
        }
        self.rec.visit(prefix, out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix)>) {
        for (t, w) in self.inputs.iter_mut().enumerate() {
            w.visit_mut(&join(prefix, &format!("pos{t}")), out);
        }
        self.rec.visit_mut(prefix, out);
    }
}

impl ExtendedLstmParams {
    pub fn zeros(k: usize, n: usize, width: usize) -> Self {
        Self {
            inputs: (0..width).map(|_| GateInputs::zeros(k, n)).collect(),
            rec: RecurrentWeights::zeros(n),
        }
    }

    pub fn new(k: usize, n: usize, width: usize, rng: &mut Rng) -> Self {
        Self {
            inputs: (0..width).map(|_| GateInputs::new(k, n, rng)).collect(),
            rec: RecurrentWeights::new(n, rng),
        }
    }

    /// Every position shares the input matrices of `p`.
    pub fn tied(p: &LstmParams, width: usize) -> Self {
        Self {
            inputs: vec![p.input.clone(); width],
            rec: p.rec.clone(),
        }
    }

    pub fn width(&self) -> usize {
        self.inputs.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Conv(ConvParams),
    Clstm {
        lstm: LstmParams,
        proj: Option<Projection>,
    },
    ExtendedClstm {
        lstm: ExtendedLstmParams,
        proj: Option<Projection>,
    },
    Cblstm(BlstmParams),
}

impl Parameters for LayerParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        match self {
            LayerParams::Conv(p) => p.visit(prefix, out),
            LayerParams::Clstm { lstm, proj } => {
                lstm.visit(prefix, out);
                if let Some(p) = proj {
                    p.visit(&join(prefix, "proj"), out);
                }
            }
            LayerParams::ExtendedClstm { lstm, proj } => {
                lstm.visit(prefix, out);
                if let Some(p) = proj {
                    p.visit(&join(prefix, "proj"), out);
                }
            }
            LayerParams::Cblstm(p) => p.visit(prefix, out),
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix)>) {
        match self {
            LayerParams::Conv(p) => p.visit_mut(prefix, out),
            LayerParams::Clstm { lstm, proj } => {
                lstm.visit_mut(prefix, out);
                if let Some(p) = proj {
                    p.visit_mut(&join(prefix, "proj"), out);
                }
            }
            LayerParams::ExtendedClstm { lstm, proj } => {
                lstm.visit_mut(prefix, out);
                if let Some(p) = proj {
                    p.visit_mut(&join(prefix, "proj"), out);
                }
            }
            LayerParams::Cblstm(p) => p.visit_mut(prefix, out),
        }
    }
}

impl LayerParams {
    /// Randomly initialized parameters for `cfg` on `k` input features.
    pub fn new(cfg: &CrnnLayerConfig, k: usize, rng: &mut Rng) -> Self {
        let (n, h, r1) = (cfg.features, cfg.hidden, cfg.window.width);
        let proj = |rng: &mut Rng| cfg.uses_projection().then(|| Projection::new(h, n, rng));
        match cfg.kind {
            ExtractorKind::Conv => LayerParams::Conv(ConvParams::new(k, r1, n, cfg.activation, rng)),
            ExtractorKind::Clstm => LayerParams::Clstm {
                lstm: LstmParams::new(k, h, rng),
                proj: proj(rng),
            },
            ExtractorKind::ExtendedClstm => LayerParams::ExtendedClstm {
                lstm: ExtendedLstmParams::new(k, h, r1, rng),
                proj: proj(rng),
            },
            ExtractorKind::Cblstm => {
                LayerParams::Cblstm(BlstmParams::new(k, h, n, blstm_source(cfg.source), rng))
            }
        }
    }

    pub fn zeros(cfg: &CrnnLayerConfig, k: usize) -> Self {
        let mut p = Self::new(cfg, k, &mut Rng::new(0));
        p.zero();
        p
    }
}

fn blstm_source(source: StateSource) -> BlstmSource {
    match source {
        StateSource::Cell => BlstmSource::Cell,
        _ => BlstmSource::Hidden,
    }
}

/// Closed-form parameter count of a layer on `k` input features.
pub fn layer_param_count(cfg: &CrnnLayerConfig, k: usize) -> usize {
    let (n, h, r1) = (cfg.features, cfg.hidden, cfg.window.width);
    let lstm = |k: usize, h: usize| 4 * h * k + 7 * h * h + 4 * h;
    let proj = if cfg.uses_projection() { n * h + n } else { 0 };
    match cfg.kind {
        ExtractorKind::Conv => n * (k * r1 + 1),
        ExtractorKind::Clstm => lstm(k, h) + proj,
        ExtractorKind::ExtendedClstm => lstm(k, h) + (r1 - 1) * 4 * h * k + proj,
        ExtractorKind::Cblstm => 2 * lstm(k, h) + 2 * n * h + n,
    }
}

// ---------------------------------------------------------------------------
// Reductions

struct Reduced {
    value: Vec<f64>,
    argmax: Option<Vec<usize>>,
}

fn reduce(seq: &[Vec<f64>], reduction: Reduction) -> Reduced {
    let m = seq.len();
    let d = seq[0].len();
    match reduction {
        Reduction::Last => Reduced {
            value: seq[m - 1].clone(),
            argmax: None,
        },
        Reduction::Mean => {
            let mut v = vec![0.0; d];
            for s in seq {
                for (a, b) in v.iter_mut().zip(s) {
                    *a += b;
                }
            }
            v.iter_mut().for_each(|a| *a /= m as f64);
            Reduced {
                value: v,
                argmax: None,
            }
        }
        Reduction::Max => {
            let mut arg = vec![0; d];
            for (t, s) in seq.iter().enumerate().skip(1) {
                for j in 0..d {
                    if s[j] > seq[arg[j]][j] {
                        arg[j] = t;
                    }
                }
            }
            Reduced {
                value: (0..d).map(|j| seq[arg[j]][j]).collect(),
                argmax: Some(arg),
            }
        }
    }
}

fn reduce_backward(dr: &[f64], m: usize, reduction: Reduction, argmax: Option<&[usize]>) -> Vec<Vec<f64>> {
    let d = dr.len();
    let mut ds = vec![vec![0.0; d]; m];
    match reduction {
        Reduction::Last => ds[m - 1].copy_from_slice(dr),
        Reduction::Mean => {
            for s in ds.iter_mut() {
                for (a, g) in s.iter_mut().zip(dr) {
                    *a = g / m as f64;
                }
            }
        }
        Reduction::Max => {
            let arg = argmax.expect("max reduction keeps its argmax");
            for j in 0..d {
                ds[arg[j]][j] = dr[j];
            }
        }
    }
    ds
}

// ---------------------------------------------------------------------------
// Per-window extraction

enum WindowCache {
    Conv {
        window: Vec<f64>,
        out: Vec<f64>,
    },
    Lstm {
        trace: LstmTrace,
        seq: Vec<Vec<f64>>,
        argmax: Option<Vec<usize>>,
    },
    Blstm {
        out: BlstmOutput,
        argmax: Option<Vec<usize>>,
    },
}

fn select_sequence(trace: &LstmTrace, source: StateSource, proj: Option<&Projection>) -> Result<Vec<Vec<f64>>> {
    Ok(match source {
        StateSource::Hidden => trace.steps.iter().map(|s| s.h.clone()).collect(),
        StateSource::Cell => trace.steps.iter().map(|s| s.c.clone()).collect(),
        StateSource::Output => {
            let p = proj.ok_or_else(|| {
                Error::Config("source = output requires an output projection".into())
            })?;
            trace.steps.iter().map(|s| p.apply(&s.h)).collect()
        }
    })
}

/// Upstream state gradients from gradients on the selected sequence.
fn sequence_to_state_grads(
    trace: &LstmTrace,
    ds: &[Vec<f64>],
    source: StateSource,
    proj: Option<&Projection>,
    gproj: Option<&mut Projection>,
) -> StateGrads {
    let n = trace.steps[0].h.len();
    let mut up = StateGrads::zeros(trace.len(), n);
    match source {
        StateSource::Hidden => up.dh = ds.to_vec(),
        StateSource::Cell => up.dc = ds.to_vec(),
        StateSource::Output => {
            let p = proj.expect("validated projection");
            let g = gproj.expect("projection gradient");
            for (t, d) in ds.iter().enumerate() {
                g.w_hy.outer_acc(d, &trace.steps[t].h);
                for (b, v) in g.b_y.data_mut().iter_mut().zip(d) {
                    *b += v;
                }
                p.w_hy.matvec_t_acc(d, &mut up.dh[t]);
            }
        }
    }
    up
}

fn window_frames(w: &Matrix) -> Vec<Vec<f64>> {
    w.columns()
}

fn check_window(op: &'static str, w: &Matrix, k: usize) -> Result<()> {
    if w.rows() != k || w.cols() == 0 {
        return Err(Error::Shape {
            op,
            left: (k, w.cols()),
            right: w.shape(),
        });
    }
    Ok(())
}

/// `f(w)_j = act(sum(W_j * w) + b_j)`.
pub fn conv_extract(p: &ConvParams, w: &Matrix) -> Result<Vec<f64>> {
    if w.shape() != (p.k, p.width) {
        return Err(Error::Shape {
            op: "conv_extract",
            left: (p.k, p.width),
            right: w.shape(),
        });
    }
    Ok(conv_window(p, w.data()))
}

fn conv_window(p: &ConvParams, flat: &[f64]) -> Vec<f64> {
    let mut z = p.b.data().to_vec();
    p.w.matvec_acc(flat, &mut z);
    z.into_iter().map(|v| p.activation.apply(v)).collect()
}

pub fn clstm_extract(
    p: &LstmParams,
    proj: Option<&Projection>,
    w: &Matrix,
    source: StateSource,
    reduction: Reduction,
) -> Result<Vec<f64>> {
    check_window("clstm_extract", w, p.input_dim())?;
    let trace = lstm_forward(p, &window_frames(w))?;
    let seq = select_sequence(&trace, source, proj)?;
    Ok(reduce(&seq, reduction).value)
}

pub fn extended_clstm_extract(
    p: &ExtendedLstmParams,
    proj: Option<&Projection>,
    w: &Matrix,
    source: StateSource,
    reduction: Reduction,
) -> Result<Vec<f64>> {
    if w.cols() != p.width() {
        return Err(Error::WindowWidth {
            expected: p.width(),
            got: w.cols(),
        });
    }
    let trace = lstm_forward_positional(&p.inputs, &p.rec, &window_frames(w))?;
    let seq = select_sequence(&trace, source, proj)?;
    Ok(reduce(&seq, reduction).value)
}

pub fn cblstm_extract(p: &BlstmParams, w: &Matrix, reduction: Reduction) -> Result<Vec<f64>> {
    check_window("cblstm_extract", w, p.fwd.input_dim())?;
    let out = blstm_forward(p, &window_frames(w))?;
    Ok(reduce(&out.y, reduction).value)
}

fn extract_cached(
    cfg: &CrnnLayerConfig,
    params: &LayerParams,
    frames: &[Vec<f64>],
    conv_window_data: Option<Vec<f64>>,
) -> Result<(Vec<f64>, WindowCache)> {
    match params {
        LayerParams::Conv(p) => {
            let window = conv_window_data.expect("conv windows are flattened by the caller");
            let out = conv_window(p, &window);
            Ok((out.clone(), WindowCache::Conv { window, out }))
        }
        LayerParams::Clstm { lstm, proj } => {
            let trace = lstm_forward(lstm, frames)?;
            let seq = select_sequence(&trace, cfg.source, proj.as_ref())?;
            let r = reduce(&seq, cfg.reduction);
            Ok((r.value, WindowCache::Lstm { trace, seq, argmax: r.argmax }))
        }
        LayerParams::ExtendedClstm { lstm, proj } => {
            let trace = lstm_forward_positional(&lstm.inputs, &lstm.rec, frames)?;
            let seq = select_sequence(&trace, cfg.source, proj.as_ref())?;
            let r = reduce(&seq, cfg.reduction);
            Ok((r.value, WindowCache::Lstm { trace, seq, argmax: r.argmax }))
        }
        LayerParams::Cblstm(p) => {
            let out = blstm_forward(p, frames)?;
            let r = reduce(&out.y, cfg.reduction);
            Ok((r.value, WindowCache::Blstm { out, argmax: r.argmax }))
        }
    }
}

/// Accumulates parameter gradients for one window into `grads` and returns
/// the gradient on the window's frames.
fn extract_backward(
    cfg: &CrnnLayerConfig,
    params: &LayerParams,
    cache: &WindowCache,
    dr: &[f64],
    grads: &mut LayerParams,
) -> Result<Vec<Vec<f64>>> {
    match (params, cache, grads) {
        (LayerParams::Conv(p), WindowCache::Conv { window, out }, LayerParams::Conv(g)) => {
            let dz: Vec<f64> = dr
                .iter()
                .zip(out)
                .map(|(d, y)| d * p.activation.derivative_from_output(*y))
                .collect();
            g.w.outer_acc(&dz, window);
            for (b, d) in g.b.data_mut().iter_mut().zip(&dz) {
                *b += d;
            }
            let mut dflat = vec![0.0; window.len()];
            p.w.matvec_t_acc(&dz, &mut dflat);
            // flattened window is row-major k x r1
            Ok((0..p.width)
                .map(|t| (0..p.k).map(|r| dflat[r * p.width + t]).collect())
                .collect())
        }
        (
            LayerParams::Clstm { lstm, proj },
            WindowCache::Lstm { trace, seq, argmax },
            LayerParams::Clstm { lstm: gl, proj: gp },
        ) => {
            let ds = reduce_backward(dr, seq.len(), cfg.reduction, argmax.as_deref());
            let up = sequence_to_state_grads(trace, &ds, cfg.source, proj.as_ref(), gp.as_mut());
            let (g, dx) = lstm_backward(lstm, trace, &up)?;
            gl.accumulate(&g);
            Ok(dx)
        }
        (
            LayerParams::ExtendedClstm { lstm, proj },
            WindowCache::Lstm { trace, seq, argmax },
            LayerParams::ExtendedClstm { lstm: gl, proj: gp },
        ) => {
            let ds = reduce_backward(dr, seq.len(), cfg.reduction, argmax.as_deref());
            let up = sequence_to_state_grads(trace, &ds, cfg.source, proj.as_ref(), gp.as_mut());
            let (gi, gr, dx) = lstm_backward_positional(&lstm.inputs, &lstm.rec, trace, &up)?;
            for (a, b) in gl.inputs.iter_mut().zip(&gi) {
                a.accumulate(b);
            }
            gl.rec.accumulate(&gr);
            Ok(dx)
        }
        (LayerParams::Cblstm(p), WindowCache::Blstm { out, argmax }, LayerParams::Cblstm(g)) => {
            let dy = reduce_backward(dr, out.y.len(), cfg.reduction, argmax.as_deref());
            let (gb, dx) = blstm_backward(p, out, &dy)?;
            g.accumulate(&gb);
            Ok(dx)
        }
        _ => Err(Error::Config("layer parameters do not match their cache".into())),
    }
}

// ---------------------------------------------------------------------------
// Whole-sequence layer

/// Everything the backward pass of one layer needs.
pub struct LayerCache {
    windows: Vec<WindowCache>,
    input_cols: usize,
    extracted_cols: usize,
    pool_argmax: Option<Vec<usize>>,
}

fn check_layer(cfg: &CrnnLayerConfig, params: &LayerParams, x: &Matrix) -> Result<()> {
    if x.cols() < cfg.window.width {
        return Err(Error::SequenceTooShort {
            len: x.cols(),
            width: cfg.window.width,
        });
    }
    let k = match params {
        LayerParams::Conv(p) => p.k,
        LayerParams::Clstm { lstm, .. } => lstm.input_dim(),
        LayerParams::ExtendedClstm { lstm, .. } => lstm.inputs[0].input_dim(),
        LayerParams::Cblstm(p) => p.fwd.input_dim(),
    };
    if x.rows() != k {
        return Err(Error::Shape {
            op: "crnn_layer_forward",
            left: (k, x.cols()),
            right: x.shape(),
        });
    }
    if let LayerParams::ExtendedClstm { lstm, .. } = params {
        if lstm.width() != cfg.window.width {
            return Err(Error::WindowWidth {
                expected: lstm.width(),
                got: cfg.window.width,
            });
        }
    }
    Ok(())
}

pub fn crnn_layer_forward(cfg: &CrnnLayerConfig, params: &LayerParams, x: &Matrix) -> Result<Matrix> {
    Ok(layer_forward(cfg, params, x)?.0)
}

pub fn layer_forward(
    cfg: &CrnnLayerConfig,
    params: &LayerParams,
    x: &Matrix,
) -> Result<(Matrix, LayerCache)> {
    check_layer(cfg, params, x)?;
    let frames = x.columns();
    let m = window_count(x.cols(), cfg.window);
    let width = cfg.window.width;
    let mut features = Vec::with_capacity(m);
    let mut caches = Vec::with_capacity(m);
    for i in 0..m {
        let start = cfg.window.start(i);
        let flat = matches!(params, LayerParams::Conv(_))
            .then(|| x.column_slice(start, width).into_vec());
        let (f, c) = extract_cached(cfg, params, &frames[start..start + width], flat)?;
        features.push(f);
        caches.push(c);
    }
    let extracted = Matrix::from_columns(&features)?;
    let (out, pool_argmax) = match cfg.pool {
        Some(p) => {
            let (o, a) = max_pool_with_argmax(&extracted, p);
            (o, Some(a))
        }
        None => (extracted, None),
    };
    Ok((
        out,
        LayerCache {
            windows: caches,
            input_cols: x.cols(),
            extracted_cols: m,
            pool_argmax,
        },
    ))
}

/// Parameter gradients and the gradient on the layer input.
pub fn layer_backward(
    cfg: &CrnnLayerConfig,
    params: &LayerParams,
    cache: &LayerCache,
    d_out: &Matrix,
) -> Result<(LayerParams, Matrix)> {
    let d_extracted = match &cache.pool_argmax {
        Some(arg) => max_pool_backward(d_out, arg, cache.extracted_cols),
        None => d_out.clone(),
    };
    if d_extracted.cols() != cache.extracted_cols || d_extracted.rows() != cfg.features {
        return Err(Error::Shape {
            op: "layer_backward",
            left: (cfg.features, cache.extracted_cols),
            right: d_extracted.shape(),
        });
    }
    let mut grads = params.zeros_like();
    let k = match params {
        LayerParams::Conv(p) => p.k,
        LayerParams::Clstm { lstm, .. } => lstm.input_dim(),
        LayerParams::ExtendedClstm { lstm, .. } => lstm.inputs[0].input_dim(),
        LayerParams::Cblstm(p) => p.fwd.input_dim(),
    };
    let mut dx = Matrix::zeros(k, cache.input_cols);
    for (i, wc) in cache.windows.iter().enumerate() {
        let dr = d_extracted.column(i);
        if dr.iter().all(|&v| v == 0.0) {
            continue;
        }
        let dframes = extract_backward(cfg, params, wc, &dr, &mut grads)?;
        let start = cfg.window.start(i);
        for (t, df) in dframes.iter().enumerate() {
            for (r, v) in df.iter().enumerate() {
                dx.add_at(r, start + t, *v);
            }
        }
    }
    Ok((grads, dx))
}

// ---------------------------------------------------------------------------
// Classifier head

/// `relu(W v + b)`.
pub fn dense_relu_forward(w: &Matrix, b: &Matrix, v: &[f64]) -> Result<Vec<f64>> {
    if w.cols() != v.len() || b.rows() != w.rows() {
        return Err(Error::Shape {
            op: "dense_relu_forward",
            left: w.shape(),
            right: (v.len(), b.rows()),
        });
    }
    let mut z = b.data().to_vec();
    w.matvec_acc(v, &mut z);
    Ok(z.into_iter().map(|x| x.max(0.0)).collect())
}

/// Max-shifted softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// How per-step class distributions are pooled into one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    /// Mean of the last `q` steps (all steps when shorter).
    LastQ(usize),
    All,
}

impl Aggregation {
    /// Index of the first aggregated step for a sequence of `len` steps.
    pub fn first_step(self, len: usize) -> usize {
        match self {
            Aggregation::LastQ(q) => len.saturating_sub(q),
            Aggregation::All => 0,
        }
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Aggregation::All);
        }
        s.strip_prefix("last:")
            .and_then(|q| q.parse().ok())
            .filter(|&q: &usize| q >= 1)
            .map(Aggregation::LastQ)
            .ok_or_else(|| Error::Config(format!("aggregation must be `all` or `last:<q>`, got `{s}`")))
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Aggregation::All => f.write_str("all"),
            Aggregation::LastQ(q) => write!(f, "last:{q}"),
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Averages the selected distributions and returns `(argmax, average)`.
pub fn aggregate_predictions(probs: &[Vec<f64>], mode: Aggregation) -> (usize, Vec<f64>) {
    let first = mode.first_step(probs.len());
    let selected = &probs[first..];
    let mut avg = vec![0.0; selected[0].len()];
    for p in selected {
        for (a, v) in avg.iter_mut().zip(p) {
            *a += v;
        }
    }
    let q = selected.len() as f64;
    avg.iter_mut().for_each(|a| *a /= q);
    (argmax(&avg), avg)
}

//! Recurrent cells: a simple sigmoid RNN, a peephole LSTM and the
//! bidirectional LSTM combiner, each with a hand-derived backward pass.
//!
//! LSTM step, with `*` element-wise and full `n x n` peephole matrices:
//!
//! ```text
//! i_t = sigmoid(W_xi x_t + W_hi h_{t-1} + W_ci c_{t-1} + b_i)
//! f_t = sigmoid(W_xf x_t + W_hf h_{t-1} + W_cf c_{t-1} + b_f)
//! c_t = f_t * c_{t-1} + i_t * tanh(W_xc x_t + W_hc h_{t-1} + b_c)
//! o_t = sigmoid(W_xo x_t + W_ho h_{t-1} + W_co c_t + b_o)
//! h_t = o_t * tanh(c_t)
//! ```
//!
//! The output gate reads the *new* cell state, so in the backward pass the
//! gradient reaching `o_t` also flows into `c_t` through `W_co`.
//!
//! Sequences are slices of frames (`&[Vec<f64>]`). Every forward pass starts
//! from `h_0 = c_0 = 0`.

use serde::{Deserialize, Serialize};

use crate::numerics::{init_params, sigmoid};
use crate::params::{impl_parameters, join, Parameters};
use crate::{Error, Matrix, Result, Rng};

fn check_len(op: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape {
            op,
            left: (expected, 1),
            right: (got, 1),
        });
    }
    Ok(())
}

fn check_frames(op: &'static str, k: usize, xs: &[Vec<f64>]) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::SequenceTooShort { len: 0, width: 1 });
    }
    for x in xs {
        check_len(op, k, x.len())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Simple RNN

#[derive(Debug, Clone, PartialEq)]
pub struct RnnParams {
    pub w_xh: Matrix,
    pub w_hh: Matrix,
    pub w_hy: Matrix,
    pub b_h: Matrix,
    pub b_y: Matrix,
}

impl_parameters!(RnnParams { w_xh, w_hh, w_hy, b_h, b_y });

impl RnnParams {
    pub fn zeros(k: usize, n: usize, d: usize) -> Self {
        Self {
            w_xh: Matrix::zeros(n, k),
            w_hh: Matrix::zeros(n, n),
            w_hy: Matrix::zeros(d, n),
            b_h: Matrix::zeros(n, 1),
            b_y: Matrix::zeros(d, 1),
        }
    }

    pub fn new(k: usize, n: usize, d: usize, rng: &mut Rng) -> Self {
        Self {
            w_xh: init_params(n, k, rng),
            w_hh: init_params(n, n, rng),
            w_hy: init_params(d, n, rng),
            b_h: Matrix::zeros(n, 1),
            b_y: Matrix::zeros(d, 1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_xh.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_xh.rows()
    }
}

#[derive(Debug, Clone)]
pub struct RnnTrace {
    pub x: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
}

/// `h_t = sigmoid(W_xh x_t + W_hh h_{t-1} + b_h)`, `y_t = W_hy h_t + b_y`.
pub fn rnn_forward(p: &RnnParams, xs: &[Vec<f64>]) -> Result<RnnTrace> {
    check_frames("rnn_forward", p.input_dim(), xs)?;
    let n = p.hidden_dim();
    let mut h_prev = vec![0.0; n];
    let mut h = Vec::with_capacity(xs.len());
    let mut y = Vec::with_capacity(xs.len());
    for x in xs {
        let mut z = p.b_h.data().to_vec();
        p.w_xh.matvec_acc(x, &mut z);
        p.w_hh.matvec_acc(&h_prev, &mut z);
        let ht: Vec<f64> = z.into_iter().map(sigmoid).collect();
        let mut yt = p.b_y.data().to_vec();
        p.w_hy.matvec_acc(&ht, &mut yt);
        h_prev.clone_from(&ht);
        h.push(ht);
        y.push(yt);
    }
    Ok(RnnTrace {
        x: xs.to_vec(),
        h,
        y,
    })
}

/// Backward pass given upstream gradients on the outputs `y_t`.
pub fn rnn_backward(
    p: &RnnParams,
    trace: &RnnTrace,
    dy: &[Vec<f64>],
) -> Result<(RnnParams, Vec<Vec<f64>>)> {
    check_len("rnn_backward", trace.h.len(), dy.len())?;
    let n = p.hidden_dim();
    let mut grads = p.zeros_like();
    let mut dxs = vec![vec![0.0; p.input_dim()]; trace.x.len()];
    let mut dh_next = vec![0.0; n];
    for t in (0..trace.h.len()).rev() {
        check_len("rnn_backward", p.w_hy.rows(), dy[t].len())?;
        let h = &trace.h[t];
        grads.w_hy.outer_acc(&dy[t], h);
        for (b, g) in grads.b_y.data_mut().iter_mut().zip(&dy[t]) {
            *b += g;
        }
        let mut dh = dh_next.clone();
        p.w_hy.matvec_t_acc(&dy[t], &mut dh);
        let dz: Vec<f64> = dh.iter().zip(h).map(|(g, s)| g * s * (1.0 - s)).collect();
        grads.w_xh.outer_acc(&dz, &trace.x[t]);
        if t > 0 {
            grads.w_hh.outer_acc(&dz, &trace.h[t - 1]);
        }
        for (b, g) in grads.b_h.data_mut().iter_mut().zip(&dz) {
            *b += g;
        }
        p.w_xh.matvec_t_acc(&dz, &mut dxs[t]);
        dh_next = vec![0.0; n];
        p.w_hh.matvec_t_acc(&dz, &mut dh_next);
    }
    Ok((grads, dxs))
}

// ---------------------------------------------------------------------------
// Peephole LSTM

/// Input-to-gate matrices `W_xi, W_xf, W_xc, W_xo`, each `n x k`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateInputs {
    pub w_xi: Matrix,
    pub w_xf: Matrix,
    pub w_xc: Matrix,
    pub w_xo: Matrix,
}

impl_parameters!(GateInputs { w_xi, w_xf, w_xc, w_xo });

impl GateInputs {
    pub fn zeros(k: usize, n: usize) -> Self {
        Self {
            w_xi: Matrix::zeros(n, k),
            w_xf: Matrix::zeros(n, k),
            w_xc: Matrix::zeros(n, k),
            w_xo: Matrix::zeros(n, k),
        }
    }

    pub fn new(k: usize, n: usize, rng: &mut Rng) -> Self {
        Self {
            w_xi: init_params(n, k, rng),
            w_xf: init_params(n, k, rng),
            w_xc: init_params(n, k, rng),
            w_xo: init_params(n, k, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_xi.cols()
    }

    fn mats(&self) -> [&Matrix; 4] {
        [&self.w_xi, &self.w_xf, &self.w_xc, &self.w_xo]
    }

    /// Stacked input contributions `[i | f | c | o]`, length `4n`.
    fn project(&self, x: &[f64]) -> Vec<f64> {
        let n = self.w_xi.rows();
        let mut a = vec![0.0; 4 * n];
        for (g, w) in self.mats().into_iter().enumerate() {
            w.matvec_acc(x, &mut a[g * n..(g + 1) * n]);
        }
        a
    }

    fn backward(&self, dz: &[f64], x: &[f64], grads: &mut GateInputs, dx: &mut [f64]) {
        let n = self.w_xi.rows();
        let gmats = [
            &mut grads.w_xi,
            &mut grads.w_xf,
            &mut grads.w_xc,
            &mut grads.w_xo,
        ];
        for (g, (w, gw)) in self.mats().into_iter().zip(gmats).enumerate() {
            let d = &dz[g * n..(g + 1) * n];
            gw.outer_acc(d, x);
            w.matvec_t_acc(d, dx);
        }
    }
}

/// Everything in an LSTM besides the input matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentWeights {
    pub w_hi: Matrix,
    pub w_hf: Matrix,
    pub w_hc: Matrix,
    pub w_ho: Matrix,
    pub w_ci: Matrix,
    pub w_cf: Matrix,
    pub w_co: Matrix,
    pub b_i: Matrix,
    pub b_f: Matrix,
    pub b_c: Matrix,
    pub b_o: Matrix,
}

impl_parameters!(RecurrentWeights {
    w_hi, w_hf, w_hc, w_ho, w_ci, w_cf, w_co, b_i, b_f, b_c, b_o
});

impl RecurrentWeights {
    pub fn zeros(n: usize) -> Self {
        Self {
            w_hi: Matrix::zeros(n, n),
            w_hf: Matrix::zeros(n, n),
            w_hc: Matrix::zeros(n, n),
            w_ho: Matrix::zeros(n, n),
            w_ci: Matrix::zeros(n, n),
            w_cf: Matrix::zeros(n, n),
            w_co: Matrix::zeros(n, n),
            b_i: Matrix::zeros(n, 1),
            b_f: Matrix::zeros(n, 1),
            b_c: Matrix::zeros(n, 1),
            b_o: Matrix::zeros(n, 1),
        }
    }

    pub fn new(n: usize, rng: &mut Rng) -> Self {
        Self {
            w_hi: init_params(n, n, rng),
            w_hf: init_params(n, n, rng),
            w_hc: init_params(n, n, rng),
            w_ho: init_params(n, n, rng),
            w_ci: init_params(n, n, rng),
            w_cf: init_params(n, n, rng),
            w_co: init_params(n, n, rng),
            b_i: Matrix::zeros(n, 1),
            b_f: Matrix::zeros(n, 1),
            b_c: Matrix::zeros(n, 1),
            b_o: Matrix::zeros(n, 1),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hi.rows()
    }

    /// One step given the stacked input contributions `a = [i | f | c | o]`.
    fn step(&self, a: &[f64], h_prev: &[f64], c_prev: &[f64]) -> LstmStep {
        let n = self.hidden_dim();
        let mut z = a.to_vec();
        {
            let (zi, rest) = z.split_at_mut(n);
            let (zf, rest) = rest.split_at_mut(n);
            let (zc, _) = rest.split_at_mut(n);
            self.w_hi.matvec_acc(h_prev, zi);
            self.w_ci.matvec_acc(c_prev, zi);
            self.w_hf.matvec_acc(h_prev, zf);
            self.w_cf.matvec_acc(c_prev, zf);
            self.w_hc.matvec_acc(h_prev, zc);
            for j in 0..n {
                zi[j] += self.b_i.data()[j];
                zf[j] += self.b_f.data()[j];
                zc[j] += self.b_c.data()[j];
            }
        }
        let i: Vec<f64> = z[..n].iter().map(|&v| sigmoid(v)).collect();
        let f: Vec<f64> = z[n..2 * n].iter().map(|&v| sigmoid(v)).collect();
        let g: Vec<f64> = z[2 * n..3 * n].iter().map(|v| v.tanh()).collect();
        let c: Vec<f64> = (0..n).map(|j| f[j] * c_prev[j] + i[j] * g[j]).collect();
        {
            let zo = &mut z[3 * n..];
            self.w_ho.matvec_acc(h_prev, zo);
            self.w_co.matvec_acc(&c, zo);
            for (v, b) in zo.iter_mut().zip(self.b_o.data()) {
                *v += b;
            }
        }
        let o: Vec<f64> = z[3 * n..].iter().map(|&v| sigmoid(v)).collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let h: Vec<f64> = o.iter().zip(&tanh_c).map(|(a, b)| a * b).collect();
        LstmStep {
            x: Vec::new(),
            z,
            i,
            f,
            g,
            o,
            c,
            tanh_c,
            h,
        }
    }
}

/// Peephole LSTM parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub input: GateInputs,
    pub rec: RecurrentWeights,
}

impl Parameters for LstmParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        self.input.visit(prefix, out);
        self.rec.visit(prefix, out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix)>) {
        self.input.visit_mut(prefix, out);
        self.rec.visit_mut(prefix, out);
    }
}

impl LstmParams {
    pub fn zeros(k: usize, n: usize) -> Self {
        Self {
            input: GateInputs::zeros(k, n),
            rec: RecurrentWeights::zeros(n),
        }
    }

    /// Glorot-uniform matrices, zero biases.
    pub fn new(k: usize, n: usize, rng: &mut Rng) -> Self {
        Self {
            input: GateInputs::new(k, n, rng),
            rec: RecurrentWeights::new(n, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.rec.hidden_dim()
    }
}

/// Cached values of one LSTM step. `z` holds the gate pre-activations
/// stacked as `[i | f | c | o]`; `g` is `tanh` of the candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmStep {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub o: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmTrace {
    pub steps: Vec<LstmStep>,
}

impl LstmTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn h(&self, t: usize) -> &[f64] {
        &self.steps[t].h
    }

    pub fn c(&self, t: usize) -> &[f64] {
        &self.steps[t].c
    }

    pub fn last_h(&self) -> &[f64] {
        &self.steps[self.steps.len() - 1].h
    }
}

/// Upstream gradients on the hidden and cell states of every step.
#[derive(Debug, Clone)]
pub struct StateGrads {
    pub dh: Vec<Vec<f64>>,
    pub dc: Vec<Vec<f64>>,
}

impl StateGrads {
    pub fn zeros(len: usize, n: usize) -> Self {
        Self {
            dh: vec![vec![0.0; n]; len],
            dc: vec![vec![0.0; n]; len],
        }
    }
}

pub fn lstm_step(
    p: &LstmParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<LstmStep> {
    check_len("lstm_step", p.input_dim(), x.len())?;
    check_len("lstm_step", p.hidden_dim(), h_prev.len())?;
    check_len("lstm_step", p.hidden_dim(), c_prev.len())?;
    let mut step = p.rec.step(&p.input.project(x), h_prev, c_prev);
    step.x = x.to_vec();
    Ok(step)
}

pub fn lstm_forward(p: &LstmParams, xs: &[Vec<f64>]) -> Result<LstmTrace> {
    check_frames("lstm_forward", p.input_dim(), xs)?;
    Ok(run_recurrence(&p.rec, xs, |_, x| p.input.project(x)))
}

/// Runs the recurrence from zero state; `project(t, x)` yields the stacked
/// input contributions for step `t`.
pub(crate) fn run_recurrence(
    rec: &RecurrentWeights,
    xs: &[Vec<f64>],
    project: impl Fn(usize, &[f64]) -> Vec<f64>,
) -> LstmTrace {
    let n = rec.hidden_dim();
    let zero = vec![0.0; n];
    let mut steps: Vec<LstmStep> = Vec::with_capacity(xs.len());
    for (t, x) in xs.iter().enumerate() {
        let (h_prev, c_prev) = match steps.last() {
            Some(s) => (&s.h, &s.c),
            None => (&zero, &zero),
        };
        let mut step = rec.step(&project(t, x), h_prev, c_prev);
        step.x.clone_from(x);
        steps.push(step);
    }
    LstmTrace { steps }
}

/// Reverse-mode pass through the recurrence. Accumulates the recurrent
/// weight gradients into `grads` and returns the gate pre-activation
/// gradients `[i | f | c | o]` of every step.
pub(crate) fn recurrence_backward(
    rec: &RecurrentWeights,
    trace: &LstmTrace,
    up: &StateGrads,
    grads: &mut RecurrentWeights,
) -> Vec<Vec<f64>> {
    let n = rec.hidden_dim();
    let len = trace.len();
    let zero = vec![0.0; n];
    let mut dzs = vec![Vec::new(); len];
    let mut dh_next = vec![0.0; n];
    let mut dc_next = vec![0.0; n];
    for t in (0..len).rev() {
        let s = &trace.steps[t];
        let (h_prev, c_prev) = if t > 0 {
            (&trace.steps[t - 1].h, &trace.steps[t - 1].c)
        } else {
            (&zero, &zero)
        };
        let dh: Vec<f64> = (0..n).map(|j| up.dh[t][j] + dh_next[j]).collect();
        let mut dz = vec![0.0; 4 * n];
        // output gate
        for j in 0..n {
            let do_ = dh[j] * s.tanh_c[j];
            dz[3 * n + j] = do_ * s.o[j] * (1.0 - s.o[j]);
        }
        let mut dc: Vec<f64> = (0..n)
            .map(|j| {
                up.dc[t][j]
                    + dc_next[j]
                    + dh[j] * s.o[j] * (1.0 - s.tanh_c[j] * s.tanh_c[j])
            })
            .collect();
        rec.w_co.matvec_t_acc(&dz[3 * n..], &mut dc);
        for j in 0..n {
            dz[j] = dc[j] * s.g[j] * s.i[j] * (1.0 - s.i[j]);
            dz[n + j] = dc[j] * c_prev[j] * s.f[j] * (1.0 - s.f[j]);
            dz[2 * n + j] = dc[j] * s.i[j] * (1.0 - s.g[j] * s.g[j]);
        }
        let (dzi, rest) = dz.split_at(n);
        let (dzf, rest) = rest.split_at(n);
        let (dzc, dzo) = rest.split_at(n);

        grads.w_hi.outer_acc(dzi, h_prev);
        grads.w_hf.outer_acc(dzf, h_prev);
        grads.w_hc.outer_acc(dzc, h_prev);
        grads.w_ho.outer_acc(dzo, h_prev);
        grads.w_ci.outer_acc(dzi, c_prev);
        grads.w_cf.outer_acc(dzf, c_prev);
        grads.w_co.outer_acc(dzo, &s.c);
        for (b, d) in [
            (&mut grads.b_i, dzi),
            (&mut grads.b_f, dzf),
            (&mut grads.b_c, dzc),
            (&mut grads.b_o, dzo),
        ] {
            for (bv, dv) in b.data_mut().iter_mut().zip(d) {
                *bv += dv;
            }
        }

        dh_next = vec![0.0; n];
        rec.w_hi.matvec_t_acc(dzi, &mut dh_next);
        rec.w_hf.matvec_t_acc(dzf, &mut dh_next);
        rec.w_hc.matvec_t_acc(dzc, &mut dh_next);
        rec.w_ho.matvec_t_acc(dzo, &mut dh_next);
        dc_next = (0..n).map(|j| dc[j] * s.f[j]).collect();
        rec.w_ci.matvec_t_acc(dzi, &mut dc_next);
        rec.w_cf.matvec_t_acc(dzf, &mut dc_next);

        dzs[t] = dz;
    }
    dzs
}

fn check_state_grads(op: &'static str, trace: &LstmTrace, n: usize, up: &StateGrads) -> Result<()> {
    check_len(op, trace.len(), up.dh.len())?;
    check_len(op, trace.len(), up.dc.len())?;
    for (dh, dc) in up.dh.iter().zip(&up.dc) {
        check_len(op, n, dh.len())?;
        check_len(op, n, dc.len())?;
    }
    Ok(())
}

/// Gradients of the parameters and of every input frame, given upstream
/// gradients on `h_t` and `c_t`.
pub fn lstm_backward(
    p: &LstmParams,
    trace: &LstmTrace,
    up: &StateGrads,
) -> Result<(LstmParams, Vec<Vec<f64>>)> {
    check_state_grads("lstm_backward", trace, p.hidden_dim(), up)?;
    let mut grads = LstmParams::zeros(p.input_dim(), p.hidden_dim());
    let dzs = recurrence_backward(&p.rec, trace, up, &mut grads.rec);
    let mut dxs = vec![vec![0.0; p.input_dim()]; trace.len()];
    for (t, dz) in dzs.iter().enumerate() {
        p.input
            .backward(dz, &trace.steps[t].x, &mut grads.input, &mut dxs[t]);
    }
    Ok((grads, dxs))
}

/// Extended-LSTM variant: step `t` uses the `t`-th copy of the input
/// matrices.
pub fn lstm_forward_positional(
    inputs: &[GateInputs],
    rec: &RecurrentWeights,
    xs: &[Vec<f64>],
) -> Result<LstmTrace> {
    if xs.len() != inputs.len() {
        return Err(Error::WindowWidth {
            expected: inputs.len(),
            got: xs.len(),
        });
    }
    for (x, w) in xs.iter().zip(inputs) {
        check_len("lstm_forward_positional", w.input_dim(), x.len())?;
    }
    Ok(run_recurrence(rec, xs, |t, x| inputs[t].project(x)))
}

pub fn lstm_backward_positional(
    inputs: &[GateInputs],
    rec: &RecurrentWeights,
    trace: &LstmTrace,
    up: &StateGrads,
) -> Result<(Vec<GateInputs>, RecurrentWeights, Vec<Vec<f64>>)> {
    let n = rec.hidden_dim();
    check_state_grads("lstm_backward_positional", trace, n, up)?;
    check_len("lstm_backward_positional", inputs.len(), trace.len())?;
    let mut g_rec = RecurrentWeights::zeros(n);
    let dzs = recurrence_backward(rec, trace, up, &mut g_rec);
    let mut g_inputs: Vec<GateInputs> = inputs
        .iter()
        .map(|w| GateInputs::zeros(w.input_dim(), n))
        .collect();
    let mut dxs = Vec::with_capacity(trace.len());
    for (t, dz) in dzs.iter().enumerate() {
        let mut dx = vec![0.0; inputs[t].input_dim()];
        inputs[t].backward(dz, &trace.steps[t].x, &mut g_inputs[t], &mut dx);
        dxs.push(dx);
    }
    Ok((g_inputs, g_rec, dxs))
}

// ---------------------------------------------------------------------------
// Bidirectional LSTM

/// Which per-direction state the combiner reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlstmSource {
    Hidden,
    Cell,
}

/// Two LSTMs plus the combiner
/// `y_t = W_fwd_y s_fwd_t + W_bwd_y s_bwd_t + b_y`, where `s` is the hidden
/// or the cell state.
#[derive(Debug, Clone, PartialEq)]
pub struct BlstmParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    pub w_fwd_y: Matrix,
    pub w_bwd_y: Matrix,
    pub b_y: Matrix,
    pub source: BlstmSource,
}

impl Parameters for BlstmParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        self.fwd.visit(&join(prefix, "fwd"), out);
        self.bwd.visit(&join(prefix, "bwd"), out);
        out.push((join(prefix, "w_fwd_y"), &self.w_fwd_y));
        out.push((join(prefix, "w_bwd_y"), &self.w_bwd_y));
        out.push((join(prefix, "b_y"), &self.b_y));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix)>) {
        self.fwd.visit_mut(&join(prefix, "fwd"), out);
        self.bwd.visit_mut(&join(prefix, "bwd"), out);
        out.push((join(prefix, "w_fwd_y"), &mut self.w_fwd_y));
        out.push((join(prefix, "w_bwd_y"), &mut self.w_bwd_y));
        out.push((join(prefix, "b_y"), &mut self.b_y));
    }
}

impl BlstmParams {
    pub fn zeros(k: usize, n: usize, d: usize, source: BlstmSource) -> Self {
        Self {
            fwd: LstmParams::zeros(k, n),
            bwd: LstmParams::zeros(k, n),
            w_fwd_y: Matrix::zeros(d, n),
            w_bwd_y: Matrix::zeros(d, n),
            b_y: Matrix::zeros(d, 1),
            source,
        }
    }

    pub fn new(k: usize, n: usize, d: usize, source: BlstmSource, rng: &mut Rng) -> Self {
        Self {
            fwd: LstmParams::new(k, n, rng),
            bwd: LstmParams::new(k, n, rng),
            w_fwd_y: init_params(d, n, rng),
            w_bwd_y: init_params(d, n, rng),
            b_y: Matrix::zeros(d, 1),
            source,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.b_y.rows()
    }

    /// Same parameters with the two directions exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            fwd: self.bwd.clone(),
            bwd: self.fwd.clone(),
            w_fwd_y: self.w_bwd_y.clone(),
            w_bwd_y: self.w_fwd_y.clone(),
            b_y: self.b_y.clone(),
            source: self.source,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlstmOutput {
    pub y: Vec<Vec<f64>>,
    pub fwd: LstmTrace,
    /// Trace of the backward LSTM in its own (reversed) processing order:
    /// step `s` corresponds to original time `m - 1 - s`.
    pub bwd: LstmTrace,
}

fn select(source: BlstmSource, step: &LstmStep) -> &[f64] {
    match source {
        BlstmSource::Hidden => &step.h,
        BlstmSource::Cell => &step.c,
    }
}

pub fn blstm_forward(p: &BlstmParams, xs: &[Vec<f64>]) -> Result<BlstmOutput> {
    let fwd = lstm_forward(&p.fwd, xs)?;
    let reversed: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
    let bwd = lstm_forward(&p.bwd, &reversed)?;
    let m = xs.len();
    let y = (0..m)
        .map(|t| {
            // b + (u + v): direction terms are summed first so that swapping
            // the directions is bit-exact
            let u = p.w_fwd_y.matvec(select(p.source, &fwd.steps[t]));
            let v = p.w_bwd_y.matvec(select(p.source, &bwd.steps[m - 1 - t]));
            p.b_y
                .data()
                .iter()
                .zip(u.iter().zip(&v))
                .map(|(b, (u, v))| b + (u + v))
                .collect()
        })
        .collect();
    Ok(BlstmOutput { y, fwd, bwd })
}

pub fn blstm_backward(
    p: &BlstmParams,
    out: &BlstmOutput,
    dy: &[Vec<f64>],
) -> Result<(BlstmParams, Vec<Vec<f64>>)> {
    let m = out.y.len();
    check_len("blstm_backward", m, dy.len())?;
    let n = p.fwd.hidden_dim();
    let mut grads = p.zeros_like();
    let mut up_f = StateGrads::zeros(m, n);
    let mut up_b = StateGrads::zeros(m, n);
    for t in 0..m {
        check_len("blstm_backward", p.output_dim(), dy[t].len())?;
        let sb = m - 1 - t;
        grads
            .w_fwd_y
            .outer_acc(&dy[t], select(p.source, &out.fwd.steps[t]));
        grads
            .w_bwd_y
            .outer_acc(&dy[t], select(p.source, &out.bwd.steps[sb]));
        for (b, g) in grads.b_y.data_mut().iter_mut().zip(&dy[t]) {
            *b += g;
        }
        let (df, db) = match p.source {
            BlstmSource::Hidden => (&mut up_f.dh[t], &mut up_b.dh[sb]),
            BlstmSource::Cell => (&mut up_f.dc[t], &mut up_b.dc[sb]),
        };
        p.w_fwd_y.matvec_t_acc(&dy[t], df);
        p.w_bwd_y.matvec_t_acc(&dy[t], db);
    }
    let (gf, dx_f) = lstm_backward(&p.fwd, &out.fwd, &up_f)?;
    let (gb, dx_b) = lstm_backward(&p.bwd, &out.bwd, &up_b)?;
    grads.fwd = gf;
    grads.bwd = gb;
    let dxs = (0..m)
        .map(|t| {
            dx_f[t]
                .iter()
                .zip(&dx_b[m - 1 - t])
                .map(|(a, b)| a + b)
                .collect()
        })
        .collect();
    Ok((grads, dxs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Matrix {
        Matrix::filled(1, 1, v)
    }

    /// Scalar LSTM with input, forget and output gates pinned near 1 and
    /// `W_xc = 1`: `c_t = c_{t-1} + tanh(x_t)`.
    fn saturated() -> LstmParams {
        let mut p = LstmParams::zeros(1, 1);
        p.rec.b_i = scalar(100.0);
        p.rec.b_f = scalar(100.0);
        p.rec.b_o = scalar(100.0);
        p.input.w_xc = scalar(1.0);
        p
    }

    fn frames(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn rnn_zero_params() {
        let p = RnnParams::zeros(2, 3, 2);
        let tr = rnn_forward(&p, &[vec![1.0, -2.0], vec![0.5, 0.5]]).unwrap();
        for h in &tr.h {
            assert_eq!(h, &vec![0.5; 3]);
        }
        for y in &tr.y {
            assert_eq!(y, &vec![0.0; 2]);
        }
    }

    #[test]
    fn rnn_scalar_recurrence() {
        let mut p = RnnParams::zeros(1, 1, 1);
        p.w_xh = scalar(1.0);
        assert_eq!(rnn_forward(&p, &frames(&[0.0])).unwrap().h[0][0], 0.5);

        p.w_xh = scalar(2.0);
        p.w_hh = scalar(1.0);
        let tr = rnn_forward(&p, &frames(&[1.0, 0.0])).unwrap();
        let h1 = 1.0 / (1.0 + (-2.0f64).exp());
        let h2 = 1.0 / (1.0 + (-h1).exp());
        assert!((tr.h[0][0] - 0.8808).abs() < 1e-4);
        assert!((tr.h[1][0] - 0.7070).abs() < 1e-4);
        assert_eq!(tr.h[0][0], h1);
        assert_eq!(tr.h[1][0], h2);
    }

    #[test]
    fn lstm_zero_params() {
        let p = LstmParams::zeros(2, 2);
        let s = lstm_step(&p, &[1.0, 2.0], &[0.3, -0.2], &[0.4, -1.0]).unwrap();
        assert_eq!(s.i, vec![0.5; 2]);
        assert_eq!(s.f, vec![0.5; 2]);
        assert_eq!(s.o, vec![0.5; 2]);
        assert_eq!(s.c, vec![0.2, -0.5]);
        assert_eq!(s.h, vec![0.5 * 0.2f64.tanh(), 0.5 * (-0.5f64).tanh()]);
        let s0 = lstm_step(&p, &[1.0, 2.0], &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!((s0.h.clone(), s0.c.clone()), (vec![0.0; 2], vec![0.0; 2]));
    }

    #[test]
    fn lstm_saturated_step() {
        let s = lstm_step(&saturated(), &[0.5], &[0.0], &[0.0]).unwrap();
        assert!((s.c[0] - 0.4621).abs() < 1e-4);
        assert!((s.h[0] - 0.4319).abs() < 1e-4);
    }

    #[test]
    fn lstm_forget_gate_closed() {
        let mut p = LstmParams::zeros(1, 1);
        p.rec.b_f = scalar(-100.0);
        p.input.w_xc = scalar(1.0);
        p.rec.b_c = scalar(0.1);
        let s = lstm_step(&p, &[0.7], &[0.3], &[5.0]).unwrap();
        let expected = s.i[0] * (0.7f64 + 0.1).tanh();
        assert!((s.c[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn lstm_saturated_sequence_accumulates() {
        let tr = lstm_forward(&saturated(), &frames(&[0.5, -0.5, 0.25])).unwrap();
        let c: Vec<f64> = (0..3).map(|t| tr.c(t)[0]).collect();
        assert!((c[0] - 0.4621).abs() < 1e-4);
        assert!(c[1].abs() < 1e-4);
        assert!((c[2] - 0.2449).abs() < 1e-4);
    }

    #[test]
    fn lstm_trace_is_fold_of_steps() {
        let mut rng = Rng::new(4);
        let p = LstmParams::new(3, 2, &mut rng);
        let xs: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let tr = lstm_forward(&p, &xs).unwrap();
        let (mut h, mut c) = (vec![0.0; 2], vec![0.0; 2]);
        for (t, x) in xs.iter().enumerate() {
            let s = lstm_step(&p, x, &h, &c).unwrap();
            assert_eq!(s, tr.steps[t]);
            h = s.h;
            c = s.c;
        }
        let single = lstm_forward(&p, &xs[..1]).unwrap();
        assert_eq!(single.steps[0], lstm_step(&p, &xs[0], &[0.0; 2], &[0.0; 2]).unwrap());
    }

    #[test]
    fn lstm_shape_errors() {
        let p = LstmParams::zeros(2, 3);
        assert!(matches!(
            lstm_forward(&p, &[vec![1.0]]),
            Err(Error::Shape { .. })
        ));
        assert!(lstm_step(&p, &[1.0, 1.0], &[0.0; 2], &[0.0; 3]).is_err());
        let tr = lstm_forward(&p, &[vec![1.0, 1.0]]).unwrap();
        assert!(lstm_backward(&p, &tr, &StateGrads::zeros(2, 3)).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(8);
        let p = LstmParams::new(2, 3, &mut rng);
        let xs = vec![vec![0.3, -0.1], vec![0.9, 0.2]];
        let tr = lstm_forward(&p, &xs).unwrap();
        let (g, dx) = lstm_backward(&p, &tr, &StateGrads::zeros(2, 3)).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(dx.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn cell_gradient_wrt_candidate_bias_in_saturated_config() {
        // dc_T/db_c = sum_t (1 - tanh^2(x_t)) when all gates are pinned at 1
        let p = saturated();
        let xs = frames(&[0.5, -0.5, 0.25]);
        let tr = lstm_forward(&p, &xs).unwrap();
        let mut up = StateGrads::zeros(3, 1);
        up.dc[2][0] = 1.0;
        let (g, _) = lstm_backward(&p, &tr, &up).unwrap();
        let expected: f64 = [0.5f64, -0.5, 0.25].iter().map(|x| 1.0 - x.tanh().powi(2)).sum();
        assert!((g.rec.b_c.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn blstm_zero_and_scalar() {
        let p = BlstmParams::zeros(2, 3, 2, BlstmSource::Hidden);
        let out = blstm_forward(&p, &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(out.y.iter().flatten().all(|&v| v == 0.0));

        let p = BlstmParams {
            fwd: saturated(),
            bwd: saturated(),
            w_fwd_y: scalar(1.0),
            w_bwd_y: scalar(1.0),
            b_y: scalar(0.0),
            source: BlstmSource::Cell,
        };
        let out = blstm_forward(&p, &frames(&[0.5, -0.5])).unwrap();
        assert!((out.y[0][0] - 0.4621).abs() < 1e-4);
        assert!((out.y[1][0] + 0.4621).abs() < 1e-4);
    }

    #[test]
    fn blstm_palindrome_with_tied_directions() {
        let mut rng = Rng::new(21);
        let lstm = LstmParams::new(2, 3, &mut rng);
        let w = init_params(2, 3, &mut rng);
        let p = BlstmParams {
            fwd: lstm.clone(),
            bwd: lstm,
            w_fwd_y: w.clone(),
            w_bwd_y: w,
            b_y: Matrix::column_vector(&[0.1, -0.2]),
            source: BlstmSource::Hidden,
        };
        let xs = vec![vec![0.1, 0.2], vec![-0.4, 0.7], vec![0.1, 0.2]];
        let out = blstm_forward(&p, &xs).unwrap();
        assert_eq!(out.fwd.steps[0].h, out.bwd.steps[0].h);
        assert_eq!(out.y[0], out.y[2]);
    }
}

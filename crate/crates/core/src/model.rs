//! End-to-end classifier: CRNN layers, a recurrent classifier, a ReLU dense
//! layer and a per-step softmax whose distributions are averaged.
//!
//! The loss is the cross-entropy of the averaged distribution. Its gradient
//! flows back through every step of every recurrence.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cells::{lstm_backward, lstm_forward, LstmParams, LstmTrace, StateGrads};
use crate::framing::WindowSpec;
use crate::layers::{
    argmax, layer_backward, layer_forward, softmax, Aggregation, CrnnLayerConfig, ExtractorKind,
    LayerCache, LayerParams, Reduction, StateSource,
};
use crate::numerics::init_params;
use crate::params::{join, Parameters};
use crate::{Error, Matrix, Result, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    /// Unidirectional LSTM; the dense layer reads `h_t`.
    Lstm,
    /// Forward and backward LSTMs; the dense layer reads both hidden
    /// states, which makes it the bidirectional combiner followed by ReLU.
    Blstm,
}

impl FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(ClassifierKind::Lstm),
            "blstm" => Ok(ClassifierKind::Blstm),
            other => Err(Error::Config(format!("unknown classifier `{other}`"))),
        }
    }
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassifierKind::Lstm => "lstm",
            ClassifierKind::Blstm => "blstm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub layers: Vec<CrnnLayerConfig>,
    pub classifier: ClassifierKind,
    pub classifier_hidden: usize,
    pub dense: usize,
    pub classes: usize,
    pub aggregation: Aggregation,
}

impl ModelConfig {
    /// Two CLSTM layers (100 features, windows 5/2, pooling 2/2, last cell
    /// state) feeding LSTM(256), dense(400) and the mean of the last four
    /// softmax outputs.
    pub fn emotion(input_dim: usize, classes: usize) -> Self {
        let layer = CrnnLayerConfig::new(
            ExtractorKind::Clstm,
            WindowSpec { width: 5, shift: 2 },
            Some(WindowSpec { width: 2, shift: 2 }),
            100,
            StateSource::Cell,
            Reduction::Last,
        );
        Self {
            input_dim,
            layers: vec![layer, layer],
            classifier: ClassifierKind::Lstm,
            classifier_hidden: 256,
            dense: 400,
            classes,
            aggregation: Aggregation::LastQ(4),
        }
    }

    /// One extraction layer of the given kind (conv, max-reduced cell-state
    /// CLSTM, or cell-combining CBLSTM with 100 units per direction) feeding
    /// BLSTM(256 per direction), dense(400) and the mean over all steps.
    pub fn age_gender(kind: Option<ExtractorKind>, input_dim: usize, classes: usize) -> Self {
        let layers = kind
            .map(|kind| {
                vec![CrnnLayerConfig::new(
                    kind,
                    WindowSpec { width: 5, shift: 2 },
                    Some(WindowSpec { width: 2, shift: 2 }),
                    100,
                    StateSource::Cell,
                    Reduction::Max,
                )]
            })
            .unwrap_or_default();
        Self {
            input_dim,
            layers,
            classifier: ClassifierKind::Blstm,
            classifier_hidden: 256,
            dense: 400,
            classes,
            aggregation: Aggregation::All,
        }
    }

    /// Same architecture with every layer at `features` (and matching
    /// recurrent size) and the given classifier and dense sizes.
    pub fn with_dims(mut self, features: usize, classifier_hidden: usize, dense: usize) -> Self {
        for l in &mut self.layers {
            l.features = features;
            l.hidden = features;
        }
        self.classifier_hidden = classifier_hidden;
        self.dense = dense;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classifier_hidden == 0 || self.dense == 0 {
            return Err(Error::Config("model dimensions must be >= 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        for layer in &self.layers {
            layer.validate()?;
        }
        Ok(())
    }

    /// Feature dimension entering the classifier recurrence.
    pub fn classifier_input_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.features)
    }

    /// Number of classifier steps for an input of `len` frames.
    pub fn output_len(&self, len: usize) -> usize {
        self.layers.iter().fold(len, |l, layer| layer.output_len(l))
    }

    /// Shortest input that yields at least `steps` classifier steps.
    pub fn min_len_for(&self, steps: usize) -> usize {
        self.layers
            .iter()
            .rev()
            .fold(steps, |need, layer| layer.min_input_len(need))
    }

    pub fn min_len(&self) -> usize {
        self.min_len_for(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClassifierRecurrence {
    Lstm(LstmParams),
    Blstm { fwd: LstmParams, bwd: LstmParams },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
    pub recurrence: ClassifierRecurrence,
    pub dense_w: Matrix,
    pub dense_b: Matrix,
    pub out_w: Matrix,
    pub out_b: Matrix,
}

impl Parameters for ModelParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{}", i + 1)), out);
        }
        match &self.recurrence {
            ClassifierRecurrence::Lstm(p) => p.visit(&join(prefix, "classifier"), out),
            ClassifierRecurrence::Blstm { fwd, bwd } => {
                fwd.visit(&join(prefix, "classifier.fwd"), out);
                bwd.visit(&join(prefix, "classifier.bwd"), out);
            }
        }
        out.push((join(prefix, "dense.w"), &self.dense_w));
        out.push((join(prefix, "dense.b"), &self.dense_b));
        out.push((join(prefix, "softmax.w"), &self.out_w));
        out.push((join(prefix, "softmax.b"), &self.out_b));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix)>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layer{}", i + 1)), out);
        }
        match &mut self.recurrence {
            ClassifierRecurrence::Lstm(p) => p.visit_mut(&join(prefix, "classifier"), out),
            ClassifierRecurrence::Blstm { fwd, bwd } => {
                fwd.visit_mut(&join(prefix, "classifier.fwd"), out);
                bwd.visit_mut(&join(prefix, "classifier.bwd"), out);
            }
        }
        out.push((join(prefix, "dense.w"), &mut self.dense_w));
        out.push((join(prefix, "dense.b"), &mut self.dense_b));
        out.push((join(prefix, "softmax.w"), &mut self.out_w));
        out.push((join(prefix, "softmax.b"), &mut self.out_b));
    }
}

impl ModelParams {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let mut k = cfg.input_dim;
        let mut layers = Vec::with_capacity(cfg.layers.len());
        for l in &cfg.layers {
            layers.push(LayerParams::new(l, k, rng));
            k = l.features;
        }
        let h = cfg.classifier_hidden;
        let (recurrence, dense_in) = match cfg.classifier {
            ClassifierKind::Lstm => (ClassifierRecurrence::Lstm(LstmParams::new(k, h, rng)), h),
            ClassifierKind::Blstm => (
                ClassifierRecurrence::Blstm {
                    fwd: LstmParams::new(k, h, rng),
                    bwd: LstmParams::new(k, h, rng),
                },
                2 * h,
            ),
        };
        Self {
            layers,
            recurrence,
            dense_w: init_params(cfg.dense, dense_in, rng),
            dense_b: Matrix::zeros(cfg.dense, 1),
            out_w: init_params(cfg.classes, cfg.dense, rng),
            out_b: Matrix::zeros(cfg.classes, 1),
        }
    }
}

enum RecurrenceCache {
    Lstm(LstmTrace),
    Blstm { fwd: LstmTrace, bwd: LstmTrace },
}

/// Retained activations of one forward pass.
pub struct ForwardPass {
    layer_caches: Vec<LayerCache>,
    recurrence: RecurrenceCache,
    /// Classifier features per step (`h` or `[h_fwd; h_bwd]`).
    features: Vec<Vec<f64>>,
    dense: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
    pub averaged: Vec<f64>,
    pub predicted: usize,
    first_step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    if label >= probs.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: probs.len(),
        });
    }
    Ok(-probs[label].ln())
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::new(&config, rng);
        Ok(Self { config, params })
    }

    pub fn with_params(config: ModelConfig, params: ModelParams) -> Self {
        Self { config, params }
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardPass> {
        forward(&self.config, &self.params, x)
    }

    pub fn predict(&self, x: &Matrix) -> Result<(usize, Vec<f64>)> {
        let pass = self.forward(x)?;
        Ok((pass.predicted, pass.averaged))
    }

    pub fn loss(&self, x: &Matrix, label: usize) -> Result<f64> {
        cross_entropy(&self.forward(x)?.averaged, label)
    }

    /// Loss and the gradient of every parameter.
    pub fn loss_and_grad(&self, x: &Matrix, label: usize) -> Result<(f64, ModelParams)> {
        let pass = self.forward(x)?;
        let loss = cross_entropy(&pass.averaged, label)?;
        let grads = model_backward(&self.config, &self.params, &pass, label, 1.0)?;
        Ok((loss, grads))
    }
}

pub fn forward(cfg: &ModelConfig, params: &ModelParams, x: &Matrix) -> Result<ForwardPass> {
    if x.rows() != cfg.input_dim {
        return Err(Error::Shape {
            op: "model forward",
            left: (cfg.input_dim, x.cols()),
            right: x.shape(),
        });
    }
    let min = cfg.min_len();
    if x.cols() < min {
        return Err(Error::SequenceTooShort {
            len: x.cols(),
            width: min,
        });
    }
    let mut layer_caches = Vec::with_capacity(cfg.layers.len());
    let mut seq = x.clone();
    for (lc, lp) in cfg.layers.iter().zip(&params.layers) {
        let (out, cache) = layer_forward(lc, lp, &seq)?;
        layer_caches.push(cache);
        seq = out;
    }
    let frames = seq.columns();
    let (recurrence, features): (_, Vec<Vec<f64>>) = match &params.recurrence {
        ClassifierRecurrence::Lstm(p) => {
            let tr = lstm_forward(p, &frames)?;
            let feats = tr.steps.iter().map(|s| s.h.clone()).collect();
            (RecurrenceCache::Lstm(tr), feats)
        }
        ClassifierRecurrence::Blstm { fwd, bwd } => {
            let tf = lstm_forward(fwd, &frames)?;
            let rev: Vec<Vec<f64>> = frames.iter().rev().cloned().collect();
            let tb = lstm_forward(bwd, &rev)?;
            let m = frames.len();
            let feats = (0..m)
                .map(|t| {
                    let mut v = tf.steps[t].h.clone();
                    v.extend_from_slice(&tb.steps[m - 1 - t].h);
                    v
                })
                .collect();
            (RecurrenceCache::Blstm { fwd: tf, bwd: tb }, feats)
        }
    };
    let mut dense = Vec::with_capacity(frames.len());
    let mut probs = Vec::with_capacity(frames.len());
    for f in &features {
        let mut z = params.dense_b.data().to_vec();
        params.dense_w.matvec_acc(f, &mut z);
        let r: Vec<f64> = z.into_iter().map(|v| v.max(0.0)).collect();
        let mut logits = params.out_b.data().to_vec();
        params.out_w.matvec_acc(&r, &mut logits);
        probs.push(softmax(&logits));
        dense.push(r);
    }
    let first_step = cfg.aggregation.first_step(probs.len());
    let q = (probs.len() - first_step) as f64;
    let mut averaged = vec![0.0; cfg.classes];
    for p in &probs[first_step..] {
        for (a, v) in averaged.iter_mut().zip(p) {
            *a += v;
        }
    }
    averaged.iter_mut().for_each(|a| *a /= q);
    Ok(ForwardPass {
        layer_caches,
        recurrence,
        features,
        dense,
        predicted: argmax(&averaged),
        probs,
        averaged,
        first_step,
    })
}

/// Gradient of `scale * cross_entropy(averaged, label)` with respect to
/// every parameter.
pub fn model_backward(
    cfg: &ModelConfig,
    params: &ModelParams,
    pass: &ForwardPass,
    label: usize,
    scale: f64,
) -> Result<ModelParams> {
    if label >= cfg.classes {
        return Err(Error::LabelOutOfRange {
            label,
            classes: cfg.classes,
        });
    }
    let steps = pass.probs.len();
    let q = (steps - pass.first_step) as f64;
    let mut grads = params.zeros_like();

    // d loss / d p_t for the aggregated steps
    let d_label = -scale / pass.averaged[label] / q;
    let h = cfg.classifier_hidden;
    let feat_dim = pass.features[0].len();
    let mut d_features = vec![vec![0.0; feat_dim]; steps];
    for t in pass.first_step..steps {
        let p = &pass.probs[t];
        // softmax backward with dp = d_label * e_label
        let dz: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(c, &pc)| {
                let indicator = if c == label { 1.0 } else { 0.0 };
                d_label * p[label] * (indicator - pc)
            })
            .collect();
        let r = &pass.dense[t];
        grads.out_w.outer_acc(&dz, r);
        for (b, v) in grads.out_b.data_mut().iter_mut().zip(&dz) {
            *b += v;
        }
        let mut dr = vec![0.0; r.len()];
        params.out_w.matvec_t_acc(&dz, &mut dr);
        for (d, &rv) in dr.iter_mut().zip(r) {
            if rv <= 0.0 {
                *d = 0.0;
            }
        }
        grads.dense_w.outer_acc(&dr, &pass.features[t]);
        for (b, v) in grads.dense_b.data_mut().iter_mut().zip(&dr) {
            *b += v;
        }
        params.dense_w.matvec_t_acc(&dr, &mut d_features[t]);
    }

    let d_frames: Vec<Vec<f64>> = match (&params.recurrence, &pass.recurrence) {
        (ClassifierRecurrence::Lstm(p), RecurrenceCache::Lstm(tr)) => {
            let up = StateGrads {
                dh: d_features,
                dc: vec![vec![0.0; h]; steps],
            };
            let (g, dx) = lstm_backward(p, tr, &up)?;
            if let ClassifierRecurrence::Lstm(gp) = &mut grads.recurrence {
                *gp = g;
            }
            dx
        }
        (ClassifierRecurrence::Blstm { fwd, bwd }, RecurrenceCache::Blstm { fwd: tf, bwd: tb }) => {
            let mut up_f = StateGrads::zeros(steps, h);
            let mut up_b = StateGrads::zeros(steps, h);
            for (t, d) in d_features.iter().enumerate() {
                up_f.dh[t].copy_from_slice(&d[..h]);
                up_b.dh[steps - 1 - t].copy_from_slice(&d[h..]);
            }
            let (gf, dxf) = lstm_backward(fwd, tf, &up_f)?;
            let (gb, dxb) = lstm_backward(bwd, tb, &up_b)?;
            if let ClassifierRecurrence::Blstm { fwd: a, bwd: b } = &mut grads.recurrence {
                *a = gf;
                *b = gb;
            }
            (0..steps)
                .map(|t| {
                    dxf[t]
                        .iter()
                        .zip(&dxb[steps - 1 - t])
                        .map(|(a, b)| a + b)
                        .collect()
                })
                .collect()
        }
        _ => return Err(Error::Config("classifier cache does not match parameters".into())),
    };

    let mut d_seq = Matrix::from_columns(&d_frames)?;
    for i in (0..cfg.layers.len()).rev() {
        let (g, dx) = layer_backward(&cfg.layers[i], &params.layers[i], &pass.layer_caches[i], &d_seq)?;
        grads.layers[i] = g;
        d_seq = dx;
    }
    Ok(grads)
}

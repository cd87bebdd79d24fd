//! Adam, finite-difference gradient checks and the epoch loop.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SequenceExample};
use crate::layers::{crnn_layer_forward, layer_backward, layer_forward, CrnnLayerConfig, LayerParams};
use crate::metrics::{per_class_recall, ua_recall};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::params::join;
use crate::{Error, Matrix, Parameters, Result, Rng};

// ---------------------------------------------------------------------------
// Adam

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    /// Learning rate 0.002 with decay rates 0.1 and 0.001.
    fn default() -> Self {
        Self {
            lr: 0.002,
            beta1: 0.1,
            beta2: 0.001,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    /// The usual 0.9 / 0.999 decay rates at the same learning rate.
    pub fn conventional() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.epsilon > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "adam needs lr > 0, epsilon > 0 and betas in [0, 1): {self:?}"
            )))
        }
    }
}

/// First and second moments over the flattened parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn for_params<P: Parameters>(p: &P, config: AdamConfig) -> Self {
        Self::new(p.num_params(), config)
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape {
                op: "adam_step",
                left: (params.len(), 1),
                right: (grads.len(), self.m.len()),
            });
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

pub fn adam_step<P: Parameters>(state: &mut AdamState, params: &mut P, grads: &P) -> Result<()> {
    let mut flat = params.flatten();
    state.step(&mut flat, &grads.flatten())?;
    params.assign_flat(&flat);
    Ok(())
}

// ---------------------------------------------------------------------------
// Gradient checking

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Default multiplier applied to the loss (and its gradient) before the
/// comparison. In double precision a central difference with step `1e-5`
/// carries roughly `5e-12 * |loss|` of rounding noise; at unit scale that
/// exceeds `1e-5` relative for any coordinate under about `1e-6`. Scaling by
/// `1e-3` moves such coordinates under the `1e-8` floor of
/// [`relative_error`], where they must still agree to `1e-13`.
pub const DEFAULT_LOSS_SCALE: f64 = 1e-3;

/// `|a - f| / max(|a|, |f|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates at or above this relative error are listed as failures.
    pub tolerance: f64,
    /// Probe at most this many random coordinates per tensor.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Both the loss and the analytic gradient are multiplied by this.
    pub loss_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_FD_STEP,
            tolerance: 1e-5,
            max_coords: None,
            seed: 0,
            loss_scale: DEFAULT_LOSS_SCALE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordFailure {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub loss_scale: f64,
    pub tensors: Vec<TensorCheck>,
    pub failures: Vec<CoordFailure>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares `analytic` with central differences of `loss` around `params`.
/// Reported values are in scaled units.
pub fn check_gradients<P, F>(params: &P, analytic: &P, loss: F, opts: &GradCheckOptions) -> GradCheckReport
where
    P: Parameters + Clone + Sync,
    F: Fn(&P) -> f64 + Sync,
{
    let mut rng = Rng::new(opts.seed);
    let named = analytic.named_tensors();
    let mut probes = Vec::new();
    for (ti, (_, m)) in named.iter().enumerate() {
        let n = m.data().len();
        let mut coords: Vec<usize> = (0..n).collect();
        if let Some(limit) = opts.max_coords.filter(|&l| l < n) {
            rng.shuffle(&mut coords);
            coords.truncate(limit);
            coords.sort_unstable();
        }
        probes.extend(coords.into_iter().map(|ci| (ti, ci)));
    }
    let h = opts.step;
    let s = opts.loss_scale;
    let numeric: Vec<f64> = probes
        .par_iter()
        .map(|&(ti, ci)| {
            let mut p = params.clone();
            let orig = p.named_tensors()[ti].1.data()[ci];
            let set = |p: &mut P, v: f64| p.named_tensors_mut()[ti].1.data_mut()[ci] = v;
            set(&mut p, orig + h);
            let plus = s * loss(&p);
            set(&mut p, orig - h);
            let minus = s * loss(&p);
            (plus - minus) / (2.0 * h)
        })
        .collect();
    let mut tensors: Vec<TensorCheck> = named
        .iter()
        .map(|(name, _)| TensorCheck {
            name: name.clone(),
            checked: 0,
            max_rel_error: 0.0,
        })
        .collect();
    let mut failures = Vec::new();
    for (&(ti, ci), &f) in probes.iter().zip(&numeric) {
        let a = s * named[ti].1.data()[ci];
        let e = relative_error(a, f);
        let t = &mut tensors[ti];
        t.checked += 1;
        // NaN must register as a failure
        if e.is_nan() || e > t.max_rel_error {
            t.max_rel_error = if e.is_nan() { f64::INFINITY } else { e };
        }
        if !(e < opts.tolerance) {
            failures.push(CoordFailure {
                tensor: t.name.clone(),
                index: ci,
                analytic: a,
                numeric: f,
                rel_error: e,
            });
        }
    }
    GradCheckReport {
        step: h,
        tolerance: opts.tolerance,
        loss_scale: s,
        tensors,
        failures,
    }
}

/// A random input of `len` frames for a model with this configuration.
pub fn random_input(cfg: &ModelConfig, len: usize, rng: &mut Rng) -> Matrix {
    let data = (0..cfg.input_dim * len).map(|_| rng.normal(0.0, 1.0)).collect();
    Matrix::from_vec(cfg.input_dim, len, data).expect("sized to fit")
}

/// Checks every parameter of a freshly initialised model on one random
/// example just long enough for two classifier steps.
pub fn grad_check(cfg: &ModelConfig, seed: u64, step: f64) -> Result<GradCheckReport> {
    let opts = GradCheckOptions {
        step,
        seed,
        ..GradCheckOptions::default()
    };
    grad_check_with(cfg, seed, &opts)
}

pub fn grad_check_with(cfg: &ModelConfig, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let model = Model::new(cfg.clone(), &mut rng)?;
    let x = random_input(cfg, cfg.min_len_for(2), &mut rng);
    let label = rng.below(cfg.classes);
    let (_, grads) = model.loss_and_grad(&x, label)?;
    Ok(check_gradients(
        &model.params,
        &grads,
        |p: &ModelParams| {
            let m = Model::with_params(cfg.clone(), p.clone());
            m.loss(&x, label).unwrap_or(f64::NAN)
        },
        opts,
    ))
}

/// Layer parameters together with the layer input, so one check covers
/// both parameter and input gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerProbe {
    pub params: LayerParams,
    pub input: Matrix,
}

impl Parameters for LayerProbe {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        self.params.visit(prefix, out);
        out.push((join(prefix, "input"), &self.input));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix)>) {
        self.params.visit_mut(prefix, out);
        out.push((join(prefix, "input"), &mut self.input));
    }
}

/// Checks one layer under the loss `sum(R * output)` for a random `R`, on
/// an input long enough for two output frames plus one spare frame.
pub fn layer_grad_check(cfg: &CrnnLayerConfig, input_dim: usize, seed: u64) -> Result<GradCheckReport> {
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let params = LayerParams::new(cfg, input_dim, &mut rng);
    let len = cfg.min_input_len(2) + 1;
    let input = Matrix::from_vec(
        input_dim,
        len,
        (0..input_dim * len).map(|_| rng.normal(0.0, 1.0)).collect(),
    )?;
    let (out, cache) = layer_forward(cfg, &params, &input)?;
    let r = Matrix::from_vec(
        out.rows(),
        out.cols(),
        (0..out.data().len()).map(|_| rng.uniform(-1.0, 1.0)).collect(),
    )?;
    let (grads, dx) = layer_backward(cfg, &params, &cache, &r)?;
    let probe = LayerProbe { params, input };
    let analytic = LayerProbe {
        params: grads,
        input: dx,
    };
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    };
    Ok(check_gradients(
        &probe,
        &analytic,
        |p: &LayerProbe| match crnn_layer_forward(cfg, &p.params, &p.input) {
            Ok(o) => o.data().iter().zip(r.data()).map(|(a, b)| a * b).sum(),
            Err(_) => f64::NAN,
        },
        &opts,
    ))
}

// ---------------------------------------------------------------------------
// Training loop

/// True when the best (highest) value is more than `patience` epochs old.
/// Ties keep the earlier epoch as the best.
pub fn should_stop(history: &[f64], patience: usize) -> bool {
    let mut best = 0;
    for (i, &v) in history.iter().enumerate() {
        if v > history[best] {
            best = i;
        }
    }
    history.len().saturating_sub(1) - best > patience
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            max_epochs: 100,
            patience: 12,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "batch, patience and max_epochs must be >= 1".into(),
            ));
        }
        self.adam.validate()
    }
}

/// One line of the metric history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_ua_recall: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation UA recall.
    pub model: Model,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Seconds spent in each epoch.
    pub epoch_seconds: Vec<f64>,
    pub stopped_early: bool,
}

/// Mean loss and mean gradient over `batch`.
pub fn batch_loss_and_grad(model: &Model, batch: &[&SequenceExample]) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("batch"));
    }
    let per_example = batch
        .par_iter()
        .map(|e| model.loss_and_grad(&e.features, e.label))
        .collect::<Result<Vec<_>>>()?;
    let mut iter = per_example.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        grads.accumulate(&g);
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((loss / n, grads))
}

pub fn predict_all(model: &Model, data: &Dataset) -> Result<Vec<usize>> {
    data.examples
        .par_iter()
        .map(|e| model.predict(&e.features).map(|(c, _)| c))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub ua_recall: f64,
    pub per_class_recall: Vec<f64>,
    pub predictions: Vec<usize>,
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<Evaluation> {
    check_dataset(&model.config, data, "evaluation set")?;
    let predictions = predict_all(model, data)?;
    let labels = data.labels();
    Ok(Evaluation {
        ua_recall: ua_recall(&predictions, &labels, data.classes)?,
        per_class_recall: per_class_recall(&predictions, &labels, data.classes)?,
        predictions,
    })
}

fn check_dataset(cfg: &ModelConfig, data: &Dataset, what: &'static str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset(what));
    }
    if data.classes != cfg.classes {
        return Err(Error::Config(format!(
            "{what} has {} classes but the model has {}",
            data.classes, cfg.classes
        )));
    }
    if data.input_dim != cfg.input_dim {
        return Err(Error::Config(format!(
            "{what} has {} features per frame but the model expects {}",
            data.input_dim, cfg.input_dim
        )));
    }
    let min = cfg.min_len();
    if let Some((index, e)) = data.examples.iter().enumerate().find(|(_, e)| e.len() < min) {
        return Err(Error::ExampleTooShort {
            index,
            len: e.len(),
            min,
        });
    }
    Ok(())
}

pub fn train(cfg: &TrainConfig, model_cfg: &ModelConfig, train_set: &Dataset, valid: &Dataset) -> Result<TrainOutcome> {
    train_with(cfg, model_cfg, train_set, valid, |_, _| {})
}

/// Like [`train`], calling `on_epoch` with each record and its duration.
pub fn train_with(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    train_set: &Dataset,
    valid: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    check_dataset(model_cfg, train_set, "training set")?;
    check_dataset(model_cfg, valid, "validation set")?;

    let mut rng = Rng::new(cfg.seed);
    let mut init_rng = rng.split();
    let mut shuffle_rng = rng.split();
    let mut model = Model::new(model_cfg.clone(), &mut init_rng)?;
    let mut adam = AdamState::for_params(&model.params, cfg.adam);
    let labels = valid.labels();

    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_score = f64::NEG_INFINITY;
    let mut history = Vec::new();
    let mut scores = Vec::new();
    let mut epoch_seconds = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SequenceExample> = chunk.iter().map(|&i| &train_set.examples[i]).collect();
            let (loss, grads) = batch_loss_and_grad(&model, &batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            loss_sum += loss * batch.len() as f64;
            adam_step(&mut adam, &mut model.params, &grads)?;
        }
        let predictions = predict_all(&model, valid)?;
        let score = ua_recall(&predictions, &labels, valid.classes)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            valid_ua_recall: score,
        };
        if score > best_score {
            best_score = score;
            best_epoch = epoch;
            best = model.clone();
        }
        let secs = started.elapsed().as_secs_f64();
        on_epoch(&record, secs);
        history.push(record);
        scores.push(score);
        epoch_seconds.push(secs);
        if should_stop(&scores, cfg.patience) {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    Ok(TrainOutcome {
        model: best,
        best_epoch,
        history,
        epoch_seconds,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::framing::WindowSpec;
    use crate::layers::{Aggregation, CrnnLayerConfig, ExtractorKind, Reduction, StateSource};
    use crate::model::ClassifierKind;

    #[test]
    fn fresh_zero_gradient_step_is_a_no_op() {
        let mut s = AdamState::new(3, AdamConfig::default());
        let mut p = vec![0.3, -1.7, 12.0];
        let before = p.clone();
        s.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for cfg in [AdamConfig::default(), AdamConfig::conventional()] {
            let mut s = AdamState::new(4, cfg);
            let g = [1e-3, -2.0, 5e4, -7.5];
            let mut p = vec![0.0; 4];
            s.step(&mut p, &g).unwrap();
            for (x, gi) in p.iter().zip(&g) {
                let expected = 0.002 * gi.abs() / (gi.abs() + 1e-8);
                assert!((x.abs() - expected).abs() / expected < 1e-6);
                assert!((x.abs() - 0.002).abs() / 0.002 < 2e-5);
                assert_eq!(x.signum(), -gi.signum());
            }
        }
    }

    #[test]
    fn two_scalar_steps() {
        let (lr, b1, b2, eps) = (0.002, 0.1, 0.001, 1e-8);
        let (mut m, mut v, mut theta) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1);
            v = b2 * v + (1.0 - b2);
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            theta -= lr * mh / (vh.sqrt() + eps);
        }
        let mut s = AdamState::new(1, AdamConfig::default());
        let mut p = [0.0];
        s.step(&mut p, &[1.0]).unwrap();
        s.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] - theta).abs() < 1e-12);
        assert!((p[0] + 0.004 / (1.0 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn adam_rejects_mismatched_lengths() {
        let mut s = AdamState::new(2, AdamConfig::default());
        assert!(s.step(&mut [0.0; 3], &[0.0; 3]).is_err());
    }

    #[derive(Clone)]
    struct Quad {
        w: Matrix,
    }
    crate::params::impl_parameters!(Quad { w });

    #[test]
    fn quadratic_check_is_exact() {
        let p = Quad {
            w: Matrix::from_vec(1, 3, vec![0.5, -1.5, 2.0]).unwrap(),
        };
        let grads = Quad {
            w: p.w.map(|x| 2.0 * x + 1.0),
        };
        let loss = |q: &Quad| q.w.data().iter().map(|x| x * x + x).sum::<f64>();
        let r = check_gradients(&p, &grads, loss, &GradCheckOptions::default());
        assert!(r.max_rel_error() < 1e-9, "{r:?}");
        assert!(r.passed());

        let flipped = Quad {
            w: grads.w.map(|g| -g),
        };
        let r = check_gradients(&p, &flipped, loss, &GradCheckOptions::default());
        assert!(r.max_rel_error() > 0.5);
        assert_eq!(r.failures.len(), 3);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1e-9, 0.0), 0.1);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }

    #[test]
    fn stopping_rule() {
        assert!(!should_stop(&[0.1, 0.2, 0.3, 0.4, 0.5], 12));
        let mut h = vec![0.9];
        h.extend(std::iter::repeat_n(0.5, 12));
        assert!(!should_stop(&h, 12));
        h.push(0.5);
        assert!(should_stop(&h, 12));
        let ties = [0.7, 0.7, 0.7];
        assert!(should_stop(&ties, 1));
        let increasing: Vec<f64> = (0..40).map(f64::from).collect();
        assert!(!should_stop(&increasing, 12));
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_dim: 2,
            layers: vec![CrnnLayerConfig::new(
                ExtractorKind::Clstm,
                WindowSpec { width: 2, shift: 1 },
                None,
                3,
                StateSource::Hidden,
                Reduction::Last,
            )],
            classifier: ClassifierKind::Lstm,
            classifier_hidden: 3,
            dense: 4,
            classes: 2,
            aggregation: Aggregation::All,
        }
    }

    fn separable(count: usize, seed: u64) -> Dataset {
        let mut rng = Rng::new(seed);
        let ex = (0..count)
            .map(|i| {
                let label = i % 2;
                let centre = if label == 0 { -1.0 } else { 1.0 };
                let data = (0..8).map(|_| centre + rng.normal(0.0, 0.2)).collect();
                SequenceExample::new(Matrix::from_vec(2, 4, data).unwrap(), label, "g", format!("s{i}"))
            })
            .collect();
        Dataset::new(ex, 2).unwrap()
    }

    #[test]
    fn batch_gradient_is_mean_of_example_gradients() {
        let mut rng = Rng::new(7);
        let model = Model::new(tiny_config(), &mut rng).unwrap();
        let d = separable(3, 1);
        let refs: Vec<&SequenceExample> = d.examples.iter().collect();
        let (loss, g) = batch_loss_and_grad(&model, &refs).unwrap();
        let singles: Vec<(f64, ModelParams)> = d
            .examples
            .iter()
            .map(|e| model.loss_and_grad(&e.features, e.label).unwrap())
            .collect();
        let want_loss = (singles[0].0 + singles[1].0 + singles[2].0) / 3.0;
        assert_eq!(loss, want_loss);
        let flats: Vec<Vec<f64>> = singles.iter().map(|(_, g)| g.flatten()).collect();
        for (i, v) in g.flatten().iter().enumerate() {
            assert_eq!(*v, (flats[0][i] + flats[1][i] + flats[2][i]) * (1.0 / 3.0));
        }
    }

    #[test]
    fn gradient_vanishes_at_convex_minimum() {
        // dead dense layer: only the output bias matters, and equal logits
        // minimise the mean loss over one example of each class
        let mut model = Model::new(tiny_config(), &mut Rng::new(1)).unwrap();
        model.params.zero();
        model.params.dense_b.fill(-1.0);
        let d = separable(2, 6);
        let refs: Vec<&SequenceExample> = d.examples.iter().collect();
        let (loss, g) = batch_loss_and_grad(&model, &refs).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        let norm = g.flatten().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-10, "{norm}");
    }

    #[test]
    fn separable_set_is_learned() {
        let d = separable(40, 2);
        let cfg = TrainConfig {
            batch_size: 4,
            max_epochs: 50,
            seed: 3,
            ..TrainConfig::default()
        };
        let out = train(&cfg, &tiny_config(), &d, &d).unwrap();
        assert_eq!(evaluate(&out.model, &d).unwrap().ua_recall, 1.0);
    }

    #[test]
    fn strictly_improving_metric_never_stops_early() {
        let scores: Vec<f64> = (1..=100).map(|e| e as f64 / 100.0).collect();
        for e in 1..=scores.len() {
            assert!(!should_stop(&scores[..e], 12));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let d = separable(20, 4);
        let cfg = TrainConfig {
            batch_size: 3,
            max_epochs: 4,
            seed: 11,
            ..TrainConfig::default()
        };
        let a = train(&cfg, &tiny_config(), &d, &d).unwrap();
        let b = train(&cfg, &tiny_config(), &d, &d).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.params.flatten(), b.model.params.flatten());
    }

    #[test]
    fn training_input_errors() {
        let d = separable(6, 5);
        let empty = Dataset::new(Vec::new(), 2).unwrap();
        let cfg = TrainConfig::default();
        assert!(matches!(
            train(&cfg, &tiny_config(), &empty, &d),
            Err(Error::EmptyDataset(_))
        ));
        let mut short = d.clone();
        short.examples[4].features = Matrix::zeros(2, 1);
        assert!(matches!(
            train(&cfg, &tiny_config(), &short, &d),
            Err(Error::ExampleTooShort { index: 4, len: 1, min: 2 })
        ));
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        for kind in [ClassifierKind::Lstm, ClassifierKind::Blstm] {
            let mut cfg = tiny_config();
            cfg.classifier = kind;
            for seed in 0..3 {
                let r = grad_check(&cfg, seed, DEFAULT_FD_STEP).unwrap();
                assert!(r.passed(), "{kind} seed {seed}: {:?}", r.failures);
            }
        }
    }
}

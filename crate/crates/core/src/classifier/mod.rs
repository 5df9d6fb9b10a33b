//! Convolutional-recurrent intent classifier: model, training with Adam,
//! batched inference and streaming posterior evolution.

pub mod loss;
pub mod network;

use std::io::{Read, Write};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use loss::{
    expected_misclassification_cost, intrusion_cost_metric, loss_afl, loss_cce, loss_time_constrained, LossConfig,
    LossKind,
};
pub use network::{Architecture, Layout};

use crate::intent::IntentLabel;
use crate::tracking::{feature_width, point_features, track_segments, window_stride, FeatureWindow, TrackPoint};

/// Version tag written at the top of serialized models.
pub const MODEL_FORMAT: &str = "uav-intent-classifier/1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifierError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("input has {got} values, expected {expected}")]
    Shape { expected: usize, got: usize },
    #[error("non-finite activations in layer {0}")]
    NonFinite(&'static str),
    #[error("invalid loss: {0}")]
    Loss(String),
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("training set must contain at least two classes")]
    TooFewClasses,
    #[error("intent {0} is not a class of this model")]
    UnknownClass(String),
    #[error("malformed model file: {0}")]
    Format(String),
}

/// Training target for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct Label {
    pub one_hot: Vec<f64>,
    pub intrusion_flag: bool,
}

impl Label {
    pub fn new(class: usize, classes: usize, intrusion_flag: bool) -> Self {
        let mut one_hot = vec![0.0; classes];
        one_hot[class] = 1.0;
        Label {
            one_hot,
            intrusion_flag,
        }
    }

    pub fn class(&self) -> usize {
        self.one_hot.iter().position(|v| *v == 1.0).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub sub_window: usize,
    pub filters: usize,
    pub hidden: usize,
    pub dense: usize,
    pub dropout: f64,
    pub bidirectional: bool,
    pub attention: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            sub_window: 10,
            filters: 64,
            hidden: 20,
            dense: 100,
            dropout: 0.5,
            bidirectional: false,
            attention: false,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn architecture(&self, features: usize, classes: usize, window: usize) -> Architecture {
        Architecture {
            sub_window: self.sub_window,
            filters: self.filters,
            hidden: self.hidden,
            dense: self.dense,
            dropout: self.dropout,
            bidirectional: self.bidirectional,
            attention: self.attention,
            ..Architecture::reference(features, classes, window)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_acc", "val_acc", "mean_loss"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_acc.to_string(),
                e.val_acc.map_or_else(String::new, |v| v.to_string()),
                e.mean_loss.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A trained (or freshly initialized) network with its class list and the
/// per-feature input normalization it was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub architecture: Architecture,
    pub classes: Vec<IntentLabel>,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
    pub params: Vec<f64>,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(
        architecture: Architecture,
        classes: Vec<IntentLabel>,
        rng: &mut R,
    ) -> Result<Self, ClassifierError> {
        architecture.validate()?;
        if classes.len() != architecture.classes {
            return Err(ClassifierError::Architecture(format!(
                "{} class names for {} output units",
                classes.len(),
                architecture.classes
            )));
        }
        let params = network::init_params(&architecture, rng);
        let f = architecture.features;
        Ok(Classifier {
            architecture,
            classes,
            norm_mean: vec![0.0; f],
            norm_std: vec![1.0; f],
            params,
        })
    }

    pub fn class_index(&self, label: &IntentLabel) -> Result<usize, ClassifierError> {
        self.classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| ClassifierError::UnknownClass(label.0.clone()))
    }

    /// Sets the normalization to the per-feature mean and standard
    /// deviation over every row of `windows`.
    pub fn fit_normalization(&mut self, windows: &[&FeatureWindow]) {
        let f = self.architecture.features;
        let mut sum = vec![0.0; f];
        let mut sq = vec![0.0; f];
        let mut n = 0usize;
        for w in windows {
            for r in 0..w.rows {
                for (j, v) in w.row(r).iter().enumerate().take(f) {
                    sum[j] += v;
                    sq[j] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return;
        }
        for j in 0..f {
            let mean = sum[j] / n as f64;
            let var = (sq[j] / n as f64 - mean * mean).max(0.0);
            self.norm_mean[j] = mean;
            self.norm_std[j] = if var.sqrt() > 1e-9 { var.sqrt() } else { 1.0 };
        }
    }

    fn pack(&self, windows: &[&FeatureWindow]) -> Result<Vec<f64>, ClassifierError> {
        let a = &self.architecture;
        let mut x = Vec::with_capacity(windows.len() * a.window * a.features);
        for w in windows {
            if w.rows != a.window || w.width != a.features || w.features.len() != w.rows * w.width {
                return Err(ClassifierError::Shape {
                    expected: a.window * a.features,
                    got: w.features.len(),
                });
            }
            for r in 0..w.rows {
                for (j, v) in w.row(r).iter().enumerate() {
                    x.push((v - self.norm_mean[j]) / self.norm_std[j]);
                }
            }
        }
        Ok(x)
    }

    /// Posterior for one window. Dropout is applied only in training mode.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        window: &FeatureWindow,
        training_mode: bool,
        rng: &mut R,
    ) -> Result<Vec<f64>, ClassifierError> {
        let x = self.pack(&[window])?;
        let mask = if training_mode {
            self.architecture.dropout_mask(1, rng)
        } else {
            None
        };
        let cache = self.architecture.forward(&self.params, &x, 1, mask)?;
        Ok(cache.probs.row(0).to_vec())
    }

    /// Inference-mode posteriors for many windows.
    pub fn predict(&self, windows: &[&FeatureWindow]) -> Result<Vec<Vec<f64>>, ClassifierError> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(256) {
            let x = self.pack(chunk)?;
            let cache = self.architecture.forward(&self.params, &x, chunk.len(), None)?;
            out.extend(cache.probs.rows().into_iter().map(|r| r.to_vec()));
        }
        Ok(out)
    }

    pub fn labels(&self, windows: &[&FeatureWindow]) -> Result<Vec<Label>, ClassifierError> {
        windows
            .iter()
            .map(|w| {
                Ok(Label::new(
                    self.class_index(&w.intent)?,
                    self.classes.len(),
                    w.intrusion_flag,
                ))
            })
            .collect()
    }

    /// Mean batch loss and its exact gradient with respect to `params`.
    /// With `rng` present a dropout mask is drawn once per batch element
    /// and reused by the reverse pass.
    pub fn loss_and_gradient<R: Rng + ?Sized>(
        &self,
        params: &[f64],
        batch: &[&FeatureWindow],
        labels: &[Label],
        loss: &LossConfig,
        rng: Option<&mut R>,
    ) -> Result<(f64, Vec<f64>, Array2<f64>), ClassifierError> {
        let a = &self.architecture;
        let x = self.pack(batch)?;
        let mask = rng.and_then(|r| a.dropout_mask(batch.len(), r));
        let cache = a.forward(params, &x, batch.len(), mask)?;
        let n = batch.len() as f64;
        let mut total = 0.0;
        let mut d_logits = Array2::zeros(cache.probs.raw_dim());
        for (b, (w, y)) in batch.iter().zip(labels).enumerate() {
            let p = cache.probs.row(b).to_vec();
            total += loss.loss(&y.one_hot, &p, w.window_end_time, w.intrusion_time)?;
            let g = loss.grad_posterior(&y.one_hot, &p);
            let dot: f64 = g.iter().zip(&p).map(|(g, p)| g * p).sum();
            for k in 0..p.len() {
                d_logits[(b, k)] = p[k] * (g[k] - dot) / n;
            }
        }
        let grad = a.backward(params, &cache, &d_logits);
        Ok((total / n, grad, cache.probs))
    }

    /// Batch gradient of the mean loss (dropout active when `rng` is given).
    pub fn gradient<R: Rng + ?Sized>(
        &self,
        batch: &[&FeatureWindow],
        loss: &LossConfig,
        rng: Option<&mut R>,
    ) -> Result<Vec<f64>, ClassifierError> {
        let labels = self.labels(batch)?;
        Ok(self.loss_and_gradient(&self.params, batch, &labels, loss, rng)?.1)
    }

    pub fn accuracy(&self, windows: &[&FeatureWindow]) -> Result<f64, ClassifierError> {
        if windows.is_empty() {
            return Ok(0.0);
        }
        let probs = self.predict(windows)?;
        let mut hits = 0usize;
        for (w, p) in windows.iter().zip(&probs) {
            hits += (argmax(p) == self.class_index(&w.intent)?) as usize;
        }
        Ok(hits as f64 / windows.len() as f64)
    }

    /// Posterior at the end of each complete window of the stream.
    pub fn posterior_evolution(
        &self,
        stream: &[TrackPoint],
        dimensionality: usize,
        stride: usize,
    ) -> Result<Vec<(f64, Vec<f64>)>, ClassifierError> {
        let w = self.architecture.window;
        let width = feature_width(dimensionality);
        let mut windows = Vec::new();
        for segment in track_segments(stream).into_iter().filter(|s| s.len() >= w) {
            let rows: Vec<Vec<f64>> = segment.iter().map(|p| point_features(p, dimensionality)).collect();
            windows.extend(
                (0..=segment.len() - w)
                    .step_by(stride.max(1))
                    .map(|start| FeatureWindow {
                        features: rows[start..start + w].concat(),
                        rows: w,
                        width,
                        intent: self.classes[0].clone(),
                        intrusion_flag: false,
                        intrusion_time: f64::INFINITY,
                        window_start_time: segment[start].t,
                        window_end_time: segment[start + w - 1].t,
                        trajectory_id: 0,
                    }),
            );
        }
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let refs: Vec<&FeatureWindow> = windows.iter().collect();
        let probs = self.predict(&refs)?;
        Ok(windows.iter().map(|w| w.window_end_time).zip(probs).collect())
    }

    pub fn write<W: Write>(&self, mut out: W) -> crate::Result<()> {
        writeln!(out, "{MODEL_FORMAT}")?;
        serde_json::to_writer(&mut out, self)?;
        writeln!(out)?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> crate::Result<Self> {
        let mut text = String::new();
        input.read_to_string(&mut text)?;
        let (header, body) = text
            .split_once('\n')
            .ok_or_else(|| ClassifierError::Format("missing header".into()))?;
        if header.trim() != MODEL_FORMAT {
            return Err(ClassifierError::Format(format!("unsupported format {header:?}")).into());
        }
        let model: Classifier = serde_json::from_str(body)?;
        model.architecture.validate()?;
        if model.params.len() != model.architecture.layout().total
            || model.classes.len() != model.architecture.classes
            || model.norm_mean.len() != model.architecture.features
            || model.norm_std.len() != model.architecture.features
        {
            return Err(ClassifierError::Format("tensor sizes disagree with the architecture".into()).into());
        }
        Ok(model)
    }
}

pub fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, v)| if *v > bv { (i, *v) } else { (bi, bv) },
        )
        .0
}

/// Window stride used for streaming inference at the given overlap.
pub fn stream_stride(window: usize, overlap: f64) -> usize {
    window_stride(window, overlap)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            params[i] -= cfg.learning_rate * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.epsilon);
        }
    }
}

/// Sorted distinct intents present in `windows`.
pub fn classes_of(windows: &[&FeatureWindow]) -> Vec<IntentLabel> {
    let mut classes: Vec<IntentLabel> = windows.iter().map(|w| w.intent.clone()).collect();
    classes.sort();
    classes.dedup();
    classes
}

/// Mini-batch Adam training for a fixed number of epochs. The class list
/// defaults to the sorted intents of the training set.
pub fn train<R: Rng + ?Sized>(
    train_set: &[&FeatureWindow],
    validation: &[&FeatureWindow],
    classes: Option<Vec<IntentLabel>>,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<(Classifier, History), ClassifierError> {
    let classes = classes.unwrap_or_else(|| classes_of(train_set));
    if classes.len() < 2 || classes_of(train_set).len() < 2 {
        return Err(ClassifierError::TooFewClasses);
    }
    config.loss.validate(classes.len())?;
    let first = train_set[0];
    let arch = config.architecture(first.width, classes.len(), first.rows);
    let mut model = Classifier::new(arch, classes, rng)?;
    model.fit_normalization(train_set);
    let labels = model.labels(train_set)?;
    let mut adam = Adam::new(model.params.len());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = History::default();
    let batch_size = config.batch_size.max(1);

    for epoch in 1..=config.epochs {
        order.shuffle(rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&FeatureWindow> = chunk.iter().map(|&i| train_set[i]).collect();
            let batch_labels: Vec<Label> = chunk.iter().map(|&i| labels[i].clone()).collect();
            let (loss, grad, probs) =
                match model.loss_and_gradient(&model.params, &batch, &batch_labels, &config.loss, Some(&mut *rng)) {
                    Ok(r) => r,
                    Err(ClassifierError::NonFinite(_)) => return Err(ClassifierError::Diverged { epoch }),
                    Err(e) => return Err(e),
                };
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(ClassifierError::Diverged { epoch });
            }
            loss_sum += loss * chunk.len() as f64;
            for (b, y) in batch_labels.iter().enumerate() {
                let row = probs.row(b);
                hits += (argmax(row.as_slice().expect("contiguous")) == y.class()) as usize;
            }
            adam.step(&mut model.params, &grad, config);
        }
        let n = train_set.len() as f64;
        let val_acc = if validation.is_empty() {
            None
        } else {
            Some(model.accuracy(validation)?)
        };
        log::debug!(
            "epoch {epoch}: loss {:.4} train {:.3} val {:?}",
            loss_sum / n,
            hits as f64 / n,
            val_acc
        );
        history.epochs.push(EpochRecord {
            epoch,
            train_acc: hits as f64 / n,
            val_acc,
            mean_loss: loss_sum / n,
        });
    }
    Ok((model, history))
}

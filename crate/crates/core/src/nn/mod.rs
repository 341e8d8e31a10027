//! A small CNN with hand-written forward/backward passes and SGD.

pub mod layers;
mod model;
mod tensor;

use std::io::Write;

pub use model::{
    build_model, Architecture, ForwardPass, LayerGrads, LayerKind, LayerParams, ModelParams,
    NUM_CLASSES,
};
pub use tensor::Tensor;

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 64,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        Ok(())
    }
}

/// Momentum buffers, one per layer weight and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    velocity: Vec<LayerGrads>,
}

impl SgdState {
    pub fn new(model: &ModelParams) -> Self {
        Self {
            velocity: model
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: vec![0.0; l.weight.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }
}

/// `v <- momentum * v + (g + wd * w)`, `w <- w - lr * v`. Weight decay applies
/// to conv and linear weights only.
pub fn sgd_step(
    model: &mut ModelParams,
    grads: &[LayerGrads],
    state: &mut SgdState,
    config: &SgdConfig,
) -> Result<()> {
    if grads.len() != model.layers.len() || state.velocity.len() != model.layers.len() {
        return Err(Error::Shape("gradient/layer count mismatch".into()));
    }
    for ((layer, grad), vel) in model.layers.iter_mut().zip(grads).zip(&mut state.velocity) {
        if grad.weight.len() != layer.weight.len() || grad.bias.len() != layer.bias.len() {
            return Err(Error::Shape("gradient shape mismatch".into()));
        }
        let decay = if layer.quantizable() {
            config.weight_decay
        } else {
            0.0
        };
        update(layer.weight.data_mut(), &grad.weight, &mut vel.weight, decay, config);
        update(layer.bias.data_mut(), &grad.bias, &mut vel.bias, 0.0, config);
    }
    Ok(())
}

fn update(w: &mut [f64], g: &[f64], v: &mut [f64], decay: f64, config: &SgdConfig) {
    for ((w, g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = config.momentum * *v + (g + decay * *w);
        *w -= config.lr * *v;
    }
}

/// One SGD step on a batch: forward, backward, running-stat update, step.
/// Returns the batch loss.
pub fn train_step(
    model: &mut ModelParams,
    state: &mut SgdState,
    config: &SgdConfig,
    images: &Tensor,
    labels: &[u8],
) -> Result<f64> {
    let pass = model.forward(images, true)?;
    let (loss, grads) = model.backward(&pass, labels)?;
    model.update_running_stats(&pass);
    sgd_step(model, &grads, state, config)?;
    Ok(loss)
}

/// Fraction of samples whose eval-mode argmax matches the label.
pub fn evaluate(model: &ModelParams, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let predictions = model.predict(&dataset.images)?;
    let correct = predictions
        .iter()
        .zip(&dataset.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn of(values: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
        }
        let (lo, hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                (lo.min(x), hi.max(x))
            });
        if values.is_empty() {
            return Ok(Self {
                edges: vec![0.0; bins + 1],
                counts: vec![0; bins],
            });
        }
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins)
            .map(|i| if i == bins { hi } else { lo + width * i as f64 })
            .collect();
        let mut counts = vec![0u64; bins];
        for &x in values {
            // measured from the nearer end so mirrored inputs bin symmetrically
            let b = if width <= 0.0 {
                0
            } else if x - lo <= hi - x {
                (((x - lo) / width) as usize).min(bins - 1)
            } else {
                bins - 1 - (((hi - x) / width) as usize).min(bins - 1)
            };
            counts[b] += 1;
        }
        Ok(Self { edges, counts })
    }

    /// `bin_lo,bin_hi,count` rows under a header line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "bin_lo,bin_hi,count")?;
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(out, "{:e},{:e},{}", self.edges[i], self.edges[i + 1], c)?;
        }
        Ok(())
    }
}

/// Histogram of the `index`-th quantizable weight tensor (0-based).
pub fn weight_histogram(model: &ModelParams, index: usize, bins: usize) -> Result<Histogram> {
    let layers = model.quantizable_indices();
    let &layer = layers.get(index).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "quantizable layer index {index} out of range (model has {})",
            layers.len()
        ))
    })?;
    Histogram::of(model.layers[layer].weight.data(), bins)
}

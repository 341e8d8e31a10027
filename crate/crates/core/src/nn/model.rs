use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{self, BatchNormCache, ConvGeometry, BN_MOMENTUM};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 10;
const CONV_CHANNELS: usize = 16;
const HIDDEN: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Architecture {
    /// 1×28×28 input.
    MnistCnn,
    /// 3×32×32 input.
    CifarCnn,
}

impl Architecture {
    pub fn id(self) -> u8 {
        match self {
            Architecture::MnistCnn => 0,
            Architecture::CifarCnn => 1,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Architecture::MnistCnn),
            1 => Some(Architecture::CifarCnn),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Architecture::MnistCnn => "mnist",
            Architecture::CifarCnn => "cifar10",
        }
    }

    /// `[channels, height, width]` of one input sample.
    pub fn input_shape(self) -> [usize; 3] {
        match self {
            Architecture::MnistCnn => [1, 28, 28],
            Architecture::CifarCnn => [3, 32, 32],
        }
    }

    pub fn flattened_features(self) -> usize {
        let side = self.input_shape()[1] / 4;
        CONV_CHANNELS * side * side
    }

    /// Element counts of the four quantizable weight tensors.
    pub fn quantizable_counts(self) -> [usize; 4] {
        let c = self.input_shape()[0];
        [
            CONV_CHANNELS * c * 9,
            CONV_CHANNELS * CONV_CHANNELS * 9,
            HIDDEN * self.flattened_features(),
            NUM_CLASSES * HIDDEN,
        ]
    }

    pub fn total_quantizable_weights(self) -> usize {
        self.quantizable_counts().iter().sum()
    }

    fn plan(self) -> Vec<Stage> {
        let [c, h, _] = self.input_shape();
        let conv = |layer, in_channels, side| Stage::Conv {
            layer,
            geom: ConvGeometry {
                in_channels,
                out_channels: CONV_CHANNELS,
                height: side,
                width: side,
                kernel: 3,
                padding: 1,
            },
        };
        vec![
            conv(0, c, h),
            Stage::BatchNorm {
                layer: 1,
                channels: CONV_CHANNELS,
                spatial: h * h,
            },
            Stage::Relu,
            Stage::MaxPool {
                planes: CONV_CHANNELS,
                side: h,
            },
            conv(2, CONV_CHANNELS, h / 2),
            Stage::BatchNorm {
                layer: 3,
                channels: CONV_CHANNELS,
                spatial: h * h / 4,
            },
            Stage::Relu,
            Stage::MaxPool {
                planes: CONV_CHANNELS,
                side: h / 2,
            },
            Stage::Linear {
                layer: 4,
                in_features: self.flattened_features(),
                out_features: HIDDEN,
            },
            Stage::BatchNorm {
                layer: 5,
                channels: HIDDEN,
                spatial: 1,
            },
            Stage::Relu,
            Stage::Linear {
                layer: 6,
                in_features: HIDDEN,
                out_features: NUM_CLASSES,
            },
            Stage::BatchNorm {
                layer: 7,
                channels: NUM_CLASSES,
                spatial: 1,
            },
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv2d,
    BatchNorm2d,
    BatchNorm1d,
    Linear,
}

impl LayerKind {
    pub fn id(self) -> u8 {
        match self {
            LayerKind::Conv2d => 0,
            LayerKind::BatchNorm2d => 1,
            LayerKind::BatchNorm1d => 2,
            LayerKind::Linear => 3,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(LayerKind::Conv2d),
            1 => Some(LayerKind::BatchNorm2d),
            2 => Some(LayerKind::BatchNorm1d),
            3 => Some(LayerKind::Linear),
            _ => None,
        }
    }

    pub fn is_batch_norm(self) -> bool {
        matches!(self, LayerKind::BatchNorm1d | LayerKind::BatchNorm2d)
    }
}

/// Parameters of one layer. For batch norm, `weight` and `bias` are the
/// affine scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub kind: LayerKind,
    pub weight: Tensor,
    pub bias: Tensor,
    pub running_mean: Option<Tensor>,
    pub running_var: Option<Tensor>,
}

impl LayerParams {
    /// Only conv and linear weight tensors are quantized for the uplink.
    pub fn quantizable(&self) -> bool {
        matches!(self.kind, LayerKind::Conv2d | LayerKind::Linear)
    }

    fn batch_norm(kind: LayerKind, channels: usize) -> Self {
        Self {
            kind,
            weight: Tensor::filled(&[channels], 1.0),
            bias: Tensor::zeros(&[channels]),
            running_mean: Some(Tensor::zeros(&[channels])),
            running_var: Some(Tensor::filled(&[channels], 1.0)),
        }
    }

    fn dense(kind: LayerKind, shape: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let fan_in: usize = shape[1..].iter().product();
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            kind,
            weight: Tensor::new(shape.to_vec(), data).expect("shape matches"),
            bias: Tensor::zeros(&[shape[0]]),
            running_mean: None,
            running_var: None,
        }
    }

    /// All tensors of the layer in a fixed order: weight, bias, then the
    /// running statistics when present.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.weight, &self.bias];
        out.extend(self.running_mean.iter());
        out.extend(self.running_var.iter());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.weight, &mut self.bias];
        out.extend(self.running_mean.iter_mut());
        out.extend(self.running_var.iter_mut());
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub architecture: Architecture,
    pub layers: Vec<LayerParams>,
}

/// Build a freshly initialized model. Conv and linear weights are drawn from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`; biases start at zero and batch norm
/// at the identity.
pub fn build_model(architecture: Architecture, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, _, _] = architecture.input_shape();
    let layers = vec![
        LayerParams::dense(LayerKind::Conv2d, &[CONV_CHANNELS, c, 3, 3], &mut rng),
        LayerParams::batch_norm(LayerKind::BatchNorm2d, CONV_CHANNELS),
        LayerParams::dense(
            LayerKind::Conv2d,
            &[CONV_CHANNELS, CONV_CHANNELS, 3, 3],
            &mut rng,
        ),
        LayerParams::batch_norm(LayerKind::BatchNorm2d, CONV_CHANNELS),
        LayerParams::dense(
            LayerKind::Linear,
            &[HIDDEN, architecture.flattened_features()],
            &mut rng,
        ),
        LayerParams::batch_norm(LayerKind::BatchNorm1d, HIDDEN),
        LayerParams::dense(LayerKind::Linear, &[NUM_CLASSES, HIDDEN], &mut rng),
        LayerParams::batch_norm(LayerKind::BatchNorm1d, NUM_CLASSES),
    ];
    ModelParams {
        architecture,
        layers,
    }
}

#[derive(Clone, Copy, Debug)]
enum Stage {
    Conv {
        layer: usize,
        geom: ConvGeometry,
    },
    BatchNorm {
        layer: usize,
        channels: usize,
        spatial: usize,
    },
    Relu,
    MaxPool {
        planes: usize,
        side: usize,
    },
    Linear {
        layer: usize,
        in_features: usize,
        out_features: usize,
    },
}

#[derive(Clone, Debug)]
enum StageCache {
    None,
    BatchNorm(BatchNormCache),
    MaxPool(Vec<usize>),
}

/// Output of a forward pass plus whatever backward needs.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// `batch × 10` softmax probabilities.
    pub probs: Tensor,
    batch: usize,
    train: bool,
    stage_inputs: Vec<Vec<f64>>,
    caches: Vec<StageCache>,
}

impl ForwardPass {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn is_train(&self) -> bool {
        self.train
    }
}

/// Gradient of one layer's `weight` and `bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ModelParams {
    pub fn quantizable_indices(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].quantizable())
            .collect()
    }

    /// Quantizable layer whose aggregation weight layer `i` shares: the layer
    /// itself, or the nearest quantizable layer before it.
    pub fn owning_quantizable(&self, i: usize) -> Option<usize> {
        (0..=i).rev().find(|&j| self.layers[j].quantizable())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.tensors())
            .map(Tensor::len)
            .sum()
    }

    /// Check that `other` has the same architecture and tensor shapes.
    pub fn check_compatible(&self, other: &ModelParams) -> Result<()> {
        if self.architecture != other.architecture || self.layers.len() != other.layers.len() {
            return Err(Error::Shape("model architectures differ".into()));
        }
        for (i, (a, b)) in self.layers.iter().zip(&other.layers).enumerate() {
            let (ta, tb) = (a.tensors(), b.tensors());
            if a.kind != b.kind
                || ta.len() != tb.len()
                || ta.iter().zip(&tb).any(|(x, y)| x.shape() != y.shape())
            {
                return Err(Error::Shape(format!("layer {i} shapes differ")));
            }
        }
        Ok(())
    }

    /// Run the network on `batch` (`N × C × H × W`). In train mode batch norm
    /// uses batch statistics and the pass can be fed to [`ModelParams::backward`].
    pub fn forward(&self, batch: &Tensor, train: bool) -> Result<ForwardPass> {
        let [c, h, w] = self.architecture.input_shape();
        let shape = batch.shape();
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(Error::Shape(format!(
                "expected batch × {c} × {h} × {w}, got {shape:?}"
            )));
        }
        let n = shape[0];
        let plan = self.architecture.plan();
        let mut stage_inputs = Vec::with_capacity(plan.len());
        let mut caches = Vec::with_capacity(plan.len());
        let mut x = batch.data().to_vec();
        for stage in &plan {
            let (y, cache) = match *stage {
                Stage::Conv { layer, geom } => {
                    let l = &self.layers[layer];
                    let y = layers::conv2d_forward(&geom, n, &x, l.weight.data(), l.bias.data());
                    (y, StageCache::None)
                }
                Stage::BatchNorm {
                    layer,
                    channels,
                    spatial,
                } => {
                    let l = &self.layers[layer];
                    if train {
                        let (y, cache) = layers::batchnorm_forward_train(
                            n,
                            channels,
                            spatial,
                            &x,
                            l.weight.data(),
                            l.bias.data(),
                        );
                        (y, StageCache::BatchNorm(cache))
                    } else {
                        let y = layers::batchnorm_forward_eval(
                            n,
                            channels,
                            spatial,
                            &x,
                            l.weight.data(),
                            l.bias.data(),
                            l.running_mean.as_ref().expect("batch norm").data(),
                            l.running_var.as_ref().expect("batch norm").data(),
                        );
                        (y, StageCache::None)
                    }
                }
                Stage::Relu => (layers::relu_forward(&x), StageCache::None),
                Stage::MaxPool { planes, side } => {
                    let (y, argmax) = layers::maxpool2_forward(n * planes, side, side, &x);
                    (y, StageCache::MaxPool(argmax))
                }
                Stage::Linear {
                    layer,
                    in_features,
                    out_features,
                } => {
                    let l = &self.layers[layer];
                    let y = layers::linear_forward(
                        n,
                        in_features,
                        out_features,
                        &x,
                        l.weight.data(),
                        l.bias.data(),
                    );
                    (y, StageCache::None)
                }
            };
            stage_inputs.push(x);
            caches.push(cache);
            x = y;
        }
        let probs = layers::softmax(NUM_CLASSES, &x);
        Ok(ForwardPass {
            probs: Tensor::new(vec![n, NUM_CLASSES], probs)?,
            batch: n,
            train,
            stage_inputs,
            caches,
        })
    }

    /// Mean cross-entropy loss of a pass and the gradient of every layer's
    /// weight and bias.
    pub fn backward(&self, pass: &ForwardPass, labels: &[u8]) -> Result<(f64, Vec<LayerGrads>)> {
        if !pass.train {
            return Err(Error::InvalidArgument(
                "backward needs a train-mode forward pass".into(),
            ));
        }
        if labels.len() != pass.batch {
            return Err(Error::Shape(format!(
                "{} labels for a batch of {}",
                labels.len(),
                pass.batch
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| usize::from(y) >= NUM_CLASSES) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range")));
        }
        let n = pass.batch;
        let (loss, mut grad) = layers::softmax_cross_entropy(NUM_CLASSES, pass.probs.data(), labels);
        let mut grads: Vec<LayerGrads> = self
            .layers
            .iter()
            .map(|l| LayerGrads {
                weight: vec![0.0; l.weight.len()],
                bias: vec![0.0; l.bias.len()],
            })
            .collect();
        let plan = self.architecture.plan();
        for (s, stage) in plan.iter().enumerate().rev() {
            let input = &pass.stage_inputs[s];
            grad = match (*stage, &pass.caches[s]) {
                (Stage::Conv { layer, geom }, _) => {
                    let (gi, gw, gb) =
                        layers::conv2d_backward(&geom, n, input, self.layers[layer].weight.data(), &grad);
                    grads[layer] = LayerGrads { weight: gw, bias: gb };
                    gi
                }
                (
                    Stage::BatchNorm {
                        layer,
                        channels,
                        spatial,
                    },
                    StageCache::BatchNorm(cache),
                ) => {
                    let (gi, gg, gb) = layers::batchnorm_backward(
                        n,
                        channels,
                        spatial,
                        cache,
                        self.layers[layer].weight.data(),
                        &grad,
                    );
                    grads[layer] = LayerGrads { weight: gg, bias: gb };
                    gi
                }
                (Stage::Relu, _) => layers::relu_backward(input, &grad),
                (Stage::MaxPool { .. }, StageCache::MaxPool(argmax)) => {
                    layers::maxpool2_backward(input.len(), argmax, &grad)
                }
                (
                    Stage::Linear {
                        layer,
                        in_features,
                        out_features,
                    },
                    _,
                ) => {
                    let (gi, gw, gb) = layers::linear_backward(
                        n,
                        in_features,
                        out_features,
                        input,
                        self.layers[layer].weight.data(),
                        &grad,
                    );
                    grads[layer] = LayerGrads { weight: gw, bias: gb };
                    gi
                }
                _ => unreachable!("stage cache mismatch"),
            };
        }
        Ok((loss, grads))
    }

    /// Fold the batch statistics of a train-mode pass into the running
    /// estimates (momentum 0.1, unbiased variance).
    pub fn update_running_stats(&mut self, pass: &ForwardPass) {
        let plan = self.architecture.plan();
        for (stage, cache) in plan.iter().zip(&pass.caches) {
            if let (Stage::BatchNorm { layer, .. }, StageCache::BatchNorm(c)) = (stage, cache) {
                let l = &mut self.layers[*layer];
                let correction = if c.count > 1 {
                    c.count as f64 / (c.count - 1) as f64
                } else {
                    1.0
                };
                let rm = l.running_mean.as_mut().expect("batch norm").data_mut();
                for (r, m) in rm.iter_mut().zip(&c.mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                }
                let rv = l.running_var.as_mut().expect("batch norm").data_mut();
                for (r, v) in rv.iter_mut().zip(&c.var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * correction;
                }
            }
        }
    }

    /// Eval-mode class predictions.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<u8>> {
        const CHUNK: usize = 500;
        let total = images.shape().first().copied().unwrap_or(0);
        let mut out = Vec::with_capacity(total);
        let mut start = 0;
        while start < total {
            let count = CHUNK.min(total - start);
            let pass = self.forward(&images.slice_rows(start, count), false)?;
            for row in pass.probs.data().chunks(NUM_CLASSES) {
                out.push(argmax(row) as u8);
            }
            start += count;
        }
        Ok(out)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

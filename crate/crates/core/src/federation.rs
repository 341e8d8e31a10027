//! Federated training with quantized uplink.
//!
//! Each round the server sends the full-precision global model to the
//! selected clients. Every client trains locally while keeping its conv and
//! linear weights on the quantization grid, then uploads level indices and
//! per-layer thresholds (and, depending on the strategy, its dataset size or
//! its per-layer mean squared quantization error). The server dequantizes and
//! averages.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::{Duration, Instant};

use log::debug;
use rand::seq::{index, SliceRandom};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec;
use crate::data::{partition_iid, Dataset};
use crate::error::{Error, Result};
use crate::nn::{self, build_model, evaluate, Architecture, ModelParams, SgdConfig, SgdState};
use crate::quant::{
    self, check_bits, dequantize, fake_quantize_at, OctavParams, QuantMode, QuantSpec,
    QuantizedTensor, ThresholdMode,
};

/// Number of quantizable weight tensors in every supported architecture.
pub const QUANTIZED_LAYERS: usize = 4;

/// Per-layer msqe floor applied before inversion.
pub const MSQE_FLOOR: f64 = 1e-12;

/// Per-quantizable-layer bit widths, written as e.g. `4-2-2-4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BitWidthConfig(pub [u8; QUANTIZED_LAYERS]);

impl BitWidthConfig {
    pub fn uniform(bits: u8) -> Self {
        Self([bits; QUANTIZED_LAYERS])
    }

    pub fn bits(&self) -> &[u8; QUANTIZED_LAYERS] {
        &self.0
    }
}

impl FromStr for BitWidthConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split('-').collect();
        if parts.len() != QUANTIZED_LAYERS {
            return Err(Error::config(
                "bitwidths",
                format!("expected {QUANTIZED_LAYERS} dash-separated widths, got `{s}`"),
            ));
        }
        let mut bits = [0u8; QUANTIZED_LAYERS];
        for (b, p) in bits.iter_mut().zip(&parts) {
            *b = p
                .parse()
                .map_err(|_| Error::config("bitwidths", format!("`{p}` is not a bit width")))?;
            check_bits(*b).map_err(|e| Error::config("bitwidths", e.to_string()))?;
        }
        Ok(Self(bits))
    }
}

impl fmt::Display for BitWidthConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d] = self.0;
        write!(f, "{a}-{b}-{c}-{d}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AggregationStrategy {
    /// Weight clients by dataset size.
    FedAvg,
    /// Weight each layer by the inverse of the client's mean squared
    /// quantization error for that layer.
    InverseMsqe,
}

impl AggregationStrategy {
    pub fn name(self) -> &'static str {
        match self {
            AggregationStrategy::FedAvg => "fedavg",
            AggregationStrategy::InverseMsqe => "msqe",
        }
    }
}

impl FromStr for AggregationStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "fedavg" => Ok(Self::FedAvg),
            "msqe" => Ok(Self::InverseMsqe),
            other => Err(Error::config(
                "strategy",
                format!("`{other}` is not one of fedavg, msqe"),
            )),
        }
    }
}

/// One quantizable weight tensor as sent on the uplink.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerPayload {
    Quantized(QuantizedTensor),
    /// Full-precision baseline: raw 32-bit floats.
    Full(Vec<f32>),
}

impl LayerPayload {
    pub fn count(&self) -> usize {
        match self {
            LayerPayload::Quantized(q) => q.count(),
            LayerPayload::Full(v) => v.len(),
        }
    }

    pub fn dequantize(&self) -> Result<Vec<f64>> {
        match self {
            LayerPayload::Quantized(q) => dequantize(q),
            LayerPayload::Full(v) => Ok(v.iter().map(|&x| f64::from(x)).collect()),
        }
    }
}

/// What the server uses to weight this client.
#[derive(Clone, Debug, PartialEq)]
pub enum Weighting {
    DatasetSize(u32),
    Msqe(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: u32,
    pub layers: Vec<LayerPayload>,
    pub weighting: Weighting,
    /// Biases and batch-norm parameters/statistics in full precision, in
    /// layer order.
    pub side_band: Vec<f32>,
}

impl ClientUpdate {
    pub fn strategy(&self) -> AggregationStrategy {
        match self.weighting {
            Weighting::DatasetSize(_) => AggregationStrategy::FedAvg,
            Weighting::Msqe(_) => AggregationStrategy::InverseMsqe,
        }
    }

    pub fn dataset_size(&self) -> Option<u32> {
        match self.weighting {
            Weighting::DatasetSize(n) => Some(n),
            Weighting::Msqe(_) => None,
        }
    }

    pub fn msqe(&self) -> Option<&[f32]> {
        match &self.weighting {
            Weighting::Msqe(e) => Some(e),
            Weighting::DatasetSize(_) => None,
        }
    }

    /// Rebuild full-precision parameters on top of `template`'s structure.
    pub fn to_params(&self, template: &ModelParams) -> Result<ModelParams> {
        let mut model = template.clone();
        let qidx = model.quantizable_indices();
        if qidx.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "update has {} quantized layers, model has {}",
                self.layers.len(),
                qidx.len()
            )));
        }
        for (&i, payload) in qidx.iter().zip(&self.layers) {
            let values = payload.dequantize()?;
            let w = model.layers[i].weight.data_mut();
            if values.len() != w.len() {
                return Err(Error::Shape(format!(
                    "layer {i}: {} values for {} weights",
                    values.len(),
                    w.len()
                )));
            }
            w.copy_from_slice(&values);
        }
        let mut side = self.side_band.iter();
        for_each_side_band_mut(&mut model, |v| {
            *v = f64::from(*side.next().ok_or_else(|| {
                Error::Shape("side band shorter than the model's".into())
            })?);
            Ok(())
        })?;
        if side.next().is_some() {
            return Err(Error::Shape("side band longer than the model's".into()));
        }
        Ok(model)
    }
}

/// Every parameter that is not a quantizable weight: conv/linear biases and
/// all batch-norm tensors.
fn side_band(model: &ModelParams) -> Vec<f32> {
    let mut out = Vec::new();
    for layer in &model.layers {
        let tensors = layer.tensors();
        let skip = usize::from(layer.quantizable());
        for t in &tensors[skip..] {
            out.extend(t.data().iter().map(|&x| x as f32));
        }
    }
    out
}

fn for_each_side_band_mut(
    model: &mut ModelParams,
    mut f: impl FnMut(&mut f64) -> Result<()>,
) -> Result<()> {
    for layer in &mut model.layers {
        let skip = usize::from(layer.quantizable());
        for t in layer.tensors_mut().into_iter().skip(skip) {
            for v in t.data_mut() {
                f(v)?;
            }
        }
    }
    Ok(())
}

/// How clients keep their weights quantized while training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QatMode {
    /// After every optimizer step the weights are replaced by their
    /// fake-quantized values; no full-precision copy is kept.
    Projection,
    /// A full-precision master copy is updated with gradients taken at the
    /// fake-quantized weights (straight-through estimator).
    StraightThrough,
}

impl FromStr for QatMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "projection" => Ok(Self::Projection),
            "ste" => Ok(Self::StraightThrough),
            other => Err(Error::config(
                "qat",
                format!("`{other}` is not one of projection, ste"),
            )),
        }
    }
}

/// Everything a client needs besides the model and its data.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientConfig {
    pub sgd: SgdConfig,
    /// Per quantizable layer; `None` uploads full-precision weights.
    pub layer_specs: Option<[QuantSpec; QUANTIZED_LAYERS]>,
    pub local_epochs: usize,
    pub octav: OctavParams,
    pub qat: QatMode,
    pub strategy: AggregationStrategy,
}

impl ClientConfig {
    pub fn quantized(
        bits: BitWidthConfig,
        mode: QuantMode,
        threshold: ThresholdMode,
        strategy: AggregationStrategy,
    ) -> Result<Self> {
        let mut specs = [QuantSpec::new(1, mode, threshold)?; QUANTIZED_LAYERS];
        for (s, &b) in specs.iter_mut().zip(bits.bits()) {
            *s = QuantSpec::new(b, mode, threshold)?;
        }
        Ok(Self {
            layer_specs: Some(specs),
            ..Self::full_precision(strategy)
        })
    }

    pub fn full_precision(strategy: AggregationStrategy) -> Self {
        Self {
            sgd: SgdConfig::default(),
            layer_specs: None,
            local_epochs: 1,
            octav: OctavParams::default(),
            qat: QatMode::Projection,
            strategy,
        }
    }
}

/// Threshold used when a layer is entirely zero: the smallest positive
/// normal `f32`, so the reconstruction stays numerically zero.
pub const DEGENERATE_SCALE: f64 = f32::MIN_POSITIVE as f64;

struct Projected {
    tensor: QuantizedTensor,
    msqe: f64,
}

/// Fake-quantize one weight tensor in place with a wire-representable
/// threshold.
fn project_tensor(
    weights: &mut [f64],
    spec: &QuantSpec,
    octav: &OctavParams,
    rng: &mut dyn RngCore,
) -> Result<Projected> {
    match quant::threshold(weights, spec.bits(), spec.threshold_mode, octav) {
        Ok(s) => {
            // the server reconstructs with the f32 threshold
            let s = f64::from(s as f32).max(DEGENERATE_SCALE);
            let rng = (spec.mode == QuantMode::Stochastic).then_some(rng);
            let fq = fake_quantize_at(weights, spec, s, rng)?;
            weights.copy_from_slice(&fq.values);
            Ok(Projected {
                tensor: fq.tensor,
                msqe: fq.stats.msqe,
            })
        }
        Err(Error::DegenerateTensor) => {
            let mid = (spec.levels() / 2) as u32;
            let tensor = QuantizedTensor {
                levels: vec![mid; weights.len()],
                scale: DEGENERATE_SCALE,
                bits: spec.bits(),
            };
            let values = dequantize(&tensor)?;
            let msqe = quant::QuantStats::measure(weights, &values, DEGENERATE_SCALE).msqe;
            weights.copy_from_slice(&values);
            Ok(Projected { tensor, msqe })
        }
        Err(e) => Err(e),
    }
}

fn project_model(
    model: &mut ModelParams,
    specs: &[QuantSpec; QUANTIZED_LAYERS],
    octav: &OctavParams,
    rng: &mut dyn RngCore,
) -> Result<Vec<Projected>> {
    let qidx = model.quantizable_indices();
    qidx.iter()
        .zip(specs)
        .map(|(&i, spec)| project_tensor(model.layers[i].weight.data_mut(), spec, octav, rng))
        .collect()
}

/// Local quantization-aware training on one client; returns its uplink.
pub fn client_local_train(
    global: &ModelParams,
    data: &Dataset,
    config: &ClientConfig,
    client_id: u32,
    rng: &mut dyn RngCore,
) -> Result<ClientUpdate> {
    if config.local_epochs == 0 {
        return Err(Error::config("local_epochs", "must be >= 1"));
    }
    let mut model = global.clone();
    let mut state = SgdState::new(&model);
    let mut last: Option<Vec<Projected>> = None;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..config.local_epochs {
        order.shuffle(rng);
        for batch in order.chunks(config.sgd.batch_size) {
            let images = data.images.gather_rows(batch);
            let labels: Vec<u8> = batch.iter().map(|&i| data.labels[i]).collect();
            match (&config.layer_specs, config.qat) {
                (None, _) => {
                    nn::train_step(&mut model, &mut state, &config.sgd, &images, &labels)?;
                }
                (Some(specs), QatMode::Projection) => {
                    nn::train_step(&mut model, &mut state, &config.sgd, &images, &labels)?;
                    last = Some(project_model(&mut model, specs, &config.octav, rng)?);
                }
                (Some(specs), QatMode::StraightThrough) => {
                    let mut q = model.clone();
                    project_model(&mut q, specs, &config.octav, rng)?;
                    let pass = q.forward(&images, true)?;
                    let (_, grads) = q.backward(&pass, &labels)?;
                    model.update_running_stats(&pass);
                    nn::sgd_step(&mut model, &grads, &mut state, &config.sgd)?;
                }
            }
        }
    }
    let layers = match &config.layer_specs {
        None => {
            last = None;
            model
                .quantizable_indices()
                .iter()
                .map(|&i| {
                    LayerPayload::Full(model.layers[i].weight.data().iter().map(|&x| x as f32).collect())
                })
                .collect()
        }
        Some(specs) => {
            if config.qat == QatMode::StraightThrough || last.is_none() {
                last = Some(project_model(&mut model, specs, &config.octav, rng)?);
            }
            last.as_ref()
                .expect("projected")
                .iter()
                .map(|p| LayerPayload::Quantized(p.tensor.clone()))
                .collect()
        }
    };
    let weighting = match config.strategy {
        AggregationStrategy::FedAvg => Weighting::DatasetSize(data.len() as u32),
        AggregationStrategy::InverseMsqe => Weighting::Msqe(match &last {
            Some(p) => p.iter().map(|p| p.msqe as f32).collect(),
            None => vec![0.0; QUANTIZED_LAYERS],
        }),
    };
    Ok(ClientUpdate {
        client_id,
        layers,
        weighting,
        side_band: side_band(&model),
    })
}

/// `Σ_j p_j x_j` with `p_j = w_j / Σ w`. All weights must be positive.
pub fn weighted_average(values: &[&[f64]], weights: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() || values.len() != weights.len() {
        return Err(Error::InvalidArgument(
            "need one positive weight per contribution".into(),
        ));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "aggregation weights must be positive and finite: {weights:?}"
        )));
    }
    let len = values[0].len();
    if values.iter().any(|v| v.len() != len) {
        return Err(Error::Shape("contributions differ in length".into()));
    }
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; len];
    for (v, w) in values.iter().zip(weights) {
        let p = w / total;
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += p * x;
        }
    }
    Ok(out)
}

/// Average models with one weight per (client, quantizable layer); every
/// other layer uses the weight of its owning quantizable layer.
fn aggregate_with(models: &[ModelParams], layer_weights: &[Vec<f64>]) -> Result<ModelParams> {
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidArgument("no client models to aggregate".into()))?;
    for m in &models[1..] {
        first.check_compatible(m)?;
    }
    let qidx = first.quantizable_indices();
    let mut out = first.clone();
    for i in 0..out.layers.len() {
        let owner = first
            .owning_quantizable(i)
            .ok_or_else(|| Error::Shape(format!("layer {i} has no owning quantizable layer")))?;
        let group = qidx.iter().position(|&q| q == owner).expect("owner is quantizable");
        let weights: Vec<f64> = layer_weights.iter().map(|w| w[group]).collect();
        let n_tensors = first.layers[i].tensors().len();
        for t in 0..n_tensors {
            let contributions: Vec<&[f64]> =
                models.iter().map(|m| m.layers[i].tensors()[t].data()).collect();
            let avg = weighted_average(&contributions, &weights)?;
            out.layers[i].tensors_mut()[t].data_mut().copy_from_slice(&avg);
        }
    }
    Ok(out)
}

/// Dataset-size weighted mean of client models.
pub fn aggregate_fedavg(models: &[ModelParams], dataset_sizes: &[u64]) -> Result<ModelParams> {
    if models.len() != dataset_sizes.len() {
        return Err(Error::InvalidArgument("one dataset size per model".into()));
    }
    let groups = models.first().map_or(0, |m| m.quantizable_indices().len());
    let weights: Vec<Vec<f64>> = dataset_sizes.iter().map(|&n| vec![n as f64; groups]).collect();
    aggregate_with(models, &weights)
}

/// Per-layer inverse-msqe weighted mean of client models; `msqe[j][i]` is
/// client `j`'s error on quantizable layer `i`, floored at [`MSQE_FLOOR`].
pub fn aggregate_inverse_msqe(models: &[ModelParams], msqe: &[Vec<f64>]) -> Result<ModelParams> {
    if models.len() != msqe.len() {
        return Err(Error::InvalidArgument("one msqe vector per model".into()));
    }
    let groups = models.first().map_or(0, |m| m.quantizable_indices().len());
    if msqe.iter().any(|e| e.len() != groups) {
        return Err(Error::Shape(format!("need {groups} msqe values per client")));
    }
    let weights: Vec<Vec<f64>> = msqe
        .iter()
        .map(|e| e.iter().map(|&e| 1.0 / e.max(MSQE_FLOOR)).collect())
        .collect();
    aggregate_with(models, &weights)
}

/// Dequantize decoded updates and aggregate them by their own weighting.
/// Updates are combined in `client_id` order.
pub fn aggregate_updates(updates: &[ClientUpdate], template: &ModelParams) -> Result<ModelParams> {
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let models: Vec<ModelParams> = sorted
        .iter()
        .map(|u| u.to_params(template))
        .collect::<Result<_>>()?;
    let strategy = sorted
        .first()
        .map(|u| u.strategy())
        .ok_or_else(|| Error::InvalidArgument("no updates".into()))?;
    if sorted.iter().any(|u| u.strategy() != strategy) {
        return Err(Error::InvalidArgument("mixed aggregation strategies".into()));
    }
    match strategy {
        AggregationStrategy::FedAvg => {
            let sizes: Vec<u64> = sorted
                .iter()
                .map(|u| u64::from(u.dataset_size().expect("fedavg update")))
                .collect();
            aggregate_fedavg(&models, &sizes)
        }
        AggregationStrategy::InverseMsqe => {
            let e: Vec<Vec<f64>> = sorted
                .iter()
                .map(|u| u.msqe().expect("msqe update").iter().map(|&x| f64::from(x)).collect())
                .collect();
            aggregate_inverse_msqe(&models, &e)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederationConfig {
    pub architecture: Architecture,
    pub clients: usize,
    pub rounds: usize,
    /// Fraction of clients selected each round, in `(0, 1]`.
    pub client_fraction: f64,
    pub client: ClientConfig,
    pub seed: u64,
    /// Train selected clients on the rayon pool. Results do not depend on it.
    pub parallel: bool,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::config("clients", "must be >= 1"));
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return Err(Error::config("client_fraction", "must be in (0, 1]"));
        }
        if self.client.local_epochs == 0 {
            return Err(Error::config("local_epochs", "must be >= 1"));
        }
        self.client.sgd.validate()
    }

    /// Label for metrics rows, e.g. `4-2-2-4/octav/stoch` or `full`.
    pub fn label(&self) -> String {
        match &self.client.layer_specs {
            None => "full".to_string(),
            Some(specs) => {
                let bits = BitWidthConfig([
                    specs[0].bits(),
                    specs[1].bits(),
                    specs[2].bits(),
                    specs[3].bits(),
                ]);
                let th = match specs[0].threshold_mode {
                    ThresholdMode::Octav => "octav",
                    ThresholdMode::MaxScalar => "max",
                };
                let mode = match specs[0].mode {
                    QuantMode::Deterministic => "det",
                    QuantMode::Stochastic => "stoch",
                };
                format!("{bits}/{th}/{mode}")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundMetrics {
    /// 1-based.
    pub round: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Table-style uplink size of one client's weights and thresholds.
    pub uplink_bits: u64,
    /// Encoded bytes received by the server this round, all clients.
    pub wire_bytes: u64,
    pub wall_time: Duration,
}

#[derive(Clone, Debug)]
pub struct FederationRun {
    pub metrics: Vec<RoundMetrics>,
    pub model: ModelParams,
}

const TAG_INIT: u64 = 1;
const TAG_PARTITION: u64 = 2;
const TAG_SELECT: u64 = 3;
const TAG_CLIENT: u64 = 4;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of an independent stream derived from the master seed and a path of
/// identifiers (e.g. client id and round).
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Random stream of `client_id` in `round`.
pub fn client_rng(master: u64, client_id: u32, round: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(
        master,
        &[TAG_CLIENT, u64::from(client_id), round as u64],
    ))
}

/// Table-style uplink bits of one client under `config`.
pub fn uplink_bits(config: &FederationConfig) -> u64 {
    let arch = config.architecture;
    match &config.client.layer_specs {
        None => arch.total_quantizable_weights() as u64 * 32,
        Some(specs) => {
            let bits = BitWidthConfig([
                specs[0].bits(),
                specs[1].bits(),
                specs[2].bits(),
                specs[3].bits(),
            ]);
            codec::bit_budget(arch, &bits, config.client.strategy).quantized_bits
        }
    }
}

fn select_clients(config: &FederationConfig, round: usize) -> Vec<u32> {
    let m = config.clients;
    let k = ((config.client_fraction * m as f64).ceil() as usize).clamp(1, m);
    if k == m {
        return (0..m as u32).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[TAG_SELECT, round as u64]));
    let mut picked: Vec<u32> = index::sample(&mut rng, m, k)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    picked.sort_unstable();
    picked
}

/// Global model before the first round.
pub fn initial_model(config: &FederationConfig) -> ModelParams {
    build_model(config.architecture, derive_seed(config.seed, &[TAG_INIT]))
}

/// Client shards of `train`, indexed by client id.
pub fn client_shards(config: &FederationConfig, train: &Dataset) -> Result<Vec<Dataset>> {
    let partition = partition_iid(
        &train.labels,
        config.clients,
        derive_seed(config.seed, &[TAG_PARTITION]),
    )?;
    Ok(partition
        .client_indices
        .iter()
        .map(|idx| train.subset(idx))
        .collect())
}

/// Run `config.rounds` rounds on IID client shards of `train`, evaluating
/// the global model on `train` and `test` after each round.
pub fn run_federation(
    config: &FederationConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<FederationRun> {
    config.validate()?;
    let initial = initial_model(config);
    let shards = client_shards(config, train)?;
    let bits_per_client = uplink_bits(config);
    let mut global = initial;
    let mut metrics = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        let start = Instant::now();
        let selected = select_clients(config, round);
        let work = |&id: &u32| -> Result<Vec<u8>> {
            let mut rng = client_rng(config.seed, id, round);
            let update =
                client_local_train(&global, &shards[id as usize], &config.client, id, &mut rng)?;
            codec::encode(&update)
        };
        let payloads: Vec<Vec<u8>> = if config.parallel {
            selected.par_iter().map(work).collect::<Result<_>>()?
        } else {
            selected.iter().map(work).collect::<Result<_>>()?
        };
        let wire_bytes = payloads.iter().map(|p| p.len() as u64).sum();
        let updates: Vec<ClientUpdate> = payloads
            .iter()
            .map(|p| codec::decode(p))
            .collect::<Result<_>>()?;
        global = aggregate_updates(&updates, &global)?;
        let train_accuracy = evaluate(&global, train)?;
        let test_accuracy = evaluate(&global, test)?;
        debug!(
            "round {round}: train {train_accuracy:.4} test {test_accuracy:.4} ({} clients)",
            selected.len()
        );
        metrics.push(RoundMetrics {
            round,
            train_accuracy,
            test_accuracy,
            uplink_bits: bits_per_client,
            wire_bytes,
            wall_time: start.elapsed(),
        });
    }
    Ok(FederationRun {
        metrics,
        model: global,
    })
}

pub const METRICS_HEADER: &str = "round,strategy,config,train_acc,test_acc,uplink_bits";

/// Metrics rows in the `round,strategy,config,train_acc,test_acc,uplink_bits`
/// schema (header included, wall time omitted so output is reproducible).
pub fn write_metrics_csv<W: Write>(
    mut out: W,
    config: &FederationConfig,
    metrics: &[RoundMetrics],
) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    let label = config.label();
    for m in metrics {
        writeln!(
            out,
            "{},{},{},{:.6},{:.6},{}",
            m.round,
            config.client.strategy.name(),
            label,
            m.train_accuracy,
            m.test_accuracy,
            m.uplink_bits
        )?;
    }
    Ok(())
}

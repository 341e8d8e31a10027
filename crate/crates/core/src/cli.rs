//! Experiment configuration and the `run`, `bits` and `hist` commands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::codec::{self, PUBLISHED_TOTAL_WEIGHTS};
use crate::data::{self, Dataset, DatasetName};
use crate::error::{Error, Result};
use crate::federation::{
    run_federation, write_metrics_csv, AggregationStrategy, BitWidthConfig, ClientConfig,
    ClientUpdate, FederationConfig, LayerPayload, QatMode, RoundMetrics, Weighting,
};
use crate::nn::{build_model, weight_histogram, Architecture, SgdConfig};
use crate::quant::{OctavParams, QuantMode, QuantizedTensor, ThresholdMode};

/// Environment variable consulted for the default data directory.
pub const DATA_DIR_ENV: &str = "FEDQUANT_DATA_DIR";

/// Sample counts used for the synthetic dataset when no limits are given.
pub const SYNTHETIC_TRAIN: usize = 600;
pub const SYNTHETIC_TEST: usize = 200;

/// Every accepted configuration key.
pub const KEYS: &[&str] = &[
    "dataset",
    "data_dir",
    "architecture",
    "clients",
    "rounds",
    "client_fraction",
    "local_epochs",
    "bitwidths",
    "mode",
    "threshold",
    "strategy",
    "full_precision",
    "trials",
    "seed",
    "lr",
    "momentum",
    "weight_decay",
    "batch_size",
    "output_dir",
    "train_limit",
    "test_limit",
    "octav_max_iters",
    "octav_tol",
    "qat",
    "parallel",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetName,
    pub data_dir: PathBuf,
    pub architecture: Architecture,
    pub clients: usize,
    pub rounds: usize,
    pub client_fraction: f64,
    pub local_epochs: usize,
    pub bitwidths: BitWidthConfig,
    pub mode: QuantMode,
    pub threshold: ThresholdMode,
    pub strategy: AggregationStrategy,
    pub full_precision: bool,
    pub trials: usize,
    pub seed: u64,
    pub sgd: SgdConfig,
    pub output_dir: PathBuf,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub octav: OctavParams,
    pub qat: QatMode,
    pub parallel: bool,
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(Error::config(key, format!("`{other}` is not a boolean"))),
    }
}

fn parse_limit(key: &str, value: &str) -> Result<Option<usize>> {
    match value.trim() {
        "none" | "all" => Ok(None),
        v => {
            let n: usize = parse_value(key, v)?;
            if n == 0 {
                return Err(Error::config(key, "must be >= 1 or `none`"));
            }
            Ok(Some(n))
        }
    }
}

pub fn parse_dataset(value: &str) -> Result<DatasetName> {
    match value.trim() {
        "mnist" => Ok(DatasetName::Mnist),
        "cifar10" => Ok(DatasetName::Cifar10),
        "synthetic" => Ok(DatasetName::Synthetic),
        other => Err(Error::config(
            "dataset",
            format!("`{other}` is not one of mnist, cifar10, synthetic"),
        )),
    }
}

fn dataset_name(d: DatasetName) -> &'static str {
    match d {
        DatasetName::Mnist => "mnist",
        DatasetName::Cifar10 => "cifar10",
        DatasetName::Synthetic => "synthetic",
    }
}

pub fn parse_architecture(value: &str) -> Result<Architecture> {
    match value.trim() {
        "mnist" | "mnist_cnn" => Ok(Architecture::MnistCnn),
        "cifar10" | "cifar_cnn" => Ok(Architecture::CifarCnn),
        other => Err(Error::config(
            "architecture",
            format!("`{other}` is not one of mnist, cifar10"),
        )),
    }
}

fn parse_mode(value: &str) -> Result<QuantMode> {
    match value.trim() {
        "det" => Ok(QuantMode::Deterministic),
        "stoch" => Ok(QuantMode::Stochastic),
        other => Err(Error::config("mode", format!("`{other}` is not one of det, stoch"))),
    }
}

fn parse_threshold(value: &str) -> Result<ThresholdMode> {
    match value.trim() {
        "octav" => Ok(ThresholdMode::Octav),
        "max" => Ok(ThresholdMode::MaxScalar),
        other => Err(Error::config(
            "threshold",
            format!("`{other}` is not one of octav, max"),
        )),
    }
}

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str, origin: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(
                format!("{origin}:{}", n + 1),
                format!("expected `key = value`, got `{line}`"),
            )
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

impl ExperimentConfig {
    /// Build from key/value pairs. `dataset` is required; every other key
    /// has a default.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        if let Some(k) = pairs.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::config(k.clone(), "unknown key"));
        }
        let get = |k: &str| pairs.get(k).map(String::as_str);
        let dataset = parse_dataset(
            get("dataset").ok_or_else(|| Error::config("dataset", "required"))?,
        )?;
        let architecture = match get("architecture") {
            Some(v) => parse_architecture(v)?,
            None => match dataset {
                DatasetName::Cifar10 => Architecture::CifarCnn,
                _ => Architecture::MnistCnn,
            },
        };
        if dataset != DatasetName::Synthetic && dataset_name(dataset) != architecture.name() {
            return Err(Error::config(
                "architecture",
                format!("{} does not fit dataset {}", architecture.name(), dataset_name(dataset)),
            ));
        }
        let num = |k: &str, default: usize, min: usize| -> Result<usize> {
            let v = match get(k) {
                Some(v) => parse_value(k, v)?,
                None => default,
            };
            if v < min {
                return Err(Error::config(k, format!("must be >= {min}")));
            }
            Ok(v)
        };
        let real = |k: &str, default: f64| -> Result<f64> {
            get(k).map_or(Ok(default), |v| parse_value(k, v))
        };
        let sgd = SgdConfig {
            lr: real("lr", SgdConfig::default().lr)?,
            momentum: real("momentum", SgdConfig::default().momentum)?,
            weight_decay: real("weight_decay", SgdConfig::default().weight_decay)?,
            batch_size: num("batch_size", SgdConfig::default().batch_size, 1)?,
        };
        sgd.validate()?;
        let client_fraction = real("client_fraction", 1.0)?;
        if !(client_fraction > 0.0 && client_fraction <= 1.0) {
            return Err(Error::config("client_fraction", "must be in (0, 1]"));
        }
        let octav = OctavParams {
            max_iters: num("octav_max_iters", OctavParams::default().max_iters, 1)?,
            tol: real("octav_tol", OctavParams::default().tol)?,
        };
        if !(octav.tol >= 0.0 && octav.tol.is_finite()) {
            return Err(Error::config("octav_tol", "must be >= 0"));
        }
        let default_data_dir = std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("data"));
        Ok(Self {
            dataset,
            data_dir: get("data_dir").map_or(default_data_dir, PathBuf::from),
            architecture,
            clients: num("clients", 30, 1)?,
            rounds: num("rounds", 100, 0)?,
            client_fraction,
            local_epochs: num("local_epochs", 1, 1)?,
            bitwidths: get("bitwidths").map_or(Ok(BitWidthConfig([4, 2, 2, 4])), str::parse)?,
            mode: get("mode").map_or(Ok(QuantMode::Stochastic), parse_mode)?,
            threshold: get("threshold").map_or(Ok(ThresholdMode::Octav), parse_threshold)?,
            strategy: get("strategy").map_or(Ok(AggregationStrategy::FedAvg), str::parse)?,
            full_precision: get("full_precision")
                .map_or(Ok(false), |v| parse_bool("full_precision", v))?,
            trials: num("trials", 1, 1)?,
            seed: get("seed").map_or(Ok(0), |v| parse_value("seed", v))?,
            sgd,
            output_dir: get("output_dir").map_or_else(|| PathBuf::from("out"), PathBuf::from),
            train_limit: get("train_limit").map_or(Ok(None), |v| parse_limit("train_limit", v))?,
            test_limit: get("test_limit").map_or(Ok(None), |v| parse_limit("test_limit", v))?,
            octav,
            qat: get("qat").map_or(Ok(QatMode::Projection), str::parse)?,
            parallel: get("parallel").map_or(Ok(true), |v| parse_bool("parallel", v))?,
        })
    }

    /// Every key with its resolved value, one `key = value` per line, in
    /// [`KEYS`] order. Parsing this text yields the same config.
    pub fn resolved(&self) -> String {
        let limit = |l: Option<usize>| l.map_or("none".to_string(), |n| n.to_string());
        let values: Vec<(&str, String)> = vec![
            ("dataset", dataset_name(self.dataset).into()),
            ("data_dir", self.data_dir.display().to_string()),
            ("architecture", self.architecture.name().into()),
            ("clients", self.clients.to_string()),
            ("rounds", self.rounds.to_string()),
            ("client_fraction", self.client_fraction.to_string()),
            ("local_epochs", self.local_epochs.to_string()),
            ("bitwidths", self.bitwidths.to_string()),
            (
                "mode",
                match self.mode {
                    QuantMode::Deterministic => "det",
                    QuantMode::Stochastic => "stoch",
                }
                .into(),
            ),
            (
                "threshold",
                match self.threshold {
                    ThresholdMode::Octav => "octav",
                    ThresholdMode::MaxScalar => "max",
                }
                .into(),
            ),
            ("strategy", self.strategy.name().into()),
            ("full_precision", self.full_precision.to_string()),
            ("trials", self.trials.to_string()),
            ("seed", self.seed.to_string()),
            ("lr", self.sgd.lr.to_string()),
            ("momentum", self.sgd.momentum.to_string()),
            ("weight_decay", self.sgd.weight_decay.to_string()),
            ("batch_size", self.sgd.batch_size.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("train_limit", limit(self.train_limit)),
            ("test_limit", limit(self.test_limit)),
            ("octav_max_iters", self.octav.max_iters.to_string()),
            ("octav_tol", self.octav.tol.to_string()),
            (
                "qat",
                match self.qat {
                    QatMode::Projection => "projection",
                    QatMode::StraightThrough => "ste",
                }
                .into(),
            ),
            ("parallel", self.parallel.to_string()),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        let mut out = String::new();
        for (k, v) in values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Hex SHA-256 of everything that affects results: the resolved config
    /// minus output location and the parallelism switch.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for line in self.resolved().lines() {
            if line.starts_with("output_dir ") || line.starts_with("parallel ") {
                continue;
            }
            h.update(line.as_bytes());
            h.update(b"\n");
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn client_config(&self) -> Result<ClientConfig> {
        let mut c = if self.full_precision {
            ClientConfig::full_precision(self.strategy)
        } else {
            ClientConfig::quantized(self.bitwidths, self.mode, self.threshold, self.strategy)?
        };
        c.sgd = self.sgd;
        c.local_epochs = self.local_epochs;
        c.octav = self.octav;
        c.qat = self.qat;
        Ok(c)
    }

    /// Federation settings of trial `trial` (seeds `seed`, `seed + 1`, ...).
    pub fn federation_config(&self, trial: usize) -> Result<FederationConfig> {
        Ok(FederationConfig {
            architecture: self.architecture,
            clients: self.clients,
            rounds: self.rounds,
            client_fraction: self.client_fraction,
            client: self.client_config()?,
            seed: self.seed.wrapping_add(trial as u64),
            parallel: self.parallel,
        })
    }

    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self.dataset {
            DatasetName::Mnist => data::load_mnist(&self.data_dir)?,
            DatasetName::Cifar10 => data::load_cifar10(&self.data_dir)?,
            DatasetName::Synthetic => {
                return data::synthetic_split(
                    self.train_limit.unwrap_or(SYNTHETIC_TRAIN),
                    self.test_limit.unwrap_or(SYNTHETIC_TEST),
                    10,
                    self.architecture.input_shape(),
                    self.seed,
                );
            }
        };
        let train = self.train_limit.map_or(train.clone(), |n| train.take(n));
        let test = self.test_limit.map_or(test.clone(), |n| test.take(n));
        Ok((train, test))
    }
}

/// Read the optional config file, overlay `overrides`, validate.
pub fn parse_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut pairs = match file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_pairs(&text, &path.display().to_string())?
        }
        None => BTreeMap::new(),
    };
    for (k, v) in overrides {
        pairs.insert(k.clone(), v.clone());
    }
    ExperimentConfig::from_pairs(&pairs)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn metrics_csv(config: &FederationConfig, metrics: &[RoundMetrics], comment: &str) -> Vec<u8> {
    let mut buf = Vec::new();
    let _ = writeln!(buf, "{comment}");
    write_metrics_csv(&mut buf, config, metrics).expect("writing to memory");
    buf
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub const SUMMARY_HEADER: &str =
    "round,strategy,config,train_acc_mean,train_acc_std,test_acc_mean,test_acc_std,uplink_bits";

/// Per-round mean and sample standard deviation across trials.
pub fn summarize(config: &FederationConfig, trials: &[Vec<RoundMetrics>]) -> Result<String> {
    let rounds = trials.first().map_or(0, Vec::len);
    if trials.iter().any(|t| t.len() != rounds) {
        return Err(Error::InvalidArgument("trials differ in round count".into()));
    }
    let mut out = String::new();
    let _ = writeln!(out, "{SUMMARY_HEADER}");
    for r in 0..rounds {
        let train: Vec<f64> = trials.iter().map(|t| t[r].train_accuracy).collect();
        let test: Vec<f64> = trials.iter().map(|t| t[r].test_accuracy).collect();
        let (trm, trs) = mean_std(&train);
        let (tem, tes) = mean_std(&test);
        let _ = writeln!(
            out,
            "{},{},{},{trm:.6},{trs:.6},{tem:.6},{tes:.6},{}",
            r + 1,
            config.client.strategy.name(),
            config.label(),
            trials[0][r].uplink_bits
        );
    }
    Ok(out)
}

/// Files written by [`cmd_run`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutputs {
    pub config: PathBuf,
    pub trials: Vec<PathBuf>,
    pub summary: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

/// Run every trial and write `config.txt`, `trial_<k>.csv`, `summary.csv`
/// and `model_trial_<k>.fqck` into the output directory.
pub fn cmd_run(config: &ExperimentConfig) -> Result<RunOutputs> {
    let (train, test) = config.load_datasets()?;
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let hash = config.hash();
    let comment = format!("# config_hash={hash}");
    let config_path = dir.join("config.txt");
    write_file(&config_path, format!("{comment}\n{}", config.resolved()).as_bytes())?;
    info!(
        "{} train / {} test samples, {} trials",
        train.len(),
        test.len(),
        config.trials
    );
    let mut outputs = RunOutputs {
        config: config_path,
        trials: Vec::new(),
        summary: dir.join("summary.csv"),
        checkpoints: Vec::new(),
    };
    let mut all = Vec::with_capacity(config.trials);
    let mut fed = config.federation_config(0)?;
    for trial in 0..config.trials {
        fed = config.federation_config(trial)?;
        let run = run_federation(&fed, &train, &test)?;
        if let Some(last) = run.metrics.last() {
            info!(
                "trial {trial}: test accuracy {:.4} after {} rounds",
                last.test_accuracy, last.round
            );
        }
        let path = dir.join(format!("trial_{trial}.csv"));
        write_file(&path, &metrics_csv(&fed, &run.metrics, &comment))?;
        outputs.trials.push(path);
        let ck = dir.join(format!("model_trial_{trial}.fqck"));
        checkpoint::save(&run.model, &ck)?;
        outputs.checkpoints.push(ck);
        all.push(run.metrics);
    }
    let summary = format!("{comment}\n{}", summarize(&fed, &all)?);
    write_file(&outputs.summary, summary.as_bytes())?;
    Ok(outputs)
}

/// Configurations listed by `bits` when none are given.
pub const TABLE_ROWS: &[&str] = &["4-4-4-4", "4-2-2-4", "2-2-2-2", "2-1-1-2"];

/// Encoded length of one update with the given widths (weights and
/// thresholds plus side band and framing).
fn wire_bytes(arch: Architecture, bits: &BitWidthConfig, strategy: AggregationStrategy) -> usize {
    let model = build_model(arch, 0);
    let side: usize = model
        .layers
        .iter()
        .map(|l| {
            let t = l.tensors();
            t[usize::from(l.quantizable())..].iter().map(|t| t.len()).sum::<usize>()
        })
        .sum();
    let layers = arch
        .quantizable_counts()
        .iter()
        .zip(bits.bits())
        .map(|(&n, &b)| {
            LayerPayload::Quantized(QuantizedTensor {
                levels: vec![0; n],
                scale: 1.0,
                bits: b,
            })
        })
        .collect::<Vec<_>>();
    let weighting = match strategy {
        AggregationStrategy::FedAvg => Weighting::DatasetSize(0),
        AggregationStrategy::InverseMsqe => Weighting::Msqe(vec![0.0; layers.len()]),
    };
    codec::encoded_len(&ClientUpdate {
        client_id: 0,
        layers,
        weighting,
        side_band: vec![0.0; side],
    })
}

/// Bit-budget table for `rows`, with footnotes where published ratios differ.
pub fn cmd_bits(
    arch: Architecture,
    rows: &[BitWidthConfig],
    strategy: AggregationStrategy,
) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>14} {:>14} {:>8} {:>11}",
        "config", "quantized_bits", "full_bits", "ratio", "wire_bytes"
    );
    let mut notes = Vec::new();
    for row in rows {
        let b = codec::bit_budget(arch, row, strategy);
        let mark = if arch == Architecture::MnistCnn {
            codec::published_ratio(row).map(|p| {
                notes.push(format!(
                    "[{}] {row}: published ratio {p:.2}; the layer counts give {:.4}",
                    notes.len() + 1,
                    b.savings_ratio
                ));
                format!("[{}]", notes.len())
            })
        } else {
            None
        };
        let _ = writeln!(
            out,
            "{:<12} {:>14} {:>14} {:>8.4} {:>11}{}",
            row.to_string(),
            b.quantized_bits,
            b.full_precision_bits,
            b.savings_ratio,
            wire_bytes(arch, row, strategy),
            mark.map(|m| format!(" {m}")).unwrap_or_default()
        );
    }
    if arch == Architecture::MnistCnn {
        notes.push(format!(
            "[{}] full precision uses {} weights (144+2304+78400+1000); the published table prints {PUBLISHED_TOTAL_WEIGHTS}",
            notes.len() + 1,
            arch.total_quantizable_weights()
        ));
        if rows.iter().any(|r| r.to_string() == "4-2-2-4") {
            notes.push(format!(
                "[{}] the published 4-2-2-4 row expression charges layer 2 at 4 bits (2304 x 4), which is 4-4-2-4: {} bits, ratio {:.4}",
                notes.len() + 1,
                codec::bit_budget(arch, &BitWidthConfig([4, 4, 2, 4]), strategy).quantized_bits,
                codec::bit_budget(arch, &BitWidthConfig([4, 4, 2, 4]), strategy).savings_ratio
            ));
        }
    }
    let _ = writeln!(
        out,
        "wire_bytes also counts framing, biases and batch-norm parameters"
    );
    for n in notes {
        let _ = writeln!(out, "{n}");
    }
    out
}

/// Histogram CSV of one quantizable layer of a saved model.
pub fn cmd_hist(checkpoint_path: &Path, layer: usize, bins: usize) -> Result<String> {
    let bytes = fs::read(checkpoint_path).map_err(|e| Error::io(checkpoint_path, e))?;
    let model = checkpoint::decode_model(&bytes)?;
    let hist = weight_histogram(&model, layer, bins)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    h.update(format!("layer={layer} bins={bins}").as_bytes());
    let digest: String = h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect();
    let mut buf = format!("# config_hash={digest}\n").into_bytes();
    hist.write_csv(&mut buf).expect("writing to memory");
    Ok(String::from_utf8(buf).expect("ascii"))
}

#[derive(Debug, Parser)]
#[command(name = "fedquant", version, about = "Federated learning with quantized uplink")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run federated training trials and write metrics CSVs.
    Run(RunArgs),
    /// Print the uplink bit budget of bit-width configurations.
    Bits(BitsArgs),
    /// Write a weight histogram CSV of one layer of a checkpoint.
    Hist(HistArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub data_dir: Option<String>,
    #[arg(long)]
    pub clients: Option<String>,
    #[arg(long)]
    pub rounds: Option<String>,
    #[arg(long)]
    pub bitwidths: Option<String>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub threshold: Option<String>,
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub trials: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<String>,
    /// Upload full-precision weights instead of quantized ones.
    #[arg(long)]
    pub full_precision: bool,
    /// Any other config key, as `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl RunArgs {
    pub fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::config(s.clone(), "expected KEY=VALUE"))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        let flags = [
            ("dataset", &self.dataset),
            ("data_dir", &self.data_dir),
            ("clients", &self.clients),
            ("rounds", &self.rounds),
            ("bitwidths", &self.bitwidths),
            ("mode", &self.mode),
            ("threshold", &self.threshold),
            ("strategy", &self.strategy),
            ("trials", &self.trials),
            ("seed", &self.seed),
            ("output_dir", &self.out),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                out.push((k.to_string(), v.clone()));
            }
        }
        if self.full_precision {
            out.push(("full_precision".into(), "true".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Args)]
pub struct BitsArgs {
    #[arg(long, default_value = "mnist")]
    pub architecture: String,
    /// Repeatable; defaults to the four table rows.
    #[arg(long)]
    pub bitwidths: Vec<String>,
    #[arg(long, default_value = "fedavg")]
    pub strategy: String,
}

#[derive(Debug, Args)]
pub struct HistArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Quantizable layer, 0-based.
    #[arg(long)]
    pub layer: usize,
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Execute a parsed command line, writing reports to `stdout`.
pub fn execute<W: Write>(cli: &Cli, stdout: &mut W) -> Result<()> {
    let emit = |w: &mut W, s: &str| -> Result<()> {
        w.write_all(s.as_bytes()).map_err(|e| Error::io("<stdout>", e))
    };
    match &cli.command {
        Command::Run(args) => {
            let config = parse_config(args.config.as_deref(), &args.overrides()?)?;
            let out = cmd_run(&config)?;
            emit(stdout, &format!("{}\n", out.summary.display()))
        }
        Command::Bits(args) => {
            let arch = parse_architecture(&args.architecture)?;
            let strategy: AggregationStrategy = args.strategy.parse()?;
            let rows = if args.bitwidths.is_empty() {
                TABLE_ROWS.iter().map(|r| r.parse()).collect::<Result<Vec<_>>>()?
            } else {
                args.bitwidths.iter().map(|r| r.parse()).collect::<Result<Vec<_>>>()?
            };
            emit(stdout, &cmd_bits(arch, &rows, strategy))
        }
        Command::Hist(args) => {
            let csv = cmd_hist(&args.checkpoint, args.layer, args.bins)?;
            match &args.out {
                Some(p) => write_file(p, csv.as_bytes()),
                None => emit(stdout, &csv),
            }
        }
    }
}

/// Single-line, machine-parsable rendering of an error.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace(['\n', '\r'], " ");
    match e {
        Error::Config { key, .. } => format!("error kind=config key={key} message={msg:?}"),
        _ => format!("error kind={} message={msg:?}", e.kind()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(kv: &[(&str, &str)]) -> BTreeMap<String, String> {
        kv.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn bitwidths_key() {
        let c = ExperimentConfig::from_pairs(&pairs(&[
            ("dataset", "mnist"),
            ("bitwidths", "4-2-2-4"),
        ]))
        .unwrap();
        assert_eq!(c.bitwidths.bits(), &[4, 2, 2, 4]);
    }

    #[test]
    fn errors_name_the_key() {
        for (k, v) in [("clients", "0"), ("bitwidths", "4-2"), ("mode", "x"), ("lr", "-1")] {
            let err = ExperimentConfig::from_pairs(&pairs(&[("dataset", "mnist"), (k, v)]))
                .unwrap_err();
            match err {
                Error::Config { key, .. } => assert_eq!(key, k),
                other => panic!("{other}"),
            }
        }
        let err = ExperimentConfig::from_pairs(&pairs(&[("dataset", "mnist"), ("nope", "1")]))
            .unwrap_err();
        assert!(matches!(err, Error::Config { key, .. } if key == "nope"));
        let err = ExperimentConfig::from_pairs(&BTreeMap::new()).unwrap_err();
        assert!(matches!(err, Error::Config { key, .. } if key == "dataset"));
    }

    #[test]
    fn resolved_round_trips() {
        let c = ExperimentConfig::from_pairs(&pairs(&[
            ("dataset", "synthetic"),
            ("train_limit", "50"),
            ("lr", "0.05"),
            ("qat", "ste"),
        ]))
        .unwrap();
        let again = ExperimentConfig::from_pairs(&parse_pairs(&c.resolved(), "x").unwrap()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.hash(), c.hash());
    }

    #[test]
    fn comments_and_blank_lines() {
        let p = parse_pairs("# c\n\nclients = 5 # five\n", "f").unwrap();
        assert_eq!(p.get("clients").map(String::as_str), Some("5"));
        assert!(parse_pairs("clients 5", "f").is_err());
    }

    #[test]
    fn mean_std_sample() {
        assert_eq!(mean_std(&[1.0]), (1.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn bits_report_has_footnotes() {
        let rows: Vec<BitWidthConfig> = TABLE_ROWS.iter().map(|r| r.parse().unwrap()).collect();
        let r = cmd_bits(Architecture::MnistCnn, &rows, AggregationStrategy::FedAvg);
        assert!(r.contains("15.98"));
        assert!(r.contains("7.9969"));
        assert!(r.contains("31.5103"));
        assert!(r.contains("170720"));
        assert!(r.contains("published ratio 31.12"));
        assert!(r.contains("80848"));
    }

    #[test]
    fn error_line_is_single_line() {
        let l = error_line(&Error::config("clients", "must be >= 1"));
        assert!(l.starts_with("error kind=config key=clients "));
        assert!(!l.contains('\n'));
    }
}

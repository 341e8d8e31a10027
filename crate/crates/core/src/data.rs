//! Dataset loading (MNIST IDX, CIFAR-10 binary), IID partitioning and
//! synthetic data.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_TRAIN_KEEP: usize = 50_000;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const SYNTHETIC_MARGIN: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetName {
    Mnist,
    Cifar10,
    Synthetic,
}

/// Per-channel affine normalization applied after scaling pixels to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn mnist() -> Self {
        Self {
            mean: vec![0.1307],
            std: vec![0.3081],
        }
    }

    pub fn cifar10() -> Self {
        Self {
            mean: vec![0.5; 3],
            std: vec![0.5; 3],
        }
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    fn apply(&self, channel: usize, pixel: u8) -> f64 {
        (f64::from(pixel) / 255.0 - self.mean[channel]) / self.std[channel]
    }

    fn invert(&self, channel: usize, value: f64) -> u8 {
        ((value * self.std[channel] + self.mean[channel]) * 255.0)
            .round()
            .clamp(0.0, 255.0) as u8
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N × C × H × W`.
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub name: DatasetName,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u8>, name: DatasetName) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "images {:?} do not match {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
            return Err(Error::Format(format!("label {bad} outside 0..=9")));
        }
        Ok(Self {
            images,
            labels,
            name,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            name: self.name,
        }
    }

    /// The first `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images.slice_rows(0, n),
            labels: self.labels[..n].to_vec(),
            name: self.name,
        }
    }

    pub fn class_counts(&self) -> [usize; 10] {
        let mut counts = [0; 10];
        for &l in &self.labels {
            counts[usize::from(l)] += 1;
        }
        counts
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Raw IDX image file: `(rows, cols, pixels)` with `pixels.len() = n·rows·cols`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("bad IDX image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() != need {
        return Err(Error::Format(format!(
            "IDX image body has {} bytes, header promises {need}",
            body.len()
        )));
    }
    Ok((rows, cols, body.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("bad IDX label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!(
            "IDX label body has {} bytes, header promises {n}",
            body.len()
        )));
    }
    Ok(body.to_vec())
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

/// First existing file among the usual MNIST spellings (`-idx3-ubyte`,
/// `.idx3-ubyte`, optionally gzipped).
fn find_mnist_file(dir: &Path, prefix: &str, kind: &str) -> Result<PathBuf> {
    for sep in ['-', '.'] {
        for ext in ["", ".gz"] {
            let p = dir.join(format!("{prefix}{sep}{kind}-ubyte{ext}"));
            if p.is_file() {
                return Ok(p);
            }
        }
    }
    Err(Error::io(
        dir.join(format!("{prefix}-{kind}-ubyte")),
        std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
    ))
}

fn to_dataset(
    pixels: &[u8],
    labels: Vec<u8>,
    shape: [usize; 3],
    norm: &Normalization,
    name: DatasetName,
) -> Result<Dataset> {
    let [c, h, w] = shape;
    let plane = h * w;
    let data = pixels
        .iter()
        .enumerate()
        .map(|(i, &p)| norm.apply((i / plane) % c, p))
        .collect();
    let images = Tensor::new(vec![labels.len(), c, h, w], data)?;
    Dataset::new(images, labels, name)
}

fn load_mnist_split(dir: &Path, prefix: &str, norm: &Normalization) -> Result<Dataset> {
    let (rows, cols, pixels) = parse_idx_images(&read_file(&find_mnist_file(dir, prefix, "images-idx3")?)?)?;
    let labels = parse_idx_labels(&read_file(&find_mnist_file(dir, prefix, "labels-idx1")?)?)?;
    if pixels.len() != labels.len() * rows * cols {
        return Err(Error::Format(format!(
            "{prefix}: {} images vs {} labels",
            pixels.len() / (rows * cols).max(1),
            labels.len()
        )));
    }
    to_dataset(&pixels, labels, [1, rows, cols], norm, DatasetName::Mnist)
}

/// Load MNIST train/test from `dir`. Only the first 50000 training images are
/// kept.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    load_mnist_with(dir, &Normalization::mnist())
}

pub fn load_mnist_with(dir: &Path, norm: &Normalization) -> Result<(Dataset, Dataset)> {
    info!("mnist normalization mean={:?} std={:?}", norm.mean, norm.std);
    let train = load_mnist_split(dir, "train", norm)?.take(MNIST_TRAIN_KEEP);
    let test = load_mnist_split(dir, "t10k", norm)?;
    Ok((train, test))
}

/// Write a dataset as uncompressed IDX files `<prefix>-images-idx3-ubyte` and
/// `<prefix>-labels-idx1-ubyte`, undoing `norm`.
pub fn write_mnist_split(dir: &Path, prefix: &str, data: &Dataset, norm: &Normalization) -> Result<()> {
    let shape = data.images.shape();
    let (h, w) = (shape[2], shape[3]);
    let pixels: Vec<u8> = data.images.data().iter().map(|&v| norm.invert(0, v)).collect();
    let img = dir.join(format!("{prefix}-images-idx3-ubyte"));
    fs::write(&img, encode_idx_images(h, w, &pixels)).map_err(|e| Error::io(&img, e))?;
    let lab = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    fs::write(&lab, encode_idx_labels(&data.labels)).map_err(|e| Error::io(&lab, e))?;
    Ok(())
}

/// Parse one CIFAR-10 binary batch: label byte then R, G, B planes.
pub fn parse_cifar_batch(bytes: &[u8]) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "CIFAR batch size {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks(CIFAR_RECORD) {
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

pub fn encode_cifar_batch(labels: &[u8], pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(labels.len() * CIFAR_RECORD);
    for (l, px) in labels.iter().zip(pixels.chunks(CIFAR_RECORD - 1)) {
        out.push(*l);
        out.extend_from_slice(px);
    }
    out
}

fn load_cifar_files(paths: &[PathBuf], norm: &Normalization) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for p in paths {
        let (l, px) = parse_cifar_batch(&read_file(p)?)?;
        labels.extend(l);
        pixels.extend(px);
    }
    to_dataset(&pixels, labels, [3, 32, 32], norm, DatasetName::Cifar10)
}

/// Load CIFAR-10 from `data_batch_{1..5}.bin` and `test_batch.bin`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    load_cifar10_with(dir, &Normalization::cifar10())
}

pub fn load_cifar10_with(dir: &Path, norm: &Normalization) -> Result<(Dataset, Dataset)> {
    info!("cifar10 normalization mean={:?} std={:?}", norm.mean, norm.std);
    let train: Vec<PathBuf> = (1..=5)
        .map(|i| dir.join(format!("data_batch_{i}.bin")))
        .collect();
    let train = load_cifar_files(&train, norm)?;
    let test = load_cifar_files(&[dir.join("test_batch.bin")], norm)?;
    Ok((train, test))
}

/// Write a dataset as one CIFAR-10 binary batch, undoing `norm`.
pub fn write_cifar_batch(path: &Path, data: &Dataset, norm: &Normalization) -> Result<()> {
    let plane = 32 * 32;
    let pixels: Vec<u8> = data
        .images
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| norm.invert((i / plane) % 3, v))
        .collect();
    fs::write(path, encode_cifar_batch(&data.labels, &pixels)).map_err(|e| Error::io(path, e))
}

/// Per-client sample indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub client_indices: Vec<Vec<usize>>,
}

/// IID split: per class, shuffle with `seed` and deal round-robin so every
/// client gets `floor(class_count / num_clients)` samples of each class.
/// Leftovers are dropped.
pub fn partition_iid(labels: &[u8], num_clients: usize, seed: u64) -> Result<Partition> {
    if num_clients == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); 10];
    for (i, &l) in labels.iter().enumerate() {
        by_class[usize::from(l)].push(i);
    }
    let smallest = by_class
        .iter()
        .map(Vec::len)
        .filter(|&n| n > 0)
        .min()
        .unwrap_or(0);
    if num_clients > smallest {
        return Err(Error::Partition(format!(
            "{num_clients} clients but the smallest class has {smallest} samples"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clients = vec![Vec::new(); num_clients];
    for class in &mut by_class {
        class.shuffle(&mut rng);
        let per_client = class.len() / num_clients;
        for (k, &idx) in class[..per_client * num_clients].iter().enumerate() {
            clients[k % num_clients].push(idx);
        }
    }
    for c in &mut clients {
        c.sort_unstable();
    }
    Ok(Partition {
        client_indices: clients,
    })
}

/// Gaussian blobs: class `k` is centred at a random direction scaled to
/// length 5 with unit-variance isotropic noise. Labels cycle through the
/// classes, so counts are balanced to within one.
pub fn synthetic_dataset(
    num_samples: usize,
    num_classes: usize,
    input_shape: [usize; 3],
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || num_classes > 10 || num_samples < num_classes {
        return Err(Error::InvalidArgument(format!(
            "synthetic dataset needs 1..=10 classes and at least one sample per class \
             (got {num_samples} samples, {num_classes} classes)"
        )));
    }
    let dim: usize = input_shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x * SYNTHETIC_MARGIN / norm).collect()
        })
        .collect();
    let mut data = Vec::with_capacity(num_samples * dim);
    let mut labels = Vec::with_capacity(num_samples);
    for i in 0..num_samples {
        let k = i % num_classes;
        labels.push(k as u8);
        for &c in &centroids[k] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            data.push(c + noise);
        }
    }
    let [c, h, w] = input_shape;
    Dataset::new(
        Tensor::new(vec![num_samples, c, h, w], data)?,
        labels,
        DatasetName::Synthetic,
    )
}

/// Train and test sets drawn around the same class centroids.
pub fn synthetic_split(
    train: usize,
    test: usize,
    num_classes: usize,
    input_shape: [usize; 3],
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let all = synthetic_dataset(train + test, num_classes, input_shape, seed)?;
    let train_idx: Vec<usize> = (0..train).collect();
    let test_idx: Vec<usize> = (train..train + test).collect();
    Ok((all.subset(&train_idx), all.subset(&test_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_magic_constants() {
        assert_eq!(IDX_IMAGES_MAGIC, 2051);
        assert_eq!(IDX_LABELS_MAGIC, 2049);
    }

    #[test]
    fn idx_rejects_bad_magic_and_truncation() {
        let mut img = encode_idx_images(2, 2, &[0, 1, 2, 3]);
        assert!(parse_idx_images(&img).is_ok());
        img[3] = 0x01;
        assert!(matches!(parse_idx_images(&img), Err(Error::Format(_))));
        let img = encode_idx_images(2, 2, &[0, 1, 2, 3]);
        assert!(matches!(parse_idx_images(&img[..18]), Err(Error::Format(_))));
        assert!(matches!(parse_idx_images(&img[..10]), Err(Error::Format(_))));
        let lab = encode_idx_labels(&[1, 2, 3]);
        assert!(matches!(parse_idx_labels(&lab[..9]), Err(Error::Format(_))));
        assert!(matches!(parse_idx_images(&lab), Err(Error::Format(_))));
    }

    #[test]
    fn pixel_scaling() {
        let n = Normalization::identity(1);
        assert_eq!(n.apply(0, 0), 0.0);
        assert_eq!(n.apply(0, 255), 1.0);
    }

    #[test]
    fn cifar_record_layout() {
        assert_eq!(CIFAR_RECORD, 3073);
        let mut rec = vec![7u8];
        rec.extend(std::iter::repeat(10).take(1024));
        rec.extend(std::iter::repeat(20).take(1024));
        rec.extend(std::iter::repeat(30).take(1024));
        let (labels, pixels) = parse_cifar_batch(&rec).unwrap();
        assert_eq!(labels, vec![7]);
        let ds = to_dataset(
            &pixels,
            labels,
            [3, 32, 32],
            &Normalization::identity(3),
            DatasetName::Cifar10,
        )
        .unwrap();
        let d = ds.images.data();
        assert_eq!(d[0], 10.0 / 255.0);
        assert_eq!(d[1024], 20.0 / 255.0);
        assert_eq!(d[2048], 30.0 / 255.0);
        assert!(matches!(
            parse_cifar_batch(&rec[..3000]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn partition_equal_per_class() {
        let labels: Vec<u8> = (0..1000).map(|i| (i % 10) as u8).collect();
        let p = partition_iid(&labels, 10, 3).unwrap();
        assert_eq!(p.client_indices.len(), 10);
        for c in &p.client_indices {
            assert_eq!(c.len(), 100);
            let mut counts = [0; 10];
            for &i in c {
                counts[usize::from(labels[i])] += 1;
            }
            assert_eq!(counts, [10; 10]);
        }
    }

    #[test]
    fn partition_single_client_takes_all() {
        let labels: Vec<u8> = (0..57).map(|i| (i % 10) as u8).collect();
        let p = partition_iid(&labels, 1, 0).unwrap();
        assert_eq!(p.client_indices[0], (0..57).collect::<Vec<_>>());
    }

    #[test]
    fn partition_errors() {
        let labels = vec![0u8, 0, 1];
        assert!(matches!(partition_iid(&labels, 2, 0), Err(Error::Partition(_))));
        assert!(matches!(partition_iid(&labels, 0, 0), Err(Error::Partition(_))));
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = synthetic_dataset(103, 10, [1, 4, 4], 5).unwrap();
        let b = synthetic_dataset(103, 10, [1, 4, 4], 5).unwrap();
        assert_eq!(a, b);
        let counts = a.class_counts();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1);
        assert!(synthetic_dataset(5, 10, [1, 4, 4], 5).is_err());
    }
}

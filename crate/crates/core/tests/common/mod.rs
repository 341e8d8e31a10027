#![allow(dead_code)]

pub mod grad;

use std::path::PathBuf;

use fedquant::data::{load_mnist, Dataset};

/// Directory holding the MNIST IDX files used by the end-to-end tests.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os("FEDQUANT_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-subset"))
}

/// First `train` training and first `test` test samples.
pub fn mnist_subset(train: usize, test: usize) -> (Dataset, Dataset) {
    let dir = mnist_dir();
    let (tr, te) = load_mnist(&dir).unwrap_or_else(|e| panic!("loading {}: {e}", dir.display()));
    (tr.take(train), te.take(test))
}

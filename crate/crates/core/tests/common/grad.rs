//! Central finite differences against the analytic backward passes.

use fedquant::data::synthetic_dataset;
use fedquant::nn::layers::{
    batchnorm_backward, batchnorm_forward_train, conv2d_backward, conv2d_forward, linear_backward,
    linear_forward, softmax, softmax_cross_entropy, ConvGeometry,
};
use fedquant::nn::{build_model, Architecture, ModelParams, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Worst relative error of `grad` against central differences of `f` at `x`.
fn check(x: &[f64], grad: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + EPS;
        let up = f(&probe);
        probe[i] = x[i] - EPS;
        let down = f(&probe);
        probe[i] = x[i];
        worst = worst.max(rel_err(grad[i], (up - down) / (2.0 * EPS)));
    }
    worst
}

/// Conv2d: worst error over input, weight and bias gradients.
pub fn conv2d_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = ConvGeometry {
        in_channels: 2,
        out_channels: 3,
        height: 5,
        width: 4,
        kernel: 3,
        padding: 1,
    };
    let batch = 2;
    let x = randn(&mut rng, batch * 2 * 5 * 4);
    let w = randn(&mut rng, 3 * 2 * 9);
    let b = randn(&mut rng, 3);
    let r = randn(&mut rng, batch * 3 * 5 * 4);
    let (gx, gw, gb) = conv2d_backward(&g, batch, &x, &w, &r);
    let ex = check(&x, &gx, |x| dot(&conv2d_forward(&g, batch, x, &w, &b), &r));
    let ew = check(&w, &gw, |w| dot(&conv2d_forward(&g, batch, &x, w, &b), &r));
    let eb = check(&b, &gb, |b| dot(&conv2d_forward(&g, batch, &x, &w, b), &r));
    ex.max(ew).max(eb)
}

pub fn linear_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (batch, i, o) = (3, 5, 4);
    let x = randn(&mut rng, batch * i);
    let w = randn(&mut rng, o * i);
    let b = randn(&mut rng, o);
    let r = randn(&mut rng, batch * o);
    let (gx, gw, gb) = linear_backward(batch, i, o, &x, &w, &r);
    let ex = check(&x, &gx, |x| dot(&linear_forward(batch, i, o, x, &w, &b), &r));
    let ew = check(&w, &gw, |w| dot(&linear_forward(batch, i, o, &x, w, &b), &r));
    let eb = check(&b, &gb, |b| dot(&linear_forward(batch, i, o, &x, &w, b), &r));
    ex.max(ew).max(eb)
}

/// Training-mode batch norm; `spatial == 1` is the 1d case.
pub fn batchnorm_error(seed: u64, batch: usize, channels: usize, spatial: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = randn(&mut rng, batch * channels * spatial);
    let gamma: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.5..1.5)).collect();
    let beta = randn(&mut rng, channels);
    let r = randn(&mut rng, x.len());
    let (_, cache) = batchnorm_forward_train(batch, channels, spatial, &x, &gamma, &beta);
    let (gx, gg, gb) = batchnorm_backward(batch, channels, spatial, &cache, &gamma, &r);
    let f = |x: &[f64], g: &[f64], b: &[f64]| {
        dot(&batchnorm_forward_train(batch, channels, spatial, x, g, b).0, &r)
    };
    let ex = check(&x, &gx, |x| f(x, &gamma, &beta));
    let eg = check(&gamma, &gg, |g| f(&x, g, &beta));
    let eb = check(&beta, &gb, |b| f(&x, &gamma, b));
    ex.max(eg).max(eb)
}

pub fn batchnorm1d_error() -> f64 {
    batchnorm_error(3, 6, 4, 1)
}

pub fn batchnorm2d_error() -> f64 {
    batchnorm_error(4, 3, 2, 9)
}

pub fn softmax_cross_entropy_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (batch, classes) = (4, 10);
    let logits: Vec<f64> = (0..batch * classes).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let labels = [0u8, 3, 9, 3];
    let (_, grad) = softmax_cross_entropy(classes, &softmax(classes, &logits), &labels);
    check(&logits, &grad, |z| {
        softmax_cross_entropy(classes, &softmax(classes, z), &labels).0
    })
}

/// Sampled coordinates of every layer of the full model in training mode.
/// Returns the worst error with its layer, tensor and index.
pub fn whole_model_error() -> (f64, String) {
    let mut model = build_model(Architecture::MnistCnn, 6);
    let data = synthetic_dataset(6, 3, [1, 28, 28], 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for l in &mut model.layers {
        for v in l.bias.data_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
    }
    let loss = |m: &ModelParams| {
        let pass = m.forward(&data.images, true).unwrap();
        softmax_cross_entropy(10, pass.probs.data(), &data.labels).0
    };
    let pass = model.forward(&data.images, true).unwrap();
    let (_, grads) = model.backward(&pass, &data.labels).unwrap();
    let mut worst = (0.0, String::new());
    for (li, g) in grads.iter().enumerate() {
        for (which, analytic) in [(0, &g.weight), (1, &g.bias)] {
            for _ in 0..6 {
                let i = rng.gen_range(0..analytic.len());
                let x = tensor(&mut model, li, which).data()[i];
                tensor(&mut model, li, which).data_mut()[i] = x + EPS;
                let up = loss(&model);
                tensor(&mut model, li, which).data_mut()[i] = x - EPS;
                let down = loss(&model);
                tensor(&mut model, li, which).data_mut()[i] = x;
                let e = rel_err(analytic[i], (up - down) / (2.0 * EPS));
                if e > worst.0 {
                    worst = (e, format!("layer {li} tensor {which} index {i}"));
                }
            }
        }
    }
    worst
}

fn tensor(model: &mut ModelParams, layer: usize, which: usize) -> &mut Tensor {
    if which == 0 {
        &mut model.layers[layer].weight
    } else {
        &mut model.layers[layer].bias
    }
}

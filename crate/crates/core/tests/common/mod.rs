#![allow(dead_code)]

use malign_core::zoo::{build_model, init_params, ArchFamily};
use malign_core::{LayerSpec, Model, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform [0, 1) batch `[n, ..shape]`.
pub fn batch(seed: u64, n: usize, shape: &[usize]) -> Tensor {
    let mut r = rng(seed ^ 0x5eed);
    let mut full = vec![n];
    full.extend_from_slice(shape);
    let len = full.iter().product();
    Tensor::new(full, (0..len).map(|_| r.random::<f64>()).collect()).unwrap()
}

pub fn labels(seed: u64, n: usize, classes: usize) -> Vec<usize> {
    let mut r = rng(seed ^ 0x1abe1);
    (0..n).map(|_| r.random_range(0..classes)).collect()
}

pub fn mlp(seed: u64, input: &[usize], hidden: &[usize], classes: usize) -> Model {
    let mut layers = vec![LayerSpec::Flatten];
    let mut f: usize = input.iter().product();
    for &h in hidden {
        layers.push(LayerSpec::Dense { inputs: f, outputs: h });
        layers.push(LayerSpec::Relu);
        f = h;
    }
    layers.push(LayerSpec::Dense { inputs: f, outputs: classes });
    layers.push(LayerSpec::Softmax);
    let params = init_params(&layers, input, seed).unwrap();
    Model::new(layers, input.to_vec(), params, "test-mlp", seed).unwrap()
}

pub fn zoo(tag: &str, seed: u64, classes: usize, input: &[usize]) -> Model {
    build_model(&ArchFamily::new(tag.parse().unwrap(), classes, input), seed).unwrap()
}

/// A model that shares `base`'s layers but has freshly drawn parameters.
pub fn sibling(base: &Model, seed: u64) -> Model {
    let params = init_params(base.layers(), base.input_shape(), seed).unwrap();
    Model::new(base.layers().to_vec(), base.input_shape().to_vec(), params, "sibling", seed).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use tmle_lens_core::dgp::Dataset;
use tmle_lens_core::nnet::{Activation, MultiTaskNet, NetConfig};
use tmle_lens_core::rng;
use tmle_lens_core::Matrix;

pub fn net_config(input_dim: usize, layers: usize, width: usize, seed: u64) -> NetConfig {
    NetConfig {
        input_dim,
        hidden_layers: layers,
        hidden_size: width,
        activation: Activation::Relu,
        seed,
    }
}

/// Glorot weights plus small random biases, so no bias sits at zero.
pub fn random_net(input_dim: usize, layers: usize, width: usize, seed: u64) -> MultiTaskNet {
    let mut net = MultiTaskNet::init(&net_config(input_dim, layers, width, seed)).unwrap();
    let mut r = rng::stream(seed, 99);
    for layer in net.trunk.iter_mut().chain([&mut net.q_head, &mut net.g_head]) {
        for b in layer.bias.iter_mut() {
            *b = r.random_range(-0.3..0.3);
        }
    }
    net
}

pub fn normal_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = rng::stream(seed, 98);
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut r))
}

pub fn coin_flips(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, 97);
    (0..n).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect()
}

/// Small dataset with both arms present.
pub fn toy_dataset(n: usize, d: usize, seed: u64) -> Dataset {
    let w = normal_matrix(n, d, seed);
    let mut a = coin_flips(n, seed);
    a[0] = 1.0;
    a[1] = 0.0;
    let y = (0..n)
        .map(|i| w.get(i, 0) + 1.5 * a[i] + 0.1 * i as f64 / n as f64)
        .collect();
    Dataset::new(w, a, y, None, seed).unwrap()
}

/// Plain triple-loop `x · Wᵀ + b`.
pub fn dense_by_hand(x: &Matrix, weight: &Matrix, bias: &[f64]) -> Matrix {
    Matrix::from_fn(x.rows(), weight.rows(), |i, o| {
        let mut s = bias[o];
        for k in 0..x.cols() {
            s += x.get(i, k) * weight.get(o, k);
        }
        s
    })
}

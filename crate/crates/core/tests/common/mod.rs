#![allow(dead_code)]

use cimt_core::rng::mix64;
use cimt_core::tensor::Real;
use cimt_core::{ParamStore, Tensor};

/// Uniform values in [-0.5, 0.5) from a stateless hash chain.
pub fn uniform(n: usize, seed: u64) -> Vec<f64> {
    let mut z = seed;
    (0..n)
        .map(|_| {
            z = mix64(z.wrapping_add(0x9e37_79b9_7f4a_7c15));
            (z >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
        .collect()
}

pub fn noise<T: Real>(shape: Vec<usize>, seed: u64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_f64(shape, &uniform(n, seed)).unwrap()
}

pub fn random_store<T: Real>(shapes: &[(String, Vec<usize>)], seed: u64, scale: f64) -> ParamStore<T> {
    let mut p = ParamStore::new();
    for (i, (name, shape)) in shapes.iter().enumerate() {
        let n = shape.iter().product();
        let d: Vec<f64> = uniform(n, seed ^ (i as u64) << 32).iter().map(|v| v * scale).collect();
        p.insert(name.clone(), Tensor::from_f64(shape.clone(), &d).unwrap());
    }
    p
}

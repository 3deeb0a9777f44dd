#![allow(dead_code)]

pub mod hp;

use gyromix::{HeadOutputs, Pairing};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let g: f64 = StandardNormal.sample(rng);
        g * scale
    })
}

/// Uniform point in the ball of radius `radius`.
pub fn in_ball(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
    v.iter().map(|x| x / n * r).collect()
}

/// `K = 2n` pairing with adjacent pairs and labels `0..n`.
pub fn pairing(n: usize) -> Pairing {
    Pairing::adjacent(&(0..n as u32).collect::<Vec<_>>()).unwrap()
}

/// Random head outputs; hyperbolic rows have norms spread around `r`.
pub fn heads(rng: &mut ChaCha8Rng, k: usize, n: usize, hyper_scale: f64) -> HeadOutputs {
    HeadOutputs {
        euclid: Some(gaussian(rng, k, n, 1.0)),
        hyper: Some(gaussian(rng, k, n, hyper_scale)),
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Unstabilized pairwise cross-entropy straight from the definition.
pub fn naive_ce(d: &Array2<f64>, pairing: &Pairing, tau: f64) -> f64 {
    let k = d.nrows();
    let mut total = 0.0;
    for i in 0..k {
        let p = pairing.pos(i);
        let mut denom = 0.0;
        for j in 0..k {
            if j != i {
                denom += (-d[[i, j]] / tau).exp();
            }
        }
        total += -((-d[[i, p]] / tau).exp() / denom).ln();
    }
    total
}

/// Unstabilized similarity-form InfoNCE.
pub fn naive_infonce(z: &Array2<f64>, pairing: &Pairing, tau: f64) -> f64 {
    let k = z.nrows();
    let s = naive_matrix(z, |a, b| 1.0 - naive_cos(a, b) / 2.0);
    let mut total = 0.0;
    for i in 0..k {
        let denom: f64 = (0..k).filter(|&j| j != i).map(|j| (s[[i, j]] / tau).exp()).sum();
        total -= ((s[[i, pairing.pos(i)]] / tau).exp() / denom).ln();
    }
    total
}

pub fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    2.0 - 2.0 * dot / (na * nb)
}

pub fn naive_matrix(z: &Array2<f64>, f: impl Fn(&[f64], &[f64]) -> f64) -> Array2<f64> {
    let k = z.nrows();
    Array2::from_shape_fn((k, k), |(i, j)| {
        f(z.row(i).as_slice().unwrap(), z.row(j).as_slice().unwrap())
    })
}

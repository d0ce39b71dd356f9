#![allow(dead_code)]

use nnrepair::{Network, SafetyProperty, UnsafeConstraint, UnsafeDomain};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// 3 or 4 affine layers, at most 8 neurons per hidden layer, 2 to 4 inputs.
pub fn random_small_net(rng: &mut ChaCha8Rng) -> Network {
    let layers = rng.gen_range(3..=4);
    let mut sizes = vec![rng.gen_range(2..=4)];
    for _ in 1..layers {
        sizes.push(rng.gen_range(2..=8));
    }
    sizes.push(rng.gen_range(2..=3));
    Network::random(&sizes, rng).unwrap()
}

pub fn unit_box(d: usize) -> (Vec<f64>, Vec<f64>) {
    (vec![-1.0; d], vec![1.0; d])
}

pub fn sample_box(rng: &mut ChaCha8Rng, lb: &[f64], ub: &[f64]) -> Vec<f64> {
    lb.iter().zip(ub).map(|(l, u)| rng.gen_range(*l..=*u)).collect()
}

/// One random halfspace `a · y + b <= 0` whose boundary passes through the
/// output of a random box point, so both sides are reachable.
pub fn random_crossing_property(rng: &mut ChaCha8Rng, net: &Network, name: &str) -> SafetyProperty {
    let (lb, ub) = unit_box(net.input_dim());
    let x = sample_box(rng, &lb, &ub);
    let y = net.forward(&x).unwrap();
    let a: Vec<f64> = (0..net.output_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b = -a.iter().zip(&y).map(|(p, q)| p * q).sum::<f64>();
    SafetyProperty::new(name, lb, ub, UnsafeDomain::new(vec![UnsafeConstraint::new(a, b)]).unwrap()).unwrap()
}

/// Random convex combination of the rows of `vertices`.
pub fn sample_hull(rng: &mut ChaCha8Rng, vertices: &[Vec<f64>]) -> Vec<f64> {
    let w: Vec<f64> = vertices.iter().map(|_| -rng.gen_range(1e-12f64..1.0).ln()).collect();
    let total: f64 = w.iter().sum();
    let mut x = vec![0.0; vertices[0].len()];
    for (v, wi) in vertices.iter().zip(&w) {
        for (xk, vk) in x.iter_mut().zip(v) {
            *xk += wi / total * vk;
        }
    }
    x
}

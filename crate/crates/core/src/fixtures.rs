//! Desk-scale networks and properties for tests, benchmarks and the CLI.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{Activation, LabeledDataset, Layer, Network, Normalization};
use crate::reach::{SafetyProperty, UnsafeDomain};

/// Raw input bounds of the collision-avoidance networks:
/// distance, bearing, relative heading, ownship speed, intruder speed.
pub const HCAS_LB: [f64; 5] = [0.0, -PI, -PI, 100.0, 0.0];
pub const HCAS_UB: [f64; 5] = [56000.0, PI, PI, 1000.0, 1000.0];

/// Half-width used for the heading of the third property, which pins it to a
/// single value and would otherwise give a box with empty interior.
pub const PSI_HALF_WIDTH: f64 = 0.01;

/// Input normalization in the usual NNet style for the five inputs.
pub fn hcas_normalization() -> Normalization {
    Normalization {
        input_min: HCAS_LB.to_vec(),
        input_max: HCAS_UB.to_vec(),
        means: vec![19791.091, 0.0, 0.0, 650.0, 600.0, 7.518884],
        ranges: vec![60261.0, 2.0 * PI, 2.0 * PI, 1100.0, 1200.0, 373.94992],
    }
}

/// Random 5-input, 5-output network with the collision-avoidance normalization.
pub fn hcas_desk_net(hidden: &[usize], seed: u64) -> Result<Network> {
    let mut sizes = vec![5];
    sizes.extend_from_slice(hidden);
    sizes.push(5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::random(&sizes, &mut rng)?;
    Network::with_normalization(net.layers().to_vec(), hcas_normalization())
}

/// Raw (unnormalized) boxes of properties 1 to 3.
pub fn hcas_raw_boxes() -> Vec<(&'static str, [f64; 5], [f64; 5])> {
    vec![
        (
            "property-1",
            [50000.0, -PI, -PI, 900.0, 0.0],
            [56000.0, PI, PI, 1000.0, 60.0],
        ),
        (
            "property-2",
            [1500.0, -0.06, 3.10, 880.0, 860.0],
            [1800.0, 0.06, PI, 1000.0, 1000.0],
        ),
        (
            "property-3",
            [1500.0, -0.06, -PSI_HALF_WIDTH, 900.0, 700.0],
            [1800.0, 0.06, PSI_HALF_WIDTH, 1000.0, 1000.0],
        ),
    ]
}

/// Properties 1 to 3 in the network's normalized input space. Each one is
/// violated when clear-of-conflict (the first output) is the minimal score.
pub fn hcas_properties(norm: &Normalization) -> Result<Vec<SafetyProperty>> {
    hcas_raw_boxes()
        .into_iter()
        .map(|(name, lb, ub)| {
            let lb = (0..5).map(|i| norm.normalize_unclamped(i, lb[i])).collect();
            let ub = (0..5).map(|i| norm.normalize_unclamped(i, ub[i])).collect();
            SafetyProperty::new(name, lb, ub, UnsafeDomain::minimal_first_output(5))
        })
        .collect()
}

fn layer(rows: usize, cols: usize, w: &[f64], b: &[f64], act: Activation) -> Layer {
    Layer::new(
        DMatrix::from_row_slice(rows, cols, w),
        DVector::from_column_slice(b),
        act,
    )
    .expect("fixture layer shapes")
}

/// A 2-2-2 network that is unsafe in one corner of [`toy_property`]'s box.
///
/// `y1 - y2 = 0.85 - relu(x0 + x1) + 0.3 relu(x0 - x1)`, so the first output
/// drops below the second only where `x0 + x1` is large.
pub fn toy_unsafe_net() -> Network {
    Network::new(vec![
        layer(2, 2, &[1.0, 1.0, 1.0, -1.0], &[0.0, 0.0], Activation::Relu),
        layer(2, 2, &[-0.5, 0.2, 0.5, -0.1], &[0.55, -0.3], Activation::Identity),
    ])
    .expect("fixture network")
}

/// `y1 <= y2` on `[0, 0.5]^2`.
pub fn toy_property() -> SafetyProperty {
    SafetyProperty::new(
        "toy",
        vec![0.0, 0.0],
        vec![0.5, 0.5],
        UnsafeDomain::minimal_first_output(2),
    )
    .expect("fixture property")
}

/// Same domain on `[-1, 0]^2`, where the toy net is safe.
pub fn toy_safe_property() -> SafetyProperty {
    SafetyProperty::new(
        "toy-safe",
        vec![-1.0, -1.0],
        vec![0.0, 0.0],
        UnsafeDomain::minimal_first_output(2),
    )
    .expect("fixture property")
}

pub const TOY_DATA_LB: [f64; 2] = [-1.0, -1.0];
pub const TOY_DATA_UB: [f64; 2] = [1.0, 1.0];

/// The function [`toy_unsafe_net`] imperfectly approximates:
/// `y1 - y2 = 1.15 - relu(x0 + x1) + 0.3 relu(x0 - x1)`, safe on the toy box.
pub fn toy_reference_net() -> Network {
    Network::new(vec![
        layer(2, 2, &[1.0, 1.0, 1.0, -1.0], &[0.0, 0.0], Activation::Relu),
        layer(2, 2, &[-0.5, 0.2, 0.5, -0.1], &[0.7, -0.45], Activation::Identity),
    ])
    .expect("fixture network")
}

/// Train and test sets on the toy data box, labelled by [`toy_reference_net`].
pub fn toy_data(n: usize, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    let reference = toy_reference_net();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = LabeledDataset::sample_from_network(&reference, &TOY_DATA_LB, &TOY_DATA_UB, n, &mut rng)?;
    let test = LabeledDataset::sample_from_network(&reference, &TOY_DATA_LB, &TOY_DATA_UB, n, &mut rng)?;
    Ok((train, test))
}

/// A 3-8-8-2 network that is safe for `y1 <= y2` on `[-1, 1]^3` except near the
/// `(1, 1, 1)` corner.
///
/// Seven neurons per hidden layer carve the box into many linear regions but
/// feed the outputs only weakly; the eighth fires only when
/// `x0 + x1 + x2 > 2.4` and drives the first output down.
pub fn pruning_benchmark_net(seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w1 = Vec::with_capacity(24);
    let mut b1 = Vec::with_capacity(8);
    for _ in 0..7 {
        w1.extend((0..3).map(|_| rng.gen_range(-1.0..1.0)));
        b1.push(rng.gen_range(-0.5..0.5));
    }
    w1.extend([1.0, 1.0, 1.0]);
    b1.push(-2.4);

    let mut w2 = Vec::with_capacity(64);
    let mut b2 = Vec::with_capacity(8);
    for _ in 0..7 {
        w2.extend((0..7).map(|_| rng.gen_range(-1.0..1.0)));
        w2.push(0.0);
        b2.push(rng.gen_range(-0.5..0.5));
    }
    w2.extend([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    b2.push(0.0);

    let mut w3 = Vec::with_capacity(16);
    for sign in [-2.0, 2.0] {
        w3.extend((0..7).map(|_| rng.gen_range(-0.02..0.02)));
        w3.push(sign);
    }
    Network::new(vec![
        layer(8, 3, &w1, &b1, Activation::Relu),
        layer(8, 8, &w2, &b2, Activation::Relu),
        layer(2, 8, &w3, &[1.0, 0.0], Activation::Identity),
    ])
    .expect("fixture network")
}

pub fn pruning_benchmark_property() -> SafetyProperty {
    SafetyProperty::new(
        "corner",
        vec![-1.0; 3],
        vec![1.0; 3],
        UnsafeDomain::minimal_first_output(2),
    )
    .expect("fixture property")
}

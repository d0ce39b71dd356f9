mod common;

use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{random_crossing_property, random_small_net, sample_box, unit_box};
use nnrepair::fixtures::{hcas_desk_net, hcas_properties};
use nnrepair::model::{load_nnet, parse_nnet, NNetText};
use nnrepair::reach::{analyze, exact_output_sets, reach_unsafe, reach_unsafe_multi};
use nnrepair::repair::{correct, representative_pairs, unsafe_volume_ratio};
use nnrepair::{Error, Network, ReachOptions, UnsafeConstraint, UnsafeDomain};

fn net_from_seed(seed: u64) -> Network {
    random_small_net(&mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn nnet_round_trip_is_lossless(seed in any::<u64>()) {
        let net = net_from_seed(seed);
        let back = parse_nnet(&net.to_nnet_string()).unwrap();
        prop_assert_eq!(&back, &net);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let (lb, ub) = unit_box(net.input_dim());
        for _ in 0..100 {
            let x = sample_box(&mut rng, &lb, &ub);
            let (a, b) = (net.forward(&x).unwrap(), back.forward(&x).unwrap());
            for (p, q) in a.iter().zip(&b) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
        }
    }

    /// Every box point lies in some final set, and the set's tracked affine
    /// map reproduces the network there.
    #[test]
    fn final_sets_cover_the_box_with_exact_maps(seed in any::<u64>()) {
        let net = net_from_seed(seed);
        let (lb, ub) = unit_box(net.input_dim());
        let sets = exact_output_sets(&net, &lb, &ub, 200_000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        for _ in 0..300 {
            let x = sample_box(&mut rng, &lb, &ub);
            let y = net.forward(&x).unwrap();
            let holder = sets.iter().find(|s| s.contains_input(&x, 1e-9));
            prop_assert!(holder.is_some(), "{:?} uncovered", x);
            let (a, c) = holder.unwrap().local_map();
            let mapped = a * DVector::from_column_slice(&x) + c;
            for (p, q) in mapped.iter().zip(&y) {
                prop_assert!((p - q).abs() <= 1e-8, "{} vs {}", p, q);
            }
        }
    }

    #[test]
    fn unsafe_regions_have_disjoint_interiors(seed in any::<u64>()) {
        let net = net_from_seed(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let prop = random_crossing_property(&mut rng, &net, "p");
        let out = reach_unsafe(&net, &prop, &ReachOptions::default()).unwrap();
        for _ in 0..500 {
            let x = sample_box(&mut rng, &prop.lb, &prop.ub);
            let inside = out.regions.iter().filter(|r| r.contains_input(&x, -1e-9)).count();
            prop_assert!(inside <= 1);
        }
    }

    #[test]
    fn representative_pairs_follow_the_network(seed in any::<u64>()) {
        let net = net_from_seed(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
        let prop = random_crossing_property(&mut rng, &net, "p");
        let out = reach_unsafe(&net, &prop, &ReachOptions::default()).unwrap();
        let pairs = representative_pairs(&out.regions);
        for (x, y) in &pairs {
            let f = net.forward(x).unwrap();
            for (p, q) in f.iter().zip(y) {
                prop_assert!((p - q).abs() <= 1e-9);
            }
            prop_assert!(prop.unsafe_domain.contains(y, 1e-9));
        }
        for (i, (a, _)) in pairs.iter().enumerate() {
            for (b, _) in &pairs[i + 1..] {
                prop_assert!(a.iter().zip(b).any(|(p, q)| (p - q).abs() > 1e-9));
            }
        }
    }

    #[test]
    fn correction_exits_by_the_nearest_boundary(
        y in prop::collection::vec(-3.0f64..3.0, 3),
        normals in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..5),
        depths in prop::collection::vec(0.0f64..2.0, 4),
        alpha in 0.001f64..0.5,
    ) {
        prop_assume!(normals.iter().all(|a| a.iter().map(|v| v * v).sum::<f64>() > 1e-6));
        let constraints: Vec<UnsafeConstraint> = normals
            .iter()
            .zip(&depths)
            .map(|(a, r)| UnsafeConstraint::new(a.clone(), -a.iter().zip(&y).map(|(p, q)| p * q).sum::<f64>() - r))
            .collect();
        let u = UnsafeDomain::new(constraints).unwrap();
        let fixed = correct(&y, &u, alpha).unwrap();
        prop_assert!(!u.contains(&fixed, 0.0));
        let (dist, norm) = u
            .constraints
            .iter()
            .map(|c| {
                let norm = c.a.iter().map(|v| v * v).sum::<f64>().sqrt();
                ((-c.slack(&y)).max(0.0) / norm, norm)
            })
            .fold((f64::INFINITY, 0.0), |best, cur| if cur.0 < best.0 { cur } else { best });
        let moved = fixed.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        if dist > 0.0 {
            prop_assert!((moved - (1.0 + alpha) * dist).abs() <= 1e-12);
            // the crossed constraint is violated by alpha times the step length
            prop_assert!(u.max_slack(&fixed) >= alpha * dist * norm - 1e-12);
        }
    }
}

#[test]
fn volume_ratio_tracks_half_box() {
    let net = Network::random(&[2, 2], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    // a single identity-activation layer is linear, so the unsafe part of the
    // box is one halfspace cut and comes back as a single region
    let prop = random_crossing_property(&mut ChaCha8Rng::seed_from_u64(9), &net, "lin");
    let out = reach_unsafe(&net, &prop, &ReachOptions::default()).unwrap();
    assert_eq!(out.regions.len(), 1);
    let ratio = unsafe_volume_ratio(&out.regions, &prop.lb, &prop.ub, 10_000, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let direct = (0..10_000)
        .filter(|_| {
            let x = sample_box(&mut rng, &prop.lb, &prop.ub);
            prop.unsafe_domain.contains(&net.forward(&x).unwrap(), 0.0)
        })
        .count() as f64
        / 1e4;
    assert!((ratio - direct).abs() < 0.03, "{ratio} vs {direct}");
    assert!((0.0..=1.0).contains(&ratio));
}

#[test]
fn set_limit_reports_partial_results() {
    let net = net_from_seed(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let prop = random_crossing_property(&mut rng, &net, "p");
    let opts = ReachOptions {
        max_sets: 3,
        use_filter: false,
        ..Default::default()
    };
    match reach_unsafe(&net, &prop, &opts) {
        Err(Error::SetLimit { limit, .. }) => assert_eq!(limit, 3),
        other => panic!("expected set limit, got {other:?}"),
    }
}

#[test]
fn hcas_desk_properties_agree_across_modes() {
    let net = hcas_desk_net(&[6, 6], 17).unwrap();
    let props = hcas_properties(net.normalization()).unwrap();
    let serial = analyze(&net, &props, &ReachOptions::default()).unwrap();
    let parallel = analyze(&net, &props, &ReachOptions { worker_count: 4, ..Default::default() }).unwrap();
    let unfiltered = analyze(&net, &props, &ReachOptions { use_filter: false, ..Default::default() }).unwrap();
    assert_eq!(serial.regions, parallel.regions);
    assert_eq!(serial.regions, unfiltered.regions);

    // sampled cross-check inside each property box
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for p in &props {
        for _ in 0..2000 {
            let x = sample_box(&mut rng, &p.lb, &p.ub);
            let slack = p.unsafe_domain.max_slack(&net.forward(&x).unwrap());
            if slack < -1e-6 {
                assert!(serial.regions.iter().any(|r| r.property == p.name && r.contains_input(&x, 1e-6)));
            }
        }
    }
}

#[test]
fn shared_box_search_matches_separate_runs() {
    let net = net_from_seed(21);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = random_crossing_property(&mut rng, &net, "a");
    let mut b = random_crossing_property(&mut rng, &net, "b");
    b.lb = a.lb.clone();
    b.ub = a.ub.clone();
    let joint = reach_unsafe_multi(&net, &[a.clone(), b.clone()], &ReachOptions::default()).unwrap();
    let mut separate = reach_unsafe(&net, &a, &ReachOptions::default()).unwrap().regions;
    separate.extend(reach_unsafe(&net, &b, &ReachOptions::default()).unwrap().regions);
    nnrepair::reach::canonicalize(&mut separate);
    assert_eq!(joint.regions, separate);
}

#[test]
fn written_file_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("n.nnet");
    let net = net_from_seed(8);
    nnrepair::model::write_nnet(&net, &path).unwrap();
    let back = load_nnet(&path).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let x: Vec<f64> = (0..net.input_dim()).map(|_| rng.gen_range(-5.0..5.0)).collect();
        assert_eq!(net.forward(&x).unwrap(), back.forward(&x).unwrap());
    }
}

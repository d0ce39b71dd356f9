//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion does.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{random_crossing_property, random_small_net, sample_box, sample_hull, unit_box};
use nnrepair::fixtures::{pruning_benchmark_net, pruning_benchmark_property, toy_data, toy_property, toy_unsafe_net};
use nnrepair::model::{accuracy, loss_and_gradient, mse_loss};
use nnrepair::reach::{layer_output, output_overapprox, reach_unsafe, same_regions};
use nnrepair::repair::{correct, repair};
use nnrepair::{
    Network, ReachOptions, RepairConfig, TrackedSet, TrainConfig, UnsafeConstraint, UnsafeDomain, VZono, Verdict,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn twenty_nets(seed: u64) -> Vec<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..20).map(|_| random_small_net(&mut rng)).collect()
}

fn input_rows(s: &TrackedSet) -> Vec<Vec<f64>> {
    (0..s.num_vertices()).map(|v| s.input_vertex(v)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

fn c1_soundness() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = f64::INFINITY;
    let mut sets_checked = 0usize;
    for net in twenty_nets(1) {
        let (lb, ub) = unit_box(net.input_dim());
        let mut frontier = vec![TrackedSet::box_polytope(&lb, &ub).unwrap()];
        for depth in 0..net.num_layers() {
            for s in &frontier {
                let z = output_overapprox(&net, s, depth).unwrap();
                let verts = input_rows(s);
                let outs: Vec<Vec<f64>> = (0..200)
                    .map(|_| net.forward(&sample_hull(&mut rng, &verts)).unwrap())
                    .collect();
                for _ in 0..50 {
                    let a: Vec<f64> = (0..net.output_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let neg: Vec<f64> = a.iter().map(|v| -v).collect();
                    let (hi, lo) = (z.support(&a), -z.support(&neg));
                    for y in &outs {
                        let v = dot(&a, y);
                        worst = worst.min(hi - v).min(v - lo);
                    }
                }
                sets_checked += 1;
            }
            frontier = frontier
                .iter()
                .flat_map(|s| layer_output(&net, s, depth).unwrap())
                .collect();
        }
    }
    let elapsed = started.elapsed();
    ensure(worst >= -1e-6, || format!("worst slack {worst:e}"))?;
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!("{sets_checked} sets, worst slack {worst:.3e}, {:.1}s", elapsed.as_secs_f64()))
}

fn c2_constraint_min() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = rng.gen_range(1..=4);
        let m = rng.gen_range(1..=4);
        let n = rng.gen_range(0..=10);
        let z = VZono::new(
            DMatrix::from_fn(m, d, |_, _| rng.gen_range(-2.0..2.0)),
            DMatrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0)),
        )
        .unwrap();
        let a: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = rng.gen_range(-1.0..1.0);
        let brute = z
            .enumerate_points()
            .iter()
            .map(|p| dot(&a, p) + b)
            .fold(f64::INFINITY, f64::min);
        worst = worst.max((z.constraint_min(&a, b) - brute).abs());
    }
    ensure(worst <= 1e-12, || format!("max error {worst:e}"))?;
    Ok(format!("100 V-zonos, max error {worst:.1e}"))
}

fn c3_worked_example() -> Outcome {
    let z = VZono::new(
        DMatrix::from_row_slice(3, 2, &[-1.0, 2.0, -1.0, 0.0, 1.0, 0.0]),
        DMatrix::zeros(0, 2),
    )
    .unwrap();
    let (lb, ub) = z.neuron_bounds(0);
    ensure((lb, ub) == (-1.0, 1.0), || format!("bounds ({lb}, {ub})"))?;
    let r = z.relu_relax(0, lb, ub).unwrap();
    let rows: Vec<(f64, f64)> = r.base_vertices().row_iter().map(|v| (v[0], v[1])).collect();
    ensure(rows == vec![(-0.25, 2.0), (-0.25, 0.0), (0.75, 0.0)], || format!("base vertices {rows:?}"))?;
    let gens: Vec<(f64, f64)> = r.base_vectors().row_iter().map(|v| (v[0], v[1])).collect();
    ensure(gens == vec![(0.25, 0.0)], || format!("base vectors {gens:?}"))?;
    Ok("x-hat {-0.25, -0.25, 0.75}, generator (0.25, 0)".into())
}

fn c4_faithfulness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut mismatches = 0usize;
    let mut unsafe_hits = 0usize;
    for (k, net) in twenty_nets(4).into_iter().enumerate() {
        let prop = random_crossing_property(&mut rng, &net, &format!("p{k}"));
        let out = reach_unsafe(&net, &prop, &ReachOptions::default()).unwrap();
        for _ in 0..10_000 {
            let x = sample_box(&mut rng, &prop.lb, &prop.ub);
            let slack = prop.unsafe_domain.max_slack(&net.forward(&x).unwrap());
            let strictly_in = out.regions.iter().any(|r| r.contains_input(&x, 0.0));
            let near = out.regions.iter().any(|r| r.contains_input(&x, 1e-6));
            if slack < -1e-6 {
                unsafe_hits += 1;
                if !near {
                    mismatches += 1;
                }
            } else if slack > 1e-6 && strictly_in {
                mismatches += 1;
            }
        }
    }
    ensure(mismatches == 0, || format!("{mismatches} mismatches"))?;
    Ok(format!("200000 samples, {unsafe_hits} unsafe, 0 mismatches"))
}

fn c5_filter_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut total = 0usize;
    for (k, net) in twenty_nets(4).into_iter().enumerate() {
        let prop = random_crossing_property(&mut rng, &net, &format!("p{k}"));
        let on = reach_unsafe(&net, &prop, &ReachOptions::default()).unwrap();
        let off = reach_unsafe(&net, &prop, &ReachOptions { use_filter: false, ..Default::default() }).unwrap();
        ensure(same_regions(&on.regions, &off.regions, 1e-9), || format!("net {k} differs"))?;
        total += on.regions.len();
    }
    Ok(format!("20 nets, {total} regions identical"))
}

fn c6_pruning() -> Outcome {
    let net = pruning_benchmark_net(0);
    let prop = pruning_benchmark_property();

    // Share of the box proven safe cell by cell on a 4x4x4 grid.
    let mut safe_cells = 0;
    for c in 0..64 {
        let idx = [c % 4, c / 4 % 4, c / 16];
        let lb: Vec<f64> = idx.iter().map(|&i| -1.0 + 0.5 * i as f64).collect();
        let ub: Vec<f64> = lb.iter().map(|l| l + 0.5).collect();
        let z = output_overapprox(&net, &TrackedSet::box_polytope(&lb, &ub).unwrap(), 0).unwrap();
        if z.is_provably_safe(&prop.unsafe_domain).unwrap() {
            safe_cells += 1;
        }
    }
    let safe_share = safe_cells as f64 / 64.0;
    ensure(safe_share >= 0.9, || format!("only {safe_share} of the box provably safe"))?;

    let on_opts = ReachOptions::default();
    let off_opts = ReachOptions { use_filter: false, ..Default::default() };
    let time = |opts: &ReachOptions| {
        (0..15)
            .map(|_| {
                let t = Instant::now();
                reach_unsafe(&net, &prop, opts).unwrap();
                t.elapsed()
            })
            .min()
            .unwrap()
    };
    let on = reach_unsafe(&net, &prop, &on_opts).unwrap();
    let off = reach_unsafe(&net, &prop, &off_opts).unwrap();
    let (t_on, t_off) = (time(&on_opts), time(&off_opts));
    let ratio = on.stats.explored as f64 / off.stats.explored as f64;
    ensure(ratio <= 0.5, || format!("explored ratio {ratio:.3}"))?;
    ensure(t_on < t_off, || format!("filtered {t_on:?} vs unfiltered {t_off:?}"))?;
    let speedup = t_off.as_secs_f64() / t_on.as_secs_f64();
    let peak = 1.0 - on.stats.peak_live as f64 / off.stats.peak_live as f64;
    Ok(format!(
        "{:.0}% of box provably safe; explored {}/{} ({:.1}%), speedup {:.2}x, peak-set reduction {:.1}% \
         (reference: ~4.7x mean speedup, ~64.5% memory reduction)",
        safe_share * 100.0,
        on.stats.explored,
        off.stats.explored,
        ratio * 100.0,
        speedup,
        peak * 100.0
    ))
}

fn toy_repair_config() -> RepairConfig {
    RepairConfig {
        epsilon: -0.05,
        train: TrainConfig {
            learning_rate: 0.01,
            batch_size: 16,
            epochs_per_iteration: 5,
            seed: 3,
        },
        ..RepairConfig::default()
    }
}

fn c7_repair() -> Outcome {
    let started = Instant::now();
    let net = toy_unsafe_net();
    let prop = toy_property();
    let before = reach_unsafe(&net, &prop, &ReachOptions::default()).unwrap();
    ensure(!before.regions.is_empty(), || "toy net is already safe".into())?;
    let (train, test) = toy_data(500, 1).unwrap();
    let (fixed, report) = repair(&net, std::slice::from_ref(&prop), &train, &test, &toy_repair_config()).unwrap();
    ensure(report.verdict == Verdict::Repaired, || format!("verdict {:?}", report.verdict))?;
    ensure(report.iterations.len() <= 50, || format!("{} iterations", report.iterations.len()))?;

    let after = reach_unsafe(&fixed, &prop, &ReachOptions { use_filter: false, ..Default::default() }).unwrap();
    ensure(after.regions.is_empty(), || format!("{} unsafe regions remain", after.regions.len()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    for _ in 0..10_000 {
        let x = sample_box(&mut rng, &prop.lb, &prop.ub);
        let slack = prop.unsafe_domain.max_slack(&fixed.forward(&x).unwrap());
        ensure(slack > -1e-9, || format!("sample {x:?} still unsafe (slack {slack:e})"))?;
    }

    let (a0, a1) = (accuracy(&net, &test).unwrap(), accuracy(&fixed, &test).unwrap());
    let change = (a1 - a0) * 100.0;
    ensure(change >= -5.0, || format!("accuracy change {change:.2}pp"))?;
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} regions -> 0 in {} iterations, accuracy {:.1}% -> {:.1}% ({change:+.2}pp), {:.2}s",
        before.regions.len(),
        report.iterations.len(),
        a0 * 100.0,
        a1 * 100.0,
        elapsed.as_secs_f64()
    ))
}

fn c8_correction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d = rng.gen_range(2..=5);
        let k = rng.gen_range(1..=4);
        let y: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let constraints: Vec<UnsafeConstraint> = (0..k)
            .map(|_| {
                let a: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let b = -dot(&a, &y) - rng.gen_range(0.01..1.0);
                UnsafeConstraint::new(a, b)
            })
            .collect();
        let u = UnsafeDomain::new(constraints).unwrap();
        ensure(u.contains(&y, 0.0), || "generated point is not unsafe".into())?;
        let alpha = rng.gen_range(0.001..0.1);
        let fixed = correct(&y, &u, alpha).unwrap();
        ensure(!u.contains(&fixed, 0.0), || format!("{fixed:?} still inside"))?;
        let nearest = u
            .constraints
            .iter()
            .map(|c| (dot(&c.a, &y) + c.b).abs() / dot(&c.a, &c.a).sqrt())
            .fold(f64::INFINITY, f64::min);
        let moved = fixed.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        worst = worst.max((moved - (1.0 + alpha) * nearest).abs());
    }
    ensure(worst <= 1e-12, || format!("distance error {worst:e}"))?;
    Ok(format!("1000 points exit their domains, distance error {worst:.1e}"))
}

fn c9_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let net = Network::random(&[3, 5, 4, 2], &mut rng).unwrap();
    let xs: Vec<Vec<f64>> = (0..8).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let ts: Vec<Vec<f64>> = (0..8).map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let (_, g) = loss_and_gradient(&net, &xs, &ts);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for k in 0..net.num_layers() {
        let (rows, cols) = net.layer(k).weights.shape();
        for i in 0..rows {
            let mut perturb = |set: &dyn Fn(&mut Vec<nnrepair::Layer>, f64), analytic: f64| {
                let mut layers_p = net.layers().to_vec();
                set(&mut layers_p, h);
                let mut layers_m = net.layers().to_vec();
                set(&mut layers_m, -h);
                let plus = Network::new(layers_p).unwrap();
                let minus = Network::new(layers_m).unwrap();
                let fd = (mse_loss(&plus, &xs, &ts) - mse_loss(&minus, &xs, &ts)) / (2.0 * h);
                let scale = fd.abs().max(analytic.abs());
                if scale > 1e-7 {
                    worst = worst.max((fd - analytic).abs() / scale);
                }
                checked += 1;
            };
            for j in 0..cols {
                perturb(&|l, d| l[k].weights[(i, j)] += d, g.weights[k][(i, j)]);
            }
            perturb(&|l, d| l[k].bias[i] += d, g.biases[k][i]);
        }
    }
    ensure(worst <= 1e-4, || format!("relative error {worst:e}"))?;
    Ok(format!("{checked} parameters, max relative error {worst:.1e}"))
}

fn c10_determinism() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    for (k, net) in twenty_nets(10).into_iter().enumerate() {
        let prop = random_crossing_property(&mut rng, &net, &format!("p{k}"));
        let serial = reach_unsafe(&net, &prop, &ReachOptions::default()).unwrap();
        let parallel = reach_unsafe(&net, &prop, &ReachOptions { worker_count: 8, ..Default::default() }).unwrap();
        ensure(serial.regions == parallel.regions, || format!("net {k}: serial and parallel differ"))?;
    }
    let net = toy_unsafe_net();
    let (train, test) = toy_data(500, 1).unwrap();
    let cfg = RepairConfig {
        reach: ReachOptions { worker_count: 8, ..Default::default() },
        ..toy_repair_config()
    };
    let (n1, r1) = repair(&net, &[toy_property()], &train, &test, &cfg).unwrap();
    let (n2, r2) = repair(&net, &[toy_property()], &train, &test, &cfg).unwrap();
    ensure(n1 == n2, || "repaired networks differ".into())?;
    ensure(r1.without_timing() == r2.without_timing(), || "reports differ".into())?;
    Ok("20 nets serial == 8 workers; repeated repair identical".into())
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("over-approximation soundness", c1_soundness),
        ("constraint minimum exactness", c2_constraint_min),
        ("worked relaxation example", c3_worked_example),
        ("exact-analysis faithfulness", c4_faithfulness),
        ("filter consistency", c5_filter_consistency),
        ("pruning effectiveness", c6_pruning),
        ("repair convergence", c7_repair),
        ("correction contract", c8_correction),
        ("gradient check", c9_gradient),
        ("determinism", c10_determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("[PASS] {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                println!("[FAIL] {:>2} {name}: {why}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

mod io;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use nnrepair::fixtures;
use nnrepair::geometry::projection_polygon;
use nnrepair::model::{load_nnet, write_nnet};
use nnrepair::reach::{exact_output_sets, reach_unsafe};
use nnrepair::repair::repair;
use nnrepair::{
    Error, LabeledDataset, Network, ReachOptions, ReachOutcome, RepairConfig, SafetyProperty, TrainConfig,
    UnsafeRegion, Verdict,
};

#[derive(Parser)]
#[command(name = "nnrepair", version, about = "Exact reachability, verification and repair of ReLU networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check every property; exit 0 if all are safe, 1 if any is violated.
    Verify(Common),
    /// Dump unsafe regions and exact output sets with 2-d projections.
    Reach(ReachArgs),
    /// Repair the network and write the result in NNet format.
    Repair(RepairArgs),
    /// Compare search with and without over-approximation pruning.
    Bench(BenchArgs),
    /// Write a built-in network, its properties and (for the toy) data.
    Fixture(FixtureArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct Common {
    /// Network in NNet format.
    #[arg(long)]
    net: PathBuf,
    /// Property file: one JSON object or an array of them.
    #[arg(long)]
    props: PathBuf,
    #[arg(long, value_enum, default_value = "on")]
    filter: Switch,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 1_000_000)]
    max_sets: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Leave wall times out so identical runs give identical output.
    #[arg(long)]
    no_timing: bool,
}

impl Common {
    fn reach_options(&self) -> ReachOptions {
        ReachOptions {
            use_filter: self.filter == Switch::On,
            worker_count: self.workers,
            max_sets: self.max_sets,
            ..ReachOptions::default()
        }
    }

    fn load(&self) -> Result<(Network, Vec<SafetyProperty>)> {
        let net = load_nnet(&self.net)?;
        let props = io::load_properties(&self.props)?;
        io::check_properties(&net, &props)?;
        Ok((net, props))
    }

    fn millis(&self, d: Duration) -> Option<f64> {
        (!self.no_timing).then_some(d.as_secs_f64() * 1e3)
    }
}

#[derive(Args)]
struct ReachArgs {
    #[command(flatten)]
    common: Common,
    /// Output axes to project onto, as `i,j`.
    #[arg(long, value_parser = io::parse_axes)]
    project: Option<(usize, usize)>,
}

#[derive(Args)]
struct RepairArgs {
    #[command(flatten)]
    common: Common,
    /// Where to write the repaired network.
    #[arg(long)]
    out_net: PathBuf,
    /// Training data CSV (`inputs..., targets...`). Sampled from the network
    /// over the property boxes when absent.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Test data CSV; sampled like the training data when absent.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Sample count for self-labelled data.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0.02)]
    alpha: f64,
    /// Required accuracy change; negative values allow a drop.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    epsilon: f64,
    #[arg(long)]
    min_accuracy: Option<f64>,
    #[arg(long, default_value_t = 50)]
    max_iterations: usize,
    #[arg(long, default_value_t = 0.01)]
    learning_rate: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 10_000)]
    volume_samples: usize,
    #[arg(long, value_parser = io::parse_axes)]
    project: Option<(usize, usize)>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Runs per configuration; the fastest is reported.
    #[arg(long, default_value_t = 5)]
    repeat: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum FixtureKind {
    /// 2-2-2 network violating `y1 <= y2` in a corner of its box, with data.
    Toy,
    /// The toy network with a box on which it is safe.
    ToySafe,
    /// Random 5-input network with collision-avoidance properties 1 to 3.
    Hcas,
    /// Mostly safe 3-8-8-2 network for pruning benchmarks.
    Bench,
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long, value_enum)]
    kind: FixtureKind,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Samples per data file for the toy fixture.
    #[arg(long, default_value_t = 500)]
    samples: usize,
    /// Hidden layer widths for the hcas fixture.
    #[arg(long, value_delimiter = ',', default_value = "8,8")]
    hidden: Vec<usize>,
}

#[derive(Serialize)]
struct VerifyEntry {
    property: String,
    verdict: &'static str,
    region_count: usize,
    wall_time_ms: Option<f64>,
    peak_sets: usize,
    explored_sets: usize,
    pruned_sets: usize,
}

fn verdict(outcome: &ReachOutcome) -> &'static str {
    if outcome.regions.is_empty() {
        "safe"
    } else {
        "unsafe"
    }
}

fn timed_reach(net: &Network, prop: &SafetyProperty, opts: &ReachOptions) -> Result<(ReachOutcome, Duration)> {
    let t = Instant::now();
    let out = reach_unsafe(net, prop, opts).with_context(|| format!("reachability of {}", prop.name))?;
    Ok((out, t.elapsed()))
}

fn exit_for(any_unsafe: bool) -> ExitCode {
    ExitCode::from(u8::from(any_unsafe))
}

fn cmd_verify(args: &Common) -> Result<ExitCode> {
    let (net, props) = args.load()?;
    let opts = args.reach_options();
    let mut entries = Vec::with_capacity(props.len());
    for p in &props {
        let (out, elapsed) = timed_reach(&net, p, &opts)?;
        entries.push(VerifyEntry {
            property: p.name.clone(),
            verdict: verdict(&out),
            region_count: out.regions.len(),
            wall_time_ms: args.millis(elapsed),
            peak_sets: out.stats.peak_live,
            explored_sets: out.stats.explored,
            pruned_sets: out.stats.pruned,
        });
    }
    io::emit(&entries, args.out.as_deref())?;
    Ok(exit_for(entries.iter().any(|e| e.verdict == "unsafe")))
}

#[derive(Serialize)]
struct ReachEntry {
    property: String,
    verdict: &'static str,
    region_count: usize,
    wall_time_ms: Option<f64>,
    regions: Vec<UnsafeRegion>,
    #[serde(skip_serializing_if = "Option::is_none")]
    unsafe_projection: Option<Vec<Vec<[f64; 2]>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    output_projection: Option<Vec<Vec<[f64; 2]>>>,
}

#[derive(Serialize)]
struct ReachDump {
    axes: Option<(usize, usize)>,
    properties: Vec<ReachEntry>,
}

fn cmd_reach(args: &ReachArgs) -> Result<ExitCode> {
    let common = &args.common;
    let (net, props) = common.load()?;
    let axes = match args.project {
        Some((i, j)) if i.max(j) >= net.output_dim() => {
            bail!("projection axes ({i}, {j}) exceed the {} outputs", net.output_dim())
        }
        Some(axes) => Some(axes),
        None if net.output_dim() >= 2 => Some((0, 1)),
        None => None,
    };
    let opts = common.reach_options();
    let mut entries = Vec::with_capacity(props.len());
    for p in &props {
        let (out, elapsed) = timed_reach(&net, p, &opts)?;
        let (unsafe_projection, output_projection) = match axes {
            Some(axes) => {
                let sets = exact_output_sets(&net, &p.lb, &p.ub, common.max_sets)?;
                let outputs = sets
                    .iter()
                    .map(|s| {
                        let rows: Vec<Vec<f64>> = (0..s.num_vertices()).map(|v| s.current_vertex(v)).collect();
                        projection_polygon(&rows, axes)
                    })
                    .collect();
                let unsafe_sets = out
                    .regions
                    .iter()
                    .map(|r| projection_polygon(&r.output_vertices, axes))
                    .collect();
                (Some(unsafe_sets), Some(outputs))
            }
            None => (None, None),
        };
        entries.push(ReachEntry {
            property: p.name.clone(),
            verdict: verdict(&out),
            region_count: out.regions.len(),
            wall_time_ms: common.millis(elapsed),
            regions: out.regions,
            unsafe_projection,
            output_projection,
        });
    }
    let any_unsafe = entries.iter().any(|e| e.region_count > 0);
    io::emit(&ReachDump { axes, properties: entries }, common.out.as_deref())?;
    Ok(exit_for(any_unsafe))
}

/// Bounding box of all property boxes.
fn property_hull(props: &[SafetyProperty]) -> (Vec<f64>, Vec<f64>) {
    let mut lb = props[0].lb.clone();
    let mut ub = props[0].ub.clone();
    for p in &props[1..] {
        for k in 0..lb.len() {
            lb[k] = lb[k].min(p.lb[k]);
            ub[k] = ub[k].max(p.ub[k]);
        }
    }
    (lb, ub)
}

fn cmd_repair(args: &RepairArgs) -> Result<ExitCode> {
    let common = &args.common;
    let (net, props) = common.load()?;
    let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
    let (lb, ub) = property_hull(&props);
    let mut data = |path: &Option<PathBuf>| -> Result<LabeledDataset> {
        match path {
            Some(p) => io::load_csv(p, &net),
            None => Ok(LabeledDataset::sample_from_network(&net, &lb, &ub, args.samples, &mut rng)?),
        }
    };
    let train_data = data(&args.train)?;
    let test_data = data(&args.test)?;

    let cfg = RepairConfig {
        alpha: args.alpha,
        epsilon: args.epsilon,
        min_accuracy: args.min_accuracy,
        max_iterations: args.max_iterations,
        train: TrainConfig {
            learning_rate: args.learning_rate,
            batch_size: args.batch_size,
            epochs_per_iteration: args.epochs,
            seed: common.seed,
        },
        reach: common.reach_options(),
        volume_samples: args.volume_samples,
        projection: args.project,
    };
    match repair(&net, &props, &train_data, &test_data, &cfg) {
        Ok((fixed, report)) => {
            write_nnet(&fixed, &args.out_net)?;
            let report = if common.no_timing { report.without_timing() } else { report };
            io::emit(&report, common.out.as_deref())?;
            Ok(match report.verdict {
                Verdict::Repaired => ExitCode::SUCCESS,
                Verdict::MaxIterationsExhausted => ExitCode::from(3),
            })
        }
        Err(Error::RepairAborted { iteration, report, source }) => {
            let report = if common.no_timing { report.without_timing() } else { *report };
            io::emit(&report, common.out.as_deref())?;
            bail!("repair aborted in iteration {iteration}: {source}")
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Serialize)]
struct BenchRun {
    wall_time_ms: Option<f64>,
    explored_sets: usize,
    pruned_sets: usize,
    peak_sets: usize,
    region_count: usize,
}

#[derive(Serialize)]
struct BenchEntry {
    property: String,
    filtered: BenchRun,
    unfiltered: BenchRun,
    speedup: Option<f64>,
    explored_ratio: f64,
    peak_reduction: f64,
}

fn cmd_bench(args: &BenchArgs) -> Result<ExitCode> {
    let common = &args.common;
    let (net, props) = common.load()?;
    let repeat = args.repeat.max(1);
    let mut entries = Vec::with_capacity(props.len());
    for p in &props {
        let run = |use_filter: bool| -> Result<(BenchRun, Duration)> {
            let opts = ReachOptions { use_filter, ..common.reach_options() };
            let mut best = Duration::MAX;
            let mut last = None;
            for _ in 0..repeat {
                let (out, elapsed) = timed_reach(&net, p, &opts)?;
                best = best.min(elapsed);
                last = Some(out);
            }
            let out = last.expect("at least one run");
            Ok((
                BenchRun {
                    wall_time_ms: common.millis(best),
                    explored_sets: out.stats.explored,
                    pruned_sets: out.stats.pruned,
                    peak_sets: out.stats.peak_live,
                    region_count: out.regions.len(),
                },
                best,
            ))
        };
        let (filtered, t_on) = run(true)?;
        let (unfiltered, t_off) = run(false)?;
        entries.push(BenchEntry {
            property: p.name.clone(),
            speedup: (!common.no_timing).then(|| t_off.as_secs_f64() / t_on.as_secs_f64().max(1e-12)),
            explored_ratio: filtered.explored_sets as f64 / unfiltered.explored_sets as f64,
            peak_reduction: 1.0 - filtered.peak_sets as f64 / unfiltered.peak_sets as f64,
            filtered,
            unfiltered,
        });
    }
    io::emit(&entries, common.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

fn write_props(path: &Path, props: &[SafetyProperty]) -> Result<()> {
    io::emit(&props, Some(path))
}

fn cmd_fixture(args: &FixtureArgs) -> Result<ExitCode> {
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let net_path = args.out_dir.join("net.nnet");
    let props_path = args.out_dir.join("props.json");
    let mut written = vec![net_path.clone(), props_path.clone()];
    let (net, props) = match args.kind {
        FixtureKind::Toy => {
            let (train, test) = fixtures::toy_data(args.samples, args.seed)?;
            let (train_path, test_path) = (args.out_dir.join("train.csv"), args.out_dir.join("test.csv"));
            io::write_csv(&train_path, &train)?;
            io::write_csv(&test_path, &test)?;
            written.extend([train_path, test_path]);
            (fixtures::toy_unsafe_net(), vec![fixtures::toy_property()])
        }
        FixtureKind::ToySafe => (fixtures::toy_unsafe_net(), vec![fixtures::toy_safe_property()]),
        FixtureKind::Hcas => {
            let net = fixtures::hcas_desk_net(&args.hidden, args.seed)?;
            let props = fixtures::hcas_properties(net.normalization())?;
            (net, props)
        }
        FixtureKind::Bench => (
            fixtures::pruning_benchmark_net(args.seed),
            vec![fixtures::pruning_benchmark_property()],
        ),
    };
    write_nnet(&net, &net_path)?;
    write_props(&props_path, &props)?;
    io::emit(&written, None)?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Verify(a) => cmd_verify(a),
        Command::Reach(a) => cmd_reach(a),
        Command::Repair(a) => cmd_repair(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Fixture(a) => cmd_fixture(a),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(2)
    })
}

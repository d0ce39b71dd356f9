//! Counterexample-guided repair.
//!
//! Each iteration verifies the current candidate against every property. The
//! vertices of the unsafe input regions are taken as counterexamples; their
//! outputs are moved just past the nearest boundary of the unsafe domain and
//! the corrected pairs, together with a sample of safe vertex pairs, are merged
//! into the training data before the candidate is retrained.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::projection_polygon;
use crate::model::{accuracy, train, LabeledDataset, Network, TrainConfig};
use crate::reach::{analyze, ReachOptions, SafeSet, SafetyProperty, UnsafeDomain, UnsafeRegion};

/// Inputs closer than this in every coordinate count as the same vertex.
pub const VERTEX_DEDUP_TOLERANCE: f64 = 1e-9;

/// Slack up to which a point still counts as inside the unsafe domain.
pub const INSIDE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepairConfig {
    /// Overshoot factor of the correction: outputs move `(1 + alpha)` times
    /// their distance to the boundary.
    pub alpha: f64,
    /// Required change of test accuracy relative to the original network.
    /// Negative values tolerate a drop.
    pub epsilon: f64,
    /// Optional absolute floor on test accuracy.
    pub min_accuracy: Option<f64>,
    pub max_iterations: usize,
    pub train: TrainConfig,
    pub reach: ReachOptions,
    /// Monte Carlo samples per property for the unsafe-volume estimate.
    pub volume_samples: usize,
    /// Output axes to project reachable sets onto, per iteration.
    pub projection: Option<(usize, usize)>,
}

impl Default for RepairConfig {
    fn default() -> Self {
        Self {
            alpha: 0.02,
            epsilon: 0.0,
            min_accuracy: None,
            max_iterations: 50,
            train: TrainConfig::default(),
            reach: ReachOptions::default(),
            volume_samples: 10_000,
            projection: None,
        }
    }
}

impl RepairConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Invalid("alpha must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Invalid("max_iterations must be at least 1".into()));
        }
        if !self.epsilon.is_finite() {
            return Err(Error::Invalid("epsilon must be finite".into()));
        }
        if self.volume_samples == 0 {
            return Err(Error::Invalid("volume_samples must be at least 1".into()));
        }
        self.train.validate()?;
        self.reach.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Repaired,
    MaxIterationsExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyRecord {
    pub property: String,
    pub unsafe_regions: usize,
    /// Estimated fraction of the property's input box that is unsafe.
    pub volume_ratio: f64,
}

/// 2-d hulls of output sets on the chosen axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub axes: (usize, usize),
    pub unsafe_sets: Vec<Vec<[f64; 2]>>,
    pub safe_sets: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub properties: Vec<PropertyRecord>,
    pub accuracy: f64,
    pub explored_sets: usize,
    pub corrected_pairs: usize,
    pub safe_pairs: usize,
    pub training_size: usize,
    pub wall_time_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection: Option<Projection>,
}

impl IterationRecord {
    pub fn unsafe_regions(&self) -> usize {
        self.properties.iter().map(|p| p.unsafe_regions).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairReport {
    pub original_accuracy: f64,
    pub iterations: Vec<IterationRecord>,
    pub verdict: Verdict,
}

impl RepairReport {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.iterations.last().map(|r| r.accuracy)
    }

    /// Copy with every wall time zeroed, for byte-stable output.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for it in &mut r.iterations {
            it.wall_time_ms = 0.0;
        }
        r
    }
}

/// Input/output vertex pairs of the given regions, deduplicated by input.
pub fn representative_pairs(regions: &[UnsafeRegion]) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut out: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for r in regions {
        for (x, y) in r.input_vertices.iter().zip(&r.output_vertices) {
            if !out.iter().any(|(seen, _)| same_point(seen, x)) {
                out.push((x.clone(), y.clone()));
            }
        }
    }
    out
}

fn same_point(a: &[f64], b: &[f64]) -> bool {
    a.iter()
        .zip(b)
        .all(|(p, q)| (p - q).abs() <= VERTEX_DEDUP_TOLERANCE)
}

/// Moves an unsafe output past the nearest boundary of `u`.
///
/// The nearest boundary is the constraint hyperplane with the smallest
/// point-to-plane distance; the result is `y + (1 + alpha) Δy` where `Δy` is
/// the orthogonal step onto that plane. A point already on the boundary is
/// pushed `alpha` along the constraint's unit normal.
pub fn correct(y: &[f64], u: &UnsafeDomain, alpha: f64) -> Result<Vec<f64>> {
    if y.len() != u.dim() {
        return Err(Error::dim(u.dim(), y.len(), "output to correct"));
    }
    let slack = u.max_slack(y);
    if slack > INSIDE_TOLERANCE {
        return Err(Error::NotUnsafe { slack });
    }
    let (j, dist) = u
        .constraints
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let norm = c.a.iter().map(|v| v * v).sum::<f64>().sqrt();
            (j, (-c.slack(y)).max(0.0) / norm)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("unsafe domain has constraints");
    let c = &u.constraints[j];
    let norm_sq: f64 = c.a.iter().map(|v| v * v).sum();
    let s = c.slack(y);
    if dist == 0.0 || s >= 0.0 {
        let norm = norm_sq.sqrt();
        return Ok(y.iter().zip(&c.a).map(|(v, a)| v + alpha * a / norm).collect());
    }
    let scale = -(1.0 + alpha) * s / norm_sq;
    Ok(y.iter().zip(&c.a).map(|(v, a)| v + scale * a).collect())
}

/// Monte Carlo estimate of the fraction of the box covered by the regions.
pub fn unsafe_volume_ratio(regions: &[UnsafeRegion], lb: &[f64], ub: &[f64], samples: usize, seed: u64) -> f64 {
    if regions.is_empty() || samples == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0; lb.len()];
    let mut hits = 0usize;
    for _ in 0..samples {
        for (v, (l, u)) in x.iter_mut().zip(lb.iter().zip(ub)) {
            *v = rng.gen_range(*l..=*u);
        }
        if regions.iter().any(|r| r.contains_input(&x, 1e-12)) {
            hits += 1;
        }
    }
    hits as f64 / samples as f64
}

/// Training pairs keyed by the exact bits of their input.
#[derive(Debug, Default)]
struct MergedData {
    index: HashMap<Vec<u64>, usize>,
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
}

impl MergedData {
    fn key(x: &[f64]) -> Vec<u64> {
        x.iter().map(|v| (v + 0.0).to_bits()).collect()
    }

    fn put(&mut self, x: &[f64], y: Vec<f64>, overwrite: bool) {
        match self.index.get(&Self::key(x)) {
            Some(&i) if overwrite => self.targets[i] = y,
            Some(_) => {}
            None => {
                self.index.insert(Self::key(x), self.inputs.len());
                self.inputs.push(x.to_vec());
                self.targets.push(y);
            }
        }
    }

    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn to_dataset(&self) -> LabeledDataset {
        LabeledDataset {
            inputs: self.inputs.clone(),
            targets: self.targets.clone(),
            labels: None,
        }
    }
}

fn safe_pairs(sets: &[SafeSet]) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut out: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut seen = HashMap::new();
    for s in sets {
        for (x, y) in s.input_vertices.iter().zip(&s.output_vertices) {
            if seen.insert(MergedData::key(x), ()).is_none() {
                out.push((x.clone(), y.clone()));
            }
        }
    }
    out
}

fn project(regions: &[UnsafeRegion], safe: &[SafeSet], axes: (usize, usize)) -> Projection {
    Projection {
        axes,
        unsafe_sets: regions
            .iter()
            .map(|r| projection_polygon(&r.output_vertices, axes))
            .collect(),
        safe_sets: safe
            .iter()
            .map(|s| projection_polygon(&s.output_vertices, axes))
            .collect(),
    }
}

/// Repairs `net` until no property has unsafe inputs and the accuracy gate
/// holds, or until `cfg.max_iterations` verification passes have run.
///
/// The returned network is always the last verified candidate.
pub fn repair(
    net: &Network,
    properties: &[SafetyProperty],
    train_data: &LabeledDataset,
    test_data: &LabeledDataset,
    cfg: &RepairConfig,
) -> Result<(Network, RepairReport)> {
    cfg.validate()?;
    if properties.is_empty() {
        return Err(Error::Invalid("no properties given".into()));
    }
    if train_data.is_empty() || test_data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    train_data.check_dims(net)?;
    test_data.check_dims(net)?;
    for p in properties {
        p.validate()?;
        p.check_network(net)?;
    }
    if let Some((i, j)) = cfg.projection {
        if i >= net.output_dim() || j >= net.output_dim() {
            return Err(Error::Invalid(format!("projection axes ({i}, {j}) out of range")));
        }
    }

    let original_accuracy = accuracy(net, test_data)?;
    let mut report = RepairReport {
        original_accuracy,
        iterations: Vec::new(),
        verdict: Verdict::MaxIterationsExhausted,
    };
    let mut merged = MergedData::default();
    for (x, y) in train_data.inputs.iter().zip(&train_data.targets) {
        merged.put(x, y.clone(), true);
    }
    let reach_opts = ReachOptions {
        collect_safe_sets: true,
        ..cfg.reach
    };

    let mut candidate = net.clone();
    for iteration in 0..cfg.max_iterations {
        let started = Instant::now();
        let abort = |report: &RepairReport, e: Error| Error::RepairAborted {
            iteration,
            report: Box::new(report.clone()),
            source: Box::new(e),
        };
        let outcome = analyze(&candidate, properties, &reach_opts).map_err(|e| abort(&report, e))?;
        let acc = accuracy(&candidate, test_data)?;

        let records: Vec<PropertyRecord> = properties
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let mine: Vec<UnsafeRegion> = outcome
                    .regions
                    .iter()
                    .filter(|r| r.property == p.name)
                    .cloned()
                    .collect();
                let seed = cfg.train.seed ^ ((iteration as u64) << 32 | k as u64);
                PropertyRecord {
                    property: p.name.clone(),
                    unsafe_regions: mine.len(),
                    volume_ratio: unsafe_volume_ratio(&mine, &p.lb, &p.ub, cfg.volume_samples, seed),
                }
            })
            .collect();

        let gate = acc - original_accuracy >= cfg.epsilon && cfg.min_accuracy.is_none_or(|f| acc >= f);
        let mut record = IterationRecord {
            iteration,
            properties: records,
            accuracy: acc,
            explored_sets: outcome.stats.explored,
            corrected_pairs: 0,
            safe_pairs: 0,
            training_size: merged.len(),
            wall_time_ms: 0.0,
            projection: cfg
                .projection
                .map(|axes| project(&outcome.regions, &outcome.safe_sets, axes)),
        };

        if outcome.regions.is_empty() && gate {
            record.wall_time_ms = started.elapsed().as_secs_f64() * 1e3;
            report.iterations.push(record);
            report.verdict = Verdict::Repaired;
            return Ok((candidate, report));
        }
        if iteration + 1 == cfg.max_iterations {
            record.wall_time_ms = started.elapsed().as_secs_f64() * 1e3;
            report.iterations.push(record);
            break;
        }

        let mut corrected = 0usize;
        for p in properties {
            let mine: Vec<UnsafeRegion> = outcome
                .regions
                .iter()
                .filter(|r| r.property == p.name)
                .cloned()
                .collect();
            for (x, y) in representative_pairs(&mine) {
                let fixed = correct(&y, &p.unsafe_domain, cfg.alpha).map_err(|e| abort(&report, e))?;
                merged.put(&x, fixed, true);
                corrected += 1;
            }
        }
        let mut safe = safe_pairs(&outcome.safe_sets);
        let cap = 4 * corrected;
        if safe.len() > cap {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(iteration as u64));
            let mut keep = sample(&mut rng, safe.len(), cap).into_vec();
            keep.sort_unstable();
            safe = keep.into_iter().map(|i| safe[i].clone()).collect();
        }
        for (x, y) in &safe {
            merged.put(x, y.clone(), false);
        }
        record.corrected_pairs = corrected;
        record.safe_pairs = safe.len();
        record.training_size = merged.len();

        let tcfg = TrainConfig {
            seed: cfg.train.seed.wrapping_add(iteration as u64),
            ..cfg.train
        };
        candidate = train(&candidate, &merged.to_dataset(), &tcfg).map_err(|e| abort(&report, e))?;
        record.wall_time_ms = started.elapsed().as_secs_f64() * 1e3;
        report.iterations.push(record);
    }
    Ok((candidate, report))
}

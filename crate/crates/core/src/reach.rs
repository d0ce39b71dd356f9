//! Depth-first exact reachability with over-approximation pruning.
//!
//! Starting from the property's input box, each node of the search is one
//! [`TrackedSet`] waiting at a layer. Before a node is expanded its
//! over-approximated output ([`VZono`]) is checked against the unsafe domain;
//! provably safe nodes are dropped with their whole subtree. Nodes that reach
//! the output are cut by the unsafe constraints and whatever is left is
//! reported as an [`UnsafeRegion`] in input coordinates.

use std::cmp::Ordering;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fvim::{Halfspace, TrackedSet};
use crate::model::{Activation, Network};
use crate::vzono::{VZono, DEFAULT_BASE_VERTEX_CAP};

/// `a · y + b <= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnsafeConstraint {
    pub a: Vec<f64>,
    pub b: f64,
}

impl UnsafeConstraint {
    pub fn new(a: Vec<f64>, b: f64) -> Self {
        Self { a, b }
    }

    pub fn slack(&self, y: &[f64]) -> f64 {
        self.a.iter().zip(y).map(|(a, v)| a * v).sum::<f64>() + self.b
    }
}

/// Conjunction of halfspaces in output space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnsafeDomain {
    pub constraints: Vec<UnsafeConstraint>,
}

impl UnsafeDomain {
    pub fn new(constraints: Vec<UnsafeConstraint>) -> Result<Self> {
        if constraints.is_empty() {
            return Err(Error::Property("unsafe domain needs at least one constraint".into()));
        }
        let d = constraints[0].a.len();
        for (j, c) in constraints.iter().enumerate() {
            if c.a.len() != d {
                return Err(Error::Property(format!("constraint {j} has length {}", c.a.len())));
            }
            if c.a.iter().all(|&v| v == 0.0) {
                return Err(Error::Property(format!("constraint {j} has a zero normal")));
            }
            if !c.b.is_finite() || c.a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Property(format!("constraint {j} is not finite")));
            }
        }
        Ok(Self { constraints })
    }

    /// `y₁ ≤ y_k` for every other output `k`: the first output is minimal.
    pub fn minimal_first_output(outputs: usize) -> Self {
        let constraints = (1..outputs)
            .map(|k| {
                let mut a = vec![0.0; outputs];
                a[0] = 1.0;
                a[k] = -1.0;
                UnsafeConstraint::new(a, 0.0)
            })
            .collect();
        Self { constraints }
    }

    pub fn dim(&self) -> usize {
        self.constraints.first().map_or(0, |c| c.a.len())
    }

    /// Largest constraint value; `<= 0` means inside.
    pub fn max_slack(&self, y: &[f64]) -> f64 {
        self.constraints
            .iter()
            .map(|c| c.slack(y))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, y: &[f64], tol: f64) -> bool {
        self.max_slack(y) <= tol
    }
}

/// An input box paired with an unsafe output domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyProperty {
    pub name: String,
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
    #[serde(rename = "unsafe")]
    pub unsafe_domain: UnsafeDomain,
}

impl SafetyProperty {
    pub fn new(name: impl Into<String>, lb: Vec<f64>, ub: Vec<f64>, unsafe_domain: UnsafeDomain) -> Result<Self> {
        let p = Self {
            name: name.into(),
            lb,
            ub,
            unsafe_domain,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lb.is_empty() || self.lb.len() != self.ub.len() {
            return Err(Error::Property(format!("{}: bad box dimensions", self.name)));
        }
        if let Some(j) = (0..self.lb.len()).find(|&j| !(self.lb[j] < self.ub[j])) {
            return Err(Error::Property(format!(
                "{}: lb[{j}] = {} is not below ub[{j}] = {}",
                self.name, self.lb[j], self.ub[j]
            )));
        }
        UnsafeDomain::new(self.unsafe_domain.constraints.clone())?;
        Ok(())
    }

    pub fn check_network(&self, net: &Network) -> Result<()> {
        if self.lb.len() != net.input_dim() {
            return Err(Error::dim(net.input_dim(), self.lb.len(), "property box"));
        }
        if self.unsafe_domain.dim() != net.output_dim() {
            return Err(Error::dim(net.output_dim(), self.unsafe_domain.dim(), "unsafe constraint"));
        }
        Ok(())
    }

    pub fn contains_input(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lb.iter().zip(&self.ub))
            .all(|(v, (l, u))| *l <= *v && *v <= *u)
    }
}

/// One unsafe input polytope and its output image, rows in correspondence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnsafeRegion {
    pub property: String,
    pub input_vertices: Vec<Vec<f64>>,
    pub output_vertices: Vec<Vec<f64>>,
    /// Bounding halfspaces of the input polytope.
    pub halfspaces: Vec<Halfspace>,
}

impl UnsafeRegion {
    fn from_set(s: &TrackedSet, property: &str) -> Self {
        let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..s.num_vertices())
            .map(|v| (s.input_vertex(v), s.current_vertex(v)))
            .collect();
        pairs.sort_by(|a, b| lex_cmp(&a.0, &b.0));
        let (input_vertices, output_vertices) = pairs.into_iter().unzip();
        Self {
            property: property.to_string(),
            input_vertices,
            output_vertices,
            halfspaces: s.facets().to_vec(),
        }
    }

    pub fn contains_input(&self, x: &[f64], tol: f64) -> bool {
        self.halfspaces.iter().all(|h| h.contains(x, tol))
    }
}

/// Input and output vertices of a final set with no unsafe part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafeSet {
    pub input_vertices: Vec<Vec<f64>>,
    pub output_vertices: Vec<Vec<f64>>,
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

fn region_cmp(a: &UnsafeRegion, b: &UnsafeRegion) -> Ordering {
    a.property.cmp(&b.property).then_with(|| {
        a.input_vertices
            .iter()
            .zip(&b.input_vertices)
            .map(|(x, y)| lex_cmp(x, y))
            .find(|o| o.is_ne())
            .unwrap_or_else(|| a.input_vertices.len().cmp(&b.input_vertices.len()))
    })
}

/// Sorts regions by property name then lexicographically by vertices.
pub fn canonicalize(regions: &mut [UnsafeRegion]) {
    regions.sort_by(region_cmp);
}

/// True when both lists hold the same regions up to `tol` (after canonical sort).
pub fn same_regions(a: &[UnsafeRegion], b: &[UnsafeRegion], tol: f64) -> bool {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    canonicalize(&mut a);
    canonicalize(&mut b);
    a.len() == b.len()
        && a.iter().zip(&b).all(|(r, s)| {
            r.property == s.property
                && r.input_vertices.len() == s.input_vertices.len()
                && r.input_vertices
                    .iter()
                    .zip(&s.input_vertices)
                    .chain(r.output_vertices.iter().zip(&s.output_vertices))
                    .all(|(x, y)| x.iter().zip(y).all(|(p, q)| (p - q).abs() <= tol))
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReachOptions {
    pub use_filter: bool,
    pub worker_count: usize,
    pub max_sets: usize,
    /// Base-vertex cap for the over-approximation before interval fallback.
    pub base_vertex_cap: usize,
    /// Also return the vertices of final sets that carry no unsafe part.
    pub collect_safe_sets: bool,
}

impl Default for ReachOptions {
    fn default() -> Self {
        Self {
            use_filter: true,
            worker_count: 1,
            max_sets: 1_000_000,
            base_vertex_cap: DEFAULT_BASE_VERTEX_CAP,
            collect_safe_sets: false,
        }
    }
}

impl ReachOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_sets == 0 {
            return Err(Error::Invalid("max_sets must be at least 1".into()));
        }
        if self.worker_count == 0 {
            return Err(Error::Invalid("worker_count must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReachStats {
    /// Sets taken off the worklist, pruned or not.
    pub explored: usize,
    pub pruned: usize,
    pub leaves: usize,
    /// Largest number of sets alive at once.
    pub peak_live: usize,
    pub degenerate: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReachOutcome {
    pub regions: Vec<UnsafeRegion>,
    pub safe_sets: Vec<SafeSet>,
    pub stats: ReachStats,
}

/// Exact image of one set through layer `layer`: affine map, then every ReLU
/// neuron in index order. Returned sets sit at `layer + 1`.
pub fn layer_output(net: &Network, s: &TrackedSet, layer: usize) -> Result<Vec<TrackedSet>> {
    let l = net.layer(layer);
    let mut sets = vec![s.affine_map(&l.weights, &l.bias)?];
    if l.activation == Activation::Relu {
        for i in 0..l.output_dim() {
            let mut next = Vec::with_capacity(sets.len() * 2);
            for set in &sets {
                next.extend(set.split_by_neuron(i)?);
            }
            sets = next;
        }
    }
    for set in &mut sets {
        set.set_layer_cursor(layer + 1);
    }
    Ok(sets)
}

/// Over-approximated output of the network for a set waiting at `from_layer`.
pub fn output_overapprox(net: &Network, s: &TrackedSet, from_layer: usize) -> Result<VZono> {
    output_overapprox_capped(net, s, from_layer, DEFAULT_BASE_VERTEX_CAP)
}

pub fn output_overapprox_capped(
    net: &Network,
    s: &TrackedSet,
    from_layer: usize,
    cap: usize,
) -> Result<VZono> {
    let mut z = VZono::from_tracked(s).compress(cap);
    for layer in &net.layers()[from_layer..] {
        z = z.affine_map(&layer.weights, &layer.bias)?;
        if layer.activation == Activation::Relu {
            z = z.relu_layer();
        }
    }
    Ok(z)
}

/// Restricts a fully propagated set to the unsafe domain. `None` when the
/// intersection has empty interior.
pub fn backtrack(s: &TrackedSet, u: &UnsafeDomain) -> Result<Option<TrackedSet>> {
    let mut cur = s.clone();
    for c in &u.constraints {
        match cur.intersect_halfspace(&c.a, c.b)? {
            Some(next) => cur = next,
            None => return Ok(None),
        }
    }
    Ok(Some(cur))
}

/// Unsafe input regions of one property.
pub fn reach_unsafe(net: &Network, prop: &SafetyProperty, opts: &ReachOptions) -> Result<ReachOutcome> {
    reach_unsafe_multi(net, std::slice::from_ref(prop), opts)
}

/// Unsafe regions for several properties that share one input box, found in
/// a single search. A branch is pruned only when it is provably safe for
/// every property.
pub fn reach_unsafe_multi(
    net: &Network,
    props: &[SafetyProperty],
    opts: &ReachOptions,
) -> Result<ReachOutcome> {
    opts.validate()?;
    let first = props
        .first()
        .ok_or_else(|| Error::Invalid("no properties given".into()))?;
    for p in props {
        p.validate()?;
        p.check_network(net)?;
        if p.lb != first.lb || p.ub != first.ub {
            return Err(Error::Invalid(format!(
                "property {} does not share the input box of {}",
                p.name, first.name
            )));
        }
    }
    let root = TrackedSet::box_polytope(&first.lb, &first.ub)?;
    let search = Search { net, props, opts };
    let mut outcome = if opts.worker_count > 1 {
        search.run_parallel(root)?
    } else {
        search.run_serial(root)?
    };
    canonicalize(&mut outcome.regions);
    outcome
        .safe_sets
        .sort_by(|a, b| lex_cmp(&a.input_vertices.concat(), &b.input_vertices.concat()));
    Ok(outcome)
}

/// Runs [`reach_unsafe_multi`] once per distinct input box.
pub fn analyze(net: &Network, props: &[SafetyProperty], opts: &ReachOptions) -> Result<ReachOutcome> {
    let mut groups: Vec<Vec<SafetyProperty>> = Vec::new();
    for p in props {
        match groups.iter_mut().find(|g| g[0].lb == p.lb && g[0].ub == p.ub) {
            Some(g) => g.push(p.clone()),
            None => groups.push(vec![p.clone()]),
        }
    }
    let mut total = ReachOutcome {
        regions: Vec::new(),
        safe_sets: Vec::new(),
        stats: ReachStats::default(),
    };
    for g in &groups {
        let out = reach_unsafe_multi(net, g, opts)?;
        total.regions.extend(out.regions);
        total.safe_sets.extend(out.safe_sets);
        total.stats.explored += out.stats.explored;
        total.stats.pruned += out.stats.pruned;
        total.stats.leaves += out.stats.leaves;
        total.stats.degenerate += out.stats.degenerate;
        total.stats.peak_live = total.stats.peak_live.max(out.stats.peak_live);
    }
    canonicalize(&mut total.regions);
    Ok(total)
}

/// Every final set of the exact propagation of the property box, unpruned.
pub fn exact_output_sets(net: &Network, lb: &[f64], ub: &[f64], max_sets: usize) -> Result<Vec<TrackedSet>> {
    if lb.len() != net.input_dim() {
        return Err(Error::dim(net.input_dim(), lb.len(), "input box"));
    }
    let mut sets = vec![TrackedSet::box_polytope(lb, ub)?];
    let mut produced = 1usize;
    for layer in 0..net.num_layers() {
        let mut next = Vec::new();
        for s in &sets {
            next.extend(layer_output(net, s, layer)?);
        }
        produced += next.len();
        if produced > max_sets {
            return Err(Error::SetLimit {
                limit: max_sets,
                partial: Vec::new(),
            });
        }
        sets = next;
    }
    Ok(sets)
}

/// Output vertex matrices of every exact final set.
pub fn exact_output_domain(net: &Network, prop: &SafetyProperty, max_sets: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    prop.check_network(net)?;
    Ok(exact_output_sets(net, &prop.lb, &prop.ub, max_sets)?
        .iter()
        .map(|s| (0..s.num_vertices()).map(|v| s.current_vertex(v)).collect())
        .collect())
}

struct Search<'a> {
    net: &'a Network,
    props: &'a [SafetyProperty],
    opts: &'a ReachOptions,
}

enum Step {
    Leaf(Vec<UnsafeRegion>, Option<SafeSet>),
    Pruned,
    Expand(Vec<TrackedSet>),
    Degenerate,
}

impl Search<'_> {
    fn step(&self, s: TrackedSet) -> Result<Step> {
        let layer = s.layer_cursor();
        if layer == self.net.num_layers() {
            let mut regions = Vec::new();
            for p in self.props {
                if let Some(r) = backtrack(&s, &p.unsafe_domain)? {
                    regions.push(UnsafeRegion::from_set(&r, &p.name));
                }
            }
            let safe = (self.opts.collect_safe_sets && regions.is_empty()).then(|| SafeSet {
                input_vertices: (0..s.num_vertices()).map(|v| s.input_vertex(v)).collect(),
                output_vertices: (0..s.num_vertices()).map(|v| s.current_vertex(v)).collect(),
            });
            return Ok(Step::Leaf(regions, safe));
        }
        if self.opts.use_filter {
            let z = output_overapprox_capped(self.net, &s, layer, self.opts.base_vertex_cap)?;
            let mut all_safe = true;
            for p in self.props {
                if !z.is_provably_safe(&p.unsafe_domain)? {
                    all_safe = false;
                    break;
                }
            }
            if all_safe {
                return Ok(Step::Pruned);
            }
        }
        match layer_output(self.net, &s, layer) {
            Ok(children) => Ok(Step::Expand(children)),
            Err(Error::Degenerate { .. }) => Ok(Step::Degenerate),
            Err(e) => Err(e),
        }
    }

    fn run_serial(&self, root: TrackedSet) -> Result<ReachOutcome> {
        let mut stats = ReachStats::default();
        let mut regions = Vec::new();
        let mut safe_sets = Vec::new();
        let mut stack = vec![root];
        stats.peak_live = 1;
        while let Some(s) = stack.pop() {
            stats.explored += 1;
            if stats.explored > self.opts.max_sets {
                return Err(Error::SetLimit {
                    limit: self.opts.max_sets,
                    partial: regions,
                });
            }
            match self.step(s)? {
                Step::Leaf(r, safe) => {
                    stats.leaves += 1;
                    regions.extend(r);
                    safe_sets.extend(safe);
                }
                Step::Pruned => stats.pruned += 1,
                Step::Degenerate => stats.degenerate += 1,
                Step::Expand(children) => {
                    // first child on top so the order matches the recursion
                    stack.extend(children.into_iter().rev());
                    stats.peak_live = stats.peak_live.max(stack.len());
                }
            }
        }
        Ok(ReachOutcome {
            regions,
            safe_sets,
            stats,
        })
    }

    fn run_parallel(&self, root: TrackedSet) -> Result<ReachOutcome> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.opts.worker_count)
            .build()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
        let shared = Shared::default();
        shared.live.store(1, AtomicOrdering::SeqCst);
        pool.install(|| self.visit(root, &shared));

        let regions = shared.regions.into_inner().unwrap_or_else(|e| e.into_inner());
        if let Some(e) = shared.error.into_inner().unwrap_or_else(|e| e.into_inner()) {
            return Err(e);
        }
        if shared.limit_hit.load(AtomicOrdering::SeqCst) {
            let mut partial = regions;
            canonicalize(&mut partial);
            return Err(Error::SetLimit {
                limit: self.opts.max_sets,
                partial,
            });
        }
        let load = |a: &AtomicUsize| a.load(AtomicOrdering::SeqCst);
        Ok(ReachOutcome {
            regions,
            safe_sets: shared.safe_sets.into_inner().unwrap_or_else(|e| e.into_inner()),
            stats: ReachStats {
                explored: load(&shared.explored),
                pruned: load(&shared.pruned),
                leaves: load(&shared.leaves),
                peak_live: load(&shared.peak_live).max(1),
                degenerate: load(&shared.degenerate),
            },
        })
    }

    fn visit(&self, s: TrackedSet, shared: &Shared) {
        if shared.stop.load(AtomicOrdering::Relaxed) {
            shared.live.fetch_sub(1, AtomicOrdering::SeqCst);
            return;
        }
        let n = shared.explored.fetch_add(1, AtomicOrdering::SeqCst) + 1;
        if n > self.opts.max_sets {
            shared.limit_hit.store(true, AtomicOrdering::SeqCst);
            shared.stop.store(true, AtomicOrdering::SeqCst);
            shared.live.fetch_sub(1, AtomicOrdering::SeqCst);
            return;
        }
        let step = self.step(s);
        shared.live.fetch_sub(1, AtomicOrdering::SeqCst);
        match step {
            Err(e) => {
                shared.stop.store(true, AtomicOrdering::SeqCst);
                let mut slot = shared.error.lock().unwrap_or_else(|e| e.into_inner());
                slot.get_or_insert(e);
            }
            Ok(Step::Leaf(r, safe)) => {
                shared.leaves.fetch_add(1, AtomicOrdering::SeqCst);
                if !r.is_empty() {
                    shared.regions.lock().unwrap_or_else(|e| e.into_inner()).extend(r);
                }
                if let Some(safe) = safe {
                    shared.safe_sets.lock().unwrap_or_else(|e| e.into_inner()).push(safe);
                }
            }
            Ok(Step::Pruned) => {
                shared.pruned.fetch_add(1, AtomicOrdering::SeqCst);
            }
            Ok(Step::Degenerate) => {
                shared.degenerate.fetch_add(1, AtomicOrdering::SeqCst);
            }
            Ok(Step::Expand(children)) => {
                let live = shared.live.fetch_add(children.len(), AtomicOrdering::SeqCst) + children.len();
                shared.peak_live.fetch_max(live, AtomicOrdering::SeqCst);
                children.into_par_iter().for_each(|c| self.visit(c, shared));
            }
        }
    }
}

#[derive(Default)]
struct Shared {
    regions: Mutex<Vec<UnsafeRegion>>,
    safe_sets: Mutex<Vec<SafeSet>>,
    error: Mutex<Option<Error>>,
    explored: AtomicUsize,
    pruned: AtomicUsize,
    leaves: AtomicUsize,
    degenerate: AtomicUsize,
    live: AtomicUsize,
    peak_live: AtomicUsize,
    stop: AtomicBool,
    limit_hit: AtomicBool,
}

//! Exact reachability analysis, unsafe input-region extraction and
//! counterexample-guided repair for small feed-forward ReLU networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: networks, NNet I/O, forward evaluation, SGD training.
//! - [`fvim`]: exact polytopes as facet-vertex incidence matrices whose
//!   vertices are tracked back to the input space.
//! - [`vzono`]: the base-vertex/base-vector over-approximation used to prune
//!   provably safe branches.
//! - [`reach`]: depth-first exact reachability with pruning and backtracking
//!   of unsafe outputs to unsafe input polytopes.
//! - [`repair`]: the verify / correct / retrain loop.
//! - [`fixtures`]: desk-scale benchmark networks and properties.

pub mod error;
pub mod fixtures;
pub mod fvim;
pub mod geometry;
pub mod model;
pub mod reach;
pub mod repair;
pub mod vzono;

pub use error::{Error, Result};
pub use fvim::{Fvim, Halfspace, TrackedSet};
pub use model::{Activation, LabeledDataset, Layer, Network, TrainConfig};
pub use reach::{
    ReachOptions, ReachOutcome, ReachStats, SafetyProperty, UnsafeConstraint, UnsafeDomain,
    UnsafeRegion,
};
pub use repair::{RepairConfig, RepairReport, Verdict};
pub use vzono::VZono;

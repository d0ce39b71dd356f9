//! Base-vertex / base-vector over-approximations.
//!
//! A [`VZono`] `⟨C, V⟩` stands for the convex hull of `C ± V`: every base
//! vertex plus every signed sum of the base vectors, `m · 2ⁿ` points that are
//! never materialized. Affine maps act on both parts, a ReLU neuron whose
//! input range spans zero is relaxed by a parallelogram band that adds one
//! base vector, and linear objectives are minimized in closed form.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fvim::TrackedSet;
use crate::reach::UnsafeDomain;

/// Default bound on base vertices before [`VZono::compress`] falls back to an
/// interval hull.
pub const DEFAULT_BASE_VERTEX_CAP: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct VZono {
    base_vertices: DMatrix<f64>,
    base_vectors: DMatrix<f64>,
}

impl VZono {
    pub fn new(base_vertices: DMatrix<f64>, base_vectors: DMatrix<f64>) -> Result<Self> {
        if base_vertices.nrows() == 0 {
            return Err(Error::Invalid("V-zono needs at least one base vertex".into()));
        }
        if base_vectors.nrows() > 0 && base_vectors.ncols() != base_vertices.ncols() {
            return Err(Error::dim(
                base_vertices.ncols(),
                base_vectors.ncols(),
                "base vector dimension",
            ));
        }
        let d = base_vertices.ncols();
        let base_vectors = if base_vectors.nrows() == 0 {
            DMatrix::zeros(0, d)
        } else {
            base_vectors
        };
        Ok(Self {
            base_vertices,
            base_vectors,
        })
    }

    /// Exact conversion: the set's current vertices become base vertices.
    pub fn from_tracked(s: &TrackedSet) -> Self {
        let c = s.current_vertices().clone();
        let d = c.ncols();
        Self {
            base_vertices: c,
            base_vectors: DMatrix::zeros(0, d),
        }
    }

    pub fn base_vertices(&self) -> &DMatrix<f64> {
        &self.base_vertices
    }

    pub fn base_vectors(&self) -> &DMatrix<f64> {
        &self.base_vectors
    }

    pub fn dim(&self) -> usize {
        self.base_vertices.ncols()
    }

    pub fn num_base_vertices(&self) -> usize {
        self.base_vertices.nrows()
    }

    pub fn num_base_vectors(&self) -> usize {
        self.base_vectors.nrows()
    }

    pub fn affine_map(&self, weights: &DMatrix<f64>, bias: &DVector<f64>) -> Result<Self> {
        if weights.ncols() != self.dim() {
            return Err(Error::dim(self.dim(), weights.ncols(), "affine map columns"));
        }
        if bias.len() != weights.nrows() {
            return Err(Error::dim(weights.nrows(), bias.len(), "affine map bias"));
        }
        let wt = weights.transpose();
        let mut c = &self.base_vertices * &wt;
        for mut row in c.row_iter_mut() {
            row += bias.transpose();
        }
        Ok(Self {
            base_vertices: c,
            base_vectors: &self.base_vectors * &wt,
        })
    }

    fn radius(&self, i: usize) -> f64 {
        self.base_vectors.column(i).iter().map(|v| v.abs()).sum()
    }

    /// Interval bounds of coordinate `i`.
    pub fn neuron_bounds(&self, i: usize) -> (f64, f64) {
        let r = self.radius(i);
        let col = self.base_vertices.column(i);
        (col.min() - r, col.max() + r)
    }

    /// Relaxes a ReLU on coordinate `i` whose range `[lb, ub]` spans zero.
    ///
    /// With `λ = ub/(ub−lb)` and `μ = −ub·lb/(2(ub−lb))`, base vertices map
    /// `c_i ↦ λ·c_i + μ`, base vectors scale their `i` component by `λ`, and
    /// `μ·e_i` is appended as a new base vector.
    pub fn relu_relax(&self, i: usize, lb: f64, ub: f64) -> Result<Self> {
        if !(lb < 0.0 && ub > 0.0) {
            return Err(Error::Invalid(format!(
                "relaxation needs lb < 0 < ub, got [{lb}, {ub}]"
            )));
        }
        let lambda = ub / (ub - lb);
        let mu = -ub * lb / (2.0 * (ub - lb));
        let mut c = self.base_vertices.clone();
        c.column_mut(i).apply(|v| *v = lambda * *v + mu);
        let n = self.num_base_vectors();
        let mut g = self.base_vectors.clone().insert_row(n, 0.0);
        g.column_mut(i).rows_mut(0, n).apply(|v| *v *= lambda);
        g[(n, i)] = mu;
        Ok(Self {
            base_vertices: c,
            base_vectors: g,
        })
    }

    /// Over-approximates one ReLU layer, neuron by neuron in index order.
    pub fn relu_layer(&self) -> Self {
        let mut z = self.clone();
        for i in 0..z.dim() {
            let (lb, ub) = z.neuron_bounds(i);
            if ub <= 0.0 {
                z.base_vertices.column_mut(i).fill(0.0);
                z.base_vectors.column_mut(i).fill(0.0);
            } else if lb < 0.0 {
                z = z
                    .relu_relax(i, lb, ub)
                    .expect("spanning case checked above");
            }
        }
        z
    }

    /// `min (αᵀ(C ± V) + β)`, evaluated in closed form.
    pub fn constraint_min(&self, alpha: &[f64], beta: f64) -> f64 {
        let a = DVector::from_column_slice(alpha);
        let spread: f64 = (&self.base_vectors * &a).iter().map(|v| v.abs()).sum();
        (&self.base_vertices * &a).min() + beta - spread
    }

    /// Support function `max αᵀy` over the represented set.
    pub fn support(&self, alpha: &[f64]) -> f64 {
        let neg: Vec<f64> = alpha.iter().map(|v| -v).collect();
        -self.constraint_min(&neg, 0.0)
    }

    /// True when some unsafe constraint is violated everywhere on the set,
    /// so the set cannot meet the unsafe domain.
    pub fn is_provably_safe(&self, unsafe_domain: &UnsafeDomain) -> Result<bool> {
        if unsafe_domain.constraints.is_empty() {
            return Err(Error::Invalid(
                "empty unsafe domain: every output would be unsafe".into(),
            ));
        }
        Ok(unsafe_domain
            .constraints
            .iter()
            .any(|c| self.constraint_min(&c.a, c.b) > 0.0))
    }

    /// Replaces the base vertices by their interval-hull midpoint plus axis
    /// base vectors when there are more than `cap` of them.
    pub fn compress(&self, cap: usize) -> Self {
        if self.num_base_vertices() <= cap.max(1) {
            return self.clone();
        }
        let d = self.dim();
        let mut mid = DMatrix::zeros(1, d);
        let mut axes: Vec<(usize, f64)> = Vec::new();
        for i in 0..d {
            let col = self.base_vertices.column(i);
            let (lo, hi) = (col.min(), col.max());
            mid[(0, i)] = 0.5 * (lo + hi);
            if hi > lo {
                axes.push((i, 0.5 * (hi - lo)));
            }
        }
        let n = self.num_base_vectors();
        let mut g = self.base_vectors.clone();
        for (k, &(i, r)) in axes.iter().enumerate() {
            g = g.insert_row(n + k, 0.0);
            g[(n + k, i)] = r;
        }
        Self {
            base_vertices: mid,
            base_vectors: g,
        }
    }

    /// Materializes all `m · 2ⁿ` points. Only for small `n`.
    pub fn enumerate_points(&self) -> Vec<Vec<f64>> {
        let n = self.num_base_vectors();
        assert!(n <= 20, "refusing to enumerate 2^{n} sign patterns");
        let mut out = Vec::with_capacity(self.num_base_vertices() << n);
        for c in self.base_vertices.row_iter() {
            for signs in 0..(1usize << n) {
                let mut p: Vec<f64> = c.iter().copied().collect();
                for j in 0..n {
                    let s = if signs >> j & 1 == 1 { 1.0 } else { -1.0 };
                    for (k, v) in p.iter_mut().enumerate() {
                        *v += s * self.base_vectors[(j, k)];
                    }
                }
                out.push(p);
            }
        }
        out
    }
}

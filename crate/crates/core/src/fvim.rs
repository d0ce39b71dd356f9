//! Exact convex polytopes stored as a facet-vertex incidence matrix (FVIM)
//! plus vertex coordinates.
//!
//! A [`TrackedSet`] is one linear region of the network's input space. It keeps
//! the region's vertices in input coordinates together with their images at
//! the current point of propagation, so every later split acts on both and
//! any reachable set can be pulled back to its input region without solving
//! LPs. Affine maps touch only the current coordinates; hyperplane splits
//! reuse the parent incidence by restriction and append one new facet row.

use std::fmt::Write as _;

use fixedbitset::FixedBitSet;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vertex classification tolerance, scaled by `max(1, max |value|)`.
pub const SIGN_TOLERANCE: f64 = 1e-9;

/// `normal · x + offset >= 0`, in input coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Halfspace {
    pub normal: Vec<f64>,
    pub offset: f64,
}

impl Halfspace {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.normal.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.offset
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.eval(x) >= -tol
    }

    fn negated(&self) -> Self {
        Self {
            normal: self.normal.iter().map(|v| -v).collect(),
            offset: -self.offset,
        }
    }
}

/// Binary facet × vertex incidence matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fvim {
    rows: Vec<FixedBitSet>,
    num_vertices: usize,
}

impl Fvim {
    pub fn from_rows(rows: Vec<FixedBitSet>, num_vertices: usize) -> Self {
        debug_assert!(rows.iter().all(|r| r.len() == num_vertices));
        Self { rows, num_vertices }
    }

    pub fn num_facets(&self) -> usize {
        self.rows.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn contains(&self, facet: usize, vertex: usize) -> bool {
        self.rows[facet].contains(vertex)
    }

    pub fn row(&self, facet: usize) -> &FixedBitSet {
        &self.rows[facet]
    }

    /// Facets incident to one vertex.
    pub fn vertex_facets(&self, vertex: usize) -> FixedBitSet {
        let mut col = FixedBitSet::with_capacity(self.rows.len());
        for (f, row) in self.rows.iter().enumerate() {
            if row.contains(vertex) {
                col.insert(f);
            }
        }
        col
    }

    pub fn to_dense(&self) -> Vec<Vec<u8>> {
        self.rows
            .iter()
            .map(|r| (0..self.num_vertices).map(|v| u8::from(r.contains(v))).collect())
            .collect()
    }
}

/// One input-space linear region with its vertices tracked through the network.
///
/// Invariant: `current = linear · input + offset` row by row; `linear` and
/// `offset` are the region's affine map up to the current point.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackedSet {
    fvim: Fvim,
    facets: Vec<Halfspace>,
    input_vertices: DMatrix<f64>,
    current_vertices: DMatrix<f64>,
    linear: DMatrix<f64>,
    offset: DVector<f64>,
    layer_cursor: usize,
}

/// Result of cutting a set with a hyperplane `h = 0`.
#[derive(Debug, Clone)]
pub struct Cut {
    /// Part with `h <= 0`.
    pub neg: Option<TrackedSet>,
    /// Part with `h >= 0`.
    pub pos: Option<TrackedSet>,
    /// `h` vanishes on the whole set; both sides hold the unchanged set.
    pub flat: bool,
}

fn rows_to_matrix(rows: &[Vec<f64>], ncols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c])
}

impl TrackedSet {
    /// Axis-aligned box `[lb, ub]` with `2^d` vertices and `2d` facets.
    ///
    /// Vertex `v` takes `ub[j]` in coordinate `j` iff bit `j` of `v` is set.
    /// Facet rows come in pairs `x_j = lb_j`, `x_j = ub_j`.
    pub fn box_polytope(lb: &[f64], ub: &[f64]) -> Result<Self> {
        let d = lb.len();
        if d == 0 {
            return Err(Error::Invalid("box dimension must be at least 1".into()));
        }
        if ub.len() != d {
            return Err(Error::dim(d, ub.len(), "box upper bound"));
        }
        if d > 20 {
            return Err(Error::Invalid(format!("box dimension {d} too large")));
        }
        if let Some(j) = (0..d).find(|&j| !(lb[j] < ub[j])) {
            return Err(Error::Invalid(format!(
                "box bound {j}: lb {} must be below ub {}",
                lb[j], ub[j]
            )));
        }
        let nv = 1usize << d;
        let input = DMatrix::from_fn(nv, d, |v, j| if v >> j & 1 == 1 { ub[j] } else { lb[j] });
        let mut rows = Vec::with_capacity(2 * d);
        let mut facets = Vec::with_capacity(2 * d);
        for j in 0..d {
            for upper in [false, true] {
                let mut row = FixedBitSet::with_capacity(nv);
                for v in 0..nv {
                    if (v >> j & 1 == 1) == upper {
                        row.insert(v);
                    }
                }
                rows.push(row);
                let mut normal = vec![0.0; d];
                normal[j] = if upper { -1.0 } else { 1.0 };
                facets.push(Halfspace {
                    normal,
                    offset: if upper { ub[j] } else { -lb[j] },
                });
            }
        }
        Ok(Self {
            fvim: Fvim::from_rows(rows, nv),
            facets,
            current_vertices: input.clone(),
            input_vertices: input,
            linear: DMatrix::identity(d, d),
            offset: DVector::zeros(d),
            layer_cursor: 0,
        })
    }

    pub fn fvim(&self) -> &Fvim {
        &self.fvim
    }

    /// Input-space halfspaces, aligned with the FVIM rows.
    pub fn facets(&self) -> &[Halfspace] {
        &self.facets
    }

    pub fn input_vertices(&self) -> &DMatrix<f64> {
        &self.input_vertices
    }

    pub fn current_vertices(&self) -> &DMatrix<f64> {
        &self.current_vertices
    }

    /// Affine map `(A, c)` from input coordinates to current coordinates.
    pub fn local_map(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.linear, &self.offset)
    }

    pub fn layer_cursor(&self) -> usize {
        self.layer_cursor
    }

    pub fn set_layer_cursor(&mut self, cursor: usize) {
        self.layer_cursor = cursor;
    }

    pub fn num_vertices(&self) -> usize {
        self.input_vertices.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.input_vertices.ncols()
    }

    pub fn current_dim(&self) -> usize {
        self.current_vertices.ncols()
    }

    pub fn input_vertex(&self, v: usize) -> Vec<f64> {
        self.input_vertices.row(v).iter().copied().collect()
    }

    pub fn current_vertex(&self, v: usize) -> Vec<f64> {
        self.current_vertices.row(v).iter().copied().collect()
    }

    /// Membership of an input point in the region.
    pub fn contains_input(&self, x: &[f64], tol: f64) -> bool {
        self.facets.iter().all(|h| h.contains(x, tol))
    }

    /// Maps the current coordinates: `current ← current · Wᵀ + b`.
    pub fn affine_map(&self, weights: &DMatrix<f64>, bias: &DVector<f64>) -> Result<Self> {
        if weights.ncols() != self.current_dim() {
            return Err(Error::dim(self.current_dim(), weights.ncols(), "affine map columns"));
        }
        if bias.len() != weights.nrows() {
            return Err(Error::dim(weights.nrows(), bias.len(), "affine map bias"));
        }
        let mut current = &self.current_vertices * weights.transpose();
        for mut row in current.row_iter_mut() {
            row += bias.transpose();
        }
        Ok(Self {
            current_vertices: current,
            linear: weights * &self.linear,
            offset: weights * &self.offset + bias,
            ..self.clone()
        })
    }

    /// Lower and upper bound of current coordinate `i`, read off the vertices.
    pub fn dim_bounds(&self, i: usize) -> (f64, f64) {
        let col = self.current_vertices.column(i);
        (col.min(), col.max())
    }

    /// Exact processing of one ReLU neuron on current coordinate `i`.
    ///
    /// Returns one set when the coordinate does not change sign (zeroed when
    /// non-positive) and two sets otherwise, positive side first.
    pub fn split_by_neuron(&self, i: usize) -> Result<Vec<TrackedSet>> {
        if i >= self.current_dim() {
            return Err(Error::dim(self.current_dim(), i, "neuron index"));
        }
        let values: Vec<f64> = self.current_vertices.column(i).iter().copied().collect();
        let plane = Halfspace {
            normal: self.linear.row(i).iter().copied().collect(),
            offset: self.offset[i],
        };
        let cut = self.cut(&values, &plane, Some(i))?;
        if cut.flat {
            let mut s = self.clone();
            s.zero_coordinate(i);
            return Ok(vec![s]);
        }
        let mut out = Vec::with_capacity(2);
        if let Some(pos) = cut.pos {
            out.push(pos);
        }
        if let Some(mut neg) = cut.neg {
            neg.zero_coordinate(i);
            out.push(neg);
        }
        Ok(out)
    }

    /// Cuts by the output-space halfspace `alpha · current + beta <= 0`.
    pub fn intersect_halfspace(&self, alpha: &[f64], beta: f64) -> Result<Option<TrackedSet>> {
        if alpha.len() != self.current_dim() {
            return Err(Error::dim(self.current_dim(), alpha.len(), "constraint length"));
        }
        let a = DVector::from_column_slice(alpha);
        let values: Vec<f64> = (&self.current_vertices * &a).iter().map(|v| v + beta).collect();
        let plane = Halfspace {
            normal: self.linear.tr_mul(&a).iter().copied().collect(),
            offset: a.dot(&self.offset) + beta,
        };
        Ok(self.cut(&values, &plane, None)?.neg)
    }

    fn zero_coordinate(&mut self, i: usize) {
        self.current_vertices.column_mut(i).fill(0.0);
        self.linear.row_mut(i).fill(0.0);
        self.offset[i] = 0.0;
    }

    /// Splits by the hyperplane on which the per-vertex `values` vanish.
    /// `plane` is the same hyperplane in input coordinates, oriented so the
    /// `values >= 0` side is inside. `pin` forces that current coordinate to
    /// exactly zero on new vertices.
    pub fn cut(&self, values: &[f64], plane: &Halfspace, pin: Option<usize>) -> Result<Cut> {
        let d = self.input_dim();
        let nv = self.num_vertices();
        if nv < d + 1 {
            return Err(Error::Degenerate { vertices: nv, dim: d });
        }
        let scale = values.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        let tol = SIGN_TOLERANCE * scale;
        let (mut pos, mut neg, mut zero) = (Vec::new(), Vec::new(), Vec::new());
        for (v, &h) in values.iter().enumerate() {
            if h > tol {
                pos.push(v);
            } else if h < -tol {
                neg.push(v);
            } else {
                zero.push(v);
            }
        }
        if neg.is_empty() && pos.is_empty() {
            return Ok(Cut {
                neg: Some(self.clone()),
                pos: Some(self.clone()),
                flat: true,
            });
        }
        if neg.is_empty() {
            return Ok(Cut {
                neg: None,
                pos: Some(self.clone()),
                flat: false,
            });
        }
        if pos.is_empty() {
            return Ok(Cut {
                neg: Some(self.clone()),
                pos: None,
                flat: false,
            });
        }

        let vertex_facets: Vec<FixedBitSet> = (0..nv).map(|v| self.fvim.vertex_facets(v)).collect();
        let mut new_input: Vec<Vec<f64>> = Vec::new();
        let mut new_current: Vec<Vec<f64>> = Vec::new();
        let mut new_facets: Vec<FixedBitSet> = Vec::new();
        for &p in &pos {
            for &q in &neg {
                let mut common = vertex_facets[p].clone();
                common.intersect_with(&vertex_facets[q]);
                if common.count_ones(..) + 1 < d {
                    continue;
                }
                // p-q is an edge iff no third vertex lies on all their common facets
                let shared_elsewhere = (0..nv)
                    .any(|z| z != p && z != q && common.is_subset(&vertex_facets[z]));
                if shared_elsewhere {
                    continue;
                }
                let t = values[q] / (values[q] - values[p]);
                let lerp = |m: &DMatrix<f64>| -> Vec<f64> {
                    m.row(q)
                        .iter()
                        .zip(m.row(p).iter())
                        .map(|(a, b)| a + t * (b - a))
                        .collect()
                };
                let mut cur = lerp(&self.current_vertices);
                if let Some(i) = pin {
                    cur[i] = 0.0;
                }
                new_input.push(lerp(&self.input_vertices));
                new_current.push(cur);
                new_facets.push(common);
            }
        }

        let neg_child = self.child(&neg, &zero, &new_input, &new_current, &new_facets, plane.negated());
        let pos_child = self.child(&pos, &zero, &new_input, &new_current, &new_facets, plane.clone());
        Ok(Cut {
            neg: neg_child,
            pos: pos_child,
            flat: false,
        })
    }

    fn child(
        &self,
        side: &[usize],
        zero: &[usize],
        new_input: &[Vec<f64>],
        new_current: &[Vec<f64>],
        new_facets: &[FixedBitSet],
        plane: Halfspace,
    ) -> Option<TrackedSet> {
        let d = self.input_dim();
        let kept: Vec<usize> = side.iter().chain(zero).copied().collect();
        let nv = kept.len() + new_input.len();
        if nv < d + 1 {
            return None;
        }

        let mut rows: Vec<FixedBitSet> = Vec::with_capacity(self.fvim.num_facets() + 1);
        for f in 0..self.fvim.num_facets() {
            let parent = self.fvim.row(f);
            let mut row = FixedBitSet::with_capacity(nv);
            for (c, &v) in kept.iter().enumerate() {
                if parent.contains(v) {
                    row.insert(c);
                }
            }
            for (k, facets) in new_facets.iter().enumerate() {
                if facets.contains(f) {
                    row.insert(kept.len() + k);
                }
            }
            rows.push(row);
        }
        let mut cut_row = FixedBitSet::with_capacity(nv);
        cut_row.insert_range(side.len()..nv);
        rows.push(cut_row);
        let mut planes = self.facets.clone();
        planes.push(plane);

        // Keep only rows that are still facets: at least d vertices and not
        // contained in another row.
        let keep: Vec<bool> = (0..rows.len())
            .map(|f| {
                if rows[f].count_ones(..) < d {
                    return false;
                }
                !(0..rows.len()).any(|g| {
                    g != f
                        && rows[f].is_subset(&rows[g])
                        && (rows[f] != rows[g] || g < f)
                })
            })
            .collect();
        let (rows, planes): (Vec<_>, Vec<_>) = rows
            .into_iter()
            .zip(planes)
            .zip(keep)
            .filter_map(|(rp, k)| k.then_some(rp))
            .unzip();

        let gather = |m: &DMatrix<f64>, extra: &[Vec<f64>]| -> DMatrix<f64> {
            let mut all: Vec<Vec<f64>> = kept.iter().map(|&v| m.row(v).iter().copied().collect()).collect();
            all.extend(extra.iter().cloned());
            rows_to_matrix(&all, m.ncols())
        };
        Some(TrackedSet {
            fvim: Fvim::from_rows(rows, nv),
            facets: planes,
            input_vertices: gather(&self.input_vertices, new_input),
            current_vertices: gather(&self.current_vertices, new_current),
            linear: self.linear.clone(),
            offset: self.offset.clone(),
            layer_cursor: self.layer_cursor,
        })
    }

    /// Plain-text dump of vertices and incidence, for debugging.
    pub fn debug_dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "tracked set: {} vertices, {} facets, input dim {}, current dim {}, layer {}",
            self.num_vertices(),
            self.fvim.num_facets(),
            self.input_dim(),
            self.current_dim(),
            self.layer_cursor
        );
        for v in 0..self.num_vertices() {
            let _ = writeln!(
                s,
                "v{v}: input {:?} current {:?}",
                self.input_vertex(v),
                self.current_vertex(v)
            );
        }
        for (f, row) in self.fvim.to_dense().iter().enumerate() {
            let bits: String = row.iter().map(|b| if *b == 1 { '1' } else { '0' }).collect();
            let _ = writeln!(s, "F{f}: {bits}");
        }
        s
    }
}

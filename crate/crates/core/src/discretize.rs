//! Method-of-lines spatial discretizations.
//!
//! Every builder returns a [`DiscreteSystem`]: the interior nodes of the
//! domain, the diagonal of the (lumped) mass matrix `M` and a symmetric sparse
//! stiffness matrix `A`, so that the semidiscrete problem reads
//!
//! ```text
//! M U'(t) = -A U(t) + M U(t)^p
//! ```
//!
//! The schemes in [`crate::stepper`] rely on three structural properties of
//! the pair `(M, A)`:
//!
//! * **P1** `M` is diagonal with positive entries `m_k`;
//! * **P2** `A` is symmetric with `a_ii > 0` and `a_ij <= 0` for `i != j`;
//! * **P3** every row sum `sum_k a_ik` is nonnegative.
//!
//! [`validate_properties`] checks them on any system, including hand-built
//! ones. Boundary nodes carry homogeneous Dirichlet data and are eliminated,
//! so only interior unknowns are stored.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sum::NeumaierSum;

#[derive(Debug, Error, PartialEq)]
pub enum DiscretizeError {
    #[error("at least one interior node is required")]
    NoInteriorNodes,
    #[error("unsupported spatial dimension {0} (expected 1, 2 or 3)")]
    UnsupportedDimension(usize),
    #[error("breakpoints must start at 0, end at 1 and increase strictly: {0}")]
    BadPartition(String),
    #[error("malformed system: {0}")]
    Malformed(String),
    #[error("initial profile is not positive at node {node} (value {value})")]
    NonPositiveProfile { node: usize, value: f64 },
    #[error("invalid profile parameters: {0}")]
    BadProfile(String),
}

/// Symmetric sparse matrix in compressed-row form.
///
/// Column indices are sorted within each row and never repeated; both
/// triangles are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymmetric {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseSymmetric {
    /// Builds the matrix from per-row `(column, value)` lists.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Result<Self, DiscretizeError> {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for (i, mut row) in rows.into_iter().enumerate() {
            row.sort_by_key(|&(c, _)| c);
            for w in row.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(DiscretizeError::Malformed(format!(
                        "duplicate entry ({i}, {})",
                        w[0].0
                    )));
                }
            }
            for (c, v) in row {
                if c >= n {
                    return Err(DiscretizeError::Malformed(format!(
                        "column {c} out of range in row {i}"
                    )));
                }
                if !v.is_finite() {
                    return Err(DiscretizeError::Malformed(format!(
                        "non-finite entry ({i}, {c})"
                    )));
                }
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Ok(Self {
            row_ptr,
            cols,
            vals,
        })
    }

    /// Builds the matrix from upper-triangle triplets `(i, j, v)` with `i <= j`.
    pub fn from_upper_triplets(
        n: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self, DiscretizeError> {
        let mut rows = vec![Vec::new(); n];
        for &(i, j, v) in triplets {
            if i > j {
                return Err(DiscretizeError::Malformed(format!(
                    "triplet ({i}, {j}) is below the diagonal"
                )));
            }
            if j >= n {
                return Err(DiscretizeError::Malformed(format!(
                    "triplet ({i}, {j}) out of range"
                )));
            }
            rows[i].push((j, v));
            if i != j {
                rows[j].push((i, v));
            }
        }
        Self::from_rows(rows)
    }

    pub fn n(&self) -> usize {
        self.row_ptr.len() - 1
    }

    /// Column indices and values of row `i`.
    #[inline]
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.cols[a..b], &self.vals[a..b])
    }

    /// Stored value at `(i, j)`, zero if absent.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map(|k| vals[k]).unwrap_or(0.0)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n()).map(|i| self.get(i, i)).collect()
    }

    /// `y = A x`.
    #[inline]
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            let mut acc = 0.0;
            for (&c, &v) in cols.iter().zip(vals) {
                acc += v * x[c];
            }
            *yi = acc;
        }
    }

    /// `<A x, x>`.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (i, &xi) in x.iter().enumerate() {
            let (cols, vals) = self.row(i);
            let mut row = 0.0;
            for (&c, &v) in cols.iter().zip(vals) {
                row += v * x[c];
            }
            acc += row * xi;
        }
        acc
    }

    /// Largest `|i - j|` over stored entries.
    pub fn bandwidth(&self) -> usize {
        (0..self.n())
            .flat_map(|i| self.row(i).0.iter().map(move |&c| c.abs_diff(i)))
            .max()
            .unwrap_or(0)
    }

    /// Entries of the upper triangle, row-major.
    pub fn upper_triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for i in 0..self.n() {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                if c >= i {
                    out.push((i, c, v));
                }
            }
        }
        out
    }

    fn values_mut(&mut self) -> &mut [f64] {
        &mut self.vals
    }
}

/// Nodes, lumped mass and stiffness of a semidiscretization.
///
/// Immutable after construction; share it by reference across runs.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSystem {
    dim: usize,
    coords: Vec<f64>,
    mass: Vec<f64>,
    stiffness: SparseSymmetric,
}

impl DiscreteSystem {
    /// Assembles a system from raw parts.
    ///
    /// Only structural consistency is checked here (lengths, finiteness,
    /// sorted unique columns). Sign properties are left to
    /// [`validate_properties`] so that counterexamples can be represented.
    pub fn from_parts(
        dim: usize,
        nodes: Vec<Vec<f64>>,
        mass: Vec<f64>,
        stiffness: SparseSymmetric,
    ) -> Result<Self, DiscretizeError> {
        let n = mass.len();
        if n == 0 {
            return Err(DiscretizeError::NoInteriorNodes);
        }
        if dim == 0 {
            return Err(DiscretizeError::UnsupportedDimension(dim));
        }
        if nodes.len() != n || stiffness.n() != n {
            return Err(DiscretizeError::Malformed(format!(
                "{} nodes, {} masses, {} stiffness rows",
                nodes.len(),
                n,
                stiffness.n()
            )));
        }
        if mass.iter().any(|m| !m.is_finite()) {
            return Err(DiscretizeError::Malformed("non-finite mass".into()));
        }
        let mut coords = Vec::with_capacity(n * dim);
        for (k, x) in nodes.into_iter().enumerate() {
            if x.len() != dim {
                return Err(DiscretizeError::Malformed(format!(
                    "node {k} has {} coordinates, expected {dim}",
                    x.len()
                )));
            }
            coords.extend(x);
        }
        Ok(Self {
            dim,
            coords,
            mass,
            stiffness,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of unknowns `N`.
    pub fn n(&self) -> usize {
        self.mass.len()
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.coords[k * self.dim..(k + 1) * self.dim]
    }

    pub fn nodes(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.coords.chunks_exact(self.dim)
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn stiffness(&self) -> &SparseSymmetric {
        &self.stiffness
    }

    /// Neighbours of node `k` in the adjacency graph (`a_kj != 0`, `j != k`).
    pub fn neighbors(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        let (cols, vals) = self.stiffness.row(k);
        cols.iter()
            .zip(vals)
            .filter(move |&(&c, &v)| c != k && v != 0.0)
            .map(|(&c, _)| c)
    }

    /// `min_i m_i / a_ii`, the explicit-scheme comparison bound on the step.
    pub fn min_mass_over_diag(&self) -> f64 {
        self.mass
            .iter()
            .enumerate()
            .map(|(i, m)| m / self.stiffness.get(i, i))
            .fold(f64::INFINITY, f64::min)
    }

    /// Scales every stiffness entry by `factor`. Used to build near-diffusionless
    /// test systems; the sign pattern is preserved for `factor > 0`.
    pub fn with_scaled_stiffness(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for v in out.stiffness.values_mut() {
            *v *= factor;
        }
        out
    }

    /// Mesh description with the stiffness as upper-triangle triplets.
    pub fn to_mesh_file(&self) -> MeshFile {
        MeshFile {
            dim: self.dim,
            nodes: self.nodes().map(<[f64]>::to_vec).collect(),
            mass: self.mass.clone(),
            stiffness_triplets: self.stiffness.upper_triplets(),
        }
    }

    pub fn from_mesh_file(mesh: &MeshFile) -> Result<Self, DiscretizeError> {
        let stiffness =
            SparseSymmetric::from_upper_triplets(mesh.mass.len(), &mesh.stiffness_triplets)?;
        Self::from_parts(mesh.dim, mesh.nodes.clone(), mesh.mass.clone(), stiffness)
    }
}

/// Serialized mesh: `{dim, nodes, mass, stiffness_triplets}` with `i <= j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshFile {
    pub dim: usize,
    pub nodes: Vec<Vec<f64>>,
    pub mass: Vec<f64>,
    pub stiffness_triplets: Vec<(usize, usize, f64)>,
}

/// Three-point finite differences on `(0, 1)` with `n_interior` unknowns.
pub fn build_fd_interval(n_interior: usize) -> Result<DiscreteSystem, DiscretizeError> {
    if n_interior == 0 {
        return Err(DiscretizeError::NoInteriorNodes);
    }
    let n = n_interior;
    let h = 1.0 / (n as f64 + 1.0);
    let diag = 2.0 / h;
    let off = -1.0 / h;
    let nodes = (1..=n).map(|k| vec![k as f64 * h]).collect();
    let rows = (0..n)
        .map(|i| {
            let mut row = Vec::with_capacity(3);
            if i > 0 {
                row.push((i - 1, off));
            }
            row.push((i, diag));
            if i + 1 < n {
                row.push((i + 1, off));
            }
            row
        })
        .collect();
    DiscreteSystem::from_parts(1, nodes, vec![h; n], SparseSymmetric::from_rows(rows)?)
}

/// Standard `(2d+1)`-point finite differences on the cube `(0, 1)^d`, scaled
/// so that `m_k = h^d` and `a_kk = 2d h^(d-2)`.
///
/// Nodes are ordered lexicographically by coordinates (first axis slowest).
pub fn build_fd_cube(d: usize, n_per_side: usize) -> Result<DiscreteSystem, DiscretizeError> {
    if !(1..=3).contains(&d) {
        return Err(DiscretizeError::UnsupportedDimension(d));
    }
    if n_per_side == 0 {
        return Err(DiscretizeError::NoInteriorNodes);
    }
    let n = n_per_side;
    let h = 1.0 / (n as f64 + 1.0);
    let total = n.pow(d as u32);
    let scale = match d {
        1 => 1.0 / h,
        2 => 1.0,
        _ => h,
    };
    let off = -scale;
    let diag = exact_upper_multiple(2 * d, scale);
    let mass = h.powi(d as i32);

    let strides: Vec<usize> = (0..d).map(|a| n.pow((d - 1 - a) as u32)).collect();
    let mut nodes = Vec::with_capacity(total);
    let mut rows = Vec::with_capacity(total);
    for idx in 0..total {
        let digits: Vec<usize> = strides.iter().map(|&s| (idx / s) % n).collect();
        nodes.push(digits.iter().map(|&g| (g + 1) as f64 * h).collect());
        let mut row = Vec::with_capacity(2 * d + 1);
        row.push((idx, diag));
        for (a, &g) in digits.iter().enumerate() {
            if g > 0 {
                row.push((idx - strides[a], off));
            }
            if g + 1 < n {
                row.push((idx + strides[a], off));
            }
        }
        rows.push(row);
    }
    DiscreteSystem::from_parts(
        d,
        nodes,
        vec![mass; total],
        SparseSymmetric::from_rows(rows)?,
    )
}

/// `k * s` rounded so that the stored value is never below the exact product.
/// Keeps interior row sums of the stencil nonnegative in exact arithmetic.
fn exact_upper_multiple(k: usize, s: f64) -> f64 {
    let kf = k as f64;
    let p = kf * s;
    // fma gives the exact rounding error of the product.
    if kf.mul_add(s, -p) > 0.0 {
        p.next_up()
    } else {
        p
    }
}

/// `a + b` rounded so that the stored value is never below the exact sum.
fn upper_sum(a: f64, b: f64) -> f64 {
    let s = a + b;
    let bb = s - a;
    // two-sum error term
    if (a - (s - bb)) + (b - bb) > 0.0 {
        s.next_up()
    } else {
        s
    }
}

/// Piecewise-linear finite elements with lumped mass on a partition of `[0, 1]`.
pub fn build_fem_interval(breakpoints: &[f64]) -> Result<DiscreteSystem, DiscretizeError> {
    let nb = breakpoints.len();
    if nb < 3 {
        return Err(DiscretizeError::NoInteriorNodes);
    }
    if breakpoints[0] != 0.0 || breakpoints[nb - 1] != 1.0 {
        return Err(DiscretizeError::BadPartition(format!(
            "endpoints are {} and {}",
            breakpoints[0],
            breakpoints[nb - 1]
        )));
    }
    if let Some(w) = breakpoints.windows(2).find(|w| !(w[1] > w[0])) {
        return Err(DiscretizeError::BadPartition(format!(
            "{} is not greater than {}",
            w[1], w[0]
        )));
    }
    let lengths: Vec<f64> = breakpoints.windows(2).map(|w| w[1] - w[0]).collect();
    let n = nb - 2;
    let mut nodes = Vec::with_capacity(n);
    let mut mass = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let (hl, hr) = (lengths[i], lengths[i + 1]);
        nodes.push(vec![breakpoints[i + 1]]);
        mass.push((hl + hr) / 2.0);
        let mut row = Vec::with_capacity(3);
        if i > 0 {
            row.push((i - 1, -1.0 / hl));
        }
        row.push((i, upper_sum(1.0 / hl, 1.0 / hr)));
        if i + 1 < n {
            row.push((i + 1, -1.0 / hr));
        }
        rows.push(row);
    }
    DiscreteSystem::from_parts(1, nodes, mass, SparseSymmetric::from_rows(rows)?)
}

/// Outcome of [`validate_properties`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyReport {
    /// P1: every `m_k > 0`.
    pub positive_mass: bool,
    /// P2: `a_ii > 0` and `a_ij <= 0` off the diagonal.
    pub sign_pattern: bool,
    /// P3: every row sum is `>= 0`.
    pub row_sums: bool,
    /// Every stored `(i, j, v)` has a matching `(j, i, v)`.
    pub symmetric: bool,
    pub failures: Vec<String>,
}

impl PropertyReport {
    pub fn passed(&self) -> bool {
        self.positive_mass && self.sign_pattern && self.row_sums && self.symmetric
    }
}

/// Checks P1-P3 and symmetry. Sign conditions use zero tolerance; symmetry
/// allows a relative mismatch of `1e-12`.
pub fn validate_properties(sys: &DiscreteSystem) -> PropertyReport {
    let mut failures = Vec::new();
    let a = sys.stiffness();

    let mut positive_mass = true;
    for (k, &m) in sys.mass().iter().enumerate() {
        if !(m > 0.0) {
            positive_mass = false;
            failures.push(format!("P1: m_{k} = {m}"));
        }
    }

    let mut sign_pattern = true;
    let mut row_sums = true;
    let mut symmetric = true;
    for i in 0..sys.n() {
        let (cols, vals) = a.row(i);
        let mut sum = NeumaierSum::default();
        let mut has_diag = false;
        for (&j, &v) in cols.iter().zip(vals) {
            sum += v;
            if i == j {
                has_diag = true;
                if !(v > 0.0) {
                    sign_pattern = false;
                    failures.push(format!("P2: a_{i}{i} = {v}"));
                }
            } else {
                if v > 0.0 {
                    sign_pattern = false;
                    failures.push(format!("P2: a_{i}{j} = {v}"));
                }
                let mirror = a.row(j);
                match mirror.0.binary_search(&i) {
                    Ok(k) => {
                        let w = mirror.1[k];
                        if (v - w).abs() > 1e-12 * v.abs().max(w.abs()) {
                            symmetric = false;
                            failures.push(format!("symmetry: a_{i}{j} = {v}, a_{j}{i} = {w}"));
                        }
                    }
                    Err(_) => {
                        symmetric = false;
                        failures.push(format!("symmetry: a_{j}{i} missing"));
                    }
                }
            }
        }
        if !has_diag {
            sign_pattern = false;
            failures.push(format!("P2: a_{i}{i} missing"));
        }
        let s = sum.value();
        if !(s >= 0.0) {
            row_sums = false;
            failures.push(format!("P3: row {i} sums to {s}"));
        }
    }

    PropertyReport {
        positive_mass,
        sign_pattern,
        row_sums,
        symmetric,
        failures,
    }
}

/// Exact row sums (compensated) of the stiffness matrix.
pub fn row_sums(sys: &DiscreteSystem) -> Vec<f64> {
    (0..sys.n())
        .map(|i| {
            let mut s = NeumaierSum::default();
            for &v in sys.stiffness().row(i).1 {
                s += v;
            }
            s.value()
        })
        .collect()
}

/// Initial-data families sampled at the nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Profile {
    /// `amplitude * prod_a sin(pi x_a)`.
    Sine { amplitude: f64 },
    /// `amplitude * exp(-|x - c|^2 / width^2)` centred at `(1/2, ..., 1/2)`.
    Bump { amplitude: f64, width: f64 },
    /// The same value at every interior node.
    Constant { value: f64 },
}

impl Profile {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            Profile::Sine { amplitude } => {
                amplitude * x.iter().map(|&xi| (PI * xi).sin()).product::<f64>()
            }
            Profile::Bump { amplitude, width } => {
                let r2: f64 = x.iter().map(|&xi| (xi - 0.5) * (xi - 0.5)).sum();
                amplitude * (-r2 / (width * width)).exp()
            }
            Profile::Constant { value } => value,
        }
    }
}

/// Nodal values `u_k(0) = u_0(x_k)`, all strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialData {
    values: Vec<f64>,
}

impl InitialData {
    pub fn new(values: Vec<f64>) -> Result<Self, DiscretizeError> {
        if let Some((node, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
        {
            return Err(DiscretizeError::NonPositiveProfile { node, value });
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

pub fn sample_initial(
    sys: &DiscreteSystem,
    profile: &Profile,
) -> Result<InitialData, DiscretizeError> {
    if let Profile::Bump { width, .. } = profile {
        if !(*width > 0.0) {
            return Err(DiscretizeError::BadProfile(format!("bump width {width}")));
        }
    }
    InitialData::new(sys.nodes().map(|x| profile.eval(x)).collect())
}

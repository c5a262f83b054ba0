//! Charts, connections and sections.
//!
//! Index convention: the connection form in the working frame `(e_1..e_N)` is
//! `omega[i][j][mu]`, with `nabla_{d/dx^mu} e_j = sum_i omega[i][j][mu] e_i`.
//! For a tangent-bundle connection this is `omega[i][j][mu] = Gamma^i_{mu j}`,
//! the first lower index of the Christoffel symbol being the direction.
//! Curvature acts on fiber components as
//! `R_{mu nu} = d_mu omega_nu - d_nu omega_mu + [omega_mu, omega_nu]`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::exprfield::{EvalError, ScalarField, Tape};
use crate::stencil::{self, Order};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BundleError {
    #[error("invalid chart: {0}")]
    InvalidChart(String),
    #[error("shape mismatch: expected {expected} coefficient fields, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("coefficient field is not defined over the chart coordinates")]
    ChartMismatch,
    #[error("not a tangent-bundle connection: fiber rank {rank}, chart dimension {dim}")]
    NotTangent { rank: usize, dim: usize },
    #[error("point {0:?} lies outside the chart domain")]
    OutsideChart(Vec<f64>),
    #[error("point {0:?} is not a grid node")]
    NotOnGrid(Vec<f64>),
    #[error("grid section undefined at node {0}")]
    Undefined(usize),
    #[error("no finite-difference stencil at node {index} along axis {axis}")]
    NoStencil { index: usize, axis: usize },
    #[error("gauge matrix and its claimed inverse disagree (residual {0:.3e})")]
    GaugeNotInverse(f64),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T, E = BundleError> = std::result::Result<T, E>;

/// A coordinate box with a uniform lattice including the endpoints.
/// Nodes are numbered row-major: the last coordinate varies fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Chart {
    coords: Arc<[String]>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    resolution: Vec<usize>,
}

impl Chart {
    pub fn new(
        coords: &[impl AsRef<str>],
        lower: Vec<f64>,
        upper: Vec<f64>,
        resolution: Vec<usize>,
    ) -> Result<Self> {
        let m = coords.len();
        if m == 0 {
            return Err(BundleError::InvalidChart("no coordinates".into()));
        }
        if lower.len() != m || upper.len() != m || resolution.len() != m {
            return Err(BundleError::InvalidChart(format!(
                "expected {} bounds and resolutions",
                m
            )));
        }
        let names: Vec<String> = coords.iter().map(|c| c.as_ref().to_string()).collect();
        for (k, name) in names.iter().enumerate() {
            if names[..k].contains(name) {
                return Err(BundleError::InvalidChart(format!("duplicate coordinate `{}`", name)));
            }
            if !(lower[k] < upper[k]) {
                return Err(BundleError::InvalidChart(format!(
                    "empty domain for `{}`: [{}, {}]",
                    name, lower[k], upper[k]
                )));
            }
            if resolution[k] < 3 {
                return Err(BundleError::InvalidChart(format!(
                    "`{}` needs at least 3 grid points, got {}",
                    name, resolution[k]
                )));
            }
        }
        Ok(Chart {
            coords: names.into(),
            lower,
            upper,
            resolution,
        })
    }

    pub fn coords(&self) -> &Arc<[String]> {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn resolution(&self) -> &[usize] {
        &self.resolution
    }

    /// Same box, different lattice.
    pub fn with_resolution(&self, resolution: Vec<usize>) -> Result<Self> {
        Chart::new(&self.coords, self.lower.clone(), self.upper.clone(), resolution)
    }

    pub fn spacing(&self, mu: usize) -> f64 {
        (self.upper[mu] - self.lower[mu]) / (self.resolution[mu] - 1) as f64
    }

    pub fn num_points(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn stride(&self, mu: usize) -> usize {
        self.resolution[mu + 1..].iter().product()
    }

    pub fn multi_index(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for mu in (0..self.dim()).rev() {
            out[mu] = idx % self.resolution[mu];
            idx /= self.resolution[mu];
        }
        out
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi
            .iter()
            .zip(&self.resolution)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn coordinate(&self, mu: usize, i: usize) -> f64 {
        if i + 1 == self.resolution[mu] {
            self.upper[mu]
        } else {
            self.lower[mu] + i as f64 * self.spacing(mu)
        }
    }

    pub fn point(&self, idx: usize) -> Vec<f64> {
        self.multi_index(idx)
            .iter()
            .enumerate()
            .map(|(mu, &i)| self.coordinate(mu, i))
            .collect()
    }

    /// Neighbor `delta` steps along axis `mu`, if inside the lattice.
    pub fn step(&self, idx: usize, mu: usize, delta: isize) -> Option<usize> {
        let i = (idx / self.stride(mu)) % self.resolution[mu];
        let j = i as isize + delta;
        if j < 0 || j >= self.resolution[mu] as isize {
            return None;
        }
        Some((idx as isize + delta * self.stride(mu) as isize) as usize)
    }

    /// Position of node `idx` along axis `mu`.
    pub fn axis_position(&self, idx: usize, mu: usize) -> usize {
        (idx / self.stride(mu)) % self.resolution[mu]
    }

    /// Node sharing all coordinates of `idx` except axis `mu`, where it sits at `pos`.
    pub fn on_line(&self, idx: usize, mu: usize, pos: usize) -> usize {
        let cur = self.axis_position(idx, mu);
        idx - cur * self.stride(mu) + pos * self.stride(mu)
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim()
            && p.iter().enumerate().all(|(mu, &x)| {
                let slack = 1e-9 * (self.upper[mu] - self.lower[mu]);
                x >= self.lower[mu] - slack && x <= self.upper[mu] + slack
            })
    }

    /// Nearest lattice node to `p` (which must lie in the domain).
    pub fn nearest_node(&self, p: &[f64]) -> Result<usize> {
        if !self.contains(p) {
            return Err(BundleError::OutsideChart(p.to_vec()));
        }
        let multi: Vec<usize> = p
            .iter()
            .enumerate()
            .map(|(mu, &x)| {
                let t = ((x - self.lower[mu]) / self.spacing(mu)).round();
                (t.max(0.0) as usize).min(self.resolution[mu] - 1)
            })
            .collect();
        Ok(self.flat_index(&multi))
    }

    /// The node at `p`, if `p` is one up to rounding.
    pub fn node_at(&self, p: &[f64]) -> Result<usize> {
        let idx = self.nearest_node(p)?;
        let q = self.point(idx);
        let close = p
            .iter()
            .zip(&q)
            .enumerate()
            .all(|(mu, (a, b))| (a - b).abs() <= 1e-9 * self.spacing(mu));
        if close {
            Ok(idx)
        } else {
            Err(BundleError::NotOnGrid(p.to_vec()))
        }
    }

    /// True if the node is off the boundary in every axis.
    pub fn is_interior(&self, idx: usize) -> bool {
        self.multi_index(idx)
            .iter()
            .zip(&self.resolution)
            .all(|(&i, &n)| i > 0 && i + 1 < n)
    }

    /// All nodes of the 3^m block around `idx` (including itself), clipped to the lattice.
    pub fn neighborhood(&self, idx: usize) -> Vec<usize> {
        let mut out = vec![idx];
        for mu in 0..self.dim() {
            let mut next = Vec::with_capacity(out.len() * 3);
            for &q in &out {
                next.push(q);
                next.extend(self.step(q, mu, -1));
                next.extend(self.step(q, mu, 1));
            }
            out = next;
        }
        out.sort_unstable();
        out
    }

    /// Stencil for d/dx^mu at `idx` restricted to nodes where `valid` holds,
    /// returned as (node, weight) pairs.
    pub fn derivative_stencil(
        &self,
        idx: usize,
        mu: usize,
        order: Order,
        valid: impl Fn(usize) -> bool,
    ) -> Option<Vec<(usize, f64)>> {
        let pos = self.axis_position(idx, mu);
        let s = stencil::derivative(pos, self.resolution[mu], self.spacing(mu), order, |p| {
            valid(self.on_line(idx, mu, p))
        })?;
        Some(
            s.positions
                .iter()
                .map(|&p| self.on_line(idx, mu, p))
                .zip(s.weights)
                .collect(),
        )
    }
}

/// A square matrix of scalar fields, row-major.
#[derive(Clone, Debug)]
pub struct FieldMatrix {
    n: usize,
    entries: Vec<ScalarField>,
}

impl FieldMatrix {
    pub fn new(n: usize, entries: Vec<ScalarField>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(BundleError::Shape {
                expected: n * n,
                got: entries.len(),
            });
        }
        Ok(FieldMatrix { n, entries })
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> ScalarField) -> Self {
        FieldMatrix {
            n,
            entries: (0..n * n).map(|k| f(k / n, k % n)).collect(),
        }
    }

    pub fn identity(n: usize, coords: Arc<[String]>) -> Self {
        Self::from_fn(n, |i, j| {
            ScalarField::constant(if i == j { 1.0 } else { 0.0 }, coords.clone())
        })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> &ScalarField {
        &self.entries[i * self.n + j]
    }

    pub fn mul(&self, other: &FieldMatrix) -> FieldMatrix {
        assert_eq!(self.n, other.n);
        FieldMatrix::from_fn(self.n, |i, j| {
            let mut acc: Option<ScalarField> = None;
            for k in 0..self.n {
                let term = self.get(i, k) * other.get(k, j);
                acc = Some(match acc {
                    Some(a) => a + term,
                    None => term,
                });
            }
            acc.expect("non-empty matrix")
        })
    }

    pub fn add(&self, other: &FieldMatrix) -> FieldMatrix {
        FieldMatrix::from_fn(self.n, |i, j| self.get(i, j) + other.get(i, j))
    }

    pub fn derivative(&self, mu: usize) -> FieldMatrix {
        FieldMatrix::from_fn(self.n, |i, j| self.get(i, j).derivative(mu))
    }

    pub fn eval(&self, p: &[f64]) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                m[(i, j)] = self.get(i, j).eval(p)?;
            }
        }
        Ok(m)
    }
}

/// Curvature `R(d_mu, d_nu)` acting on fiber components, `mu < nu`.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvatureSlice {
    pub mu: usize,
    pub nu: usize,
    pub matrix: DMatrix<f64>,
}

/// A connection on a rank-N bundle over a chart, in a fixed working frame.
#[derive(Clone, Debug)]
pub struct Connection {
    chart: Chart,
    rank: usize,
    // omega[(i*N + j)*m + mu]
    omega: Vec<ScalarField>,
    omega_tape: Arc<Tape>,
    // omega entries, then d/dx^nu omega[i][j][mu] at ((i*N + j)*m + mu)*m + nu
    full_tape: Arc<Tape>,
}

impl Connection {
    /// `omega` is indexed `[(i*N + j)*m + mu]`.
    pub fn new(chart: Chart, rank: usize, omega: Vec<ScalarField>) -> Result<Self> {
        let m = chart.dim();
        if omega.len() != rank * rank * m {
            return Err(BundleError::Shape {
                expected: rank * rank * m,
                got: omega.len(),
            });
        }
        if omega.iter().any(|f| f.coords() != chart.coords()) {
            return Err(BundleError::ChartMismatch);
        }
        let d_omega: Vec<ScalarField> = omega
            .iter()
            .flat_map(|f| (0..m).map(move |nu| f.derivative(nu)))
            .collect();
        let omega_tape = Arc::new(Tape::new(&omega));
        let all: Vec<ScalarField> = omega.iter().chain(&d_omega).cloned().collect();
        let full_tape = Arc::new(Tape::new(&all));
        Ok(Connection {
            chart,
            rank,
            omega,
            omega_tape,
            full_tape,
        })
    }

    pub fn from_fn(
        chart: Chart,
        rank: usize,
        f: impl Fn(usize, usize, usize) -> ScalarField,
    ) -> Result<Self> {
        let m = chart.dim();
        let omega = (0..rank * rank * m)
            .map(|k| f(k / (rank * m), (k / m) % rank, k % m))
            .collect();
        Self::new(chart, rank, omega)
    }

    /// Connection form identically zero.
    pub fn trivial(chart: Chart, rank: usize) -> Self {
        let coords = chart.coords().clone();
        Self::from_fn(chart, rank, |_, _, _| ScalarField::zero(coords.clone()))
            .expect("consistent by construction")
    }

    pub fn chart(&self) -> &Chart {
        &self.chart
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dim(&self) -> usize {
        self.chart.dim()
    }

    pub fn omega(&self, i: usize, j: usize, mu: usize) -> &ScalarField {
        &self.omega[(i * self.rank + j) * self.dim() + mu]
    }

    /// Same coefficients over a different lattice or box with the same coordinates.
    pub fn with_chart(&self, chart: Chart) -> Result<Self> {
        if chart.coords() != self.chart.coords() {
            return Err(BundleError::ChartMismatch);
        }
        Ok(Connection {
            chart,
            ..self.clone()
        })
    }

    fn unpack_omega(&self, values: &[f64]) -> Vec<DMatrix<f64>> {
        let (n, m) = (self.rank, self.dim());
        (0..m)
            .map(|mu| DMatrix::from_fn(n, n, |i, j| values[(i * n + j) * m + mu]))
            .collect()
    }

    /// `omega_mu` at `p`, one N x N matrix per coordinate direction.
    pub fn omega_at(&self, p: &[f64]) -> Result<Vec<DMatrix<f64>>> {
        Ok(self.unpack_omega(&self.omega_tape.eval(p)?))
    }

    /// `omega_mu(v)` for a tangent vector `v`.
    pub fn omega_along(&self, p: &[f64], v: &[f64]) -> Result<DMatrix<f64>> {
        let w = self.omega_at(p)?;
        let n = self.rank;
        Ok(w.iter()
            .zip(v)
            .fold(DMatrix::zeros(n, n), |acc, (w_mu, &v_mu)| acc + w_mu * v_mu))
    }

    /// `omega` and `[mu][nu]` = d/dx^nu omega_mu at `p`.
    fn omega_and_derivative_at(&self, p: &[f64]) -> Result<(Vec<DMatrix<f64>>, Vec<Vec<DMatrix<f64>>>)> {
        let (n, m) = (self.rank, self.dim());
        let values = self.full_tape.eval(p)?;
        let (w, dw) = values.split_at(self.omega.len());
        let d = (0..m)
            .map(|mu| {
                (0..m)
                    .map(|nu| DMatrix::from_fn(n, n, |i, j| dw[((i * n + j) * m + mu) * m + nu]))
                    .collect()
            })
            .collect();
        Ok((self.unpack_omega(w), d))
    }

    fn check_inside(&self, p: &[f64]) -> Result<()> {
        if self.chart.contains(p) {
            Ok(())
        } else {
            Err(BundleError::OutsideChart(p.to_vec()))
        }
    }

    /// `R(d_mu, d_nu)` at `p` for any ordered pair.
    pub fn curvature(&self, mu: usize, nu: usize, p: &[f64]) -> Result<DMatrix<f64>> {
        self.check_inside(p)?;
        let (w, dw) = self.omega_and_derivative_at(p)?;
        Ok(curvature_from(&w, &dw, mu, nu))
    }

    /// All curvature slices `R_{mu nu}`, `mu < nu`, at `p`, with exact derivatives.
    pub fn curvature_operators(&self, p: &[f64]) -> Result<Vec<CurvatureSlice>> {
        self.check_inside(p)?;
        let (w, dw) = self.omega_and_derivative_at(p)?;
        let m = self.dim();
        let mut out = Vec::with_capacity(m * (m - 1) / 2);
        for mu in 0..m {
            for nu in mu + 1..m {
                out.push(CurvatureSlice {
                    mu,
                    nu,
                    matrix: curvature_from(&w, &dw, mu, nu),
                });
            }
        }
        Ok(out)
    }

    /// Size of the individual terms entering the curvature at `p`; used to
    /// separate genuine curvature from cancellation round-off.
    pub fn curvature_scale(&self, p: &[f64]) -> Result<f64> {
        let (w, dw) = self.omega_and_derivative_at(p)?;
        let mut scale: f64 = 0.0;
        for mu in 0..self.dim() {
            for nu in 0..self.dim() {
                scale = scale.max(dw[mu][nu].norm() + w[mu].norm() * w[nu].norm());
            }
        }
        Ok(scale)
    }

    /// Frame change `e'_j = sum_i e_i g^i_j`:
    /// `omega' = g^-1 omega g + g^-1 dg`. The caller supplies `g^-1`; it is
    /// checked at the lattice corners and centre.
    pub fn gauge_transform(&self, g: &FieldMatrix, g_inv: &FieldMatrix) -> Result<Connection> {
        let n = self.rank;
        if g.size() != n || g_inv.size() != n {
            return Err(BundleError::Shape {
                expected: n * n,
                got: g.size() * g.size(),
            });
        }
        let probes = [0, self.chart.num_points() / 2, self.chart.num_points() - 1];
        for idx in probes {
            let p = self.chart.point(idx);
            let residual = (g.eval(&p)? * g_inv.eval(&p)? - DMatrix::identity(n, n)).norm();
            if residual > 1e-9 {
                return Err(BundleError::GaugeNotInverse(residual));
            }
        }
        let m = self.dim();
        let mut blocks = Vec::with_capacity(m);
        for mu in 0..m {
            let w = FieldMatrix::from_fn(n, |i, j| self.omega(i, j, mu).clone());
            blocks.push(g_inv.mul(&w.mul(g)).add(&g_inv.mul(&g.derivative(mu))));
        }
        Connection::from_fn(self.chart.clone(), n, |i, j, mu| blocks[mu].get(i, j).clone())
    }
}

fn curvature_from(
    w: &[DMatrix<f64>],
    dw: &[Vec<DMatrix<f64>>],
    mu: usize,
    nu: usize,
) -> DMatrix<f64> {
    &dw[nu][mu] - &dw[mu][nu] + &w[mu] * &w[nu] - &w[nu] * &w[mu]
}

/// Tangent-bundle connection from Christoffel symbols indexed
/// `gamma[(i*m + mu)*m + j] = Gamma^i_{mu j}`.
pub fn connection_from_christoffel(gamma: Vec<ScalarField>, chart: Chart) -> Result<Connection> {
    let m = chart.dim();
    if gamma.len() != m * m * m {
        return Err(BundleError::Shape {
            expected: m * m * m,
            got: gamma.len(),
        });
    }
    if gamma.iter().any(|f| f.coords() != chart.coords()) {
        return Err(BundleError::ChartMismatch);
    }
    Connection::from_fn(chart, m, |i, j, mu| gamma[(i * m + mu) * m + j].clone())
}

/// Basis of symmetric 2-tensors: diagonal `dx^i (x) dx^i` first, then
/// `dx^i (x) dx^j + dx^j (x) dx^i` for `i < j` in lexicographic order.
pub fn sym2_pairs(m: usize) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = (0..m).map(|i| (i, i)).collect();
    for i in 0..m {
        for j in i + 1..m {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Components in the `sym2_pairs` basis to the symmetric matrix `h_ij`.
pub fn sym2_to_matrix(c: &DVector<f64>, m: usize) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(m, m);
    for (a, &(i, j)) in sym2_pairs(m).iter().enumerate() {
        h[(i, j)] = c[a];
        h[(j, i)] = c[a];
    }
    h
}

pub fn matrix_to_sym2(h: &DMatrix<f64>) -> DVector<f64> {
    let m = h.nrows();
    DVector::from_iterator(
        m * (m + 1) / 2,
        sym2_pairs(m).iter().map(|&(i, j)| 0.5 * (h[(i, j)] + h[(j, i)])),
    )
}

/// Induced connection on symmetric 2-tensors:
/// `(nabla_mu h)_ij = d_mu h_ij - Gamma^k_{mu i} h_kj - Gamma^k_{mu j} h_ik`.
pub fn induce_sym2(tm: &Connection) -> Result<Connection> {
    let m = tm.dim();
    if tm.rank() != m {
        return Err(BundleError::NotTangent {
            rank: tm.rank(),
            dim: m,
        });
    }
    let pairs = sym2_pairs(m);
    let coords = tm.chart().coords().clone();
    // basis tensor b has entries (k,l) = 1 for {k,l} = pairs[b]
    let e = |b: usize, k: usize, l: usize| {
        let (p, q) = pairs[b];
        (k == p && l == q) || (k == q && l == p)
    };
    Connection::from_fn(tm.chart().clone(), pairs.len(), |a, b, mu| {
        let (i, j) = pairs[a];
        let mut acc = ScalarField::zero(coords.clone());
        for k in 0..m {
            // Gamma^k_{mu i} = omega[k][i][mu]
            if e(b, k, j) {
                acc = &acc - tm.omega(k, i, mu);
            }
            if e(b, i, k) {
                acc = &acc - tm.omega(k, j, mu);
            }
        }
        acc
    })
}

/// Where a covariant derivative is evaluated.
#[derive(Clone, Copy, Debug)]
pub enum Sample<'a> {
    Point(&'a [f64]),
    Node(usize),
}

/// Grid values of a section; nodes outside `defined` carry no value.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSection {
    chart: Chart,
    rank: usize,
    values: Vec<f64>,
    defined: Vec<bool>,
}

impl GridSection {
    pub fn new(chart: Chart, rank: usize, values: Vec<Option<DVector<f64>>>) -> Self {
        assert_eq!(values.len(), chart.num_points());
        let mut flat = vec![f64::NAN; values.len() * rank];
        let mut defined = vec![false; values.len()];
        for (idx, v) in values.into_iter().enumerate() {
            if let Some(v) = v {
                assert_eq!(v.len(), rank);
                flat[idx * rank..(idx + 1) * rank].copy_from_slice(v.as_slice());
                defined[idx] = true;
            }
        }
        GridSection {
            chart,
            rank,
            values: flat,
            defined,
        }
    }

    pub fn chart(&self) -> &Chart {
        &self.chart
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn is_defined(&self, idx: usize) -> bool {
        self.defined[idx]
    }

    pub fn value(&self, idx: usize) -> Option<DVector<f64>> {
        self.defined[idx]
            .then(|| DVector::from_column_slice(&self.values[idx * self.rank..(idx + 1) * self.rank]))
    }
}

/// A local section, either closed-form or sampled on a lattice.
#[derive(Clone, Debug)]
pub enum SectionField {
    Expr(Vec<ScalarField>),
    Grid(GridSection),
}

impl SectionField {
    pub fn rank(&self) -> usize {
        match self {
            SectionField::Expr(c) => c.len(),
            SectionField::Grid(g) => g.rank,
        }
    }

    pub fn value_at(&self, chart: &Chart, at: Sample<'_>) -> Result<DVector<f64>> {
        match (self, at) {
            (SectionField::Expr(c), Sample::Point(p)) => eval_all(c, p),
            (SectionField::Expr(c), Sample::Node(idx)) => eval_all(c, &chart.point(idx)),
            (SectionField::Grid(g), Sample::Node(idx)) => {
                g.value(idx).ok_or(BundleError::Undefined(idx))
            }
            (SectionField::Grid(g), Sample::Point(p)) => {
                let idx = g.chart.node_at(p)?;
                g.value(idx).ok_or(BundleError::Undefined(idx))
            }
        }
    }
}

fn eval_all(c: &[ScalarField], p: &[f64]) -> Result<DVector<f64>> {
    let mut v = DVector::zeros(c.len());
    for (i, f) in c.iter().enumerate() {
        v[i] = f.eval(p)?;
    }
    Ok(v)
}

/// Components `(nabla_mu s)^i = d_mu s^i + omega[i][j][mu] s^j` as an N x m matrix.
/// Closed-form sections use exact derivatives; grid sections use lattice
/// differences over defined nodes.
pub fn covariant_derivative(
    conn: &Connection,
    s: &SectionField,
    at: Sample<'_>,
) -> Result<DMatrix<f64>> {
    let (n, m) = (conn.rank(), conn.dim());
    assert_eq!(s.rank(), n, "section rank differs from fiber rank");
    let chart = conn.chart();
    let (p, node) = match at {
        Sample::Point(p) => (p.to_vec(), None),
        Sample::Node(idx) => (chart.point(idx), Some(idx)),
    };
    let w = conn.omega_at(&p)?;
    let value = s.value_at(chart, at)?;
    let mut out = DMatrix::zeros(n, m);
    match s {
        SectionField::Expr(c) => {
            for mu in 0..m {
                for (i, f) in c.iter().enumerate() {
                    out[(i, mu)] = f.derivative(mu).eval(&p)?;
                }
            }
        }
        SectionField::Grid(g) => {
            let idx = match node {
                Some(idx) => idx,
                None => g.chart.node_at(&p)?,
            };
            for mu in 0..m {
                let st = chart
                    .derivative_stencil(idx, mu, Order::Fourth, |q| g.defined[q])
                    .or_else(|| chart.derivative_stencil(idx, mu, Order::Second, |q| g.defined[q]))
                    .ok_or(BundleError::NoStencil { index: idx, axis: mu })?;
                for (q, wgt) in st {
                    for i in 0..n {
                        out[(i, mu)] += wgt * g.values[q * n + i];
                    }
                }
            }
        }
    }
    for mu in 0..m {
        let col = &w[mu] * &value;
        for i in 0..n {
            out[(i, mu)] += col[i];
        }
    }
    Ok(out)
}

/// `nabla_mu s` of a closed-form section, as a closed-form section.
pub fn covariant_derivative_field(
    conn: &Connection,
    s: &[ScalarField],
    mu: usize,
) -> Vec<ScalarField> {
    let n = conn.rank();
    assert_eq!(s.len(), n);
    (0..n)
        .map(|i| {
            let mut acc = s[i].derivative(mu);
            for (j, sj) in s.iter().enumerate() {
                acc = acc + conn.omega(i, j, mu) * sj;
            }
            acc
        })
        .collect()
}

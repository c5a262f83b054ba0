//! Parallel sections of the flat limit subbundle.
//!
//! In a frame `(X_1..X_n, Y_1..)` whose first `n` vectors span the limit
//! subbundle, the connection form is block upper-triangular with top-left
//! block `phi`, and `phi` is flat. Solving `dA = -phi A`, `A(x0) = I` then
//! gives parallel sections `X A c` for every `c`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::bundle::{BundleError, Chart, Connection, GridSection, Sample, SectionField};
use crate::flag::{self, FlagError, Subspace, SubbundleField};
use crate::linalg;
use crate::stencil::{self, Order};

/// Lower-left blocks below this norm are always accepted.
pub const TRIANGULAR_TOL: f64 = 1e-8;
/// Largest distance of a base vector from the limit fiber.
pub const MEMBERSHIP_TOL: f64 = 1e-6;
/// RK4 substeps per lattice cell.
pub const SUBSTEPS: usize = 4;

const NOISE_FACTOR: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrobeniusError {
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Flag(#[from] FlagError),
    #[error("base node {0} is not a regular point")]
    IrregularBase(usize),
    #[error("connection is not block-triangular at node {index}: |lower-left| = {norm:.3e} (noise {noise:.3e})")]
    NotTriangular { index: usize, norm: f64, noise: f64 },
    #[error("no adapted frame at node {0}")]
    Undefined(usize),
    #[error("no finite-difference stencil at node {index} along axis {axis}")]
    NoStencil { index: usize, axis: usize },
    #[error("parallel frame became singular at node {index}")]
    Singular { index: usize },
    #[error("vector is {distance:.3e} away from the limit fiber at the base point")]
    NotInLimit { distance: f64 },
    #[error("expected a fiber vector of length {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("axis order must be a permutation of 0..{0}")]
    AxisOrder(usize),
    #[error("transport failed on segment {segment}: {reason}")]
    Transport { segment: usize, reason: String },
}

pub type Result<T, E = FrobeniusError> = std::result::Result<T, E>;

/// A full orthonormal frame per node adapted to the limit subbundle, with the
/// connection form expressed in it.
#[derive(Clone, Debug)]
pub struct AdaptedFrame {
    chart: Chart,
    n: usize,
    base: usize,
    frames: Vec<Option<DMatrix<f64>>>,
    omega: Vec<Option<Vec<DMatrix<f64>>>>,
    lower_left: Vec<Option<(f64, f64)>>,
}

impl AdaptedFrame {
    pub fn chart(&self) -> &Chart {
        &self.chart
    }

    /// Rank of the limit subbundle.
    pub fn rank(&self) -> usize {
        self.n
    }

    pub fn base(&self) -> usize {
        self.base
    }

    /// N x N frame; the first `rank()` columns span the limit fiber.
    pub fn frame(&self, idx: usize) -> Option<&DMatrix<f64>> {
        self.frames[idx].as_ref()
    }

    pub fn sub_frame(&self, idx: usize) -> Option<DMatrix<f64>> {
        self.frame(idx).map(|f| f.columns(0, self.n).into_owned())
    }

    pub fn is_defined(&self, idx: usize) -> bool {
        self.omega[idx].is_some()
    }

    /// Connection matrix along `d/dx^mu` in the adapted frame.
    pub fn omega(&self, idx: usize, mu: usize) -> Option<&DMatrix<f64>> {
        self.omega[idx].as_ref().map(|w| &w[mu])
    }

    /// Top-left n x n block.
    pub fn phi(&self, idx: usize, mu: usize) -> Option<DMatrix<f64>> {
        self.omega(idx, mu).map(|w| w.view((0, 0), (self.n, self.n)).into_owned())
    }

    /// (norm, noise estimate) of the lower-left block, over all directions.
    pub fn lower_left(&self, idx: usize) -> Option<(f64, f64)> {
        self.lower_left[idx]
    }

    pub fn max_lower_left(&self) -> f64 {
        self.lower_left.iter().flatten().map(|l| l.0).fold(0.0, f64::max)
    }
}

fn complement_field(sub: &SubbundleField, frames: &flag::FrameField) -> SubbundleField {
    let fibers = frames
        .frames()
        .iter()
        .map(|f| {
            f.as_ref()
                .map(|x| Subspace::from_orthonormal(linalg::orthonormal_complement(x)))
        })
        .collect();
    SubbundleField::new(sub.chart().clone(), sub.ambient(), fibers)
}

/// Build the adapted frame and check block-triangularity. A lower-left block
/// counts as nonzero when it exceeds both `TRIANGULAR_TOL` and twice its
/// discretization-noise estimate.
pub fn adapted_frame(conn: &Connection, limit: &SubbundleField, x0: &[f64]) -> Result<AdaptedFrame> {
    let adapted = adapted_frame_unchecked(conn, limit, x0)?;
    for (index, ll) in adapted.lower_left.iter().enumerate() {
        if let Some((norm, noise)) = *ll {
            if norm > TRIANGULAR_TOL.max(NOISE_FACTOR * noise) {
                return Err(FrobeniusError::NotTriangular { index, norm, noise });
            }
        }
    }
    Ok(adapted)
}

/// As [`adapted_frame`] without the triangularity check; meant for
/// inspecting subbundles that are not parallel-closed.
pub fn adapted_frame_unchecked(
    conn: &Connection,
    limit: &SubbundleField,
    x0: &[f64],
) -> Result<AdaptedFrame> {
    let chart = conn.chart();
    let base = chart.nearest_node(x0)?;
    if limit.fiber(base).is_none() {
        return Err(FrobeniusError::IrregularBase(base));
    }
    let n = limit.fiber(base).expect("checked").rank();
    let big_n = conn.rank();
    let m = chart.dim();
    let sub = flag::gauge_align(limit, base)?;
    let comp = flag::gauge_align(&complement_field(limit, &sub), base)?;
    let np = chart.num_points();
    let frames: Vec<Option<DMatrix<f64>>> = (0..np)
        .map(|idx| {
            let (x, y) = (sub.frame(idx)?, comp.frame(idx)?);
            let mut f = DMatrix::zeros(big_n, big_n);
            f.columns_mut(0, n).copy_from(x);
            f.columns_mut(n, big_n - n).copy_from(y);
            Some(f)
        })
        .collect();

    let mut omega = vec![None; np];
    let mut lower_left = vec![None; np];
    let defined = |q: usize| frames[q].is_some();
    for idx in 0..np {
        let Some(f) = frames[idx].as_ref() else { continue };
        let p = chart.point(idx);
        let w = conn.omega_at(&p)?;
        let mut blocks = Vec::with_capacity(m);
        let (mut ll_sq, mut noise_sq, mut propagated) = (0.0, 0.0, 0.0);
        let mut ok = true;
        for (mu, w_mu) in w.iter().enumerate() {
            let fine = chart
                .derivative_stencil(idx, mu, Order::Sixth, defined)
                .or_else(|| chart.derivative_stencil(idx, mu, Order::Fourth, defined));
            let coarse = chart.derivative_stencil(idx, mu, Order::Fourth, defined);
            let (Some(fine), Some(coarse)) = (fine, coarse) else {
                ok = false;
                break;
            };
            let diff = |st: &[(usize, f64)]| {
                st.iter().fold(DMatrix::zeros(big_n, big_n), |acc, (q, c)| {
                    acc + frames[*q].as_ref().expect("defined") * *c
                })
            };
            let (d_fine, d_coarse) = (diff(&fine), diff(&coarse));
            // F orthonormal, so F^T dF is skew; keep the skew part only
            let block = linalg::skew(&(f.transpose() * &d_fine)) + f.transpose() * w_mu * f;
            let noise = linalg::skew(&(f.transpose() * (&d_fine - &d_coarse)));
            let rows = big_n - n;
            ll_sq += block.view((n, 0), (rows, n)).norm_squared();
            noise_sq += noise.view((n, 0), (rows, n)).norm_squared();
            // fiber errors e move each frame by at most 2e
            let spread = fine.iter().map(|(q, _)| limit.error(*q)).fold(limit.error(idx), f64::max);
            let weight: f64 = fine.iter().map(|(_, c)| c.abs()).sum();
            propagated += 2.0 * spread * (weight + 2.0 * w_mu.norm());
            blocks.push(block);
        }
        if ok {
            omega[idx] = Some(blocks);
            lower_left[idx] = Some((ll_sq.sqrt(), noise_sq.sqrt() + propagated));
        }
    }
    // the per-node estimate can vanish by accident; use the local max
    let lower_left = (0..np)
        .map(|idx| {
            let (norm, _) = lower_left[idx]?;
            let noise = chart
                .neighborhood(idx)
                .into_iter()
                .filter_map(|q| lower_left[q].map(|l: (f64, f64)| l.1))
                .fold(0.0, f64::max);
            Some((norm, noise))
        })
        .collect();
    Ok(AdaptedFrame {
        chart: chart.clone(),
        n,
        base,
        frames,
        omega,
        lower_left,
    })
}

/// Largest entry of `d phi + phi ^ phi` at `idx`, with `d phi` from lattice
/// differences of `phi`.
pub fn flatness_residual(adapted: &AdaptedFrame, idx: usize) -> Result<f64> {
    let chart = &adapted.chart;
    if !adapted.is_defined(idx) {
        return Err(FrobeniusError::Undefined(idx));
    }
    let m = chart.dim();
    let defined = |q: usize| adapted.is_defined(q);
    let phi = |q: usize, mu: usize| adapted.phi(q, mu).expect("defined");
    let d = |mu: usize, nu: usize| -> Result<DMatrix<f64>> {
        // d/dx^mu of phi_nu
        let st = chart
            .derivative_stencil(idx, mu, Order::Fourth, defined)
            .ok_or(FrobeniusError::NoStencil { index: idx, axis: mu })?;
        Ok(st
            .iter()
            .fold(DMatrix::zeros(adapted.n, adapted.n), |acc, (q, c)| acc + phi(*q, nu) * *c))
    };
    let mut worst: f64 = 0.0;
    for mu in 0..m {
        for nu in mu + 1..m {
            let (a, b) = (phi(idx, mu), phi(idx, nu));
            let r = d(mu, nu)? - d(nu, mu)? + &a * &b - &b * &a;
            worst = worst.max(r.amax());
        }
    }
    Ok(worst)
}

/// Solution of `dA = -phi A`, `A(base) = I`, on the lattice.
#[derive(Clone, Debug)]
pub struct ParallelFrameField {
    chart: Chart,
    base: usize,
    n: usize,
    frames: Vec<Option<DMatrix<f64>>>,
    a: Vec<Option<DMatrix<f64>>>,
}

impl ParallelFrameField {
    pub fn chart(&self) -> &Chart {
        &self.chart
    }

    pub fn base(&self) -> usize {
        self.base
    }

    pub fn rank(&self) -> usize {
        self.n
    }

    pub fn a(&self, idx: usize) -> Option<&DMatrix<f64>> {
        self.a[idx].as_ref()
    }

    /// Limit-subbundle frame at `idx` (N x n).
    pub fn frame(&self, idx: usize) -> Option<&DMatrix<f64>> {
        self.frames[idx].as_ref()
    }

    /// `X A`: columns are parallel sections through the base frame vectors.
    pub fn parallel_frame(&self, idx: usize) -> Option<DMatrix<f64>> {
        Some(self.frame(idx)? * self.a(idx)?)
    }

    pub fn reached(&self) -> usize {
        self.a.iter().flatten().count()
    }
}

fn rk4<F>(y: &DMatrix<f64>, h: f64, f: F) -> DMatrix<f64>
where
    F: Fn(f64, &DMatrix<f64>) -> DMatrix<f64>,
{
    let k1 = f(0.0, y);
    let k2 = f(0.5, &(y + &k1 * (0.5 * h)));
    let k3 = f(0.5, &(y + &k2 * (0.5 * h)));
    let k4 = f(1.0, &(y + &k3 * h));
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Integrate `A` along axis-ordered polylines from the base node, axes taken
/// in `order`. Nodes the sweep cannot reach through defined nodes keep no value.
pub fn integrate_parallel_frame(adapted: &AdaptedFrame, order: &[usize]) -> Result<ParallelFrameField> {
    let chart = &adapted.chart;
    let m = chart.dim();
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..m).collect::<Vec<_>>() {
        return Err(FrobeniusError::AxisOrder(m));
    }
    let np = chart.num_points();
    let n = adapted.n;
    let mut a: Vec<Option<DMatrix<f64>>> = vec![None; np];
    a[adapted.base] = Some(DMatrix::identity(n, n));
    let mut reached = vec![adapted.base];
    for &axis in order {
        let mut next = Vec::new();
        for &start in &reached {
            next.push(start);
            for dir in [1isize, -1] {
                let mut cur = start;
                let mut value = a[start].clone().expect("reached");
                while let Some(nb) = chart.step(cur, axis, dir) {
                    if !adapted.is_defined(nb) {
                        break;
                    }
                    let Some(v) = integrate_cell(adapted, cur, axis, dir, &value) else {
                        break;
                    };
                    value = v;
                    let smallest = value.singular_values().min();
                    if !value.iter().all(|x| x.is_finite()) || smallest < 1e-12 {
                        return Err(FrobeniusError::Singular { index: nb });
                    }
                    a[nb] = Some(value.clone());
                    next.push(nb);
                    cur = nb;
                }
            }
        }
        reached = next;
    }
    Ok(ParallelFrameField {
        chart: chart.clone(),
        base: adapted.base,
        n,
        frames: (0..np).map(|i| adapted.sub_frame(i)).collect(),
        a,
    })
}

fn integrate_cell(
    adapted: &AdaptedFrame,
    from: usize,
    axis: usize,
    dir: isize,
    start: &DMatrix<f64>,
) -> Option<DMatrix<f64>> {
    let chart = &adapted.chart;
    let len = chart.resolution()[axis];
    let pos = chart.axis_position(from, axis) as f64;
    let valid = |p: usize| adapted.is_defined(chart.on_line(from, axis, p));
    let phi_at = |t: f64| -> Option<DMatrix<f64>> {
        let (nodes, weights) = stencil::interpolation(t, len, valid)?;
        Some(nodes.iter().zip(weights).fold(
            DMatrix::zeros(adapted.n, adapted.n),
            |acc, (&p, w)| acc + adapted.phi(chart.on_line(from, axis, p), axis).expect("valid") * w,
        ))
    };
    let dx = dir as f64 * chart.spacing(axis);
    let ds = 1.0 / SUBSTEPS as f64;
    let mut y = start.clone();
    for k in 0..SUBSTEPS {
        let s0 = k as f64 * ds;
        let samples = [
            phi_at(pos + dir as f64 * s0)?,
            phi_at(pos + dir as f64 * (s0 + 0.5 * ds))?,
            phi_at(pos + dir as f64 * (s0 + ds))?,
        ];
        y = rk4(&y, ds, |frac, a| {
            let phi = if frac == 0.0 {
                &samples[0]
            } else if frac == 0.5 {
                &samples[1]
            } else {
                &samples[2]
            };
            -(phi * a) * dx
        });
    }
    Some(y)
}

/// Parallel section through `w` at the base node: `X A c` with `c = X(x0)^T w`.
pub fn make_parallel_section(pf: &ParallelFrameField, w: &DVector<f64>) -> Result<SectionField> {
    let x0 = pf.frame(pf.base).expect("base has a frame");
    if w.len() != x0.nrows() {
        return Err(FrobeniusError::Shape {
            expected: x0.nrows(),
            got: w.len(),
        });
    }
    let distance = linalg::distance_to_span(w, x0);
    if distance > MEMBERSHIP_TOL {
        return Err(FrobeniusError::NotInLimit { distance });
    }
    let c = x0.transpose() * w;
    let values = (0..pf.chart.num_points())
        .map(|idx| pf.parallel_frame(idx).map(|xa| xa * &c))
        .collect();
    Ok(SectionField::Grid(GridSection::new(pf.chart.clone(), x0.nrows(), values)))
}

/// A piecewise-linear path in coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Polyline {
    pub vertices: Vec<Vec<f64>>,
}

impl Polyline {
    pub fn new(vertices: Vec<Vec<f64>>) -> Self {
        Polyline { vertices }
    }

    pub fn is_closed(&self) -> bool {
        match (self.vertices.first(), self.vertices.last()) {
            (Some(a), Some(b)) if self.vertices.len() > 1 => {
                a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
            }
            _ => false,
        }
    }

    /// Axis-ordered path from `from` to `to`: one straight leg per axis of `order`.
    pub fn axis_ordered(from: &[f64], to: &[f64], order: &[usize]) -> Self {
        let mut cur = from.to_vec();
        let mut vertices = vec![cur.clone()];
        for &axis in order {
            if cur[axis] != to[axis] {
                cur[axis] = to[axis];
                vertices.push(cur.clone());
            }
        }
        Polyline { vertices }
    }

    /// Counter-clockwise boundary of the box `[lo, hi]` in axes (0, 1), from `lo`.
    pub fn rectangle(lo: [f64; 2], hi: [f64; 2]) -> Self {
        Polyline {
            vertices: vec![
                vec![lo[0], lo[1]],
                vec![hi[0], lo[1]],
                vec![hi[0], hi[1]],
                vec![lo[0], hi[1]],
                vec![lo[0], lo[1]],
            ],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransportOptions {
    /// Largest RK4 step, in coordinate length.
    pub max_step: f64,
}

impl Default for TransportOptions {
    fn default() -> Self {
        TransportOptions { max_step: 2.5e-3 }
    }
}

/// Solve `dw/dt = -omega(gamma') w` along `path` with the exact connection form.
pub fn parallel_transport(
    conn: &Connection,
    path: &Polyline,
    w0: &DVector<f64>,
    options: TransportOptions,
) -> Result<DVector<f64>> {
    if w0.len() != conn.rank() {
        return Err(FrobeniusError::Shape {
            expected: conn.rank(),
            got: w0.len(),
        });
    }
    let chart = conn.chart();
    for v in &path.vertices {
        if v.len() != chart.dim() || !chart.contains(v) {
            return Err(BundleError::OutsideChart(v.clone()).into());
        }
    }
    let mut w = DMatrix::from_column_slice(w0.len(), 1, w0.as_slice());
    for (segment, pair) in path.vertices.windows(2).enumerate() {
        let (a, b) = (&pair[0], &pair[1]);
        let tangent: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
        let length = tangent.iter().map(|t| t * t).sum::<f64>().sqrt();
        if length == 0.0 {
            continue;
        }
        let steps = (length / options.max_step).ceil().max(1.0) as usize;
        let h = 1.0 / steps as f64;
        let fail = |reason: String| FrobeniusError::Transport { segment, reason };
        for k in 0..steps {
            let t0 = k as f64 * h;
            let at = |frac: f64| -> Result<DMatrix<f64>> {
                let t = t0 + frac * h;
                let p: Vec<f64> = a.iter().zip(&tangent).map(|(x, d)| x + t * d).collect();
                conn.omega_along(&p, &tangent).map_err(|e| fail(e.to_string()))
            };
            let samples = [at(0.0)?, at(0.5)?, at(1.0)?];
            w = rk4(&w, h, |frac, y| {
                let om = if frac == 0.0 {
                    &samples[0]
                } else if frac == 0.5 {
                    &samples[1]
                } else {
                    &samples[2]
                };
                -(om * y)
            });
            if !w.iter().all(|x| x.is_finite()) {
                return Err(fail("non-finite value".into()));
            }
        }
    }
    Ok(w.column(0).into_owned())
}

/// Largest Frobenius norm of the covariant derivative over interior nodes
/// where the section is defined.
pub fn parallelism_residual(conn: &Connection, s: &SectionField) -> Result<f64> {
    let chart = conn.chart();
    let mut worst: f64 = 0.0;
    for idx in 0..chart.num_points() {
        if !chart.is_interior(idx) {
            continue;
        }
        if let SectionField::Grid(g) = s {
            if !g.is_defined(idx) {
                continue;
            }
        }
        match crate::bundle::covariant_derivative(conn, s, Sample::Node(idx)) {
            Ok(d) => worst = worst.max(d.norm()),
            Err(BundleError::NoStencil { .. }) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(worst)
}

//! The derived flag `W ⊇ W(0) ⊇ W(1) ⊇ …` and its stable limit.
//!
//! `V(0)` is the common kernel of the curvature operators. Each `W(i)` keeps
//! `V(i)` only where its rank is locally constant (the lattice stand-in for
//! "spanned by smooth local sections"), and `V(i+1)` is the kernel of the
//! second fundamental form of `W(i)`: the part of `W(i)` whose covariant
//! derivative stays inside `W(i)`.
//!
//! Ranks and regularity are decided on the lattice. The second fundamental
//! form only depends on the derivative of the stage projector, which is
//! gauge-free, so [`derived_flag`] re-evaluates earlier stages off the
//! lattice around each node and differentiates projectors with 8th-order
//! stencils on a fine sub-lattice. Each cut carries a noise estimate (8th-
//! vs 6th-order difference plus the propagated fiber error), and singular
//! values below it count as zero. [`second_fundamental_form`] is the plain
//! lattice version on an aligned frame.

use std::collections::{HashMap, VecDeque};
use std::rc::Rc;

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::bundle::{BundleError, Chart, Connection};
use crate::linalg;
use crate::stencil::{self, Order};

/// Default relative singular-value cutoff.
pub const DEFAULT_TOL_RANK: f64 = 1e-8;
/// Default largest principal angle accepted between successive stages.
pub const DEFAULT_TOL_STAB: f64 = 1e-6;
/// Neighbors whose subspaces are this close to orthogonal cannot be aligned.
pub const ALIGN_MAX_ANGLE: f64 = std::f64::consts::FRAC_PI_2 - 0.1;

// curvature singular values below ROUNDOFF_FACTOR * eps * (term size) are cancellation noise
const ROUNDOFF_FACTOR: f64 = 64.0;
// safety factor on the per-point discretization-noise estimate
const NOISE_FACTOR: f64 = 2.0;

pub const REGULARITY_CAVEAT: &str =
    "regularity is certified only at lattice resolution; rank jumps between nodes are not detected";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlagError {
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("axis {axis} has {points} lattice points; the flag needs at least 5")]
    GridTooCoarse { axis: usize, points: usize },
    #[error("no regular points left at stage {stage}")]
    NoRegularPoints { stage: usize },
    #[error("flag did not stabilize within {iterations} iterations")]
    NotStabilized { iterations: usize },
    #[error("node {0} is not a regular point")]
    Irregular(usize),
    #[error("node {0} lies outside the lattice")]
    OutOfGrid(usize),
    #[error("no finite-difference stencil at node {index} along axis {axis}")]
    NoStencil { index: usize, axis: usize },
}

pub type Result<T, E = FlagError> = std::result::Result<T, E>;

/// A linear subspace of the fiber, stored as an orthonormal basis (N x k).
#[derive(Clone, Debug, PartialEq)]
pub struct Subspace {
    basis: DMatrix<f64>,
}

impl Subspace {
    /// Wrap a basis that is already orthonormal.
    pub fn from_orthonormal(basis: DMatrix<f64>) -> Self {
        debug_assert!(
            (basis.transpose() * &basis - DMatrix::identity(basis.ncols(), basis.ncols())).norm()
                < 1e-10
        );
        Subspace { basis }
    }

    /// Span of the given (independent) columns.
    pub fn span(vectors: &DMatrix<f64>) -> Self {
        Subspace {
            basis: linalg::orthonormalize(vectors),
        }
    }

    pub fn full(n: usize) -> Self {
        Subspace {
            basis: DMatrix::identity(n, n),
        }
    }

    pub fn zero(n: usize) -> Self {
        Subspace {
            basis: DMatrix::zeros(n, 0),
        }
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn ambient(&self) -> usize {
        self.basis.nrows()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn projector(&self) -> DMatrix<f64> {
        &self.basis * self.basis.transpose()
    }

    /// Largest principal angle; `None` when the dimensions differ.
    pub fn angle_to(&self, other: &Subspace) -> Option<f64> {
        (self.rank() == other.rank())
            .then(|| linalg::max_principal_angle(&self.basis, &other.basis))
    }

    /// Largest angle of a vector of `self` from `outer`; zero iff contained.
    pub fn containment_angle(&self, outer: &Subspace) -> f64 {
        linalg::containment_angle(&self.basis, &outer.basis)
    }
}

/// A subspace at each lattice node; `None` marks nodes excluded as irregular.
/// Each node also carries an estimate of the sine error of its fiber.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbundleField {
    chart: Chart,
    ambient: usize,
    fibers: Vec<Option<Subspace>>,
    errors: Vec<f64>,
}

impl SubbundleField {
    /// Fibers taken as exact.
    pub fn new(chart: Chart, ambient: usize, fibers: Vec<Option<Subspace>>) -> Self {
        let errors = vec![0.0; fibers.len()];
        Self::with_errors(chart, ambient, fibers, errors)
    }

    pub fn with_errors(chart: Chart, ambient: usize, fibers: Vec<Option<Subspace>>, errors: Vec<f64>) -> Self {
        assert_eq!(fibers.len(), chart.num_points());
        assert_eq!(errors.len(), fibers.len());
        assert!(fibers.iter().flatten().all(|s| s.ambient() == ambient));
        SubbundleField {
            chart,
            ambient,
            fibers,
            errors,
        }
    }

    /// Estimated largest principal-angle sine between the stored fiber at
    /// `idx` and the exact one.
    pub fn error(&self, idx: usize) -> f64 {
        self.errors[idx]
    }

    pub fn chart(&self) -> &Chart {
        &self.chart
    }

    pub fn ambient(&self) -> usize {
        self.ambient
    }

    pub fn fiber(&self, idx: usize) -> Option<&Subspace> {
        self.fibers[idx].as_ref()
    }

    pub fn fibers(&self) -> &[Option<Subspace>] {
        &self.fibers
    }

    pub fn is_regular(&self, idx: usize) -> bool {
        self.fibers[idx].is_some()
    }

    pub fn regular_mask(&self) -> Vec<bool> {
        self.fibers.iter().map(Option::is_some).collect()
    }

    pub fn regular_count(&self) -> usize {
        self.fibers.iter().flatten().count()
    }

    /// (min, max) rank over regular nodes.
    pub fn rank_range(&self) -> Option<(usize, usize)> {
        let ranks = self.fibers.iter().flatten().map(Subspace::rank);
        ranks.fold(None, |acc, r| match acc {
            None => Some((r, r)),
            Some((lo, hi)) => Some((lo.min(r), hi.max(r))),
        })
    }

    /// Connected components of the regular set under axis adjacency, each
    /// listed in increasing node order; components ordered by first node.
    pub fn regular_components(&self) -> Vec<Vec<usize>> {
        let n = self.fibers.len();
        let mut label = vec![usize::MAX; n];
        let mut out = Vec::new();
        for start in 0..n {
            if !self.is_regular(start) || label[start] != usize::MAX {
                continue;
            }
            let id = out.len();
            let mut members = vec![start];
            label[start] = id;
            let mut queue = VecDeque::from([start]);
            while let Some(q) = queue.pop_front() {
                for mu in 0..self.chart.dim() {
                    for d in [-1, 1] {
                        if let Some(r) = self.chart.step(q, mu, d) {
                            if self.is_regular(r) && label[r] == usize::MAX {
                                label[r] = id;
                                members.push(r);
                                queue.push_back(r);
                            }
                        }
                    }
                }
            }
            members.sort_unstable();
            out.push(members);
        }
        out
    }
}

/// Orthonormal basis of the common kernel of `mats`. Singular values of the
/// stacked matrix at or below `tol * sigma_max` count as zero; if every
/// matrix vanishes the whole fiber is returned.
pub fn common_kernel(mats: &[DMatrix<f64>], tol: f64) -> Subspace {
    common_kernel_with_floor(mats, tol, 0.0)
}

/// As [`common_kernel`], with an absolute floor under the relative cutoff.
pub fn common_kernel_with_floor(mats: &[DMatrix<f64>], tol: f64, floor: f64) -> Subspace {
    assert!(!mats.is_empty(), "need at least one matrix");
    let n = mats[0].ncols();
    let (values, v) = linalg::right_singular(&stack(mats));
    let sigma_max = values.first().copied().unwrap_or(0.0);
    let threshold = (tol * sigma_max).max(floor);
    let rank = values.iter().filter(|&&s| s > threshold).count();
    Subspace::from_orthonormal(v.columns(rank, n - rank).into_owned())
}

/// Exclude nodes whose rank exceeds the minimum rank over their 3^m block.
/// On what remains the rank is locally constant and fibers are kept as-is.
pub fn smooth_refine(v: &SubbundleField) -> SubbundleField {
    let chart = &v.chart;
    let fibers = (0..chart.num_points())
        .map(|idx| {
            let own = v.fiber(idx)?;
            let min = chart
                .neighborhood(idx)
                .into_iter()
                .filter_map(|q| v.fiber(q).map(Subspace::rank))
                .min()
                .unwrap_or(own.rank());
            (own.rank() <= min).then(|| own.clone())
        })
        .collect();
    SubbundleField::with_errors(chart.clone(), v.ambient, fibers, v.errors.clone())
}

/// A frame (N x k, orthonormal columns unless rescaled) at each node.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameField {
    chart: Chart,
    ambient: usize,
    frames: Vec<Option<DMatrix<f64>>>,
    failed: Vec<usize>,
}

impl FrameField {
    pub fn new(chart: Chart, ambient: usize, frames: Vec<Option<DMatrix<f64>>>) -> Self {
        assert_eq!(frames.len(), chart.num_points());
        FrameField {
            chart,
            ambient,
            frames,
            failed: Vec::new(),
        }
    }

    pub fn chart(&self) -> &Chart {
        &self.chart
    }

    pub fn ambient(&self) -> usize {
        self.ambient
    }

    pub fn frame(&self, idx: usize) -> Option<&DMatrix<f64>> {
        self.frames[idx].as_ref()
    }

    pub fn frames(&self) -> &[Option<DMatrix<f64>>] {
        &self.frames
    }

    /// Nodes where alignment with the neighbor failed.
    pub fn failed(&self) -> &[usize] {
        &self.failed
    }

    pub fn defined_count(&self) -> usize {
        self.frames.iter().flatten().count()
    }

    /// Multiply frame column `a` at node `idx` by `scale(idx, a)`.
    pub fn rescaled(&self, scale: impl Fn(usize, usize) -> f64) -> FrameField {
        let frames = self
            .frames
            .iter()
            .enumerate()
            .map(|(idx, f)| {
                f.as_ref().map(|f| {
                    let mut g = f.clone();
                    for a in 0..g.ncols() {
                        g.column_mut(a).scale_mut(scale(idx, a));
                    }
                    g
                })
            })
            .collect();
        FrameField {
            frames,
            ..self.clone()
        }
    }
}

fn canonical_signs(mut basis: DMatrix<f64>) -> DMatrix<f64> {
    for mut col in basis.column_iter_mut() {
        let pivot = col.iter().copied().fold(0.0f64, |acc, x| {
            if x.abs() > acc.abs() + 1e-12 {
                x
            } else {
                acc
            }
        });
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
    basis
}

/// Project `prev` into `target` and re-orthonormalize (polar factor).
/// `None` if the two subspaces are too far apart to align.
fn align_to(prev: &DMatrix<f64>, target: &Subspace) -> Option<DMatrix<f64>> {
    if prev.ncols() != target.rank() {
        return None;
    }
    if target.rank() == 0 {
        return Some(target.basis().clone());
    }
    let m = target.basis().transpose() * prev;
    let min_cos = m.singular_values().min();
    if min_cos < ALIGN_MAX_ANGLE.cos() {
        return None;
    }
    Some(target.basis() * linalg::polar(&m))
}

/// Parent of `idx` on the axis-ordered path from `origin`: step back along the
/// highest axis where the two differ.
fn axis_parent(chart: &Chart, origin: usize, idx: usize) -> Option<usize> {
    let o = chart.multi_index(origin);
    let p = chart.multi_index(idx);
    let mu = (0..chart.dim()).rev().find(|&mu| p[mu] != o[mu])?;
    let delta = if p[mu] > o[mu] { -1 } else { 1 };
    chart.step(idx, mu, delta)
}

/// Frame field varying continuously from `origin`: each node takes its
/// parent's frame projected into the local fiber and re-orthonormalized. The
/// parent is the previous node on the axis-ordered path from `origin` (first
/// coordinate first); nodes that path cannot reach fall back to any aligned
/// axis neighbor, scanning in row-major order.
pub fn gauge_align(v: &SubbundleField, origin: usize) -> Result<FrameField> {
    let chart = v.chart();
    if origin >= chart.num_points() {
        return Err(FlagError::OutOfGrid(origin));
    }
    let start = v.fiber(origin).ok_or(FlagError::Irregular(origin))?;
    let n = chart.num_points();
    let mut frames: Vec<Option<DMatrix<f64>>> = vec![None; n];
    let mut failed = vec![false; n];
    frames[origin] = Some(canonical_signs(start.basis().clone()));

    let o = chart.multi_index(origin);
    let l1 = |idx: usize| -> usize {
        chart
            .multi_index(idx)
            .iter()
            .zip(&o)
            .map(|(&a, &b)| a.abs_diff(b))
            .sum()
    };
    let mut order: Vec<usize> = (0..n).filter(|&i| i != origin && v.is_regular(i)).collect();
    order.sort_by_key(|&i| (l1(i), i));
    for idx in order {
        let Some(parent) = axis_parent(chart, origin, idx) else {
            continue;
        };
        let Some(prev) = frames[parent].as_ref() else {
            continue;
        };
        let fiber = v.fiber(idx).expect("regular");
        match align_to(prev, fiber) {
            Some(f) => frames[idx] = Some(f),
            None => failed[idx] = true,
        }
    }

    loop {
        let mut progress = false;
        for idx in 0..n {
            if frames[idx].is_some() || failed[idx] || !v.is_regular(idx) {
                continue;
            }
            let neighbor = (0..chart.dim())
                .flat_map(|mu| [chart.step(idx, mu, -1), chart.step(idx, mu, 1)])
                .flatten()
                .find(|&q| frames[q].is_some());
            if let Some(q) = neighbor {
                let fiber = v.fiber(idx).expect("regular");
                match align_to(frames[q].as_ref().expect("checked"), fiber) {
                    Some(f) => frames[idx] = Some(f),
                    None => failed[idx] = true,
                }
                progress = true;
            }
        }
        if !progress {
            break;
        }
    }

    Ok(FrameField {
        chart: chart.clone(),
        ambient: v.ambient(),
        frames,
        failed: (0..n).filter(|&i| failed[i]).collect(),
    })
}

/// Second fundamental form of span(frame) at one node, in the frame's basis
/// and an orthonormal basis of the complement.
#[derive(Clone, Debug, PartialEq)]
pub struct SecondFundamentalForm {
    /// ((N-k)*m) x k; column `a` stacks, over directions mu, the complement
    /// components of `nabla_mu X_a`.
    pub matrix: DMatrix<f64>,
    /// Estimated discretization error of `matrix` (Frobenius norm).
    pub noise: f64,
}

/// Evaluate the second fundamental form at `idx` from lattice differences of
/// the frame field plus the connection term.
pub fn second_fundamental_form(
    conn: &Connection,
    frames: &FrameField,
    idx: usize,
) -> Result<SecondFundamentalForm> {
    let chart = conn.chart();
    let x = frames.frame(idx).ok_or(FlagError::Irregular(idx))?;
    let (n, k, m) = (conn.rank(), x.ncols(), conn.dim());
    let q = linalg::orthonormal_complement(&linalg::orthonormalize(x));
    let c = n - k;
    let p = chart.point(idx);
    let omega = conn.omega_at(&p)?;
    let mut matrix = DMatrix::zeros(c * m, k);
    let mut noise_sq = 0.0;
    let mut roundoff = 0.0;
    let defined = |r: usize| frames.frame(r).is_some();
    for mu in 0..m {
        let fine = chart
            .derivative_stencil(idx, mu, Order::Fourth, defined)
            .ok_or(FlagError::NoStencil { index: idx, axis: mu })?;
        let coarse = chart
            .derivative_stencil(idx, mu, Order::Second, defined)
            .ok_or(FlagError::NoStencil { index: idx, axis: mu })?;
        let combine = |st: &[(usize, f64)]| {
            st.iter().fold(DMatrix::zeros(n, k), |acc, (r, w)| {
                acc + frames.frame(*r).expect("defined") * *w
            })
        };
        let d_fine = combine(&fine);
        let d_coarse = combine(&coarse);
        let block = q.transpose() * (&d_fine + &omega[mu] * x);
        matrix.view_mut((mu * c, 0), (c, k)).copy_from(&block);
        noise_sq += (q.transpose() * (&d_fine - &d_coarse)).norm_squared();
        roundoff += x.norm() * (1.0 / chart.spacing(mu) + omega[mu].norm());
    }
    Ok(SecondFundamentalForm {
        matrix,
        noise: noise_sq.sqrt() + ROUNDOFF_FACTOR * f64::EPSILON * roundoff,
    })
}

/// Kernel of the second fundamental form, lifted back to fiber components
/// through `frame`. Singular values at or below
/// `max(tol * sigma_max, noise)` count as zero.
pub fn sff_kernel(sff: &SecondFundamentalForm, frame: &DMatrix<f64>, tol: f64) -> Subspace {
    let k = frame.ncols();
    if k == 0 {
        return Subspace::zero(frame.nrows());
    }
    let (values, v) = linalg::right_singular(&sff.matrix);
    let sigma_max = values.first().copied().unwrap_or(0.0);
    let threshold = (tol * sigma_max).max(NOISE_FACTOR * sff.noise);
    let rank = values.iter().filter(|&&s| s > threshold).count();
    let coeffs = v.columns(rank, k - rank).into_owned();
    Subspace::span(&(frame * coeffs))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FlagOptions {
    /// Relative singular-value cutoff for kernels.
    pub tol_rank: f64,
    /// Principal-angle tolerance for declaring two stages equal.
    pub tol_stab: f64,
}

impl Default for FlagOptions {
    fn default() -> Self {
        FlagOptions {
            tol_rank: DEFAULT_TOL_RANK,
            tol_stab: DEFAULT_TOL_STAB,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageDiagnostics {
    pub stage: usize,
    pub rank_min: usize,
    pub rank_max: usize,
    pub regular_points: usize,
    /// Largest second-fundamental-form norm over the stage this one was cut
    /// from (zero for stage 0).
    pub max_sff: f64,
    /// Largest discretization-noise estimate used for that cut.
    pub max_sff_noise: f64,
}

#[derive(Clone, Debug)]
pub struct FlagReport {
    /// `rank W(i)` (largest over regular nodes) for each computed stage.
    pub ranks: Vec<usize>,
    /// Number of second-fundamental-form cuts performed.
    pub iterations: usize,
    /// `W(0), W(1), …`; the last one is the stable limit.
    pub stages: Vec<SubbundleField>,
    pub diagnostics: Vec<StageDiagnostics>,
    pub options: FlagOptions,
}

impl FlagReport {
    pub fn limit(&self) -> &SubbundleField {
        self.stages.last().expect("at least one stage")
    }

    pub fn rank_final(&self) -> usize {
        *self.ranks.last().expect("at least one stage")
    }

    /// Nodes excluded from the final stage.
    pub fn irregular(&self) -> Vec<usize> {
        let limit = self.limit();
        (0..limit.chart().num_points())
            .filter(|&i| !limit.is_regular(i))
            .collect()
    }

    pub fn regular_fraction(&self) -> f64 {
        let limit = self.limit();
        limit.regular_count() as f64 / limit.chart().num_points() as f64
    }

    pub fn caveat(&self) -> &'static str {
        REGULARITY_CAVEAT
    }
}

fn diagnostics(stage: usize, field: &SubbundleField, max_sff: f64, noise: f64) -> StageDiagnostics {
    let (rank_min, rank_max) = field.rank_range().unwrap_or((0, 0));
    StageDiagnostics {
        stage,
        rank_min,
        rank_max,
        regular_points: field.regular_count(),
        max_sff,
        max_sff_noise: noise,
    }
}

/// Node of a component closest to the lattice centre (ties: lowest index).
fn central_node(chart: &Chart, members: &[usize]) -> usize {
    let centre: Vec<f64> = chart.resolution().iter().map(|&n| (n - 1) as f64 / 2.0).collect();
    let dist = |idx: usize| -> f64 {
        chart
            .multi_index(idx)
            .iter()
            .zip(&centre)
            .map(|(&i, c)| (i as f64 - c).powi(2))
            .sum()
    };
    *members
        .iter()
        .min_by(|&&a, &&b| dist(a).partial_cmp(&dist(b)).unwrap().then(a.cmp(&b)))
        .expect("non-empty component")
}

/// Frames for every regular component, each aligned from its central node.
pub fn align_components(field: &SubbundleField) -> Result<FrameField> {
    let chart = field.chart();
    let mut frames = vec![None; chart.num_points()];
    let mut failed = Vec::new();
    for members in field.regular_components() {
        let aligned = gauge_align(field, central_node(chart, &members))?;
        for &idx in &members {
            frames[idx] = aligned.frames[idx].clone();
        }
        failed.extend_from_slice(&aligned.failed);
    }
    failed.sort_unstable();
    Ok(FrameField {
        chart: chart.clone(),
        ambient: field.ambient(),
        frames,
        failed,
    })
}

/// `V(0)`: curvature kernel at every node.
pub fn curvature_kernel_field(conn: &Connection, tol: f64) -> Result<SubbundleField> {
    let chart = conn.chart();
    let n = conn.rank();
    let mut fibers = Vec::with_capacity(chart.num_points());
    let mut errors = Vec::with_capacity(chart.num_points());
    for idx in 0..chart.num_points() {
        let p = chart.point(idx);
        let slices = conn.curvature_operators(&p)?;
        if slices.is_empty() {
            fibers.push(Some(Subspace::full(n)));
            errors.push(0.0);
            continue;
        }
        let mats: Vec<DMatrix<f64>> = slices.into_iter().map(|s| s.matrix).collect();
        let floor = ROUNDOFF_FACTOR * f64::EPSILON * conn.curvature_scale(&p)?;
        let (values, v) = linalg::right_singular(&stack(&mats));
        let threshold = (tol * values[0]).max(floor);
        let rank = values.iter().filter(|&&s| s > threshold).count();
        fibers.push(Some(Subspace::from_orthonormal(v.columns(rank, n - rank).into_owned())));
        errors.push(if rank > 0 { floor / values[rank - 1] } else { 0.0 });
    }
    Ok(SubbundleField::with_errors(chart.clone(), n, fibers, errors))
}

/// Target number of sub-lattice cells across the chart along each axis.
const SUBLATTICE_CELLS: f64 = 128.0;

/// A flag stage evaluated off the lattice, with its estimated sine error.
struct LocalStage {
    basis: DMatrix<f64>,
    err: f64,
}

/// `alpha` of a stage at one point, realized as `(I - P)(dP + omega) B`
/// stacked over directions. Same singular values as any orthonormal
/// complement representation.
struct LocalAlpha {
    matrix: DMatrix<f64>,
    noise: f64,
}

/// Stages re-evaluated on a sub-lattice refining the lattice by an integer
/// factor per axis. A stage at a sub-lattice point is computed with the ranks
/// of the node it serves, so it is a function of (level, rank prefix, point)
/// and one cache serves every node. Stage subspaces are gauge-free, so their
/// projectors can be differentiated with high-order stencils at a step that
/// does not shrink with the lattice spacing.
struct FineFlag<'a> {
    conn: &'a Connection,
    refine: Vec<usize>,
    delta: Vec<f64>,
    /// Sub-lattice points per axis.
    len: Vec<usize>,
    cache: HashMap<(Vec<usize>, Vec<usize>), Rc<LocalStage>>,
}

impl<'a> FineFlag<'a> {
    fn new(conn: &'a Connection) -> Self {
        let chart = conn.chart();
        let refine: Vec<usize> = chart
            .resolution()
            .iter()
            .map(|&n| ((SUBLATTICE_CELLS / (n - 1) as f64).round() as usize).max(1))
            .collect();
        let delta = (0..chart.dim()).map(|mu| chart.spacing(mu) / refine[mu] as f64).collect();
        let len = (0..chart.dim())
            .map(|mu| (chart.resolution()[mu] - 1) * refine[mu] + 1)
            .collect();
        FineFlag {
            conn,
            refine,
            delta,
            len,
            cache: HashMap::new(),
        }
    }

    /// Sub-lattice coordinates of a lattice node.
    fn fine_index(&self, idx: usize) -> Vec<usize> {
        let multi = self.conn.chart().multi_index(idx);
        multi.iter().zip(&self.refine).map(|(i, r)| i * r).collect()
    }

    fn point(&self, o: &[usize]) -> Vec<f64> {
        let chart = self.conn.chart();
        (0..o.len())
            .map(|mu| (chart.lower()[mu] + o[mu] as f64 * self.delta[mu]).min(chart.upper()[mu]))
            .collect()
    }

    /// Sub-lattice points and weights of the derivative along `mu` at `o`.
    fn stencil(&self, o: &[usize], mu: usize, order: Order) -> Option<Vec<(Vec<usize>, f64)>> {
        let s = stencil::derivative(o[mu], self.len[mu], self.delta[mu], order, |_| true)?;
        Some(
            s.positions
                .into_iter()
                .zip(s.weights)
                .map(|(p, w)| {
                    let mut q = o.to_vec();
                    q[mu] = p;
                    (q, w)
                })
                .collect(),
        )
    }

    /// Stage `ranks.len() - 1` at `o`, with rank `ranks[level]` at each level.
    fn stage(&mut self, ranks: &[usize], o: &[usize]) -> Result<Rc<LocalStage>> {
        let key = (ranks.to_vec(), o.to_vec());
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit.clone());
        }
        let (&rank, outer_ranks) = ranks.split_last().expect("at least one level");
        let stage = if outer_ranks.is_empty() {
            let p = self.point(o);
            let n = self.conn.rank();
            let slices = self.conn.curvature_operators(&p)?;
            if slices.is_empty() || rank == n {
                LocalStage {
                    basis: DMatrix::identity(n, n),
                    err: 0.0,
                }
            } else {
                let mats: Vec<DMatrix<f64>> = slices.into_iter().map(|s| s.matrix).collect();
                let floor = ROUNDOFF_FACTOR * f64::EPSILON * self.conn.curvature_scale(&p)?;
                let (values, v) = linalg::right_singular(&stack(&mats));
                LocalStage {
                    basis: v.columns(n - rank, rank).into_owned(),
                    err: floor / values[n - rank - 1],
                }
            }
        } else {
            let outer = self.stage(outer_ranks, o)?;
            let alpha = self.alpha(outer_ranks, o)?;
            let k = outer.basis.ncols();
            let (values, v) = linalg::right_singular(&alpha.matrix);
            let err = if rank < k { alpha.noise / values[k - rank - 1] } else { 0.0 };
            LocalStage {
                basis: &outer.basis * v.columns(k - rank, rank),
                err: outer.err + err,
            }
        };
        let stage = Rc::new(stage);
        self.cache.insert(key, stage.clone());
        Ok(stage)
    }

    /// `alpha` of stage `ranks.len() - 1` at `o`.
    fn alpha(&mut self, ranks: &[usize], o: &[usize]) -> Result<LocalAlpha> {
        let stage = self.stage(ranks, o)?;
        let b = &stage.basis;
        let (n, k, m) = (self.conn.rank(), b.ncols(), self.conn.dim());
        let mut matrix = DMatrix::zeros(n * m, k);
        if k == 0 {
            return Ok(LocalAlpha { matrix, noise: 0.0 });
        }
        let off = DMatrix::identity(n, n) - b * b.transpose();
        let omega = self.conn.omega_at(&self.point(o))?;
        let mut fd_sq = 0.0;
        let mut propagated = 0.0;
        let mut roundoff = 0.0;
        for mu in 0..m {
            let mut derivative = |order: Order| -> Result<(DMatrix<f64>, f64, f64)> {
                let st = self
                    .stencil(o, mu, order)
                    .ok_or(FlagError::NoStencil { index: 0, axis: mu })?;
                let mut d = DMatrix::zeros(n, n);
                let (mut spread, mut weight) = (0.0f64, 0.0);
                for (q, w) in st {
                    let s = self.stage(ranks, &q)?;
                    d += (&s.basis * s.basis.transpose()) * w;
                    spread = spread.max(s.err);
                    weight += w.abs();
                }
                Ok((d, spread, weight))
            };
            let (d8, spread, weight) = derivative(Order::Eighth)?;
            let (d6, _, _) = derivative(Order::Sixth)?;
            let block = &off * (&d8 + &omega[mu]) * b;
            matrix.view_mut((mu * n, 0), (n, k)).copy_from(&block);
            fd_sq += (&off * (d8 - d6) * b).norm_squared();
            // a sine error e moves the projector by at most 2e
            propagated += 2.0 * spread * (weight + omega[mu].norm());
            roundoff += weight + omega[mu].norm();
        }
        Ok(LocalAlpha {
            matrix,
            noise: fd_sq.sqrt() + propagated + ROUNDOFF_FACTOR * f64::EPSILON * roundoff,
        })
    }
}

fn stack(mats: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n = mats[0].ncols();
    let rows: usize = mats.iter().map(|m| m.nrows()).sum();
    let mut stacked = DMatrix::zeros(rows, n);
    let mut r = 0;
    for m in mats {
        stacked.view_mut((r, 0), (m.nrows(), n)).copy_from(m);
        r += m.nrows();
    }
    stacked
}

/// One cut: `V(i+1) = ker alpha_{W(i)}` at every regular node of `W(i)`,
/// where `stages` is `W(0), …, W(i)`. Returns the new field with the largest
/// alpha norm and noise estimate seen.
///
/// Around each node the earlier stages are re-evaluated off the lattice with
/// that node's ranks, so `alpha` comes from projector derivatives on a fine
/// sub-lattice rather than from lattice differences of an aligned frame.
pub fn sff_kernel_field(
    conn: &Connection,
    stages: &[SubbundleField],
    tol: f64,
) -> Result<(SubbundleField, f64, f64)> {
    let w = stages.last().expect("at least one stage");
    let chart = conn.chart();
    let np = chart.num_points();
    let mut local: Vec<Option<(DMatrix<f64>, LocalAlpha)>> = Vec::with_capacity(np);
    let mut fine = FineFlag::new(conn);
    for idx in 0..np {
        if !w.is_regular(idx) {
            local.push(None);
            continue;
        }
        let ranks: Vec<usize> = stages
            .iter()
            .map(|s| s.fiber(idx).expect("regular stages are nested").rank())
            .collect();
        let at = fine.fine_index(idx);
        let basis = fine.stage(&ranks, &at)?.basis.clone();
        let alpha = fine.alpha(&ranks, &at)?;
        local.push(Some((basis, alpha)));
    }
    let mut max_sff: f64 = 0.0;
    let mut max_noise: f64 = 0.0;
    let mut errors = w.errors.clone();
    let fibers = (0..np)
        .map(|idx| {
            let (basis, alpha) = local[idx].as_ref()?;
            // the estimate can vanish by accident at a node; use the local max
            let noise = chart
                .neighborhood(idx)
                .into_iter()
                .filter_map(|q| local[q].as_ref().map(|(_, a)| a.noise))
                .fold(0.0, f64::max);
            max_sff = max_sff.max(alpha.matrix.norm());
            max_noise = max_noise.max(noise);
            let k = basis.ncols();
            if k == 0 {
                return Some(Subspace::zero(w.ambient()));
            }
            let (values, v) = linalg::right_singular(&alpha.matrix);
            let threshold = (tol * values[0]).max(NOISE_FACTOR * noise);
            let rank = values.iter().filter(|&&s| s > threshold).count();
            if rank > 0 {
                errors[idx] += noise / values[rank - 1];
            }
            Some(Subspace::from_orthonormal(basis * v.columns(rank, k - rank)))
        })
        .collect();
    Ok((SubbundleField::with_errors(chart.clone(), w.ambient(), fibers, errors), max_sff, max_noise))
}

fn stabilized(prev: &SubbundleField, next: &SubbundleField, tol: f64) -> bool {
    (0..prev.chart().num_points()).all(|idx| match (prev.fiber(idx), next.fiber(idx)) {
        (Some(a), Some(b)) => a.angle_to(b).is_some_and(|angle| angle < tol),
        _ => true,
    })
}

/// Run the derived flag to its stable limit.
pub fn derived_flag(conn: &Connection, options: FlagOptions) -> Result<FlagReport> {
    let chart = conn.chart();
    for (axis, &points) in chart.resolution().iter().enumerate() {
        if points < 5 {
            return Err(FlagError::GridTooCoarse { axis, points });
        }
    }
    let v0 = curvature_kernel_field(conn, options.tol_rank)?;
    let w0 = smooth_refine(&v0);
    if w0.regular_count() == 0 {
        return Err(FlagError::NoRegularPoints { stage: 0 });
    }
    let mut diags = vec![diagnostics(0, &w0, 0.0, 0.0)];
    let mut stages = vec![w0];
    let mut iterations = 0;
    loop {
        let current = stages.last().expect("non-empty");
        if current.rank_range().map_or(0, |r| r.1) == 0 {
            break;
        }
        if iterations > conn.rank() {
            return Err(FlagError::NotStabilized { iterations });
        }
        let (v, max_sff, noise) = sff_kernel_field(conn, &stages, options.tol_rank)?;
        let w = smooth_refine(&v);
        iterations += 1;
        if w.regular_count() == 0 {
            return Err(FlagError::NoRegularPoints { stage: iterations });
        }
        let done = stabilized(current, &w, options.tol_stab);
        diags.push(diagnostics(iterations, &w, max_sff, noise));
        stages.push(w);
        if done {
            break;
        }
    }
    let ranks = stages
        .iter()
        .map(|s| s.rank_range().map_or(0, |r| r.1))
        .collect();
    Ok(FlagReport {
        ranks,
        iterations,
        stages,
        diagnostics: diags,
        options,
    })
}

/// True iff node `idx` and its whole 3^m block are regular in the final stage.
pub fn is_regular(report: &FlagReport, idx: usize) -> Result<bool> {
    let limit = report.limit();
    if idx >= limit.chart().num_points() {
        return Err(FlagError::OutOfGrid(idx));
    }
    Ok(limit
        .chart()
        .neighborhood(idx)
        .into_iter()
        .all(|q| limit.is_regular(q)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::induce_sym2;
    use crate::fixtures::*;
    use nalgebra::DVector;
    use std::f64::consts::PI;

    fn line(v: &[f64]) -> Subspace {
        Subspace::span(&DMatrix::from_column_slice(v.len(), 1, v))
    }

    #[test]
    fn zero_matrices_have_full_kernel() {
        let k = common_kernel(&[DMatrix::zeros(4, 4), DMatrix::zeros(4, 4)], 1e-8);
        assert_eq!(k.rank(), 4);
    }

    #[test]
    fn sphere_curvature_kernel() {
        let chart = sphere_chart(9);
        let sym = induce_sym2(&sphere_tangent(&chart)).unwrap();
        let mats: Vec<_> = sym
            .curvature_operators(&[PI / 3.0, 0.5])
            .unwrap()
            .into_iter()
            .map(|s| s.matrix)
            .collect();
        let k = common_kernel(&mats, 1e-8);
        assert_eq!(k.rank(), 1);
        assert!(k.angle_to(&line(&[1.0, 0.75, 0.0])).unwrap() < 1e-12);
    }

    #[test]
    fn derived_curvature_kernel() {
        let conn = derived_rank3(&derived_chart(5));
        let r = conn.curvature(0, 1, &[0.5, 1.0]).unwrap();
        let k = common_kernel(&[r], 1e-8);
        assert_eq!(k.rank(), 2);
        let expected = Subspace::span(&DMatrix::from_column_slice(3, 2, &[0.0, 1.0, 0.0, 0.5, 0.0, 1.0]));
        assert!(k.angle_to(&expected).unwrap() < 1e-12);
    }

    fn jump_field() -> SubbundleField {
        let chart = Chart::new(&["x", "y"], vec![-1.0, 0.0], vec![1.0, 1.0], vec![11, 5]).unwrap();
        let fibers = (0..chart.num_points())
            .map(|idx| {
                let x = chart.point(idx)[0];
                Some(if x < -1e-12 {
                    Subspace::span(&DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]))
                } else {
                    line(&[1.0, 0.0, 0.0])
                })
            })
            .collect();
        SubbundleField::new(chart, 3, fibers)
    }

    fn report_for(field: SubbundleField) -> FlagReport {
        FlagReport {
            ranks: vec![field.rank_range().map_or(0, |r| r.1)],
            iterations: 0,
            stages: vec![field],
            diagnostics: Vec::new(),
            options: FlagOptions::default(),
        }
    }

    #[test]
    fn smooth_refine_excludes_the_jump() {
        let v = jump_field();
        let w = smooth_refine(&v);
        let chart = w.chart().clone();
        for idx in 0..chart.num_points() {
            let i = chart.multi_index(idx)[0];
            assert_eq!(w.is_regular(idx), i != 4, "node {:?}", chart.multi_index(idx));
            if w.is_regular(idx) {
                assert_eq!(w.fiber(idx), v.fiber(idx));
            }
        }
        let report = report_for(w);
        let at = |i: usize| chart.flat_index(&[i, 2]);
        assert!(!is_regular(&report, at(4)).unwrap());
        assert!(!is_regular(&report, at(5)).unwrap());
        assert!(is_regular(&report, at(1)).unwrap());
        assert!(is_regular(&report, at(8)).unwrap());
        assert!(matches!(is_regular(&report, 10_000), Err(FlagError::OutOfGrid(_))));
    }

    #[test]
    fn constant_field_is_unchanged_and_aligns_to_a_constant_frame() {
        let chart = flat_chart(6);
        let s = Subspace::span(&DMatrix::from_column_slice(3, 2, &[1.0, 1.0, 0.0, 0.0, 1.0, 2.0]));
        let v = SubbundleField::new(chart.clone(), 3, vec![Some(s); chart.num_points()]);
        let w = smooth_refine(&v);
        assert_eq!(w, v);
        let frames = gauge_align(&w, 14).unwrap();
        assert!(frames.failed().is_empty());
        let f0 = frames.frame(0).unwrap();
        for f in frames.frames() {
            assert!((f.as_ref().unwrap() - f0).norm() < 1e-13);
        }
    }

    #[test]
    fn rotating_line_aligns_with_a_fixed_sign() {
        let chart = Chart::new(&["x", "y"], vec![0.0, 0.0], vec![3.0, 1.0], vec![61, 5]).unwrap();
        let fibers = (0..chart.num_points())
            .map(|idx| {
                let x = chart.point(idx)[0];
                // deliberately alternate the sign the subspace is stored with
                let s = if idx % 2 == 0 { 1.0 } else { -1.0 };
                Some(line(&[s * x.cos(), s * x.sin()]))
            })
            .collect();
        let v = SubbundleField::new(chart.clone(), 2, fibers);
        let origin = chart.flat_index(&[30, 2]);
        let frames = gauge_align(&v, origin).unwrap();
        let sign = frames.frame(0).unwrap()[(0, 0)].signum();
        for idx in 0..chart.num_points() {
            let x = chart.point(idx)[0];
            let f = frames.frame(idx).unwrap();
            let expected = DVector::from_vec(vec![x.cos(), x.sin()]) * sign;
            assert!((f.column(0) - expected).norm() < 1e-12, "x = {}", x);
        }
    }

    #[test]
    fn orthogonal_neighbors_fail_to_align() {
        let chart = Chart::new(&["x"], vec![0.0], vec![1.0], vec![5]).unwrap();
        let fibers = (0..5)
            .map(|i| Some(if i < 3 { line(&[1.0, 0.0]) } else { line(&[0.0, 1.0]) }))
            .collect();
        let v = SubbundleField::new(chart, 2, fibers);
        let frames = gauge_align(&v, 0).unwrap();
        assert_eq!(frames.failed(), &[3]);
        assert!(frames.frame(3).is_none());
        assert!(matches!(gauge_align(&v, 9), Err(FlagError::OutOfGrid(9))));
    }

    #[test]
    fn flat_parallel_frame_has_zero_sff() {
        let chart = flat_chart(7);
        let conn = Connection::trivial(chart.clone(), 3);
        let x = DMatrix::from_column_slice(3, 1, &[0.6, 0.8, 0.0]);
        let frames = FrameField::new(chart.clone(), 3, vec![Some(x.clone()); chart.num_points()]);
        for idx in [0, 24, 48] {
            let a = second_fundamental_form(&conn, &frames, idx).unwrap();
            assert_eq!(a.matrix.shape(), (4, 1));
            assert!(a.matrix.norm() < 1e-14);
            assert_eq!(sff_kernel(&a, &x, 1e-8).rank(), 1);
        }
    }

    #[test]
    fn derived_sff_and_its_kernel() {
        let chart = derived_chart(21);
        let conn = derived_rank3(&chart);
        let v0 = curvature_kernel_field(&conn, 1e-8).unwrap();
        let frames = align_components(&v0).unwrap();
        let idx = chart.flat_index(&[10, 10]);
        let x = chart.point(idx)[0];
        let a = second_fundamental_form(&conn, &frames, idx).unwrap();
        let frame = frames.frame(idx).unwrap();
        // oracle: in the basis {e2, (x e1 + e3)/|.|} only the second vector has
        // alpha, equal to 2 e1 dx projected off W and divided by the norm
        let norm = (1.0 + x * x).sqrt();
        let u = DVector::from_vec(vec![x, 0.0, 1.0]) / norm;
        let e1_perp = DVector::from_vec(vec![1.0, 0.0, 0.0]) - &u * u[0];
        let expected = 2.0 * e1_perp.norm() / norm;
        let (values, _) = linalg::right_singular(&a.matrix);
        assert!((values[0] - expected).abs() < 1e-4, "{} vs {}", values[0], expected);
        assert!(values[1] < 1e-8);
        let k = sff_kernel(&a, frame, 1e-8);
        assert!(k.angle_to(&line(&[0.0, 1.0, 0.0])).unwrap() < 1e-8);
    }

    #[test]
    fn full_rank_sff_has_trivial_kernel() {
        let frame = DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 1.0]);
        let a = SecondFundamentalForm {
            matrix: DMatrix::from_column_slice(4, 1, &[0.3, -1.2, 0.7, 0.1]),
            noise: 0.0,
        };
        assert_eq!(sff_kernel(&a, &frame, 1e-8).rank(), 0);
        let zero = SecondFundamentalForm {
            matrix: DMatrix::zeros(4, 1),
            noise: 0.0,
        };
        assert_eq!(sff_kernel(&zero, &frame, 1e-8).rank(), 1);
    }

    #[test]
    fn sphere_flag() {
        let chart = sphere_chart(33);
        let sym = induce_sym2(&sphere_tangent(&chart)).unwrap();
        let report = derived_flag(&sym, FlagOptions::default()).unwrap();
        assert_eq!(report.ranks, vec![1, 1]);
        assert_eq!(report.iterations, 1);
        assert!(report.irregular().is_empty());
        let limit = report.limit();
        for idx in (0..chart.num_points()).step_by(7) {
            let th = chart.point(idx)[0];
            let angle = limit.fiber(idx).unwrap().angle_to(&line(&[1.0, th.sin().powi(2), 0.0]));
            assert!(angle.unwrap() < 1e-6);
        }
        assert!(is_regular(&report, chart.flat_index(&[16, 16])).unwrap());
    }

    #[test]
    fn zero_connection_flag() {
        let conn = Connection::trivial(flat_chart(6), 3);
        let report = derived_flag(&conn, FlagOptions::default()).unwrap();
        assert_eq!(report.ranks, vec![3, 3]);
        assert_eq!(report.iterations, 1);
        assert!((0..36).all(|i| is_regular(&report, i).unwrap()));
    }

    #[test]
    fn derived_flag_descends_twice() {
        let chart = derived_chart(25);
        let report = derived_flag(&derived_rank3(&chart), FlagOptions::default()).unwrap();
        assert_eq!(report.ranks, vec![2, 1, 1]);
        assert_eq!(report.iterations, 2);
        let e2 = line(&[0.0, 1.0, 0.0]);
        for f in report.limit().fibers().iter().flatten() {
            assert!(f.angle_to(&e2).unwrap() < 1e-8);
        }
    }

    #[test]
    fn perturbed_sphere_flag_reaches_zero() {
        let chart = sphere_chart(33);
        let sym = induce_sym2(&perturbed_sphere_tangent(&chart)).unwrap();
        let report = derived_flag(&sym, FlagOptions::default()).unwrap();
        assert_eq!(report.ranks, vec![1, 0]);
    }

    #[test]
    fn coarse_grid_is_rejected() {
        let conn = Connection::trivial(flat_chart(4), 2);
        assert!(matches!(
            derived_flag(&conn, FlagOptions::default()),
            Err(FlagError::GridTooCoarse { axis: 0, points: 4 })
        ));
    }
}

//! Reference connections with known flags, shared by tests and benchmarks.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::bundle::{connection_from_christoffel, Chart, Connection, FieldMatrix};
use crate::exprfield::{Func, ScalarField};
use crate::linalg;

/// `theta in [0.3, pi - 0.3]`, `phi in [0, 3]`, `n x n` nodes.
pub fn sphere_chart(n: usize) -> Chart {
    Chart::new(&["theta", "phi"], vec![0.3, 0.0], vec![PI - 0.3, 3.0], vec![n, n])
        .expect("valid chart")
}

fn christoffel(chart: &Chart, entries: &[(usize, usize, usize, &str)]) -> Connection {
    let m = chart.dim();
    let c = chart.coords().clone();
    let mut gamma = vec![ScalarField::zero(c.clone()); m * m * m];
    for &(i, mu, j, src) in entries {
        gamma[(i * m + mu) * m + j] = ScalarField::parse_shared(src, c.clone()).expect("valid expression");
    }
    connection_from_christoffel(gamma, chart.clone()).expect("consistent shapes")
}

/// Levi-Civita connection of the round metric `dtheta^2 + sin^2(theta) dphi^2`.
pub fn sphere_tangent(chart: &Chart) -> Connection {
    christoffel(
        chart,
        &[
            (0, 1, 1, "-sin(theta)*cos(theta)"),
            (1, 0, 1, "cot(theta)"),
            (1, 1, 0, "cot(theta)"),
        ],
    )
}

/// The round-sphere connection with `Gamma^phi_{theta phi}` shifted by `theta`.
/// Not torsion-free and admits no parallel symmetric 2-tensor.
pub fn perturbed_sphere_tangent(chart: &Chart) -> Connection {
    christoffel(
        chart,
        &[
            (0, 1, 1, "-sin(theta)*cos(theta)"),
            (1, 0, 1, "cot(theta) + theta"),
            (1, 1, 0, "cot(theta)"),
        ],
    )
}

/// `x, y in [0.2, 2]`, `n x n` nodes.
pub fn derived_chart(n: usize) -> Chart {
    Chart::new(&["x", "y"], vec![0.2, 0.2], vec![2.0, 2.0], vec![n, n]).expect("valid chart")
}

/// Rank-3 bundle with `nabla e1 = x e2 dy`, `nabla e2 = 0`, `nabla e3 = e1 dx`.
/// Its flag descends 2, 1, 1 with limit `span{e2}`.
pub fn derived_rank3(chart: &Chart) -> Connection {
    let c = chart.coords().clone();
    Connection::from_fn(chart.clone(), 3, |i, j, mu| match (i, j, mu) {
        (1, 0, 1) => ScalarField::coordinate(0, c.clone()),
        (0, 2, 0) => ScalarField::constant(1.0, c.clone()),
        _ => ScalarField::zero(c.clone()),
    })
    .expect("consistent shapes")
}

/// Unit square with `n x n` nodes.
pub fn flat_chart(n: usize) -> Chart {
    Chart::new(&["x", "y"], vec![0.0, 0.0], vec![1.0, 1.0], vec![n, n]).expect("valid chart")
}

/// Smooth random scalar field: an affine part, one product term and one
/// sine wave, coefficients drawn from `uniform` (values in [0, 1)).
///
/// Terms are written in chart-normalized coordinates `(x - lower) / (upper - lower)`,
/// so the variation per lattice cell depends only on the grid size.
pub fn random_field(chart: &Chart, uniform: &mut dyn FnMut() -> f64) -> ScalarField {
    let c = chart.coords().clone();
    let m = chart.dim();
    let mut coef = |scale: f64| scale * (2.0 * uniform() - 1.0);
    let x = |k: usize| {
        let (lo, hi) = (chart.lower()[k], chart.upper()[k]);
        let raw = ScalarField::coordinate(k, c.clone());
        if lo == 0.0 && hi == 1.0 {
            raw
        } else {
            (raw + ScalarField::constant(-lo, c.clone())).scale(1.0 / (hi - lo))
        }
    };
    let mut f = ScalarField::constant(coef(1.0), c.clone());
    for k in 0..m {
        f = f + x(k).scale(coef(1.0));
    }
    f = f + (x(0) * x(m - 1)).scale(coef(0.5));
    let mut phase = ScalarField::constant(coef(PI), c.clone());
    for k in 0..m {
        phase = phase + x(k).scale(coef(2.0));
    }
    f + phase.apply(Func::Sin).scale(coef(1.0))
}

/// Connection whose every entry is an independent [`random_field`].
pub fn random_connection(chart: &Chart, rank: usize, uniform: &mut dyn FnMut() -> f64) -> Connection {
    let m = chart.dim();
    let entries: Vec<ScalarField> = (0..rank * rank * m).map(|_| random_field(chart, uniform)).collect();
    Connection::new(chart.clone(), rank, entries).expect("consistent shapes")
}

/// A pointwise frame change with its exact inverse.
#[derive(Clone, Debug)]
pub struct Gauge {
    pub g: FieldMatrix,
    pub g_inv: FieldMatrix,
}

/// `g = Q D U` with `Q` constant orthogonal, `D = diag(exp p_i)` and `U`
/// unipotent upper-triangular, so that `g^-1 = U^-1 D^-1 Q^T` is exact.
pub fn random_gauge(chart: &Chart, rank: usize, uniform: &mut dyn FnMut() -> f64) -> Gauge {
    let c = chart.coords().clone();
    let n = rank;
    let raw = DMatrix::from_fn(n, n, |_, _| 2.0 * uniform() - 1.0) + DMatrix::identity(n, n);
    let q = linalg::orthonormalize(&raw);
    let konst = |v: f64| ScalarField::constant(v, c.clone());
    let zero = || ScalarField::zero(c.clone());
    let p: Vec<ScalarField> = (0..n).map(|_| random_field(chart, uniform).scale(0.3)).collect();
    let nil: Vec<ScalarField> = (0..n * n)
        .map(|k| if k % n > k / n { random_field(chart, uniform).scale(0.5) } else { zero() })
        .collect();
    let q_m = FieldMatrix::from_fn(n, |i, j| konst(q[(i, j)]));
    let qt_m = FieldMatrix::from_fn(n, |i, j| konst(q[(j, i)]));
    let d = FieldMatrix::from_fn(n, |i, j| if i == j { p[i].apply(Func::Exp) } else { zero() });
    let d_inv = FieldMatrix::from_fn(n, |i, j| if i == j { (-&p[i]).apply(Func::Exp) } else { zero() });
    let id = FieldMatrix::identity(n, c.clone());
    let u = FieldMatrix::from_fn(n, |i, j| if i == j { konst(1.0) } else { nil[i * n + j].clone() });
    // U = I + N with N nilpotent: U^-1 = sum_k (-N)^k
    let neg = FieldMatrix::from_fn(n, |i, j| -&nil[i * n + j]);
    let mut u_inv = id.clone();
    let mut power = id;
    for _ in 1..n {
        power = power.mul(&neg);
        u_inv = u_inv.add(&power);
    }
    Gauge {
        g: q_m.mul(&d).mul(&u),
        g_inv: u_inv.mul(&d_inv).mul(&qt_m),
    }
}

/// A connection with a parallel rank-`k` subbundle, before and after a random
/// gauge. In the planted frame `omega = [[0, B], [0, D]]` so `e_1..e_k` are
/// parallel; the limit of the transformed connection is `g^-1 span(e_1..e_k)`.
#[derive(Clone, Debug)]
pub struct PlantedFlat {
    pub planted: Connection,
    pub connection: Connection,
    pub gauge: Gauge,
    pub flat_rank: usize,
}

pub fn planted_flat(
    chart: &Chart,
    rank: usize,
    k: usize,
    uniform: &mut dyn FnMut() -> f64,
) -> PlantedFlat {
    assert!(k <= rank);
    let c = chart.coords().clone();
    let m = chart.dim();
    let entries: Vec<ScalarField> = (0..rank * rank * m)
        .map(|idx| {
            let j = (idx / m) % rank;
            if j < k {
                ScalarField::zero(c.clone())
            } else {
                random_field(chart, uniform)
            }
        })
        .collect();
    let planted = Connection::new(chart.clone(), rank, entries).expect("consistent shapes");
    let gauge = random_gauge(chart, rank, uniform);
    let connection = planted
        .gauge_transform(&gauge.g, &gauge.g_inv)
        .expect("exact inverse");
    PlantedFlat {
        planted,
        connection,
        gauge,
        flat_rank: k,
    }
}

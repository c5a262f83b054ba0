//! Is a tangent-bundle connection locally the Levi-Civita connection of
//! some metric? Equivalently: does `Sym^2 T*M` carry a parallel section that
//! is positive definite?

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::bundle::{induce_sym2, sym2_to_matrix, BundleError, Connection, SectionField};
use crate::flag::{derived_flag, FlagError, FlagOptions, FlagReport};
use crate::frobenius::{self, FrobeniusError};

/// Samples per dimension of the coefficient space.
pub const SAMPLES_PER_DIM: usize = 4096;
/// A combination is positive definite when its smallest eigenvalue exceeds
/// this fraction of its largest absolute eigenvalue.
pub const PD_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Flag(#[from] FlagError),
    #[error(transparent)]
    Frobenius(#[from] FrobeniusError),
    #[error("base node {0} is not a regular point of the symmetric-tensor flag")]
    IrregularBase(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Metric,
    NotMetric,
    Inconclusive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricOptions {
    pub flag: FlagOptions,
    /// Largest accepted parallelism residual of the witness section.
    pub residual_tol: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            flag: FlagOptions::default(),
            residual_tol: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Witness {
    /// Coefficients on `basis`.
    pub coefficients: DVector<f64>,
    /// The metric at the base node, largest eigenvalue 1.
    pub metric: DMatrix<f64>,
    pub min_eigenvalue: f64,
    /// Parallelism residual of the corresponding section.
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub struct MetricReport {
    pub rank: usize,
    /// Lattice node the analysis is anchored at.
    pub base: usize,
    pub base_point: Vec<f64>,
    /// Parallel sections of `Sym^2`, one per limit basis vector at the base.
    pub sections: Vec<SectionField>,
    /// Those basis vectors as symmetric matrices.
    pub basis: Vec<DMatrix<f64>>,
    pub verdict: Verdict,
    pub witness: Option<Witness>,
    pub detail: String,
    pub flag: FlagReport,
}

fn eigen_range(h: &DMatrix<f64>) -> (f64, f64) {
    let values = SymmetricEigen::new(h.clone()).eigenvalues;
    (values.min(), values.max())
}

fn combine(basis: &[DMatrix<f64>], c: &DVector<f64>) -> DMatrix<f64> {
    basis
        .iter()
        .zip(c.iter())
        .fold(DMatrix::zeros(basis[0].nrows(), basis[0].ncols()), |acc, (t, &ci)| acc + t * ci)
}

fn is_pd(h: &DMatrix<f64>) -> bool {
    let (lo, hi) = eigen_range(h);
    lo > PD_TOL * hi.abs().max(lo.abs())
}

fn radical_inverse(mut i: usize, base: usize) -> f64 {
    let (mut out, mut f) = (0.0, 1.0 / base as f64);
    while i > 0 {
        out += f * (i % base) as f64;
        i /= base;
        f /= base as f64;
    }
    out
}

fn first_primes(k: usize) -> Vec<usize> {
    let mut primes = Vec::with_capacity(k);
    let mut n = 2;
    while primes.len() < k {
        if primes.iter().all(|p| n % p != 0) {
            primes.push(n);
        }
        n += 1;
    }
    primes
}

/// Deterministic, roughly uniform points on the unit sphere of R^k.
fn sphere_samples(k: usize, count: usize) -> Vec<DVector<f64>> {
    use std::f64::consts::PI;
    match k {
        1 => vec![DVector::from_element(1, 1.0), DVector::from_element(1, -1.0)],
        2 => (0..count)
            .map(|j| {
                let a = 2.0 * PI * j as f64 / count as f64;
                DVector::from_vec(vec![a.cos(), a.sin()])
            })
            .collect(),
        3 => {
            let golden = PI * (3.0 - 5f64.sqrt());
            (0..count)
                .map(|j| {
                    let z = 1.0 - 2.0 * (j as f64 + 0.5) / count as f64;
                    let r = (1.0 - z * z).sqrt();
                    let a = golden * j as f64;
                    DVector::from_vec(vec![r * a.cos(), r * a.sin(), z])
                })
                .collect()
        }
        _ => {
            let normal = Normal::standard();
            let primes = first_primes(k);
            (1..=count)
                .map(|j| {
                    let v = DVector::from_fn(k, |a, _| normal.inverse_cdf(radical_inverse(j, primes[a])));
                    let n = v.norm();
                    v / n
                })
                .collect()
        }
    }
}

/// Coefficients `c` with `sum c_a basis_a` positive definite, scaled so the
/// combination's largest eigenvalue is 1. Exact for one tensor; for more,
/// the best of `4096 k` deterministic sphere samples by smallest eigenvalue,
/// polished by a pattern search.
pub fn find_positive_definite(basis: &[DMatrix<f64>]) -> Option<DVector<f64>> {
    let k = basis.len();
    if k == 0 {
        return None;
    }
    let score = |c: &DVector<f64>| eigen_range(&combine(basis, &(c / c.norm()))).0;
    let mut best = sphere_samples(k, SAMPLES_PER_DIM * k)
        .into_iter()
        .map(|c| (score(&c), c))
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .expect("non-empty sample set");

    if k > 1 {
        let mut directions = Vec::new();
        for a in 0..k {
            let e = |i: usize| DVector::from_fn(k, |r, _| if r == i { 1.0 } else { 0.0 });
            directions.push(e(a));
            directions.push(-e(a));
            for b in a + 1..k {
                for (sa, sb) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                    directions.push((e(a) * sa + e(b) * sb) / 2f64.sqrt());
                }
            }
        }
        let mut step = 0.05;
        while step > 1e-10 {
            let improved = directions.iter().find_map(|d| {
                let trial = &best.1 + d * step;
                let trial = &trial / trial.norm();
                let s = score(&trial);
                (s > best.0).then_some((s, trial))
            });
            match improved {
                Some(b) => best = b,
                None => step *= 0.5,
            }
        }
    }

    let c = &best.1 / best.1.norm();
    let h = combine(basis, &c);
    if !is_pd(&h) {
        return None;
    }
    Some(c / eigen_range(&h).1)
}

/// Run the symmetric-tensor flag, build its parallel sections from the node
/// nearest `x0` and look there for a positive-definite combination.
pub fn metric_check(tm: &Connection, x0: &[f64], options: MetricOptions) -> Result<MetricReport, MetricError> {
    let m = tm.dim();
    let sym = induce_sym2(tm)?;
    let chart = sym.chart();
    let flag = derived_flag(&sym, options.flag)?;
    let base = chart.nearest_node(x0)?;
    let base_point = chart.point(base);
    let limit = flag.limit();
    let fiber = limit.fiber(base).ok_or(MetricError::IrregularBase(base))?;
    let rank = fiber.rank();
    let mut report = MetricReport {
        rank,
        base,
        base_point: base_point.clone(),
        sections: Vec::new(),
        basis: Vec::new(),
        verdict: Verdict::NotMetric,
        witness: None,
        detail: String::new(),
        flag: flag.clone(),
    };
    if rank == 0 {
        report.detail = "no nonzero parallel symmetric 2-tensor".into();
        return Ok(report);
    }

    let adapted = frobenius::adapted_frame(&sym, limit, &base_point)?;
    let order: Vec<usize> = (0..m).collect();
    let pf = frobenius::integrate_parallel_frame(&adapted, &order)?;
    let x = pf.frame(base).expect("base frame").clone();
    for a in 0..rank {
        let w = x.column(a).into_owned();
        report.sections.push(frobenius::make_parallel_section(&pf, &w)?);
        report.basis.push(sym2_to_matrix(&w, m));
    }

    let Some(c) = find_positive_definite(&report.basis) else {
        report.verdict = Verdict::Inconclusive;
        report.detail = if rank == 1 {
            "the parallel tensors at the base are indefinite; no Riemannian metric, other signatures not examined".into()
        } else {
            "no positive-definite combination found by the bounded search".into()
        };
        return Ok(report);
    };
    let metric = combine(&report.basis, &c);
    let min_eigenvalue = eigen_range(&metric).0;
    let coeffs = DVector::from_fn(x.nrows(), |i, _| (0..rank).map(|a| x[(i, a)] * c[a]).sum());
    let pd_section = frobenius::make_parallel_section(&pf, &coeffs)?;
    let residual = frobenius::parallelism_residual(&sym, &pd_section)?;
    report.witness = Some(Witness {
        coefficients: c,
        metric,
        min_eigenvalue,
        residual,
    });
    if residual <= options.residual_tol {
        report.verdict = Verdict::Metric;
        report.detail = "positive-definite parallel section found".into();
    } else {
        report.verdict = Verdict::Inconclusive;
        report.detail = format!(
            "positive-definite candidate found but its parallelism residual {residual:.3e} exceeds {:.1e}",
            options.residual_tol
        );
    }
    Ok(report)
}

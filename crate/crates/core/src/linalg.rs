//! Small dense helpers shared by the flag and transport code.

use nalgebra::{DMatrix, DVector};

/// Singular values (descending) and matching right singular vectors (as columns)
/// of `a`. Wide matrices are padded with zero rows so that a full set of right
/// singular vectors is always returned.
pub fn right_singular(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let cols = a.ncols();
    if cols == 0 {
        return (Vec::new(), DMatrix::zeros(0, 0));
    }
    let padded = if a.nrows() < cols {
        let mut p = DMatrix::zeros(cols, cols);
        p.view_mut((0, 0), (a.nrows(), cols)).copy_from(a);
        p
    } else {
        a.clone()
    };
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[j]
            .partial_cmp(&svd.singular_values[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = order.iter().map(|&i| svd.singular_values[i]).collect();
    let mut v = DMatrix::zeros(cols, cols);
    for (dst, &src) in order.iter().enumerate() {
        v.set_column(dst, &v_t.row(src).transpose());
    }
    (values, v)
}

/// Orthonormal basis (columns) of the right null space of `a`; singular values
/// `<= threshold` count as zero.
pub fn null_space(a: &DMatrix<f64>, threshold: f64) -> DMatrix<f64> {
    let (values, v) = right_singular(a);
    let rank = values.iter().filter(|&&s| s > threshold).count();
    v.columns(rank, v.ncols() - rank).into_owned()
}

/// Orthonormal basis of the orthogonal complement of the column span of the
/// orthonormal matrix `basis`.
pub fn orthonormal_complement(basis: &DMatrix<f64>) -> DMatrix<f64> {
    let n = basis.nrows();
    let k = basis.ncols();
    if k == 0 {
        return DMatrix::identity(n, n);
    }
    let (_, v) = right_singular(&basis.transpose());
    v.columns(k, n - k).into_owned()
}

/// Closest matrix with orthonormal columns (polar factor).
///
/// Square nonsingular input uses the Newton iteration `X <- (X + X^-T) / 2`,
/// which is smooth in `m` to rounding; an SVD handles everything else.
pub fn polar(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.ncols() == 0 {
        return m.clone();
    }
    if m.is_square() {
        let mut x = m.clone();
        for _ in 0..100 {
            let Some(inv) = x.clone().try_inverse() else { break };
            let next = (&x + inv.transpose()) * 0.5;
            let step = (&next - &x).norm();
            x = next;
            if step <= 1e-15 * x.norm() {
                return x;
            }
        }
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("left singular vectors requested");
    let v_t = svd.v_t.expect("right singular vectors requested");
    u * v_t
}

/// Largest principal angle between two subspaces of equal dimension.
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.ncols(), b.ncols(), "subspace dimensions differ");
    if a.ncols() == 0 {
        return 0.0;
    }
    containment_angle(a, b)
}

/// Largest angle between a unit vector of span(`inner`) and span(`outer`).
/// Zero iff span(inner) is contained in span(outer). Both orthonormal.
pub fn containment_angle(inner: &DMatrix<f64>, outer: &DMatrix<f64>) -> f64 {
    if inner.ncols() == 0 {
        return 0.0;
    }
    if outer.ncols() == 0 {
        return std::f64::consts::FRAC_PI_2;
    }
    // residual of inner after projection onto outer; its largest singular
    // value is sin of the largest angle
    let residual = inner - outer * (outer.transpose() * inner);
    let s = residual.singular_values().max().clamp(0.0, 1.0);
    s.asin()
}

/// Distance of `v` from span(`basis`), orthonormal basis.
pub fn distance_to_span(v: &DVector<f64>, basis: &DMatrix<f64>) -> f64 {
    if basis.ncols() == 0 {
        return v.norm();
    }
    (v - basis * (basis.transpose() * v)).norm()
}

/// Antisymmetric part of a square matrix.
pub fn skew(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m - m.transpose()) * 0.5
}

/// Orthonormalize the columns of `m` (thin QR with sign fixed so that the
/// diagonal of R is non-negative).
pub fn orthonormalize(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.ncols() == 0 {
        return m.clone();
    }
    let qr = m.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..q.ncols() {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

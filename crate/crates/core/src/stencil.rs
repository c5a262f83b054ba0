//! Finite-difference and interpolation weights on uniform 1-D lattices.
//!
//! Derivative stencils differentiate the Lagrange interpolant through 3, 5, 7
//! or 9 consecutive nodes (orders 2, 4, 6, 8). The centred 5-point stencil equals
//! the Richardson combination `(4 D_h - D_2h) / 3` of two central
//! differences. Comparing two orders gives a per-point estimate of the
//! discretization error of the lower one.

/// A derivative stencil: lattice positions along one axis and weights that
/// already include the `1/h` factor.
#[derive(Clone, Debug, PartialEq)]
pub struct Stencil {
    pub positions: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    Second,
    Fourth,
    Sixth,
    Eighth,
}

impl Order {
    fn width(self) -> usize {
        match self {
            Order::Second => 3,
            Order::Fourth => 5,
            Order::Sixth => 7,
            Order::Eighth => 9,
        }
    }
}

/// Derivative at node `at` of the Lagrange interpolant through nodes
/// `0..width` (unit spacing), as weights on the node values.
fn lagrange_derivative_weights(width: usize, at: usize) -> Vec<f64> {
    let x = |k: usize| k as f64;
    let c = |k: usize| -> f64 { (0..width).filter(|&l| l != k).map(|l| x(k) - x(l)).product() };
    (0..width)
        .map(|j| {
            if j == at {
                (0..width).filter(|&l| l != at).map(|l| 1.0 / (x(at) - x(l))).sum()
            } else {
                c(at) / (c(j) * (x(at) - x(j)))
            }
        })
        .collect()
}

/// First-derivative stencil at `pos` on a line of `len` points with spacing
/// `h`, using only positions for which `valid` holds. Windows closest to
/// centred are preferred; `None` if no window fits.
pub fn derivative(
    pos: usize,
    len: usize,
    h: f64,
    order: Order,
    valid: impl Fn(usize) -> bool,
) -> Option<Stencil> {
    let width = order.width();
    if len < width {
        return None;
    }
    let half = width / 2;
    let mut shifts = vec![0isize];
    for d in 1..=half as isize {
        shifts.push(d);
        shifts.push(-d);
    }
    for shift in shifts {
        let start = pos as isize - half as isize + shift;
        if start < 0 || start as usize + width > len {
            continue;
        }
        let start = start as usize;
        if (start..start + width).all(&valid) {
            return Some(Stencil {
                positions: (start..start + width).collect(),
                weights: lagrange_derivative_weights(width, pos - start)
                    .into_iter()
                    .map(|w| w / h)
                    .collect(),
            });
        }
    }
    None
}

/// Lagrange interpolation weights at fractional lattice coordinate `t`
/// (in units of the spacing) using up to six valid nodes around it, the most
/// centred window of the widest width that fits.
pub fn interpolation(
    t: f64,
    len: usize,
    valid: impl Fn(usize) -> bool,
) -> Option<(Vec<usize>, Vec<f64>)> {
    let cell = (t.floor().max(0.0) as usize).min(len.saturating_sub(2));
    let frac = t - cell as f64;
    if frac.abs() < 1e-12 && valid(cell) {
        return Some((vec![cell], vec![1.0]));
    }
    if (frac - 1.0).abs() < 1e-12 && valid(cell + 1) {
        return Some((vec![cell + 1], vec![1.0]));
    }
    for width in [6usize, 4, 2] {
        let centred = cell as isize - (width as isize / 2 - 1);
        let mut shifts = vec![0isize];
        for d in 1..width as isize / 2 {
            shifts.push(d);
            shifts.push(-d);
        }
        for shift in shifts {
            let start = centred + shift;
            if start < 0 || start as usize + width > len {
                continue;
            }
            let nodes: Vec<usize> = (start as usize..start as usize + width).collect();
            if !nodes.iter().all(|&i| valid(i)) {
                continue;
            }
            let weights = nodes
                .iter()
                .map(|&i| {
                    nodes
                        .iter()
                        .filter(|&&j| j != i)
                        .map(|&j| (t - j as f64) / (i as f64 - j as f64))
                        .product()
                })
                .collect();
            return Some((nodes, weights));
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn apply(s: &Stencil, f: impl Fn(f64) -> f64, h: f64) -> f64 {
        s.positions
            .iter()
            .zip(&s.weights)
            .map(|(&p, w)| w * f(p as f64 * h))
            .sum()
    }

    #[test]
    fn fourth_order_is_exact_on_quartics() {
        let h = 0.1;
        let f = |x: f64| 1.0 + 2.0 * x - x.powi(2) + 0.5 * x.powi(3) + 0.25 * x.powi(4);
        let df = |x: f64| 2.0 - 2.0 * x + 1.5 * x.powi(2) + x.powi(3);
        for pos in 0..8 {
            let s = derivative(pos, 8, h, Order::Fourth, |_| true).unwrap();
            assert!((apply(&s, f, h) - df(pos as f64 * h)).abs() < 1e-11, "pos {}", pos);
        }
    }

    #[test]
    fn sixth_order_is_exact_on_sextics() {
        let h = 0.2;
        let f = |x: f64| x.powi(6) - 2.0 * x.powi(5) + x;
        let df = |x: f64| 6.0 * x.powi(5) - 10.0 * x.powi(4) + 1.0;
        for pos in 0..9 {
            let s = derivative(pos, 9, h, Order::Sixth, |_| true).unwrap();
            assert!((apply(&s, f, h) - df(pos as f64 * h)).abs() < 1e-9, "pos {}", pos);
        }
    }

    #[test]
    fn eighth_order_is_exact_on_octics() {
        let h = 0.1;
        let f = |x: f64| x.powi(8) - x.powi(7) + 3.0 * x.powi(2);
        let df = |x: f64| 8.0 * x.powi(7) - 7.0 * x.powi(6) + 6.0 * x;
        for pos in 0..11 {
            let s = derivative(pos, 11, h, Order::Eighth, |_| true).unwrap();
            assert!((apply(&s, f, h) - df(pos as f64 * h)).abs() < 1e-9, "pos {}", pos);
        }
    }

    #[test]
    fn centred_fourth_order_weights() {
        let s = derivative(2, 5, 1.0, Order::Fourth, |_| true).unwrap();
        let expected = [1.0 / 12.0, -8.0 / 12.0, 0.0, 8.0 / 12.0, -1.0 / 12.0];
        for (w, e) in s.weights.iter().zip(expected) {
            assert!((w - e).abs() < 1e-15);
        }
    }

    #[test]
    fn second_order_is_exact_on_quadratics() {
        let h = 0.25;
        let f = |x: f64| 3.0 - x + 2.0 * x * x;
        for pos in 0..4 {
            let s = derivative(pos, 4, h, Order::Second, |_| true).unwrap();
            assert!((apply(&s, f, h) - (-1.0 + 4.0 * pos as f64 * h)).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_points_shift_the_window() {
        let s = derivative(5, 10, 1.0, Order::Fourth, |i| i != 3).unwrap();
        assert_eq!(s.positions, vec![4, 5, 6, 7, 8]);
        assert!(derivative(5, 10, 1.0, Order::Fourth, |i| i != 4 && i != 6).is_none());
        assert!(derivative(1, 4, 1.0, Order::Fourth, |_| true).is_none());
    }

    #[test]
    fn quintic_interpolation_is_exact_on_quintics() {
        let f = |x: f64| 1.0 - x + 0.3 * x.powi(3) - 0.01 * x.powi(5);
        for t in [0.25, 1.5, 3.75, 6.9] {
            let (nodes, w) = interpolation(t, 8, |_| true).unwrap();
            let v: f64 = nodes.iter().zip(&w).map(|(&i, w)| w * f(i as f64)).sum();
            assert!((v - f(t)).abs() < 1e-10, "t {}", t);
        }
    }
}

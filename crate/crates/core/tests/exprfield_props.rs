use std::sync::Arc;

use bundleflag::exprfield::{Expr, Func, ScalarField};
use proptest::prelude::*;

fn coords() -> Arc<[String]> {
    Arc::from(vec!["x".to_string(), "y".to_string()])
}

/// Expressions that are finite and smooth on the unit square.
fn smooth_expr() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        (-3.0f64..3.0).prop_map(|v| Expr::Num((v * 100.0).round() / 100.0)),
        (0usize..2).prop_map(Expr::Var),
    ];
    leaf.prop_recursive(4, 24, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Add(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Sub(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Mul(Box::new(a), Box::new(b))),
            inner.clone().prop_map(|a| Expr::Neg(Box::new(a))),
            inner.clone().prop_map(|a| Expr::Call(Func::Sin, Box::new(a))),
            inner.clone().prop_map(|a| Expr::Call(Func::Cos, Box::new(a))),
            // denominators bounded away from zero
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Div(
                Box::new(a),
                Box::new(Expr::Add(
                    Box::new(Expr::Num(2.5)),
                    Box::new(Expr::Call(Func::Sin, Box::new(b)))
                ))
            )),
            (inner.clone(), 0u8..4).prop_map(|(a, k)| Expr::Pow(Box::new(a), Box::new(Expr::Num(k as f64)))),
            inner.prop_map(|a| Expr::Call(Func::Exp, Box::new(Expr::Call(Func::Sin, Box::new(a))))),
        ]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn printing_round_trips(e in smooth_expr(), x in 0.0f64..1.0, y in 0.0f64..1.0) {
        let f = ScalarField::from_expr(e, coords());
        let printed = f.to_string();
        let g = ScalarField::parse_shared(&printed, coords()).unwrap();
        let again = g.to_string();
        prop_assert_eq!(ScalarField::parse_shared(&again, coords()).unwrap().to_string(), again.clone());
        let (a, b) = (f.eval(&[x, y]).unwrap(), g.eval(&[x, y]).unwrap());
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{} vs {}", printed, again);
    }

    #[test]
    fn central_differences_converge_at_second_order(e in smooth_expr(), x in 0.2f64..0.8, y in 0.2f64..0.8, mu in 0usize..2) {
        let f = ScalarField::from_expr(e, coords());
        let exact = f.derivative(mu).eval(&[x, y]).unwrap();
        let central = |h: f64| {
            let mut p = [x, y];
            let mut q = [x, y];
            p[mu] += h;
            q[mu] -= h;
            (f.eval(&p).unwrap() - f.eval(&q).unwrap()) / (2.0 * h)
        };
        let h = 1e-2;
        let (e1, e2) = ((central(h) - exact).abs(), (central(h / 2.0) - exact).abs());
        // O(h^2): error bounded by a multiple of h^2 and shrinking ~4x on halving
        let scale = 1.0 + exact.abs() + f.eval(&[x, y]).unwrap().abs();
        prop_assert!(e1 < 1e3 * h * h * scale, "error {} too large", e1);
        if e1 > 1e-8 * scale {
            prop_assert!((3.0..5.0).contains(&(e1 / e2)), "ratio {}", e1 / e2);
        }
    }
}

#[test]
fn derivative_of_printed_derivative_is_stable() {
    let f = ScalarField::parse("x^3*sin(y) - exp(x*y)/(2 + cos(x))", &["x", "y"]).unwrap();
    let d = f.derivative(0).derivative(1);
    let reparsed = ScalarField::parse(&d.to_string(), &["x", "y"]).unwrap();
    for p in [[0.1, 0.2], [0.7, -0.4], [1.3, 2.0]] {
        let (a, b) = (d.eval(&p).unwrap(), reparsed.eval(&p).unwrap());
        assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
    }
}

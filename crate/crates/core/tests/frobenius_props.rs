mod common;

use std::f64::consts::PI;

use bundleflag::bundle::{induce_sym2, Connection, Sample};
use bundleflag::fixtures::*;
use bundleflag::flag::{derived_flag, FlagOptions, FlagReport};
use bundleflag::frobenius::*;
use bundleflag::linalg;
use bundleflag::Chart;
use nalgebra::{DMatrix, DVector};

struct Built {
    chart: Chart,
    conn: Connection,
    report: FlagReport,
    pf: ParallelFrameField,
    pf_swapped: ParallelFrameField,
}

fn build(conn: Connection, x0: &[f64]) -> Built {
    let chart = conn.chart().clone();
    let report = derived_flag(&conn, FlagOptions::default()).unwrap();
    let adapted = adapted_frame(&conn, report.limit(), x0).unwrap();
    let pf = integrate_parallel_frame(&adapted, &[0, 1]).unwrap();
    let pf_swapped = integrate_parallel_frame(&adapted, &[1, 0]).unwrap();
    Built {
        chart,
        conn,
        report,
        pf,
        pf_swapped,
    }
}

fn cases() -> Vec<Built> {
    let mut u = common::uniform(5);
    vec![
        build(induce_sym2(&sphere_tangent(&sphere_chart(64))).unwrap(), &[PI / 2.0, 1.0]),
        build(derived_rank3(&derived_chart(25)), &[1.1, 1.1]),
        build(Connection::trivial(flat_chart(9), 4), &[0.5, 0.5]),
        build(planted_flat(&flat_chart(20), 3, 2, &mut u).connection, &[0.5, 0.5]),
    ]
}

fn sections(b: &Built) -> Vec<Vec<Option<DVector<f64>>>> {
    let x0 = b.pf.frame(b.pf.base()).unwrap();
    (0..x0.ncols())
        .map(|a| {
            let s = make_parallel_section(&b.pf, &x0.column(a).into_owned()).unwrap();
            (0..b.chart.num_points())
                .map(|i| s.value_at(&b.chart, Sample::Node(i)).ok())
                .collect()
        })
        .collect()
}

#[test]
fn frames_do_not_depend_on_the_path() {
    for b in cases() {
        let mut u = common::uniform(17);
        for _ in 0..20 {
            let idx = (u() * b.chart.num_points() as f64) as usize;
            let (a1, a2) = (b.pf.a(idx).unwrap(), b.pf_swapped.a(idx).unwrap());
            assert!((a1 - a2).norm() < 1e-6, "{}", (a1 - a2).norm());
        }
    }
}

#[test]
fn sections_stay_in_the_limit_and_are_independent() {
    for b in cases() {
        let secs = sections(&b);
        assert_eq!(secs.len(), b.report.rank_final());
        for idx in 0..b.chart.num_points() {
            let fiber = b.report.limit().fiber(idx).unwrap();
            let mut stack = DMatrix::zeros(b.conn.rank(), secs.len());
            for (a, s) in secs.iter().enumerate() {
                let v = s[idx].clone().unwrap();
                assert!(linalg::distance_to_span(&v, fiber.basis()) < 1e-6 * v.norm().max(1.0));
                stack.set_column(a, &v);
            }
            if !secs.is_empty() {
                assert!(stack.singular_values().min() > 1e-6);
            }
        }
    }
}

#[test]
fn sections_agree_with_direct_transport() {
    let b = &cases()[0];
    let x0 = b.pf.frame(b.pf.base()).unwrap().column(0).into_owned();
    let s = make_parallel_section(&b.pf, &x0).unwrap();
    let base = b.chart.point(b.pf.base());
    let mut u = common::uniform(23);
    for _ in 0..20 {
        let idx = (u() * b.chart.num_points() as f64) as usize;
        let target = b.chart.point(idx);
        let path = Polyline::axis_ordered(&base, &target, &[0, 1]);
        let moved = parallel_transport(&b.conn, &path, &x0, TransportOptions::default()).unwrap();
        let here = s.value_at(&b.chart, Sample::Node(idx)).unwrap();
        assert!((moved - here).norm() < 1e-8);
    }
}

#[test]
fn rk4_transport_is_fourth_order() {
    let chart = sphere_chart(9);
    let sym = induce_sym2(&sphere_tangent(&chart)).unwrap();
    let path = Polyline::new(vec![vec![0.5, 0.2], vec![1.5, 2.0], vec![2.2, 0.4]]);
    let w = DVector::from_vec(vec![0.2, -0.4, 1.0]);
    let run = |h: f64| parallel_transport(&sym, &path, &w, TransportOptions { max_step: h }).unwrap();
    let reference = run(1e-3);
    let (e1, e2) = ((run(0.1) - &reference).norm(), (run(0.05) - &reference).norm());
    let ratio = e1 / e2;
    assert!((12.0..20.0).contains(&ratio), "ratio {}", ratio);
}

#[test]
fn limit_vectors_have_no_holonomy() {
    let b = &cases()[0];
    let w = b.pf.frame(b.pf.base()).unwrap().column(0).into_owned();
    let c = b.chart.point(b.pf.base());
    let eps = 0.05;
    let lp = Polyline::rectangle([c[0], c[1]], [c[0] + eps, c[1] + eps]);
    let back = parallel_transport(&b.conn, &lp, &w, TransportOptions::default()).unwrap();
    assert!((&back - &w).norm() < 1e-6, "{} {} {:?}", back, w, c);
}

mod common;

use bundleflag::bundle::{induce_sym2, Connection};
use bundleflag::fixtures::*;
use bundleflag::flag::*;
use proptest::prelude::*;

fn fixtures() -> Vec<(&'static str, Connection)> {
    vec![
        ("sphere", induce_sym2(&sphere_tangent(&sphere_chart(33))).unwrap()),
        ("perturbed", induce_sym2(&perturbed_sphere_tangent(&sphere_chart(33))).unwrap()),
        ("derived", derived_rank3(&derived_chart(25))),
        ("flat", Connection::trivial(flat_chart(9), 4)),
    ]
}

fn options(tol_rank: f64) -> FlagOptions {
    FlagOptions {
        tol_rank,
        ..FlagOptions::default()
    }
}

fn assert_nested(report: &FlagReport) {
    for pair in report.stages.windows(2) {
        for idx in 0..pair[1].chart().num_points() {
            if let (Some(outer), Some(inner)) = (pair[0].fiber(idx), pair[1].fiber(idx)) {
                assert!(inner.containment_angle(outer) < 1e-8);
            }
        }
    }
}

#[test]
fn ranks_do_not_depend_on_the_threshold() {
    for (name, conn) in fixtures() {
        let ranks: Vec<Vec<usize>> = [1e-7, 1e-8, 1e-9]
            .iter()
            .map(|&t| derived_flag(&conn, options(t)).unwrap().ranks)
            .collect();
        assert!(ranks.windows(2).all(|w| w[0] == w[1]), "{}: {:?}", name, ranks);
    }
}

#[test]
fn fixture_flags_are_nested_and_monotone() {
    for (name, conn) in fixtures() {
        let report = derived_flag(&conn, FlagOptions::default()).unwrap();
        assert!(report.ranks.windows(2).all(|w| w[0] >= w[1]), "{}", name);
        assert!(report.iterations <= conn.rank() + 1);
        assert_nested(&report);
    }
}

#[test]
fn sff_kernel_ignores_frame_scaling() {
    for (chart, conn) in [
        (derived_chart(25), derived_rank3(&derived_chart(25))),
        (sphere_chart(33), induce_sym2(&sphere_tangent(&sphere_chart(33))).unwrap()),
    ] {
        let v0 = curvature_kernel_field(&conn, 1e-8).unwrap();
        let frames = align_components(&v0).unwrap();
        let scaled = frames.rescaled(|idx, a| {
            let p = chart.point(idx);
            (1.5 + (p[0] + 2.0 * p[1] + a as f64).sin()) * if a % 2 == 0 { 1.0 } else { -0.5 }
        });
        for idx in (0..chart.num_points()).step_by(13) {
            let (Ok(a), Ok(b)) = (
                second_fundamental_form(&conn, &frames, idx),
                second_fundamental_form(&conn, &scaled, idx),
            ) else {
                continue;
            };
            let ka = sff_kernel(&a, frames.frame(idx).unwrap(), 1e-8);
            let kb = sff_kernel(&b, scaled.frame(idx).unwrap(), 1e-8);
            assert_eq!(ka.rank(), kb.rank());
            assert!(ka.angle_to(&kb).unwrap() < 1e-6);
        }
    }
}

#[test]
fn symmetric_tensor_flags_are_gauge_invariant() {
    let chart = sphere_chart(33);
    let sym = induce_sym2(&sphere_tangent(&chart)).unwrap();
    let gauge = random_gauge(&chart, 3, &mut common::uniform(3));
    let gauged = sym.gauge_transform(&gauge.g, &gauge.g_inv).unwrap();
    let (a, b) = (
        derived_flag(&sym, FlagOptions::default()).unwrap(),
        derived_flag(&gauged, FlagOptions::default()).unwrap(),
    );
    assert_eq!(a.ranks, b.ranks);
    for idx in 0..chart.num_points() {
        let g_inv = gauge.g_inv.eval(&chart.point(idx)).unwrap();
        let mapped = Subspace::span(&(g_inv * a.limit().fiber(idx).unwrap().basis()));
        assert!(mapped.angle_to(b.limit().fiber(idx).unwrap()).unwrap() < 1e-6);
    }
}

// the cut 2 -> 1 is decided by alpha, so this exercises projector derivatives
#[test]
fn derived_cut_is_gauge_invariant_on_a_coarse_lattice() {
    let chart = derived_chart(9);
    let conn = derived_rank3(&chart);
    for seed in [5, 6, 7] {
        let gauge = random_gauge(&chart, 3, &mut common::uniform(seed));
        let gauged = conn.gauge_transform(&gauge.g, &gauge.g_inv).unwrap();
        let report = derived_flag(&gauged, FlagOptions::default()).unwrap();
        assert_eq!(report.ranks, vec![2, 1, 1]);
        for idx in 0..chart.num_points() {
            let g_inv = gauge.g_inv.eval(&chart.point(idx)).unwrap();
            let want = Subspace::span(&g_inv.columns(1, 1).into_owned());
            let got = report.limit().fiber(idx).unwrap();
            let angle = got.angle_to(&want).unwrap();
            assert!(angle < 1e-6);
            // the carried estimate bounds the actual error
            assert!(report.limit().error(idx) >= angle);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn planted_subbundles_are_recovered_in_any_gauge(seed in any::<u64>(), n in 2usize..4, k in 1usize..3) {
        let k = k.min(n);
        let chart = flat_chart(16);
        let planted = planted_flat(&chart, n, k, &mut common::uniform(seed));
        let a = derived_flag(&planted.planted, FlagOptions::default()).unwrap();
        let b = derived_flag(&planted.connection, FlagOptions::default()).unwrap();
        prop_assert_eq!(&a.ranks, &b.ranks);
        prop_assert!(a.rank_final() >= k);
        assert_nested(&b);
        for idx in 0..chart.num_points() {
            if let (Some(fa), Some(fb)) = (a.limit().fiber(idx), b.limit().fiber(idx)) {
                let g_inv = planted.gauge.g_inv.eval(&chart.point(idx)).unwrap();
                let mapped = Subspace::span(&(g_inv * fa.basis()));
                prop_assert!(mapped.angle_to(fb).unwrap() < 1e-6);
            }
        }
    }

    #[test]
    fn random_connections_terminate(seed in any::<u64>(), n in 1usize..4) {
        let conn = random_connection(&flat_chart(12), n, &mut common::uniform(seed));
        let report = derived_flag(&conn, FlagOptions::default()).unwrap();
        prop_assert!(report.ranks.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(report.iterations <= n + 1);
    }
}

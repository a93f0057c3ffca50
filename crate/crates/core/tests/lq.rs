use fbsde_smp::fbsde::PicardOptions;
use fbsde_smp::lq::{
    lq_brute_force_cost, lq_lattice, lq_report, lq_solve_P, lq_solve_p, run_example, ExampleParams, LQCoefficients,
};
use fbsde_smp::model::{Control, ControlDomain};
use fbsde_smp::smp::MpOptions;
use proptest::prelude::*;

#[test]
fn worked_example_verification() {
    let r = run_example(ExampleParams { steps: 32, ..ExampleParams::default() }).unwrap();
    assert!(r.params_in_range);
    assert!(r.global_pass && r.local_fails && r.argmin_is_zero);
    assert!(r.max_p_error <= 1e-12 && r.max_abs_q <= 1e-12 && r.max_abs_big_p <= 1e-12);
    let (h, m, n) = r.hmn0;
    assert!((h - 2.0).abs() < 1e-9 && (m - 2.0).abs() < 1e-9 && n.abs() < 1e-9, "{:?}", r.hmn0);
    assert_eq!(r.brute_force.rows.len(), 27);
    for row in &r.brute_force.rows {
        let gap = row.example_gap.unwrap();
        let zero = r.brute_force.min_cost;
        assert!((row.cost - zero - gap).abs() < 1e-9, "{row:?}");
    }
}

#[test]
fn strong_coupling_breaks_optimality_of_zero() {
    // |2cd| = 2 > 1: ū ≡ 0 is no longer optimal and the inequality fails.
    let r = run_example(ExampleParams { c: 1.0, steps: 16, ..ExampleParams::default() }).unwrap();
    assert!(!r.params_in_range);
    assert!(!r.argmin_is_zero);
    assert!(!r.global_pass);
}

#[test]
fn lq_report_on_a_general_problem() {
    let coeffs = LQCoefficients {
        a: [0.1, 0.2, 0.0, 0.1],
        b: [0.0, 0.1, 0.0, 0.3],
        c: [0.2, 0.1, 0.1, 0.0],
        d: [0.0, 0.2, 0.3, 1.0],
        f: 0.5,
        g: 0.2,
        j: 0.0,
        x0: 1.0,
    };
    let domain = ControlDomain::Finite(vec![-0.5, 0.0, 0.5]);
    let r = lq_report(
        &coeffs,
        1.0,
        32,
        &Control::Constant(0.0),
        &domain,
        Some(2),
        &PicardOptions::default(),
        &MpOptions::default(),
    )
    .unwrap();
    assert_eq!(r.ode.p.len(), 33);
    assert!(r.p_tree_gap < 0.05, "{}", r.p_tree_gap);
    assert_eq!(r.big_p_tree_gap, None);
    assert_eq!(r.brute_force.unwrap().rows.len(), 9);
    let plain = LQCoefficients { a: [0.1, 0.2, 0.0, 0.0], b: [0.0, 0.1, 0.0, 0.0], g: 0.0, ..coeffs };
    let r = lq_report(
        &plain,
        1.0,
        32,
        &Control::Constant(0.0),
        &domain,
        None,
        &PicardOptions::default(),
        &MpOptions::default(),
    )
    .unwrap();
    assert!(r.big_p_tree_gap.unwrap() < 0.05, "{:?}", r.big_p_tree_gap);
}

#[test]
fn brute_force_rejects_huge_searches() {
    let coeffs = LQCoefficients::example(0.5, 1.0, 0.25, 1.0);
    let lattice = lq_lattice(&coeffs, 1.0, 8).unwrap();
    let grid: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
    assert!(lq_brute_force_cost(&coeffs, &lattice, &grid, 7, &PicardOptions::default()).is_err());
    assert!(lq_brute_force_cost(&coeffs, &lattice, &[], 2, &PicardOptions::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn example_adjoints_are_constant(a in -0.9f64..0.9, b in -2.0f64..2.0, c in -1.0f64..1.0, d in -1.0f64..1.0) {
        prop_assume!(a * d < 0.9);
        let coeffs = LQCoefficients::example(a, b, c, d);
        let p = lq_solve_p(&coeffs, 1.0, 16).unwrap();
        let big_p = lq_solve_P(&coeffs, 1.0, 16).unwrap();
        prop_assert!(p.iter().all(|v| (v - d).abs() < 1e-12));
        prop_assert!(big_p.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn terminal_weight_propagates_without_dynamics(f in -2.0f64..2.0) {
        let coeffs = LQCoefficients { f, ..LQCoefficients::zero() };
        let p = lq_solve_p(&coeffs, 1.0, 8).unwrap();
        prop_assert!(p.iter().all(|v| (v - f).abs() < 1e-14));
    }
}

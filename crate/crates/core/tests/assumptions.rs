use fbsde_smp::assumptions::{check_assumptions, compute_t_star, solve_s_l, AssumptionInputs, ODE_STEPS, QUAD_STEPS};
use fbsde_smp::problem::Problem;
use proptest::prelude::*;

#[test]
fn zero_preset_passes_everything() {
    let p = Problem::from_json(r#"{"T": 1, "N": 8, "coefficients": "zero"}"#).unwrap();
    let r = check_assumptions(&p.assumption_inputs()).unwrap();
    assert!(r.all_ok, "{r:?}");
    assert_eq!(r.t_star.t_star, f64::NEG_INFINITY);
    assert_eq!(r.q_bound, "not checked");
}

#[test]
fn bundled_presets_split_as_expected_at_the_default_beta0() {
    for (name, ok) in [
        ("zero", true),
        ("linear-1", true),
        ("linear-2", true),
        ("nonlinear", true),
        ("decoupled", true),
        ("linear-3", false),
        ("linear-z", false),
        ("example", false),
    ] {
        let p = Problem::from_json(&format!(r#"{{"T": 1, "N": 8, "coefficients": "{name}"}}"#)).unwrap();
        let r = check_assumptions(&p.assumption_inputs()).unwrap();
        assert_eq!(r.inputs.beta0, 0.5);
        assert_eq!(r.all_ok, ok, "{name}: {r:?}");
    }
}

#[test]
fn strongly_coupled_example_fails_smallness() {
    let p = Problem::from_json(r#"{"T": 1, "N": 8, "coefficients": "example"}"#).unwrap();
    let r = check_assumptions(&p.assumption_inputs()).unwrap();
    assert!(!r.smallness_ok && !r.all_ok);
}

#[test]
fn c_beta_override_is_echoed() {
    let p =
        Problem::from_json(r#"{"T": 1, "N": 8, "coefficients": "decoupled", "assumptions": {"c_beta": 3.5}}"#).unwrap();
    let r = check_assumptions(&p.assumption_inputs()).unwrap();
    assert_eq!(r.inputs.c_beta, 3.5);
    let json = serde_json::to_string(&r).unwrap();
    assert!(json.contains("\"c_beta\":3.5"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn s_matches_the_uncoupled_closed_form(l1 in 0.0f64..2.0, horizon in 0.1f64..2.0) {
        let inputs = AssumptionInputs::new(l1, 0.0, 0.3, 0.5, horizon);
        let sl = solve_s_l(&inputs, ODE_STEPS).unwrap();
        for (t, s) in sl.t.iter().zip(&sl.s) {
            let exact = (1.0 + l1) * (l1 * (horizon - t)).exp() - 1.0;
            prop_assert!((s - exact).abs() <= 1e-6 * (1.0 + exact.abs()));
        }
        prop_assert_eq!(compute_t_star(&inputs, QUAD_STEPS).unwrap().t_star, f64::NEG_INFINITY);
    }

    #[test]
    fn t_star_is_nondecreasing_in_l2(l1 in 0.1f64..1.5, beta0 in 0.05f64..0.95) {
        let mut last = f64::NEG_INFINITY;
        for i in 0..10 {
            let l2 = 0.1 + 0.3 * i as f64;
            let t = compute_t_star(&AssumptionInputs::new(l1, l2, 0.1, beta0, 1.0), QUAD_STEPS).unwrap().t_star;
            prop_assert!(t >= last - 1e-9, "L2 = {}: {} < {}", l2, t, last);
            last = t;
        }
    }

    #[test]
    fn s_is_nonincreasing_and_mirrored(l1 in 0.0f64..1.0, l2 in 0.0f64..0.3) {
        let inputs = AssumptionInputs::new(l1, l2, 0.1, 0.5, 1.0);
        if let Ok(sl) = solve_s_l(&inputs, 500) {
            prop_assert_eq!(*sl.s.last().unwrap(), l1);
            prop_assert_eq!(*sl.l.last().unwrap(), -l1);
            prop_assert!(sl.s.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        }
    }
}

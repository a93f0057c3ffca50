use fbsde_smp::fbsde::PicardOptions;
use fbsde_smp::model::SpikeSpec;
use fbsde_smp::presets::preset;
use fbsde_smp::variation::{
    delta_fixed_point, relations, solve_delta, spike_orders, Baseline, DeltaOptions, VariationOptions,
};
use proptest::prelude::*;

fn baseline(name: &str, steps: usize) -> (fbsde_smp::presets::Preset, fbsde_smp::fbsde::FbsdeSolution) {
    let p = preset(name).unwrap();
    let sol = p.solve(1.0, steps, &PicardOptions::default()).unwrap();
    (p, sol)
}

fn spike(base: &Baseline) -> fbsde_smp::model::SnappedSpike {
    SpikeSpec { t0: 0.25, eps: 0.125, replacement: 1.0 }.snap(base.sol.lattice.grid()).unwrap()
}

#[test]
fn first_order_relations_hold_on_every_preset() {
    for name in ["example", "nonlinear", "linear-z", "decoupled", "linear-1"] {
        let (p, sol) = baseline(name, 32);
        let base = Baseline::new(p.model.as_ref(), sol, VariationOptions { paths: 500, ..Default::default() }).unwrap();
        let r = relations(&base, &spike(&base)).unwrap();
        assert!(r.r_y1 <= 1e-6, "{name}: {r:?}");
        assert!(r.r_z1 <= 1e-5, "{name}: {r:?}");
        assert!(r.r_z1_spike <= 1e-5, "{name}: {r:?}");
        assert!(r.x1_gap <= 1e-8, "{name}: {r:?}");
        assert!(r.delta_residual <= 1e-12, "{name}: {r:?}");
    }
}

#[test]
fn second_order_relation_is_exact_without_curvature_of_the_adjoint() {
    // P ≡ 0 on the example and the linear-z preset has φ, b, σ linear.
    for name in ["example", "linear-z"] {
        let (p, sol) = baseline(name, 32);
        let base = Baseline::new(p.model.as_ref(), sol, VariationOptions { paths: 500, ..Default::default() }).unwrap();
        let r = relations(&base, &spike(&base)).unwrap();
        assert!(r.r_y2 <= 1e-8, "{name}: {r:?}");
        assert!((r.y2_0 - r.yhat_0).abs() <= 1e-8, "{name}: {r:?}");
    }
}

#[test]
fn auxiliary_value_matches_its_dual_representation() {
    for name in ["nonlinear", "linear-z", "decoupled", "example"] {
        let (p, sol) = baseline(name, 64);
        let dt = sol.lattice.dt();
        let base = Baseline::new(p.model.as_ref(), sol, VariationOptions { paths: 200, ..Default::default() }).unwrap();
        let r = relations(&base, &spike(&base)).unwrap();
        assert!((r.yhat_0 - r.yhat_gamma_0).abs() <= 5.0 * dt, "{name}: {r:?}");
    }
}

#[test]
fn delta_process_vanishes_off_the_spike() {
    let (p, sol) = baseline("nonlinear", 32);
    let base = Baseline::new(p.model.as_ref(), sol, VariationOptions::default()).unwrap();
    let s = spike(&base);
    let d = solve_delta(p.model.as_ref(), &base.sol, &base.first, &s, &DeltaOptions::default()).unwrap();
    assert!(d.residual <= 1e-12);
    assert!(d.precondition_ok);
    for k in (0..32).filter(|k| !s.contains(*k)) {
        assert!(d.delta.layer(k).iter().all(|v| *v == 0.0));
    }
    assert!((s.start..s.end).any(|k| d.delta.layer(k).iter().any(|v| *v != 0.0)));
}

#[test]
fn spike_orders_validates_its_inputs() {
    let (p, sol) = baseline("decoupled", 16);
    let base = Baseline::new(p.model.as_ref(), sol, VariationOptions { paths: 50, ..Default::default() }).unwrap();
    assert!(spike_orders(&base, 0.25, &[0.5, 0.25], 1.0, &[2.0]).is_err());
    assert!(spike_orders(&base, 0.25, &[0.5, 0.25, 0.01], 1.0, &[2.0]).is_err());
    let r = spike_orders(&base, 0.25, &[0.5, 0.25, 0.125, 0.0625], 1.0, &[2.0]).unwrap();
    assert_eq!(r.rows.len(), 4);
    assert!(r.slope("x_sup_beta2").is_some() && r.slope("y0_rem").is_some());
    assert!(r.rows.windows(2).all(|w| w[1].x_sup[0] < w[0].x_sup[0]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn delta_closed_form_when_linear_in_z(p in -1.5f64..1.5, a in -0.6f64..0.6, ds1 in -3.0f64..3.0) {
        prop_assume!((p * a).abs() <= 0.9);
        let jump = |d: f64| a * d + ds1;
        let node = delta_fixed_point(p, &jump, 0.0, true, &DeltaOptions::default()).unwrap();
        let exact = p * ds1 / (1.0 - p * a);
        prop_assert!((node.value - exact).abs() <= 1e-12 * (1.0 + exact.abs()));
        prop_assert!(node.residual <= 1e-12);
    }

    #[test]
    fn delta_is_unique_under_restarts(
        p in -1.5f64..1.5,
        a in -0.5f64..0.5,
        w in -0.3f64..0.3,
        ds1 in -2.0f64..2.0,
        starts in prop::collection::vec(-10.0f64..10.0, 20),
    ) {
        prop_assume!(p.abs() * (a.abs() + w.abs()) <= 0.9);
        let jump = |d: f64| a * d + w * d.sin() + ds1;
        let reference = delta_fixed_point(p, &jump, 0.0, true, &DeltaOptions::default()).unwrap();
        prop_assert!(reference.residual <= 1e-12);
        for s in starts {
            for contracting in [true, false] {
                let node = delta_fixed_point(p, &jump, s, contracting, &DeltaOptions::default()).unwrap();
                prop_assert!((node.value - reference.value).abs() <= 1e-10, "start {} gave {}", s, node.value);
            }
        }
    }
}

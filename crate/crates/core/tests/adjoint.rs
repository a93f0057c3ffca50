use fbsde_smp::adjoint::{gamma_masses, solve_first_order_adjoint, solve_second_order_adjoint, AdjointOptions};
use fbsde_smp::fbsde::PicardOptions;
use fbsde_smp::lq::{lq_lattice, lq_solve_odes, lq_solve_state, LQCoefficients};
use fbsde_smp::model::{Control, ControlDomain};
use fbsde_smp::presets::{example_preset, preset};

#[test]
fn example_adjoints_take_the_closed_form_values() {
    let p = example_preset(0.5, 1.0, 0.25, 1.0);
    let sol = p.solve(1.0, 128, &PicardOptions::default()).unwrap();
    let first = solve_first_order_adjoint(p.model.as_ref(), &sol, &AdjointOptions::default()).unwrap();
    let second = solve_second_order_adjoint(p.model.as_ref(), &sol, &first).unwrap();
    assert!(first.p.layers().iter().flatten().all(|v| (v - 1.0).abs() <= 1e-6));
    assert!(first.max_abs_q <= 1e-8);
    assert!(second.big_p.max_abs() <= 1e-8);
    assert!((first.min_denominator - 0.5).abs() < 1e-12);
}

#[test]
fn tree_adjoint_converges_to_the_riccati_solution() {
    let coeffs = LQCoefficients {
        a: [0.2, 0.3, 0.1, 0.0],
        b: [0.1, 0.1, 0.2, 0.0],
        c: [0.1, 0.2, 0.3, 0.0],
        d: [0.0, 0.5, 0.0, 1.0],
        f: 0.7,
        ..LQCoefficients::zero()
    };
    let model = coeffs.model("lq");
    let domain = ControlDomain::Finite(vec![0.0]);
    let err = |steps: usize| {
        let lattice = lq_lattice(&coeffs, 1.0, steps).unwrap();
        let sol =
            lq_solve_state(&coeffs, &lattice, &Control::Constant(0.0), &domain, &PicardOptions::default()).unwrap();
        let first = solve_first_order_adjoint(&model, &sol, &AdjointOptions::default()).unwrap();
        let ode = lq_solve_odes(&coeffs, 1.0, steps, 8).unwrap();
        (first.p0() - ode.p[0]).abs()
    };
    let (e1, e2) = (err(32), err(64));
    assert!(e2 < e1 && e2 < 5e-3, "{e1} {e2}");
}

#[test]
fn gamma_masses_start_at_one_and_reduce_to_node_masses() {
    for name in ["nonlinear", "decoupled", "linear-z", "zero"] {
        let p = preset(name).unwrap();
        let sol = p.solve(1.0, 32, &PicardOptions::default()).unwrap();
        let first = solve_first_order_adjoint(p.model.as_ref(), &sol, &AdjointOptions::default()).unwrap();
        let g = gamma_masses(p.model.as_ref(), &sol, &first);
        assert!((g.get(0, 0) - 1.0).abs() < 1e-15, "{name}");
        if name == "zero" {
            assert!(g.max_diff(&sol.node_masses(), 32) < 1e-15);
        }
    }
}

#[test]
fn adjoints_are_deterministic() {
    let p = preset("nonlinear").unwrap();
    let sol = p.solve(1.0, 32, &PicardOptions::default()).unwrap();
    let a = solve_first_order_adjoint(p.model.as_ref(), &sol, &AdjointOptions::default()).unwrap();
    let b = solve_first_order_adjoint(p.model.as_ref(), &sol, &AdjointOptions::default()).unwrap();
    assert_eq!(a.p, b.p);
    assert_eq!(a.q, b.q);
}

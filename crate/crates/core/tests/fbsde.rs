use fbsde_smp::fbsde::{solve_coupled_picard, solve_linear_oracle, PicardOptions};
use fbsde_smp::model::{Control, ControlDomain};
use fbsde_smp::presets::{preset, LINEAR_PRESETS};
use fbsde_smp::tree::{build_tree, Lattice, TreeProcess};
use proptest::prelude::*;

fn linear_y0(i: usize, steps: usize) -> (f64, Vec<f64>) {
    let spec = LINEAR_PRESETS[i];
    let model = spec.model("linear");
    let meta = fbsde_smp::model::CoefficientModel::meta(&model).clone();
    let lattice = Lattice::new(build_tree(1.0, steps).unwrap(), meta.x0, meta.lattice_scale).unwrap();
    let u = TreeProcess::zeros(steps);
    let sol = solve_coupled_picard(&model, &lattice, &u, &PicardOptions::default(), None).unwrap();
    (sol.y0(), sol.residual_history)
}

#[test]
fn picard_converges_to_the_linear_oracle_at_first_order() {
    for i in 0..3 {
        let oracle = solve_linear_oracle(&LINEAR_PRESETS[i], 1.0, 4096, 8).unwrap();
        let errs: Vec<f64> = [32, 64, 128].iter().map(|&n| (linear_y0(i, n).0 - oracle.y0).abs()).collect();
        for w in errs.windows(2) {
            let ratio = w[1] / w[0];
            assert!((0.35..=0.75).contains(&ratio), "preset {i}: errors {errs:?}");
        }
    }
}

#[test]
fn picard_residuals_contract() {
    for i in 0..3 {
        let (_, hist) = linear_y0(i, 64);
        assert!(*hist.last().unwrap() <= 1e-10, "{hist:?}");
        for w in hist.windows(2).filter(|w| w[0] > 1e-12) {
            assert!(w[1] / w[0] <= 0.9, "preset {i}: {hist:?}");
        }
    }
}

#[test]
fn bundled_presets_solve_deterministically() {
    for name in ["zero", "example", "nonlinear", "linear-z", "decoupled"] {
        let p = preset(name).unwrap();
        let a = p.solve(1.0, 48, &PicardOptions::default()).unwrap();
        let b = p.solve(1.0, 48, &PicardOptions::default()).unwrap();
        assert_eq!(a, b, "{name}");
        assert!(!a.stalled && a.final_residual <= 1e-10, "{name}: {:?}", a.residual_history);
    }
}

#[test]
fn zero_preset_keeps_everything_at_rest() {
    let sol = preset("zero").unwrap().solve(1.0, 16, &PicardOptions::default()).unwrap();
    assert_eq!(sol.y0(), 0.0);
    assert_eq!(sol.z.max_abs(), 0.0);
    assert_eq!(sol.drift.max_abs() + sol.diffusion.max_abs(), 0.0);
    let path = fbsde_smp::paths::state_path(&sol, &[1.0; 16]);
    assert!(path.iter().all(|x| *x == 0.0));
}

#[test]
fn control_outside_the_domain_is_rejected() {
    let p = preset("decoupled").unwrap();
    let lattice = p.lattice(1.0, 8).unwrap();
    let err = Control::Constant(0.5).on_lattice(&lattice, &ControlDomain::Finite(vec![-1.0, 0.0, 1.0]));
    assert!(err.is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conditional_expectation_of_brownian_motion_is_a_martingale(steps in 1usize..40, k in 0usize..39) {
        prop_assume!(k < steps);
        let tree = build_tree(1.0, steps).unwrap();
        let b = TreeProcess::from_fn(steps, |k, j| tree.node(k, j));
        let ce = b.conditional_expectation(k).unwrap();
        for (j, v) in ce.iter().enumerate() {
            prop_assert!((v - tree.node(k, j)).abs() < 1e-12);
        }
        let sq = TreeProcess::from_fn(steps, |k, j| tree.node(k, j).powi(2));
        let z = sq.martingale_coefficient(k, tree.sqrt_dt()).unwrap();
        for (j, v) in z.iter().enumerate() {
            prop_assert!((v - 2.0 * tree.node(k, j)).abs() < 1e-10);
        }
    }

    #[test]
    fn stencils_reproduce_cubics(steps in 4usize..30, k in 3usize..29, c in prop::array::uniform4(-2.0f64..2.0), s in 0.0f64..1.0) {
        prop_assume!(k <= steps);
        let lattice = Lattice::new(build_tree(1.0, steps).unwrap(), 0.3, 0.7).unwrap();
        let f = |x: f64| c[0] + c[1] * x + c[2] * x * x + c[3] * x * x * x;
        let layer: Vec<f64> = (0..=k).map(|j| f(lattice.x(k, j))).collect();
        let (lo, hi) = (lattice.x(k, 0), lattice.x(k, k));
        let x = lo + s * (hi - lo);
        prop_assert!((lattice.interp(&layer, k, x) - f(x)).abs() < 1e-9 * (1.0 + f(x).abs()));
    }

    #[test]
    fn linear_solutions_are_affine_in_the_terminal_slope(kappa in -0.8f64..0.8) {
        // With all other coefficients zero, Y = κX and X is a Brownian motion.
        let mut spec = LINEAR_PRESETS[0];
        spec.alpha = [0.0, 0.0, 0.0];
        spec.beta = [0.0, 0.0, 0.0];
        spec.gamma = [0.0, 0.0, 0.0];
        spec.drivers = [0.0, 1.0, 0.0];
        spec.kappa = kappa;
        let model = spec.model("affine");
        let lattice = Lattice::new(build_tree(1.0, 16).unwrap(), spec.x0, 1.0).unwrap();
        let sol = solve_coupled_picard(&model, &lattice, &TreeProcess::zeros(16), &PicardOptions::default(), None).unwrap();
        prop_assert!((sol.y0() - kappa * spec.x0).abs() < 1e-12);
        prop_assert!((sol.z0() - kappa).abs() < 1e-12);
    }
}

use fbsde_smp::adjoint::{solve_first_order_adjoint, solve_second_order_adjoint, AdjointOptions};
use fbsde_smp::fbsde::PicardOptions;
use fbsde_smp::model::{Control, ControlDomain};
use fbsde_smp::presets::{example_preset, preset, Preset};
use fbsde_smp::smp::{check_global_mp, check_local_mp, MpMode, MpOptions, MpReport};

fn global(p: &Preset, control: Control, steps: usize, mode: MpMode) -> fbsde_smp::Result<MpReport> {
    let lattice = p.lattice(1.0, steps)?;
    let u = control.on_lattice(&lattice, &p.domain)?;
    let sol = fbsde_smp::fbsde::solve_coupled_picard(p.model.as_ref(), &lattice, &u, &PicardOptions::default(), None)?;
    let first = solve_first_order_adjoint(p.model.as_ref(), &sol, &AdjointOptions::default())?;
    let second = solve_second_order_adjoint(p.model.as_ref(), &sol, &first)?;
    let opts = MpOptions { objective: p.objective, ..MpOptions::default() };
    check_global_mp(p.model.as_ref(), &sol, &first, &second, &p.domain.grid(), mode, &opts)
}

#[test]
fn example_gaps_are_the_closed_form_values() {
    let p = example_preset(0.5, 1.0, 0.25, 1.0);
    let r = global(&p, Control::Constant(0.0), 32, MpMode::Global).unwrap();
    assert!(r.pass);
    assert_eq!(r.checked, r.gaps.len());
    for s in &r.per_control {
        let expected = match s.u as i32 {
            -1 => 0.5,
            0 => 0.0,
            _ => 1.5,
        };
        assert!((s.min_gap - expected).abs() <= 1e-6 && (s.max_gap - expected).abs() <= 1e-6, "{s:?}");
    }
}

#[test]
fn perturbed_candidate_violates_the_global_principle_on_the_perturbation() {
    let p = example_preset(0.5, 1.0, 0.25, 1.0);
    let steps = 32;
    let sched: Vec<f64> = (0..steps).map(|k| if (8..16).contains(&k) { 1.0 } else { 0.0 }).collect();
    let r = global(&p, Control::Schedule(sched), steps, MpMode::Global).unwrap();
    assert!(!r.pass);
    let worst = r.worst.unwrap();
    assert!(worst.gap < -1e-3);
    assert!((8..16).contains(&worst.step), "{worst:?}");
    assert!(r.gaps.iter().filter(|g| g.gap < -1e-8).all(|g| (8..16).contains(&g.step)));
}

#[test]
fn example_fails_the_local_principle_at_minus_one() {
    let p = example_preset(0.5, 1.0, 0.25, 1.0);
    let lattice = p.lattice(1.0, 32).unwrap();
    let u = Control::Constant(0.0).on_lattice(&lattice, &p.domain).unwrap();
    let sol = fbsde_smp::fbsde::solve_coupled_picard(p.model.as_ref(), &lattice, &u, &PicardOptions::default(), None)
        .unwrap();
    let first = solve_first_order_adjoint(p.model.as_ref(), &sol, &AdjointOptions::default()).unwrap();
    let opts = MpOptions { objective: p.objective, ..MpOptions::default() };
    let domain = ControlDomain::Interval { lo: -1.0, hi: 1.0, points: 21 };
    let r = check_local_mp(p.model.as_ref(), &sol, &first, &domain, &opts).unwrap();
    assert!(!r.pass);
    let worst = r.worst.unwrap();
    assert_eq!(worst.u, -1.0);
    assert_eq!((worst.step, worst.node), (0, 0));
    assert!(worst.gap <= -0.49, "{worst:?}");
    assert!(check_local_mp(p.model.as_ref(), &sol, &first, &p.domain, &opts).is_err());
}

#[test]
fn linear_z_mode_needs_a_structural_tag() {
    let r = global(&preset("linear-z").unwrap(), Control::Constant(0.0), 16, MpMode::GlobalLinearZ).unwrap();
    assert_eq!(r.mode, MpMode::GlobalLinearZ);
    assert_eq!(r.checked + r.unchecked.len() * 3, 3 * (16 * 17 / 2));
    assert!(global(&preset("nonlinear").unwrap(), Control::Constant(0.0), 16, MpMode::GlobalLinearZ).is_err());
}

#[test]
fn reports_and_gap_csv_are_deterministic() {
    let p = preset("nonlinear").unwrap();
    let a = global(&p, Control::Constant(0.0), 24, MpMode::Global).unwrap();
    let b = global(&p, Control::Constant(0.0), 24, MpMode::Global).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let csv = a.gaps_csv();
    assert_eq!(csv, b.gaps_csv());
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,node,t,x,u,gap"));
    assert_eq!(lines.count(), a.gaps.len());
}

#[test]
fn mode_names_parse() {
    for (s, m) in [
        ("global", MpMode::Global),
        ("global-linear-z", MpMode::GlobalLinearZ),
        ("local", MpMode::Local),
        ("lq", MpMode::Lq),
    ] {
        assert_eq!(s.parse::<MpMode>().unwrap(), m);
    }
    assert!("other".parse::<MpMode>().is_err());
}

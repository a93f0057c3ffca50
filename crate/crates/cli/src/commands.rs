use std::fmt::Write as _;
use std::time::Instant;

use fbsde_smp::adjoint::{solve_first_order_adjoint, solve_second_order_adjoint, AdjointOptions};
use fbsde_smp::assumptions::check_assumptions;
use fbsde_smp::fbsde::{FbsdeSolution, PicardOptions};
use fbsde_smp::lq::{lq_check_mp, lq_report, lq_solve_hmn, lq_solve_odes, run_example, ExampleParams};
use fbsde_smp::problem::{Problem, ProblemConfig};
use fbsde_smp::smp::{check_global_mp, check_local_mp, MpMode, MpOptions, MpReport};
use fbsde_smp::tree::TreeProcess;
use fbsde_smp::variation::{spike_orders, Baseline, DeltaOptions, VariationOptions};
use serde::Serialize;
use serde_json::{json, Value};

use crate::report::{check, write_file, CliError, Output};
use crate::{Command, ProblemArgs};

const DEFAULT_HORIZON: f64 = 1.0;
const DEFAULT_STEPS: usize = 128;

pub fn run(command: Command, out: &Output) -> Result<bool, CliError> {
    let started = Instant::now();
    match command {
        Command::Solve { problem, tree_csv } => {
            let p = load(&problem)?;
            let sol = solve(&p)?;
            if let Some(path) = tree_csv {
                write_file(&path, &tree_csv_text(&sol))?;
            }
            let result = SolveResult::new(&p, &sol);
            let summary = format!(
                "{}: Y(0) = {:.10}, Z(0) = {:.10}, {} Picard sweeps, residual {:.2e}\n",
                p.name, result.y0, result.z0, result.picard_iterations, result.final_residual
            );
            let checks = [check("picard_converged", sol.final_residual <= PicardOptions::default().tol || sol.stalled)];
            out.emit("solve", started, &echo(&p, json!({})), &result, &checks, &summary)
        }
        Command::Adjoint { problem, csv } => {
            let p = load(&problem)?;
            let sol = solve(&p)?;
            let opts = AdjointOptions { beta0: p.assumptions.beta0, ..AdjointOptions::default() };
            let first =
                solve_first_order_adjoint(p.model.as_ref(), &sol, &opts).map_err(CliError::solver("adjoint"))?;
            let second =
                solve_second_order_adjoint(p.model.as_ref(), &sol, &first).map_err(CliError::solver("adjoint"))?;
            if let Some(path) = csv {
                write_file(&path, &adjoint_csv(&sol, &first.p, &first.q, &second.big_p))?;
            }
            let result = AdjointResult {
                p0: first.p0(),
                big_p0: second.p0(),
                max_abs_p: first.max_abs_p,
                max_abs_q: first.max_abs_q,
                max_abs_big_p: second.big_p.max_abs(),
                min_denominator: first.min_denominator,
                max_node_iterations: first.max_node_iterations,
            };
            let summary = format!(
                "{}: p(0) = {:.10}, P(0) = {:.10}, max|q| = {:.3e}, min|1 - p sigma_z| = {:.4}\n",
                p.name, result.p0, result.big_p0, result.max_abs_q, result.min_denominator
            );
            let checks = [
                check("q_finite", first.max_abs_q.is_finite()),
                check("denominator_nonsingular", first.min_denominator >= 0.5 * p.assumptions.beta0),
            ];
            out.emit("adjoint", started, &echo(&p, json!({})), &result, &checks, &summary)
        }
        Command::CheckMp { problem, mode, tol, csv } => {
            let p = load(&problem)?;
            let mode: MpMode = mode.parse().map_err(CliError::solver("--mode"))?;
            let report = check_mp(&p, mode, tol)?;
            if let Some(path) = csv {
                write_file(&path, &report.gaps_csv())?;
            }
            let summary = mp_summary(&p.name, &report);
            let checks = [check("maximum_principle", report.pass)];
            out.emit("check-mp", started, &echo(&p, json!({ "mode": mode, "tol": tol })), &report, &checks, &summary)
        }
        Command::SpikeOrders { problem, eps_list, paths, beta, t0, replacement, csv } => {
            let p = load(&problem)?;
            let horizon = p.horizon();
            let eps = eps_list.unwrap_or_else(|| [8.0, 16.0, 32.0, 64.0].iter().map(|d| horizon / d).collect());
            let t0 = t0.unwrap_or(horizon / 4.0);
            let sol = solve(&p)?;
            let opts = VariationOptions {
                paths,
                seed: p.seed,
                delta: DeltaOptions { beta0: p.assumptions.beta0, ..DeltaOptions::default() },
                adjoint: AdjointOptions { beta0: p.assumptions.beta0, ..AdjointOptions::default() },
                ..VariationOptions::default()
            };
            let report = Baseline::new(p.model.as_ref(), sol, opts)
                .and_then(|base| spike_orders(&base, t0, &eps, replacement, &beta))
                .map_err(CliError::solver("spike-orders"))?;
            let text = spike_csv(&report);
            if let Some(path) = csv {
                write_file(&path, &text)?;
            }
            let mut summary = format!("{}: {} spike sizes, t0 = {t0}, u = {replacement}\n", p.name, report.rows.len());
            for f in &report.fits {
                let _ = writeln!(summary, "  slope {:<14} {:>8.4}  (r2 {:.4})", f.statistic, f.slope, f.r2);
            }
            let mut checks = Vec::new();
            if let (Some(x), Some(rem), Some(y0)) =
                (report.slope("x_sup_beta2"), report.slope("x_rem2"), report.slope("y0_rem"))
            {
                checks.push(check("x_sup_beta2_order", (0.8..=1.2).contains(&x)));
                checks.push(check("x_rem2_order", (1.8..=2.3).contains(&rem)));
                checks.push(check("y0_rem_order", y0 > 1.15));
            }
            let config =
                echo(&p, json!({ "eps": eps, "paths": paths, "beta": beta, "t0": t0, "replacement": replacement }));
            out.emit("spike-orders", started, &config, &report, &checks, &summary)
        }
        Command::Lq { problem, brute_pieces, tol, csv } => {
            let p = load(&problem)?;
            let coeffs = p.lq.ok_or_else(|| {
                CliError::Usage("coefficients: the lq report needs linear-quadratic coefficients".into())
            })?;
            let opts = MpOptions { tolerance: tol, objective: p.objective, ..MpOptions::default() };
            let report = lq_report(
                &coeffs,
                p.horizon(),
                p.steps(),
                &p.control,
                &p.domain,
                brute_pieces,
                &PicardOptions::default(),
                &opts,
            )
            .map_err(CliError::solver("lq"))?;
            if let Some(path) = csv {
                write_file(&path, &report.mp.gaps_csv())?;
            }
            let (h, m, n) = report.hmn0;
            let mut summary = format!(
                "{}: Y(0) = {:.10}, p(0) = {:.10}, P(0) = {:.10}, (h, m, n)(0) = ({h:.6}, {m:.6}, {n:.6})\n",
                p.name, report.y0, report.ode.p[0], report.ode.big_p[0]
            );
            summary.push_str(&mp_summary(&p.name, &report.mp));
            if let Some(bf) = &report.brute_force {
                let _ = writeln!(
                    summary,
                    "brute force over {} pieces: argmin {:?}, cost {:.10}",
                    bf.pieces, bf.argmin, bf.min_cost
                );
            }
            let checks = [check("maximum_principle", report.mp.pass)];
            let config = echo(&p, json!({ "brute_pieces": brute_pieces, "tol": tol }));
            out.emit("lq", started, &config, &report, &checks, &summary)
        }
        Command::Example { a, b, c, d, horizon, steps, csv } => {
            let params = ExampleParams { a, b, c, d, horizon, steps };
            let r = run_example(params).map_err(CliError::solver("example"))?;
            if let Some(path) = csv {
                write_file(&path, &r.global.gaps_csv())?;
            }
            let mut summary = format!(
                "example (a, b, c, d) = ({a}, {b}, {c}, {d}), T = {horizon}, N = {steps}{}\n",
                if r.params_in_range { "" } else { " [outside 0 < |2cd| <= 1, ad < 1]" }
            );
            let _ = writeln!(
                summary,
                "p - d: {:.2e}, max|q|: {:.2e}, max|P|: {:.2e}",
                r.max_p_error, r.max_abs_q, r.max_abs_big_p
            );
            for s in &r.global.per_control {
                let _ = writeln!(summary, "  global gap at u = {:>4}: [{:.8}, {:.8}]", s.u, s.min_gap, s.max_gap);
            }
            if let Some(w) = r.local.worst {
                let _ = writeln!(summary, "  local worst gap {:.6} at u = {}, t = {}", w.gap, w.u, w.t);
            }
            let _ = writeln!(
                summary,
                "  brute-force argmin {:?}, cost {:.10}",
                r.brute_force.argmin, r.brute_force.min_cost
            );
            let checks = [
                check("global_principle_holds", r.global_pass),
                check("local_principle_fails", r.local_fails),
                check("brute_force_argmin_zero", r.argmin_is_zero),
            ];
            out.emit("example", started, &params, &r, &checks, &summary)
        }
        Command::Assumptions { problem } => {
            let p = load(&problem)?;
            let r = check_assumptions(&p.assumption_inputs()).map_err(CliError::solver("assumptions"))?;
            let i = &r.inputs;
            let opt = |v: Option<f64>| v.map_or("none".to_string(), |v| format!("{v:.6}"));
            let mut s = format!("{}\n", p.name);
            for (k, v) in [
                ("L1", i.l1.to_string()),
                ("L2", i.l2.to_string()),
                ("L3", i.l3.to_string()),
                ("beta0", i.beta0.to_string()),
                ("C_beta", i.c_beta.to_string()),
                ("T", i.horizon.to_string()),
                ("C1", format!("{:.6}", r.c1)),
            ] {
                let _ = writeln!(s, "  {k:<22} {v}");
            }
            for l in &r.lambdas {
                let _ = writeln!(s, "  {:<22} {:.6}", format!("Lambda(beta = {})", l.beta), l.value);
            }
            for (k, v) in [
                ("t*", format!("{}", r.t_star.t_star)),
                ("s(0)", opt(r.s0)),
                ("l(0)", opt(r.l0)),
                ("bound on |p|", opt(r.p_bound)),
                ("bound on |q|", r.q_bound.to_string()),
            ] {
                let _ = writeln!(s, "  {k:<22} {v}");
            }
            let checks = [
                check("smallness", r.smallness_ok),
                check("adjoint_bound_feasible", r.p_bound_feasible),
                check("adjoint_bound", r.adjoint_bound_ok),
            ];
            out.emit("assumptions", started, &echo(&p, json!({})), &r, &checks, &s)
        }
    }
}

fn load(args: &ProblemArgs) -> Result<Problem, CliError> {
    let mut value: Value = match (&args.file, &args.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        (None, Some(name)) => serde_json::to_value(ProblemConfig::preset(name, DEFAULT_HORIZON, DEFAULT_STEPS))
            .map_err(|e| CliError::Io(e.to_string()))?,
        (None, None) => return Err(CliError::Usage("give a problem file or --preset".into())),
    };
    let obj = value.as_object_mut().ok_or_else(|| CliError::Usage("problem: expected a JSON object".into()))?;
    if let Some(t) = args.horizon {
        obj.insert("T".into(), json!(t));
    }
    if let Some(n) = args.steps {
        obj.insert("N".into(), json!(n));
    }
    if let Some(seed) = args.seed {
        obj.insert("seed".into(), json!(seed));
    }
    for (flag, key, raw) in [("--control", "candidate", &args.control), ("--domain", "domain", &args.domain)] {
        if let Some(raw) = raw {
            let v: Value = serde_json::from_str(raw).map_err(|e| CliError::Usage(format!("{flag}: {e}")))?;
            let control = obj.entry("control").or_insert_with(|| json!({}));
            control
                .as_object_mut()
                .ok_or_else(|| CliError::Usage("control: expected an object".into()))?
                .insert(key.into(), v);
        }
    }
    Problem::from_json(&value.to_string()).map_err(CliError::solver("problem"))
}

fn solve(p: &Problem) -> Result<FbsdeSolution, CliError> {
    p.solve(&PicardOptions::default()).map_err(CliError::solver("solve"))
}

fn echo(p: &Problem, options: Value) -> Value {
    json!({ "problem": p.config, "options": options })
}

fn check_mp(p: &Problem, mode: MpMode, tol: f64) -> Result<MpReport, CliError> {
    let err = CliError::solver("check-mp");
    let sol = solve(p)?;
    let beta0 = p.assumptions.beta0;
    let opts =
        MpOptions { tolerance: tol, objective: p.objective, delta: DeltaOptions { beta0, ..DeltaOptions::default() } };
    if mode == MpMode::Lq {
        let coeffs = p.lq.ok_or_else(|| CliError::Usage("--mode lq: needs linear-quadratic coefficients".into()))?;
        let ode = lq_solve_odes(&coeffs, p.horizon(), p.steps(), 8).map_err(&err)?;
        let hmn = lq_solve_hmn(&coeffs, &sol, &ode).map_err(&err)?;
        return lq_check_mp(&coeffs, &sol, &ode, &hmn, &p.domain.grid(), false, &opts).map_err(err);
    }
    let adj = AdjointOptions { beta0, ..AdjointOptions::default() };
    let first = solve_first_order_adjoint(p.model.as_ref(), &sol, &adj).map_err(&err)?;
    if mode == MpMode::Local {
        return check_local_mp(p.model.as_ref(), &sol, &first, &p.domain, &opts).map_err(err);
    }
    let second = solve_second_order_adjoint(p.model.as_ref(), &sol, &first).map_err(&err)?;
    check_global_mp(p.model.as_ref(), &sol, &first, &second, &p.domain.grid(), mode, &opts).map_err(err)
}

fn mp_summary(name: &str, r: &MpReport) -> String {
    let mut s = format!("{name}: {} gaps checked", r.checked);
    if !r.unchecked.is_empty() {
        let _ = write!(s, ", {} nodes unchecked", r.unchecked.len());
    }
    s.push('\n');
    for c in &r.per_control {
        let _ = writeln!(s, "  u = {:>10.6}: gaps in [{:.6e}, {:.6e}]", c.u, c.min_gap, c.max_gap);
    }
    if let Some(w) = r.worst {
        let _ = writeln!(s, "  worst gap {:.6e} at step {}, node {}, u = {}", w.gap, w.step, w.node, w.u);
    }
    s
}

#[derive(Serialize)]
struct SolveResult<'a> {
    name: &'a str,
    horizon: f64,
    steps: usize,
    y0: f64,
    z0: f64,
    picard_iterations: usize,
    final_residual: f64,
    stalled: bool,
    residual_history: &'a [f64],
}

impl<'a> SolveResult<'a> {
    fn new(p: &'a Problem, sol: &'a FbsdeSolution) -> Self {
        SolveResult {
            name: &p.name,
            horizon: p.horizon(),
            steps: p.steps(),
            y0: sol.y0(),
            z0: sol.z0(),
            picard_iterations: sol.picard_iterations,
            final_residual: sol.final_residual,
            stalled: sol.stalled,
            residual_history: &sol.residual_history,
        }
    }
}

#[derive(Serialize)]
struct AdjointResult {
    p0: f64,
    #[serde(rename = "P0")]
    big_p0: f64,
    max_abs_p: f64,
    max_abs_q: f64,
    #[serde(rename = "max_abs_P")]
    max_abs_big_p: f64,
    min_denominator: f64,
    max_node_iterations: usize,
}

fn tree_csv_text(sol: &FbsdeSolution) -> String {
    let mut s = String::from("step,node,X,Y,Z\n");
    for k in 0..=sol.lattice.steps() {
        for j in 0..=k {
            let _ = writeln!(s, "{k},{j},{},{},{}", sol.x.get(k, j), sol.y.get(k, j), sol.z.get(k, j));
        }
    }
    s
}

/// Per-step mass-weighted means and extremes of p, q and P.
fn adjoint_csv(sol: &FbsdeSolution, p: &TreeProcess, q: &TreeProcess, big_p: &TreeProcess) -> String {
    let masses = sol.node_masses();
    let mut s = String::from("step,t,mean_p,min_p,max_p,max_abs_q,mean_P,min_P,max_P\n");
    for k in 0..=sol.lattice.steps() {
        let (mut mp, mut lo, mut hi, mut mq, mut mbp, mut blo, mut bhi) =
            (0.0, f64::INFINITY, f64::NEG_INFINITY, 0.0_f64, 0.0, f64::INFINITY, f64::NEG_INFINITY);
        for j in 0..=k {
            let w = masses.get(k, j);
            let (pv, bv) = (p.get(k, j), big_p.get(k, j));
            mp += w * pv;
            mbp += w * bv;
            lo = f64::min(lo, pv);
            hi = f64::max(hi, pv);
            blo = f64::min(blo, bv);
            bhi = f64::max(bhi, bv);
            mq = mq.max(q.get(k, j).abs());
        }
        let _ = writeln!(s, "{k},{},{mp},{lo},{hi},{mq},{mbp},{blo},{bhi}", sol.lattice.t(k));
    }
    s
}

fn spike_csv(r: &fbsde_smp::variation::SpikeOrderReport) -> String {
    let mut s = String::from("eps,statistic,value\n");
    for row in &r.rows {
        let mut put = |name: &str, v: f64| {
            let _ = writeln!(s, "{},{name},{v}", row.eps_snapped);
        };
        for (i, b) in r.betas.iter().enumerate() {
            put(&format!("x_sup_beta{b}"), row.x_sup[i]);
            put(&format!("y_sup_beta{b}"), row.y_sup[i]);
            put(&format!("z_int_beta{b}"), row.z_int[i]);
        }
        put("x1_sup2", row.x1_sup2);
        put("x_rem2", row.x_rem2);
        put("y0_diff", row.y0_diff);
        put("y2_0", row.y2_0);
        put("y0_rem", row.y0_rem);
    }
    s
}

//! Browser bindings: the worked example, the assumption checker and the
//! coupled solver, each returning a JSON string.

use fbsde_smp::assumptions::check_assumptions;
use fbsde_smp::fbsde::PicardOptions;
use fbsde_smp::lq::{run_example, ExampleParams};
use fbsde_smp::problem::Problem;
use serde_json::json;
use wasm_bindgen::prelude::*;

const MAX_STEPS: usize = 512;

fn js(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn problem(text: &str) -> Result<Problem, JsValue> {
    let p = Problem::from_json(text).map_err(js)?;
    if p.steps() > MAX_STEPS {
        return Err(js(format!("N: at most {MAX_STEPS} steps in the browser")));
    }
    Ok(p)
}

/// Global check on {−1, 0, 1}, local check on [−1, 1] and brute force over
/// 3-piece controls for the worked example.
#[wasm_bindgen]
pub fn example(a: f64, b: f64, c: f64, d: f64, horizon: f64, steps: usize) -> Result<String, JsValue> {
    if steps > MAX_STEPS {
        return Err(js(format!("N: at most {MAX_STEPS} steps in the browser")));
    }
    let r = run_example(ExampleParams { a, b, c, d, horizon, steps }).map_err(js)?;
    Ok(json!({
        "params_in_range": r.params_in_range,
        "y0": r.y0,
        "max_p_error": r.max_p_error,
        "max_abs_q": r.max_abs_q,
        "max_abs_big_p": r.max_abs_big_p,
        "global": r.global.per_control,
        "local_worst": r.local.worst,
        "brute_force": { "argmin": r.brute_force.argmin, "min_cost": r.brute_force.min_cost },
        "global_pass": r.global_pass,
        "local_fails": r.local_fails,
        "argmin_is_zero": r.argmin_is_zero,
    })
    .to_string())
}

/// The assumption report for a problem document.
#[wasm_bindgen]
pub fn assumptions(problem_json: &str) -> Result<String, JsValue> {
    let p = problem(problem_json)?;
    let r = check_assumptions(&p.assumption_inputs()).map_err(js)?;
    serde_json::to_string(&r).map_err(js)
}

/// Solves a problem document; returns Y(0), the Picard trace and the
/// mass-weighted mean of Y at every step.
#[wasm_bindgen]
pub fn solve(problem_json: &str) -> Result<String, JsValue> {
    let p = problem(problem_json)?;
    let sol = p.solve(&PicardOptions::default()).map_err(js)?;
    let masses = sol.node_masses();
    let n = sol.lattice.steps();
    let t: Vec<f64> = (0..=n).map(|k| sol.lattice.t(k)).collect();
    let mean_y: Vec<f64> = (0..=n).map(|k| (0..=k).map(|j| masses.get(k, j) * sol.y.get(k, j)).sum()).collect();
    Ok(json!({
        "name": p.name,
        "y0": sol.y0(),
        "z0": sol.z0(),
        "picard_iterations": sol.picard_iterations,
        "residual_history": sol.residual_history,
        "t": t,
        "mean_y": mean_y,
    })
    .to_string())
}

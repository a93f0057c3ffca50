//! Smallness and boundedness hypotheses: Λ_β, the comparison function G,
//! the s/l ODEs, the breakdown time t*, and the bound on |p|.

use serde::{Serialize, Serializer};

use crate::error::{invalid, Error, Result};

/// Default comparison-ODE step count (step T/2000).
pub const ODE_STEPS: usize = 2000;
/// Default composite Simpson panel count for t*.
pub const QUAD_STEPS: usize = 10_000;
/// |s| beyond this is treated as blow-up.
pub const BLOWUP_CAP: f64 = 1e12;
/// β₀ when the problem does not set one.
pub const DEFAULT_BETA0: f64 = 0.5;
pub const BETAS: [f64; 4] = [2.0, 4.0, 6.0, 8.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AssumptionInputs {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub beta0: f64,
    pub horizon: f64,
    /// C_β used for every β.
    pub c_beta: f64,
}

impl AssumptionInputs {
    pub fn new(l1: f64, l2: f64, l3: f64, beta0: f64, horizon: f64) -> Self {
        AssumptionInputs { l1, l2, l3, beta0, horizon, c_beta: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("L1", self.l1), ("L2", self.l2), ("L3", self.l3), ("C_beta", self.c_beta)] {
            if !(v >= 0.0) || !v.is_finite() {
                return invalid(format!("{name} must be a finite nonnegative number, got {v}"));
            }
        }
        if !(self.beta0 > 0.0 && self.beta0 < 1.0) {
            return invalid(format!("beta0 must lie strictly inside (0, 1), got {}", self.beta0));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return invalid(format!("horizon must be positive, got {}", self.horizon));
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        self.l2.max(self.l3)
    }
}

pub fn lambda_beta(c_beta: f64, c1: f64, horizon: f64, beta: f64) -> Result<f64> {
    if beta <= 1.0 {
        return invalid(format!("beta must exceed 1, got {beta}"));
    }
    if c_beta < 0.0 || c1 < 0.0 || !(horizon > 0.0) {
        return invalid("need C_beta >= 0, c1 >= 0 and T > 0");
    }
    Ok(c_beta * 2f64.powf(beta + 1.0) * (1.0 + horizon.powf(beta)) * c1.powf(beta))
}

fn g_raw(y: f64, l1: f64, l2: f64, beta0: f64) -> f64 {
    let a = y.abs();
    let r = 1.0 / beta0;
    l1 + (l2 + l1 + r * l1 * l2) * a + (l2 + r * (l1 * l2 + l2 * l2)) * a * a + r * l2 * l2 * a * a * a
}

pub fn g_function(y: f64, l1: f64, l2: f64, beta0: f64) -> Result<f64> {
    if !(beta0 > 0.0) {
        return invalid(format!("beta0 must be positive, got {beta0}"));
    }
    Ok(g_raw(y, l1, l2, beta0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlSolution {
    pub t: Vec<f64>,
    pub s: Vec<f64>,
    pub l: Vec<f64>,
}

impl SlSolution {
    pub fn s0(&self) -> f64 {
        self.s[0]
    }

    pub fn l0(&self) -> f64 {
        self.l[0]
    }
}

/// Integrates y' = sign·G(y) backward from y(T) = y_t with RK4.
fn rk4_backward(inputs: &AssumptionInputs, y_t: f64, sign: f64, steps: usize) -> Result<Vec<f64>> {
    let h = inputs.horizon / steps as f64;
    let f = |y: f64| sign * g_raw(y, inputs.l1, inputs.l2, inputs.beta0);
    let mut out = vec![0.0; steps + 1];
    out[steps] = y_t;
    let mut y = y_t;
    for i in (0..steps).rev() {
        // stepping from t_{i+1} to t_i = t_{i+1} - h
        let k1 = f(y);
        let k2 = f(y - 0.5 * h * k1);
        let k3 = f(y - 0.5 * h * k2);
        let k4 = f(y - h * k3);
        y -= h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !y.is_finite() || y.abs() > BLOWUP_CAP {
            return Err(Error::NoSolution { t: i as f64 * h });
        }
        out[i] = y;
    }
    Ok(out)
}

/// s' = −G(s), s(T) = L₁ and l' = G(l), l(T) = −L₁, integrated backward.
pub fn solve_s_l(inputs: &AssumptionInputs, steps: usize) -> Result<SlSolution> {
    inputs.validate()?;
    if steps == 0 {
        return invalid("need at least one ODE step");
    }
    let s = rk4_backward(inputs, inputs.l1, -1.0, steps)?;
    let l = rk4_backward(inputs, -inputs.l1, 1.0, steps)?;
    let t = (0..=steps).map(|i| inputs.horizon * i as f64 / steps as f64).collect();
    Ok(SlSolution { t, s, l })
}

fn ser_ext<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TStar {
    #[serde(serialize_with = "ser_ext")]
    pub t1: f64,
    #[serde(serialize_with = "ser_ext")]
    pub t2: f64,
    #[serde(serialize_with = "ser_ext")]
    pub t_star: f64,
}

/// ∫_{a}^{∞} dy / G(±y) via y = a + tan θ and composite Simpson on [0, π/2].
fn tail_integral(inputs: &AssumptionInputs, sign: f64, steps: usize) -> f64 {
    let n = if steps % 2 == 1 { steps + 1 } else { steps };
    let a = inputs.l1;
    let half_pi = std::f64::consts::FRAC_PI_2;
    let h = half_pi / n as f64;
    let f = |theta: f64| {
        if theta >= half_pi {
            // integrand ~ 1/(c tan θ) → 0 when G is superlinear
            return 0.0;
        }
        let tn = theta.tan();
        let sec2 = 1.0 + tn * tn;
        sec2 / g_raw(sign * (a + tn), inputs.l1, inputs.l2, inputs.beta0)
    };
    let mut acc = f(0.0) + f(half_pi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(i as f64 * h);
    }
    acc * h / 3.0
}

pub fn compute_t_star(inputs: &AssumptionInputs, quad_steps: usize) -> Result<TStar> {
    inputs.validate()?;
    if quad_steps < 2 {
        return invalid("need at least two quadrature panels");
    }
    // With L₂ = 0, G is linear and the tail integral diverges; with L₁ = 0 the
    // integrand is not integrable at the lower end. Both give t* = −∞.
    if inputs.l2 == 0.0 || inputs.l1 == 0.0 {
        return Ok(TStar { t1: f64::NEG_INFINITY, t2: f64::NEG_INFINITY, t_star: f64::NEG_INFINITY });
    }
    let t2 = inputs.horizon - tail_integral(inputs, 1.0, quad_steps);
    let t1 = inputs.horizon - tail_integral(inputs, -1.0, quad_steps);
    Ok(TStar { t1, t2, t_star: t1.max(t2) })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LambdaValue {
    pub beta: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub inputs: AssumptionInputs,
    pub c1: f64,
    pub lambdas: Vec<LambdaValue>,
    pub t_star: TStar,
    /// s(0), l(0) when the comparison ODEs stay finite on [0, T].
    pub s0: Option<f64>,
    pub l0: Option<f64>,
    /// s(0) ∨ (−l(0)): the bound on |p|.
    pub p_bound: Option<f64>,
    pub smallness_ok: bool,
    pub p_bound_feasible: bool,
    pub adjoint_bound_ok: bool,
    pub q_bound: &'static str,
    pub all_ok: bool,
}

pub fn check_assumptions(inputs: &AssumptionInputs) -> Result<AssumptionReport> {
    inputs.validate()?;
    let c1 = inputs.c1();
    let lambdas: Vec<LambdaValue> = BETAS
        .iter()
        .map(|&beta| Ok(LambdaValue { beta, value: lambda_beta(inputs.c_beta, c1, inputs.horizon, beta)? }))
        .collect::<Result<_>>()?;
    let t_star = compute_t_star(inputs, QUAD_STEPS)?;
    let sl = match solve_s_l(inputs, ODE_STEPS) {
        Ok(sl) => Some(sl),
        Err(Error::NoSolution { .. }) => None,
        Err(e) => return Err(e),
    };
    let s0 = sl.as_ref().map(|s| s.s0());
    let l0 = sl.as_ref().map(|s| s.l0());
    let p_bound = sl.as_ref().map(|s| s.s0().max(-s.l0()));
    let smallness_ok = lambdas.iter().all(|l| l.value < 1.0);
    let p_bound_feasible = t_star.t_star < 0.0 && p_bound.is_some();
    let adjoint_bound_ok = p_bound_feasible && p_bound.is_some_and(|b| b * inputs.l3 <= 1.0 - inputs.beta0);
    Ok(AssumptionReport {
        inputs: *inputs,
        c1,
        lambdas,
        t_star,
        s0,
        l0,
        p_bound,
        smallness_ok,
        p_bound_feasible,
        adjoint_bound_ok,
        q_bound: "not checked",
        all_ok: smallness_ok && adjoint_bound_ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// T − ∫_{1}^{∞} dy/G(y) for L₁ = L₂ = 1, β₀ = 0.5, T = 1, computed
    /// independently by adaptive quadrature at 1e-14 tolerance.
    const T_STAR_ORACLE: f64 = 0.924_635_855_096_438_2;

    #[test]
    fn lambda_examples() {
        assert_eq!(lambda_beta(1.0, 0.0, 1.0, 2.0).unwrap(), 0.0);
        assert!((lambda_beta(1.0, 0.1, 1.0, 2.0).unwrap() - 0.16).abs() < 1e-15);
        assert!((lambda_beta(2.0, 0.5, 2.0, 2.0).unwrap() - 20.0).abs() < 1e-12);
        assert!(lambda_beta(1.0, 0.1, 1.0, 1.0).is_err());
    }

    #[test]
    fn g_examples() {
        assert_eq!(g_function(0.0, 0.7, 0.3, 0.5).unwrap(), 0.7);
        for y in [-2.0, -0.5, 0.0, 1.5] {
            let v = g_function(y, 0.4, 0.0, 0.5).unwrap();
            assert!((v - 0.4 * (1.0 + f64::abs(y))).abs() < 1e-15);
        }
        assert_eq!(g_function(1.0, 1.0, 1.0, 0.5).unwrap(), 12.0);
        assert!(g_function(1.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn s_matches_closed_form_without_coupling() {
        let inp = AssumptionInputs::new(0.8, 0.0, 0.0, 0.5, 1.0);
        let sl = solve_s_l(&inp, ODE_STEPS).unwrap();
        for (i, &t) in sl.t.iter().enumerate() {
            let exact = (1.0 + 0.8) * (0.8 * (1.0 - t)).exp() - 1.0;
            assert!((sl.s[i] - exact).abs() < 1e-6);
            assert!((sl.l[i] + sl.s[i]).abs() < 1e-12);
        }
        assert_eq!(sl.s[ODE_STEPS], 0.8);
    }

    #[test]
    fn zero_l1_gives_zero_s() {
        let inp = AssumptionInputs::new(0.0, 0.3, 0.1, 0.5, 1.0);
        let sl = solve_s_l(&inp, 100).unwrap();
        assert!(sl.s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn t_star_oracle_and_sentinel() {
        let ts = compute_t_star(&AssumptionInputs::new(1.0, 1.0, 0.0, 0.5, 1.0), QUAD_STEPS).unwrap();
        assert!((ts.t_star - T_STAR_ORACLE).abs() < 1e-6 * T_STAR_ORACLE);
        assert_eq!(ts.t1, ts.t2);
        let ts = compute_t_star(&AssumptionInputs::new(1.0, 0.0, 0.0, 0.5, 1.0), QUAD_STEPS).unwrap();
        assert_eq!(ts.t_star, f64::NEG_INFINITY);
    }

    #[test]
    fn blow_up_is_reported() {
        let inp = AssumptionInputs::new(1.0, 1.0, 0.0, 0.5, 1.0);
        assert!(matches!(solve_s_l(&inp, ODE_STEPS), Err(Error::NoSolution { .. })));
        let r = check_assumptions(&inp).unwrap();
        assert!(!r.p_bound_feasible && !r.adjoint_bound_ok);
    }

    #[test]
    fn check_examples() {
        let r = check_assumptions(&AssumptionInputs::new(0.5, 0.0, 0.0, 0.5, 1.0)).unwrap();
        assert!(r.all_ok);
        let r = check_assumptions(&AssumptionInputs::new(0.5, 0.0, 1e6, 0.5, 1.0)).unwrap();
        assert!(!r.adjoint_bound_ok);
        let mut passed = false;
        for k in 0..12 {
            let c = 0.5 * 0.5f64.powi(k);
            let r = check_assumptions(&AssumptionInputs::new(0.5, c, c, 0.5, 1.0)).unwrap();
            passed = r.all_ok;
        }
        assert!(passed);
    }

    #[test]
    fn report_serializes_infinite_t_star() {
        let r = check_assumptions(&AssumptionInputs::new(0.5, 0.0, 0.0, 0.5, 1.0)).unwrap();
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"t_star\":\"-inf\""));
    }
}

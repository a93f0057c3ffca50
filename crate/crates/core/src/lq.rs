//! Linear-quadratic problems with deterministic coefficients:
//!
//! dX = (A₁X + B₁Y + C₁Z + D₁u)dt + (A₂X + B₂Y + C₂Z + D₂u)dB,
//! −dY = (A₃X + B₃Y + C₃Z + D₃u)dt − Z dB, X(0) = x₀, Y(T) = FX(T) + J,
//!
//! J(u) = E[∫(A₄X² + B₄Y² + C₄Z² + D₄u²)dt + GX(T)²] + Y(0)².
//!
//! The adjoints reduce to ODEs, the cost adjoint (h, m, n) is decoupled by
//! m = πh + ρ, and the maximum principle becomes a quadratic inequality in
//! u − ū at every node.

use serde::{Deserialize, Serialize};

use crate::adjoint::{solve_first_order_adjoint, solve_second_order_adjoint, AdjointOptions};
use crate::error::{invalid, Error, Result};
use crate::fbsde::{solve_coupled_picard, FbsdeSolution, PicardOptions};
use crate::jet::Scalar;
use crate::model::{Coef, Control, ControlDomain, Formulas, Lipschitz, Model, ModelMeta, SigmaStructure};
use crate::par;
use crate::smp::{check_global_mp, check_local_mp, GapRecord, MpMode, MpOptions, MpReport, Objective};
use crate::tree::{build_tree, Lattice, TreeProcess};

/// Constant coefficients; index i − 1 holds A_i, B_i, C_i, D_i.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LQCoefficients {
    #[serde(rename = "A")]
    pub a: [f64; 4],
    #[serde(rename = "B")]
    pub b: [f64; 4],
    #[serde(rename = "C")]
    pub c: [f64; 4],
    #[serde(rename = "D")]
    pub d: [f64; 4],
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "G", default)]
    pub g: f64,
    #[serde(rename = "J", default)]
    pub j: f64,
    #[serde(default = "one")]
    pub x0: f64,
}

fn one() -> f64 {
    1.0
}

impl LQCoefficients {
    pub fn zero() -> Self {
        LQCoefficients { a: [0.0; 4], b: [0.0; 4], c: [0.0; 4], d: [0.0; 4], f: 0.0, g: 0.0, j: 0.0, x0: 1.0 }
    }

    /// dX = (aZ + bu)dB, −dY = cu dt − Z dB, X(0) = 1, Y(T) = dX(T),
    /// J(u) = E∫u² dt + Y(0)².
    pub fn example(a: f64, b: f64, c: f64, d: f64) -> Self {
        let mut k = LQCoefficients::zero();
        k.c[1] = a;
        k.d[1] = b;
        k.d[2] = c;
        k.d[3] = 1.0;
        k.f = d;
        k
    }

    /// The cost in the form the general checker understands, when it has no
    /// state weights.
    pub fn objective(&self) -> Option<Objective> {
        let no_state = self.a[3] == 0.0 && self.b[3] == 0.0 && self.c[3] == 0.0 && self.g == 0.0;
        no_state.then_some(Objective { y0_linear: 0.0, y0_square: 1.0, u_square: self.d[3] })
    }

    pub fn model(&self, name: &str) -> Model<LQCoefficients> {
        let max = |v: &[f64]| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        let l1 = max(&[self.a[0], self.a[1], self.a[2], self.b[2], self.c[2], self.f]);
        let l2 = max(&[self.b[0], self.c[0], self.b[1]]);
        let l3 = self.c[1].abs();
        let scale = max(&[self.a[1] * self.x0, self.d[1], 0.5]);
        Model::new(
            *self,
            ModelMeta {
                name: name.to_string(),
                x0: self.x0,
                lipschitz: Lipschitz { l: max(&[l1, l2, l3, self.d[0], self.d[1], self.d[2]]), l1, l2, l3 },
                sigma_structure: if l3 == 0.0 { SigmaStructure::ZIndependent } else { SigmaStructure::LinearZ },
                lattice_scale: scale,
            },
        )
    }

    fn k1(&self, p: f64) -> f64 {
        (self.a[1] * p + self.b[1] * p * p) / (1.0 - p * self.c[1])
    }

    fn n_h(&self, pi: f64) -> f64 {
        pi * (self.c[2] + self.c[0] * pi) / (1.0 - pi * self.c[1])
    }

    /// d/dt of (p, P, π).
    fn rhs(&self, v: [f64; 3]) -> [f64; 3] {
        let [p, big_p, pi] = v;
        let (a, b, c) = (&self.a, &self.b, &self.c);
        let k1 = self.k1(p);
        let dp = -(a[2] + b[2] * p + c[2] * k1 + a[0] * p + b[0] * p * p + c[0] * k1 * p);
        let lin = a[0] + b[0] * p + c[0] * k1;
        let vol = a[1] + b[1] * p + c[1] * k1;
        let r1 = 2.0 * lin + vol * vol;
        let dbig = -(r1 * big_p + a[3] + b[3] * p * p + c[3] * k1 * k1);
        let nh = self.n_h(pi);
        let dpi = -(b[2] * pi + a[2] + (b[0] * pi + a[0]) * pi + (b[1] * pi + a[1]) * nh);
        [dp, dbig, dpi]
    }
}

impl Formulas for LQCoefficients {
    fn coef<S: Scalar>(&self, _t: f64, x: S, y: S, z: S, u: S) -> Coef<S> {
        let lin = |i: usize| x.scale(self.a[i]) + y.scale(self.b[i]) + z.scale(self.c[i]) + u.scale(self.d[i]);
        Coef { b: lin(0), sigma: lin(1), g: lin(2) }
    }

    fn phi<S: Scalar>(&self, x: S) -> S {
        x.scale(self.f) + S::cst(self.j)
    }
}

/// p, P, π and K₁ on the time grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LqOde {
    pub t: Vec<f64>,
    pub p: Vec<f64>,
    pub big_p: Vec<f64>,
    /// Feedback of the cost adjoint: m = πh + ρ.
    pub pi: Vec<f64>,
    pub k1: Vec<f64>,
}

const BLOW_UP: f64 = 1e8;

/// Integrates p, P and π backward from (F, G, F) by RK4 with `substeps`
/// per grid step.
pub fn lq_solve_odes(coeffs: &LQCoefficients, horizon: f64, steps: usize, substeps: usize) -> Result<LqOde> {
    if horizon <= 0.0 || steps == 0 || substeps == 0 {
        return invalid("horizon, steps and substeps must be positive");
    }
    let dt = horizon / steps as f64;
    let h = dt / substeps as f64;
    let mut v = [coeffs.f, coeffs.g, coeffs.f];
    let mut out = vec![v; steps + 1];
    let check = |v: [f64; 3], k: usize| -> Result<()> {
        for p in [v[0], v[2]] {
            let den = (1.0 - p * coeffs.c[1]).abs();
            if den < 1e-8 {
                return Err(Error::Singularity { step: k, node: 0, value: den });
            }
        }
        if v.iter().any(|x| !x.is_finite() || x.abs() > BLOW_UP) {
            return Err(Error::NoSolution { t: k as f64 * dt });
        }
        Ok(())
    };
    check(v, steps)?;
    let add = |a: [f64; 3], b: [f64; 3], s: f64| [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]];
    for k in (0..steps).rev() {
        for _ in 0..substeps {
            let k1 = coeffs.rhs(v);
            let k2 = coeffs.rhs(add(v, k1, -0.5 * h));
            let k3 = coeffs.rhs(add(v, k2, -0.5 * h));
            let k4 = coeffs.rhs(add(v, k3, -h));
            for i in 0..3 {
                v[i] -= h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        check(v, k)?;
        out[k] = v;
    }
    Ok(LqOde {
        t: (0..=steps).map(|k| k as f64 * dt).collect(),
        p: out.iter().map(|v| v[0]).collect(),
        big_p: out.iter().map(|v| v[1]).collect(),
        pi: out.iter().map(|v| v[2]).collect(),
        k1: out.iter().map(|v| coeffs.k1(v[0])).collect(),
    })
}

pub fn lq_solve_p(coeffs: &LQCoefficients, horizon: f64, steps: usize) -> Result<Vec<f64>> {
    Ok(lq_solve_odes(coeffs, horizon, steps, 8)?.p)
}

#[allow(non_snake_case)]
pub fn lq_solve_P(coeffs: &LQCoefficients, horizon: f64, steps: usize) -> Result<Vec<f64>> {
    Ok(lq_solve_odes(coeffs, horizon, steps, 8)?.big_p)
}

/// Node conditional means of the cost adjoint.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HmnFields {
    pub h: TreeProcess,
    pub m: TreeProcess,
    pub n: TreeProcess,
}

impl HmnFields {
    pub fn at0(&self) -> (f64, f64, f64) {
        (self.h.get(0, 0), self.m.get(0, 0), self.n.get(0, 0))
    }
}

/// Solves (h, m, n) along the candidate trajectory: ρ by backward induction
/// of its linear BSDE on the lattice, then E[h; node] by forward mass
/// propagation, and m = πh + ρ, n = N_h h + N₀ at the node means of h.
pub fn lq_solve_hmn(coeffs: &LQCoefficients, sol: &FbsdeSolution, ode: &LqOde) -> Result<HmnFields> {
    let n = sol.lattice.steps();
    if ode.pi.len() != n + 1 {
        return invalid("ODE grid does not match the lattice");
    }
    let (dt, sq) = (sol.lattice.dt(), sol.lattice.sqrt_dt());
    let (a, b, c) = (&coeffs.a, &coeffs.b, &coeffs.c);
    let mut rho = TreeProcess::from_fn(n, |k, j| if k == n { 2.0 * coeffs.g * sol.x.get(n, j) } else { 0.0 });
    let mut n0 = TreeProcess::zeros(n);
    for k in (0..n).rev() {
        let pi = ode.pi[k];
        let den = 1.0 - pi * c[1];
        let r = &rho;
        let layer = par::map(k + 1, |j| {
            let (er, zeta) = sol.step_moments(r, k, j);
            let nz = (pi * c[0] * er + 2.0 * pi * c[3] * sol.z.get(k, j) + zeta) / den;
            let f = pi * (b[0] * er + b[1] * nz + 2.0 * b[3] * sol.y.get(k, j))
                + a[0] * er
                + a[1] * nz
                + 2.0 * a[3] * sol.x.get(k, j);
            (er + dt * f, nz)
        });
        for (j, (v, nz)) in layer.into_iter().enumerate() {
            rho.set(k, j, v);
            n0.set(k, j, nz);
        }
    }
    let masses = sol.node_masses();
    let mut hm = vec![vec![2.0 * sol.y0()]];
    for k in 0..n {
        let pi = ode.pi[k];
        let nh = coeffs.n_h(pi);
        let ah = b[2] + b[0] * pi + b[1] * nh;
        let eh = c[2] + c[0] * pi + c[1] * nh;
        let lin = sol.push_measure(k, &hm[k], |_| (0.5 * (1.0 + ah * dt + eh * sq), 0.5 * (1.0 + ah * dt - eh * sq)));
        let aff = sol.push_measure(k, masses.layer(k), |j| {
            let ch = b[0] * rho.get(k, j) + b[1] * n0.get(k, j) + 2.0 * b[3] * sol.y.get(k, j);
            let fh = c[0] * rho.get(k, j) + c[1] * n0.get(k, j) + 2.0 * c[3] * sol.z.get(k, j);
            (0.5 * (ch * dt + fh * sq), 0.5 * (ch * dt - fh * sq))
        });
        hm.push(lin.iter().zip(&aff).map(|(x, y)| x + y).collect());
    }
    let h = TreeProcess::from_fn(n, |k, j| {
        let m = masses.get(k, j);
        if m > 0.0 {
            hm[k][j] / m
        } else {
            0.0
        }
    });
    let m = TreeProcess::from_fn(n, |k, j| ode.pi[k] * h.get(k, j) + rho.get(k, j));
    let nn = TreeProcess::from_fn(n, |k, j| coeffs.n_h(ode.pi[k]) * h.get(k, j) + n0.get(k, j));
    Ok(HmnFields { h, m, n: nn })
}

/// The pointwise inequality
/// (D₁m + D₂n + D₃h + 2D₄ū)(u − ū) + [C₄p²D₂²/(1 − pC₂)² + D₄ + PD₂²](u − ū)² ≥ 0
/// at every node the candidate reaches with positive probability; with
/// `local` only the linear term is kept.
pub fn lq_check_mp(
    coeffs: &LQCoefficients,
    sol: &FbsdeSolution,
    ode: &LqOde,
    hmn: &HmnFields,
    controls: &[f64],
    local: bool,
    opts: &MpOptions,
) -> Result<MpReport> {
    if controls.is_empty() {
        return invalid("the control grid is empty");
    }
    let n = sol.lattice.steps();
    let d = &coeffs.d;
    let masses = sol.node_masses();
    let mut gaps = Vec::new();
    for k in 0..n {
        let t = sol.lattice.t(k);
        let p = ode.p[k];
        let quad = coeffs.c[3] * (p * d[1] / (1.0 - p * coeffs.c[1])).powi(2) + d[3] + ode.big_p[k] * d[1] * d[1];
        for &u in controls {
            for j in (0..=k).filter(|&j| masses.get(k, j) > 0.0) {
                let ubar = sol.u.get(k, j);
                let lin = d[0] * hmn.m.get(k, j) + d[1] * hmn.n.get(k, j) + d[2] * hmn.h.get(k, j) + 2.0 * d[3] * ubar;
                let du = u - ubar;
                let gap = if local { lin * du } else { lin * du + quad * du * du };
                gaps.push(GapRecord { step: k, node: j, t, x: sol.x.get(k, j), u, gap });
            }
        }
    }
    let mode = if local { MpMode::Local } else { MpMode::Lq };
    Ok(MpReport::assemble(mode, opts, controls.to_vec(), gaps, Vec::new(), sol.y0(), 0.0))
}

/// J(u) of a solved trajectory, with lattice expectations.
pub fn lq_cost(coeffs: &LQCoefficients, sol: &FbsdeSolution) -> f64 {
    let n = sol.lattice.steps();
    let dt = sol.lattice.dt();
    let masses = sol.node_masses();
    let mut running = 0.0;
    for k in 0..n {
        for j in 0..=k {
            let (x, y, z, u) = (sol.x.get(k, j), sol.y.get(k, j), sol.z.get(k, j), sol.u.get(k, j));
            let f = coeffs.a[3] * x * x + coeffs.b[3] * y * y + coeffs.c[3] * z * z + coeffs.d[3] * u * u;
            running += masses.get(k, j) * f * dt;
        }
    }
    let terminal: f64 = (0..=n).map(|j| masses.get(n, j) * coeffs.g * sol.x.get(n, j).powi(2)).sum();
    running + terminal + sol.y0().powi(2)
}

/// A deterministic control: the value of each of `pieces` equal blocks.
fn piece_schedule(values: &[f64], steps: usize) -> Vec<f64> {
    let k = values.len();
    (0..steps).map(|s| values[(s * k / steps).min(k - 1)]).collect()
}

pub fn lq_lattice(coeffs: &LQCoefficients, horizon: f64, steps: usize) -> Result<Lattice> {
    let scale = coeffs.model("lq").meta.lattice_scale;
    Lattice::new(build_tree(horizon, steps)?, coeffs.x0, scale)
}

pub fn lq_solve_state(
    coeffs: &LQCoefficients,
    lattice: &Lattice,
    control: &Control,
    domain: &ControlDomain,
    picard: &PicardOptions,
) -> Result<FbsdeSolution> {
    let model = coeffs.model("lq");
    let u = control.on_lattice(lattice, domain)?;
    solve_coupled_picard(&model, lattice, &u, picard, None)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostRow {
    pub pieces: Vec<f64>,
    pub cost: f64,
    /// (c∫u)² + ∫(u² + 2cdu) for the example's coefficients.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub example_gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BruteForce {
    pub pieces: usize,
    pub rows: Vec<CostRow>,
    pub argmin: Vec<f64>,
    pub min_cost: f64,
}

pub const MAX_SEARCH: usize = 1_000_000;

/// Enumerates piecewise-constant deterministic controls with `pieces`
/// blocks over `grid` and returns every cost and the minimiser (first in
/// enumeration order on ties).
pub fn lq_brute_force_cost(
    coeffs: &LQCoefficients,
    lattice: &Lattice,
    grid: &[f64],
    pieces: usize,
    picard: &PicardOptions,
) -> Result<BruteForce> {
    if grid.is_empty() || pieces == 0 {
        return invalid("brute force needs a nonempty grid and at least one piece");
    }
    let count = (grid.len() as f64).powi(pieces as i32);
    if count > MAX_SEARCH as f64 {
        return invalid(format!("search space of {count} controls exceeds {MAX_SEARCH}"));
    }
    let count = count as usize;
    let steps = lattice.steps();
    let dt = lattice.dt();
    let domain = ControlDomain::Finite(grid.to_vec());
    let model = coeffs.model("lq");
    let example = coeffs.a == [0.0; 4]
        && coeffs.b == [0.0; 4]
        && coeffs.c[0] == 0.0
        && coeffs.c[2..] == [0.0, 0.0]
        && coeffs.d[0] == 0.0
        && coeffs.d[3] == 1.0
        && coeffs.g == 0.0
        && coeffs.j == 0.0
        && coeffs.x0 == 1.0;
    let rows = par::map(count, |mut i| {
        let mut values = Vec::with_capacity(pieces);
        for _ in 0..pieces {
            values.push(grid[i % grid.len()]);
            i /= grid.len();
        }
        let sched = piece_schedule(&values, steps);
        let u = Control::Schedule(sched.clone()).on_lattice(lattice, &domain)?;
        let sol = solve_coupled_picard(&model, lattice, &u, picard, None)?;
        let example_gap = example.then(|| {
            let (c, d) = (coeffs.d[2], coeffs.f);
            let int_u: f64 = sched.iter().sum::<f64>() * dt;
            let int_u2: f64 = sched.iter().map(|u| u * u).sum::<f64>() * dt;
            (c * int_u).powi(2) + int_u2 + 2.0 * c * d * int_u
        });
        Ok(CostRow { pieces: values, cost: lq_cost(coeffs, &sol), example_gap })
    });
    let rows: Vec<CostRow> = rows.into_iter().collect::<Result<_>>()?;
    let best = rows.iter().enumerate().fold(0, |b, (i, r)| if r.cost < rows[b].cost - 1e-12 { i } else { b });
    Ok(BruteForce { pieces, argmin: rows[best].pieces.clone(), min_cost: rows[best].cost, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LqReport {
    pub horizon: f64,
    pub steps: usize,
    pub y0: f64,
    pub ode: LqOde,
    /// max |p_tree − p_ode| over the nodes.
    pub p_tree_gap: f64,
    /// max |P_tree − P_ode|; the ODE P carries the cost's state weights, so
    /// the two are comparable only when there are none.
    pub big_p_tree_gap: Option<f64>,
    pub max_abs_q: f64,
    pub hmn0: (f64, f64, f64),
    pub mp: MpReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub brute_force: Option<BruteForce>,
}

/// Solves the candidate, the adjoint ODEs, the cost adjoint, the pointwise
/// inequality and optionally a brute-force search.
#[allow(clippy::too_many_arguments)]
pub fn lq_report(
    coeffs: &LQCoefficients,
    horizon: f64,
    steps: usize,
    control: &Control,
    domain: &ControlDomain,
    brute_pieces: Option<usize>,
    picard: &PicardOptions,
    opts: &MpOptions,
) -> Result<LqReport> {
    let lattice = lq_lattice(coeffs, horizon, steps)?;
    let sol = lq_solve_state(coeffs, &lattice, control, domain, picard)?;
    let ode = lq_solve_odes(coeffs, horizon, steps, 8)?;
    let model = coeffs.model("lq");
    let first = solve_first_order_adjoint(&model, &sol, &AdjointOptions::default())?;
    let second = solve_second_order_adjoint(&model, &sol, &first)?;
    let gap = |f: &TreeProcess, v: &[f64]| {
        (0..=steps)
            .flat_map(|k| (0..=k).map(move |j| (k, j)))
            .fold(0.0_f64, |m, (k, j)| m.max((f.get(k, j) - v[k]).abs()))
    };
    let hmn = lq_solve_hmn(coeffs, &sol, &ode)?;
    let mp = lq_check_mp(coeffs, &sol, &ode, &hmn, &domain.grid(), false, opts)?;
    let brute_force = match brute_pieces {
        Some(k) => Some(lq_brute_force_cost(coeffs, &lattice, &domain.grid(), k, picard)?),
        None => None,
    };
    Ok(LqReport {
        horizon,
        steps,
        y0: sol.y0(),
        p_tree_gap: gap(&first.p, &ode.p),
        big_p_tree_gap: coeffs.objective().map(|_| gap(&second.big_p, &ode.big_p)),
        max_abs_q: first.max_abs_q,
        hmn0: hmn.at0(),
        ode,
        mp,
        brute_force,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ExampleParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub horizon: f64,
    pub steps: usize,
}

impl Default for ExampleParams {
    fn default() -> Self {
        ExampleParams { a: 0.5, b: 1.0, c: 0.25, d: 1.0, horizon: 1.0, steps: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExampleReport {
    pub params: ExampleParams,
    /// 0 < |2cd| ≤ 1 and ad < 1.
    pub params_in_range: bool,
    pub y0: f64,
    pub max_p_error: f64,
    pub max_abs_q: f64,
    pub max_abs_big_p: f64,
    pub hmn0: (f64, f64, f64),
    /// Spike check with the general machinery on U = {−1, 0, 1}.
    pub global: MpReport,
    /// The pointwise inequality on U = {−1, 0, 1}.
    pub lq: MpReport,
    /// First-order check on U = [−1, 1].
    pub local: MpReport,
    pub brute_force: BruteForce,
    pub global_pass: bool,
    pub local_fails: bool,
    pub argmin_is_zero: bool,
}

/// The worked example: ū ≡ 0 passes the global check on {−1, 0, 1}, fails
/// the local one on [−1, 1], and brute force over 3-piece controls agrees
/// that ū ≡ 0 is optimal.
pub fn run_example(params: ExampleParams) -> Result<ExampleReport> {
    let ExampleParams { a, b, c, d, horizon, steps } = params;
    let coeffs = LQCoefficients::example(a, b, c, d);
    let model = coeffs.model("example");
    let lattice = lq_lattice(&coeffs, horizon, steps)?;
    let picard = PicardOptions::default();
    let finite = ControlDomain::Finite(vec![-1.0, 0.0, 1.0]);
    let interval = ControlDomain::Interval { lo: -1.0, hi: 1.0, points: 101 };
    let sol = lq_solve_state(&coeffs, &lattice, &Control::Constant(0.0), &finite, &picard)?;
    let first = solve_first_order_adjoint(&model, &sol, &AdjointOptions::default())?;
    let second = solve_second_order_adjoint(&model, &sol, &first)?;
    let opts = MpOptions { objective: coeffs.objective().expect("no state weights"), ..MpOptions::default() };
    let grid = finite.grid();
    let global = check_global_mp(&model, &sol, &first, &second, &grid, MpMode::Global, &opts)?;
    let local = check_local_mp(&model, &sol, &first, &interval, &opts)?;
    let ode = lq_solve_odes(&coeffs, horizon, steps, 8)?;
    let hmn = lq_solve_hmn(&coeffs, &sol, &ode)?;
    let lq = lq_check_mp(&coeffs, &sol, &ode, &hmn, &grid, false, &opts)?;
    let brute_force = lq_brute_force_cost(&coeffs, &lattice, &grid, 3, &picard)?;
    let max_p_error = first.p.layers().iter().flatten().fold(0.0_f64, |m, p| m.max((p - d).abs()));
    let argmin_is_zero = brute_force.argmin.iter().all(|u| *u == 0.0);
    Ok(ExampleReport {
        params,
        params_in_range: (2.0 * c * d).abs() > 0.0 && (2.0 * c * d).abs() <= 1.0 && a * d < 1.0,
        y0: sol.y0(),
        max_p_error,
        max_abs_q: first.max_abs_q,
        max_abs_big_p: second.big_p.max_abs(),
        hmn0: hmn.at0(),
        global_pass: global.pass && lq.pass,
        local_fails: !local.pass,
        argmin_is_zero,
        global,
        lq,
        local,
        brute_force,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_coefficients_keep_terminal_values() {
        let mut k = LQCoefficients::zero();
        k.f = 0.7;
        k.g = 0.3;
        let ode = lq_solve_odes(&k, 1.0, 10, 4).unwrap();
        assert!(ode.p.iter().all(|p| (p - 0.7).abs() < 1e-15));
        assert!(ode.big_p.iter().all(|p| (p - 0.3).abs() < 1e-15));
    }

    #[test]
    fn driver_constant_gives_linear_p() {
        let mut k = LQCoefficients::zero();
        k.f = 0.2;
        k.a[2] = 0.5;
        let ode = lq_solve_odes(&k, 2.0, 8, 2).unwrap();
        for (t, p) in ode.t.iter().zip(&ode.p) {
            assert!((p - (0.2 + 0.5 * (2.0 - t))).abs() < 1e-12);
        }
    }

    #[test]
    fn quadrature_closed_form_for_big_p() {
        let mut k = LQCoefficients::zero();
        k.g = 0.1;
        k.a[3] = 0.4;
        let ode = lq_solve_odes(&k, 1.0, 16, 2).unwrap();
        for (t, p) in ode.t.iter().zip(&ode.big_p) {
            assert!((p - (0.1 + 0.4 * (1.0 - t))).abs() < 1e-12);
        }
    }

    #[test]
    fn example_adjoints_are_stationary() {
        let k = LQCoefficients::example(0.5, 1.0, 0.25, 1.0);
        let ode = lq_solve_odes(&k, 1.0, 32, 4).unwrap();
        assert!(ode.p.iter().all(|p| *p == 1.0));
        assert!(ode.big_p.iter().all(|p| *p == 0.0));
        assert!(ode.pi.iter().all(|p| *p == 1.0));
    }

    #[test]
    fn singular_feedback_is_reported() {
        let mut k = LQCoefficients::zero();
        k.f = 2.0;
        k.c[1] = 0.5;
        assert!(matches!(lq_solve_odes(&k, 1.0, 4, 1), Err(Error::Singularity { .. })));
    }
}

//! The Hamiltonian and checks of the global and local maximum principle
//! along a candidate optimal trajectory.
//!
//! Every check walks all lattice nodes before the horizon. At a node the
//! gap of a competitor u is 𝓗(u) − 𝓗(ū), evaluated with the one-step means
//! of p and P (the same quantities the spike expansion uses), so a check
//! passing at tolerance means Ŷ(0) ≥ −tol·T for every single-node spike.

use serde::Serialize;

use crate::adjoint::{gamma_masses, node_jet, AdjointBundle, SecondOrderBundle};
use crate::error::{invalid, Error, Result};
use crate::fbsde::FbsdeSolution;
use crate::jet::{U, Z};
use crate::model::{CoefficientModel, ControlDomain, SigmaStructure};
use crate::par;
use crate::tree::TreeProcess;
use crate::variation::{delta_at_node, DeltaOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MpMode {
    /// Spike variations with the Δ-shifted Hamiltonian.
    Global,
    /// σ = A(t)z + σ₁: Δ in closed form and the shift applied inside g only.
    GlobalLinearZ,
    /// Convex domain, first-order condition 𝓗_u·(u − ū) ≥ 0.
    Local,
    /// Linear-quadratic problems: the pointwise quadratic inequality in u − ū.
    Lq,
}

impl std::str::FromStr for MpMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(MpMode::Global),
            "global-linear-z" => Ok(MpMode::GlobalLinearZ),
            "local" => Ok(MpMode::Local),
            "lq" => Ok(MpMode::Lq),
            _ => invalid(format!("unknown mode {s:?}; expected global, global-linear-z, local or lq")),
        }
    }
}

/// Cost J = α·Y(0) + β·Y(0)² + w·E∫u² dt. The plain recursive cost is
/// α = 1, β = w = 0; the other terms let quadratic costs such as the one of
/// the bundled example be checked without rewriting them as a recursive
/// utility.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Objective {
    #[serde(default = "one")]
    pub y0_linear: f64,
    #[serde(default)]
    pub y0_square: f64,
    #[serde(default)]
    pub u_square: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for Objective {
    fn default() -> Self {
        Objective { y0_linear: 1.0, y0_square: 0.0, u_square: 0.0 }
    }
}

impl Objective {
    pub fn is_plain(&self) -> bool {
        *self == Objective::default()
    }

    /// dJ/dY(0) at the candidate.
    pub fn y0_weight(&self, y0: f64) -> f64 {
        self.y0_linear + 2.0 * self.y0_square * y0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MpOptions {
    /// Absolute tolerance on gaps.
    pub tolerance: f64,
    pub delta: DeltaOptions,
    pub objective: Objective,
}

impl Default for MpOptions {
    fn default() -> Self {
        MpOptions { tolerance: 1e-8, delta: DeltaOptions::default(), objective: Objective::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GapRecord {
    pub step: usize,
    pub node: usize,
    pub t: f64,
    pub x: f64,
    pub u: f64,
    pub gap: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ControlSummary {
    pub u: f64,
    pub min_gap: f64,
    pub max_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MpReport {
    pub mode: MpMode,
    pub tolerance: f64,
    pub objective: Objective,
    pub controls: Vec<f64>,
    pub checked: usize,
    /// Nodes where Δ could not be solved; they carry no gaps.
    pub unchecked: Vec<(usize, usize)>,
    pub per_control: Vec<ControlSummary>,
    /// The most negative gap; ties go to the smallest t, then smallest u.
    pub worst: Option<GapRecord>,
    pub pass: bool,
    pub y0: f64,
    pub max_abs_q: f64,
    #[serde(skip)]
    pub gaps: Vec<GapRecord>,
}

impl MpReport {
    pub fn gaps_csv(&self) -> String {
        let mut s = String::from("step,node,t,x,u,gap\n");
        for g in &self.gaps {
            s.push_str(&format!("{},{},{},{},{},{}\n", g.step, g.node, g.t, g.x, g.u, g.gap));
        }
        s
    }

    /// Assembles the summary from per-node gap rows, listed by step, then
    /// control, then node.
    pub(crate) fn assemble(
        mode: MpMode,
        opts: &MpOptions,
        controls: Vec<f64>,
        gaps: Vec<GapRecord>,
        unchecked: Vec<(usize, usize)>,
        y0: f64,
        max_abs_q: f64,
    ) -> MpReport {
        let mut per_control: Vec<ControlSummary> = controls
            .iter()
            .map(|&u| ControlSummary { u, min_gap: f64::INFINITY, max_gap: f64::NEG_INFINITY })
            .collect();
        let mut worst: Option<GapRecord> = None;
        for g in &gaps {
            if let Some(c) = per_control.iter_mut().find(|c| c.u == g.u) {
                c.min_gap = c.min_gap.min(g.gap);
                c.max_gap = c.max_gap.max(g.gap);
            }
            let better = match worst {
                None => true,
                Some(w) => {
                    let tie = 1e-12 * (1.0 + w.gap.abs());
                    g.gap < w.gap - tie || (g.gap <= w.gap + tie && (g.t, g.u) < (w.t, w.u))
                }
            };
            if better {
                worst = Some(*g);
            }
        }
        let pass = worst.map_or(true, |w| w.gap >= -opts.tolerance);
        MpReport {
            mode,
            tolerance: opts.tolerance,
            objective: opts.objective,
            controls,
            checked: gaps.len(),
            unchecked,
            per_control,
            worst,
            pass,
            y0,
            max_abs_q,
            gaps,
        }
    }
}

/// p·b(z+Δ, u) + q·σ(z+Δ, u) + ½P(σ(z+Δ, u) − σ(z, ū))² + g(z+Δ, u).
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian(
    model: &dyn CoefficientModel,
    t: f64,
    (x, y, z): (f64, f64, f64),
    u: f64,
    ubar: f64,
    (p, q, big_p): (f64, f64, f64),
    delta: f64,
) -> f64 {
    let c = model.eval(t, x, y, z + delta, u);
    let s0 = model.eval(t, x, y, z, ubar).sigma;
    p * c.b + q * c.sigma + 0.5 * big_p * (c.sigma - s0).powi(2) + c.g
}

/// The linear-z form: b and σ unshifted, g evaluated at z + p(σ(z, u) − σ(z, ū)).
fn hamiltonian_linear_z(
    model: &dyn CoefficientModel,
    t: f64,
    (x, y, z): (f64, f64, f64),
    u: f64,
    ubar: f64,
    (p, q, big_p): (f64, f64, f64),
) -> f64 {
    let c = model.eval(t, x, y, z, u);
    let s0 = model.eval(t, x, y, z, ubar).sigma;
    let g = model.eval(t, x, y, z + p * (c.sigma - s0), u).g;
    p * c.b + q * c.sigma + 0.5 * big_p * (c.sigma - s0).powi(2) + g
}

/// Per-node factor applied to 𝓗 gaps: 1 for the plain recursive cost,
/// otherwise dJ/dY(0) times the γ density E[γ | node].
fn gap_weights(
    model: &dyn CoefficientModel,
    sol: &FbsdeSolution,
    first: &AdjointBundle,
    obj: &Objective,
) -> Option<TreeProcess> {
    if obj.is_plain() {
        return None;
    }
    let gm = gamma_masses(model, sol, first);
    let nm = sol.node_masses();
    let w = obj.y0_weight(sol.y0());
    Some(TreeProcess::from_fn(sol.lattice.steps(), |k, j| {
        let m = nm.get(k, j);
        if m > 0.0 {
            w * gm.get(k, j) / m
        } else {
            w
        }
    }))
}

fn cost_gap(obj: &Objective, weight: f64, h_gap: f64, u: f64, ubar: f64) -> f64 {
    weight * h_gap + obj.u_square * (u * u - ubar * ubar)
}

/// Checks 𝓗(u) ≥ 𝓗(ū) at every node for every u in `controls`.
pub fn check_global_mp(
    model: &dyn CoefficientModel,
    sol: &FbsdeSolution,
    first: &AdjointBundle,
    second: &SecondOrderBundle,
    controls: &[f64],
    mode: MpMode,
    opts: &MpOptions,
) -> Result<MpReport> {
    if !matches!(mode, MpMode::Global | MpMode::GlobalLinearZ) {
        return invalid("check_global_mp takes the global or global-linear-z mode");
    }
    if controls.is_empty() {
        return invalid("the control grid is empty");
    }
    if mode == MpMode::GlobalLinearZ && model.meta().sigma_structure == SigmaStructure::General {
        return invalid("the linear-z mode needs a model tagged linear-z or z-independent");
    }
    let n = sol.lattice.steps();
    let weights = gap_weights(model, sol, first, &opts.objective);
    let mut gaps = Vec::new();
    let mut unchecked = Vec::new();
    for k in 0..n {
        let t = sol.lattice.t(k);
        let rows: Vec<std::result::Result<Vec<GapRecord>, ()>> = par::map(k + 1, |j| {
            let xyz = (sol.x.get(k, j), sol.y.get(k, j), sol.z.get(k, j));
            let ubar = sol.u.get(k, j);
            let p = sol.step_moments(&first.p, k, j).0;
            let big_p = sol.step_moments(&second.big_p, k, j).0;
            let adj = (p, first.q.get(k, j), big_p);
            let w = weights.as_ref().map_or(1.0, |w| w.get(k, j));
            let h0 = hamiltonian(model, t, xyz, ubar, ubar, adj, 0.0);
            let mut out = Vec::with_capacity(controls.len());
            for &u in controls {
                let hg = match mode {
                    MpMode::GlobalLinearZ => {
                        let a = model.eval_jet(t, xyz.0, xyz.1, xyz.2, u).sigma.d(Z);
                        if (1.0 - p * a).abs() < opts.delta.beta0 / 2.0 {
                            return Err(());
                        }
                        hamiltonian_linear_z(model, t, xyz, u, ubar, adj) - h0
                    }
                    _ => {
                        let d = delta_at_node(model, sol, first, k, j, u, 0.0, &opts.delta).map_err(|_| ())?.0;
                        hamiltonian(model, t, xyz, u, ubar, adj, d.value) - h0
                    }
                };
                let gap = if u == ubar { 0.0 } else { cost_gap(&opts.objective, w, hg, u, ubar) };
                out.push(GapRecord { step: k, node: j, t, x: xyz.0, u, gap });
            }
            Ok(out)
        });
        let mut layer: Vec<GapRecord> = Vec::new();
        for (j, r) in rows.into_iter().enumerate() {
            match r {
                Ok(v) => layer.extend(v),
                Err(()) => unchecked.push((k, j)),
            }
        }
        layer.sort_by(|a, b| a.u.total_cmp(&b.u).then(a.node.cmp(&b.node)));
        gaps.extend(layer);
    }
    Ok(MpReport::assemble(mode, opts, controls.to_vec(), gaps, unchecked, sol.y0(), first.max_abs_q))
}

/// 𝓗_u = pb_u + qσ_u + g_u + (pb_z + qσ_z + g_z)·pσ_u/(1 − pσ_z) at a node.
pub fn hamiltonian_u(
    model: &dyn CoefficientModel,
    sol: &FbsdeSolution,
    first: &AdjointBundle,
    k: usize,
    j: usize,
) -> f64 {
    let c = node_jet(model, sol, k, j);
    let p = sol.step_moments(&first.p, k, j).0;
    let q = first.q.get(k, j);
    let hz = p * c.b.d(Z) + q * c.sigma.d(Z) + c.g.d(Z);
    p * c.b.d(U) + q * c.sigma.d(U) + c.g.d(U) + hz * p * c.sigma.d(U) / (1.0 - p * c.sigma.d(Z))
}

/// Checks 𝓗_u·(u − ū) ≥ 0 on the grid of a convex domain.
pub fn check_local_mp(
    model: &dyn CoefficientModel,
    sol: &FbsdeSolution,
    first: &AdjointBundle,
    domain: &ControlDomain,
    opts: &MpOptions,
) -> Result<MpReport> {
    if !domain.is_convex() {
        return invalid("the local maximum principle needs a convex (interval) control domain");
    }
    let controls = domain.grid();
    let n = sol.lattice.steps();
    let weights = gap_weights(model, sol, first, &opts.objective);
    let mut gaps = Vec::new();
    for k in 0..n {
        let t = sol.lattice.t(k);
        let rows: Vec<Vec<GapRecord>> = par::map(k + 1, |j| {
            let ubar = sol.u.get(k, j);
            let w = weights.as_ref().map_or(1.0, |w| w.get(k, j));
            let hu = w * hamiltonian_u(model, sol, first, k, j) + 2.0 * opts.objective.u_square * ubar;
            let x = sol.x.get(k, j);
            controls.iter().map(|&u| GapRecord { step: k, node: j, t, x, u, gap: hu * (u - ubar) }).collect()
        });
        let mut layer: Vec<GapRecord> = rows.into_iter().flatten().collect();
        layer.sort_by(|a, b| a.u.total_cmp(&b.u).then(a.node.cmp(&b.node)));
        gaps.extend(layer);
    }
    Ok(MpReport::assemble(MpMode::Local, opts, controls, gaps, Vec::new(), sol.y0(), first.max_abs_q))
}

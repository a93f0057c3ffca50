//! Spike variations: the Δ correction, the first- and second-order
//! variational systems, the decoupling relations between them and the
//! adjoints, and empirical ε-orders of the perturbation.
//!
//! The variational systems are solved twice. The closed-loop route runs
//! X₁' = X₁(1 + m dt + s ξ√dt) + δσ I ξ√dt forward with the adjoint's
//! feedback. The direct route makes no use of the adjoints: at every node it
//! solves for the polynomial representation of (Y, Z) in the variational
//! states over the basis [x₂, ½x₁², x₁, 1] by a node-level fixed point. The
//! relation residuals compare the two.

use std::ops::{Add, Mul, Sub};

use serde::Serialize;

use crate::adjoint::{
    gamma_representation, loop_factors, node_jet, solve_auxiliary_yhat, solve_first_order_adjoint,
    solve_second_order_adjoint, spike_jumps, AdjointBundle, AdjointOptions, AuxiliaryBundle, Grad, SecondOrderBundle,
};
use crate::error::{invalid, Error, Result};
use crate::fbsde::{solve_coupled_picard, FbsdeSolution, PicardOptions};
use crate::jet::{Jet, X, Y, Z};
use crate::model::{Coef, CoefficientModel, SnappedSpike, SpikeSpec};
use crate::par;
use crate::paths::{state_path, PathSet};
use crate::tree::{Stencil, TreeProcess};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DeltaOptions {
    /// Step-change tolerance of the fixed point.
    pub tol: f64,
    pub max_iter: usize,
    pub beta0: f64,
}

impl Default for DeltaOptions {
    fn default() -> Self {
        DeltaOptions { tol: 1e-13, max_iter: 200, beta0: crate::assumptions::DEFAULT_BETA0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DeltaNode {
    pub value: f64,
    pub iterations: usize,
    pub residual: f64,
    pub bisection: bool,
}

/// Solves Δ = p·jump(Δ) where jump(Δ) = σ(z̄ + Δ, u) − σ(z̄, ū). Fixed-point
/// iteration from `init` when `contracting`, with bisection on
/// Δ − p·jump(Δ) as the fallback.
pub fn delta_fixed_point(
    p: f64,
    jump: &dyn Fn(f64) -> f64,
    init: f64,
    contracting: bool,
    opts: &DeltaOptions,
) -> Option<DeltaNode> {
    let h = |d: f64| d - p * jump(d);
    let mut d = init;
    if contracting {
        for it in 1..=opts.max_iter {
            let next = p * jump(d);
            if !next.is_finite() {
                break;
            }
            if (next - d).abs() <= opts.tol {
                return Some(DeltaNode { value: next, iterations: it, residual: h(next).abs(), bisection: false });
            }
            d = next;
        }
    }
    let centre = if d.is_finite() { d } else { init };
    let mut r = 1.0;
    let (mut lo, mut hi) = loop {
        let (a, b) = (centre - r, centre + r);
        if h(a) * h(b) <= 0.0 {
            break (a, b);
        }
        r *= 2.0;
        if r > 1e12 {
            return None;
        }
    };
    let mut it = 0;
    while hi - lo > opts.tol * (1.0 + lo.abs().max(hi.abs())) && it < 400 {
        let mid = 0.5 * (lo + hi);
        if h(lo) * h(mid) <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        it += 1;
    }
    let value = 0.5 * (lo + hi);
    Some(DeltaNode { value, iterations: it, residual: h(value).abs(), bisection: true })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeltaProcess {
    /// Δ on the spike steps, zero elsewhere.
    pub delta: TreeProcess,
    /// The p multiplying the jump: the one-step conditional mean of p, which
    /// is what makes Z₁ = K₁X₁ + Δ exact on the lattice.
    pub p_used: TreeProcess,
    pub residual: f64,
    pub iterations: usize,
    pub fallback_nodes: usize,
    /// |p|·L₃ ≤ 1 − β₀ on every spike node.
    pub precondition_ok: bool,
    /// max |Δ| / (β₀⁻¹ |p·(σ(z̄, u) − σ(z̄, ū))|) over nodes with a nonzero jump.
    pub bound_ratio: f64,
}

/// Δ at one node for control value `u`.
pub fn delta_at_node(
    model: &dyn CoefficientModel,
    sol: &FbsdeSolution,
    adj: &AdjointBundle,
    k: usize,
    j: usize,
    u: f64,
    init: f64,
    opts: &DeltaOptions,
) -> Result<(DeltaNode, f64)> {
    let p = sol.step_moments(&adj.p, k, j).0;
    let l3 = model.meta().lipschitz.l3;
    let contracting = p.abs() * l3 <= 1.0 - opts.beta0;
    let (t, x, y, z) = (sol.lattice.t(k), sol.x.get(k, j), sol.y.get(k, j), sol.z.get(k, j));
    let base = model.eval(t, x, y, z, sol.u.get(k, j)).sigma;
    let jump = |d: f64| model.eval(t, x, y, z + d, u).sigma - base;
    let node = delta_fixed_point(p, &jump, init, contracting, opts).ok_or(Error::NoSolution { t })?;
    Ok((node, p))
}

pub fn solve_delta(
    model: &dyn CoefficientModel,
    sol: &FbsdeSolution,
    adj: &AdjointBundle,
    spike: &SnappedSpike,
    opts: &DeltaOptions,
) -> Result<DeltaProcess> {
    let n = sol.lattice.steps();
    let l3 = model.meta().lipschitz.l3;
    let mut delta = TreeProcess::zeros(n);
    let mut p_used = TreeProcess::zeros(n);
    let mut out = DeltaProcess {
        delta: TreeProcess::zeros(0),
        p_used: TreeProcess::zeros(0),
        residual: 0.0,
        iterations: 0,
        fallback_nodes: 0,
        precondition_ok: true,
        bound_ratio: 0.0,
    };
    for k in spike.start..spike.end.min(n) {
        let nodes = par::map(k + 1, |j| {
            let (node, p) = delta_at_node(model, sol, adj, k, j, spike.replacement, 0.0, opts)?;
            let jump0 = spike_jumps(model, sol, k, j, 0.0, spike.replacement).sigma;
            Ok((node, p, jump0))
        });
        for (j, r) in nodes.into_iter().enumerate() {
            let (node, p, jump0): (DeltaNode, f64, f64) = r?;
            delta.set(k, j, node.value);
            p_used.set(k, j, p);
            out.residual = out.residual.max(node.residual);
            out.iterations = out.iterations.max(node.iterations);
            out.fallback_nodes += node.bisection as usize;
            out.precondition_ok &= p.abs() * l3 <= 1.0 - opts.beta0;
            let scale = (p * jump0).abs() / opts.beta0;
            if scale > 0.0 {
                out.bound_ratio = out.bound_ratio.max(node.value.abs() / scale);
            } else if node.value != 0.0 {
                out.bound_ratio = f64::INFINITY;
            }
        }
    }
    out.delta = delta;
    out.p_used = p_used;
    Ok(out)
}

/// The control field with the spike applied.
pub fn spiked_control(ubar: &TreeProcess, spike: &SnappedSpike) -> TreeProcess {
    let mut u = ubar.clone();
    for k in spike.start..spike.end.min(u.steps() + 1) {
        u.layer_mut(k).fill(spike.replacement);
    }
    u
}

/// Polynomial in the variational states over the basis [x₂, ½x₁², x₁, 1].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Poly(pub [f64; 4]);

impl Poly {
    pub const X2: Poly = Poly([1.0, 0.0, 0.0, 0.0]);
    pub const HALF_X1_SQ: Poly = Poly([0.0, 1.0, 0.0, 0.0]);
    pub const X1: Poly = Poly([0.0, 0.0, 1.0, 0.0]);
    pub const ONE: Poly = Poly([0.0, 0.0, 0.0, 1.0]);

    pub fn constant(c: f64) -> Poly {
        Poly([0.0, 0.0, 0.0, c])
    }

    pub fn eval(&self, x1: f64, x2: f64) -> f64 {
        self.0[0] * x2 + self.0[1] * 0.5 * x1 * x1 + self.0[2] * x1 + self.0[3]
    }

    /// Product of two polynomials affine in x₁.
    fn mul_affine(self, o: Poly) -> Poly {
        debug_assert!(self.0[0] == 0.0 && self.0[1] == 0.0 && o.0[0] == 0.0 && o.0[1] == 0.0);
        let (a, b, c, d) = (self.0[2], self.0[3], o.0[2], o.0[3]);
        Poly([0.0, 2.0 * a * c, a * d + b * c, b * d])
    }

    fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

impl Add for Poly {
    type Output = Poly;
    fn add(self, o: Poly) -> Poly {
        Poly([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2], self.0[3] + o.0[3]])
    }
}

impl Sub for Poly {
    type Output = Poly;
    fn sub(self, o: Poly) -> Poly {
        Poly([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2], self.0[3] - o.0[3]])
    }
}

impl Mul<f64> for Poly {
    type Output = Poly;
    fn mul(self, c: f64) -> Poly {
        Poly(self.0.map(|v| v * c))
    }
}

/// vᵀ D²ψ v for v affine in x₁, with (x, y, z) Hessian of a jet.
fn quad(j: &Jet, v: [Poly; 3]) -> Poly {
    let idx = [X, Y, Z];
    let mut acc = Poly::default();
    for a in 0..3 {
        for b in 0..3 {
            let h = j.dd(idx[a], idx[b]);
            if h != 0.0 {
                acc = acc + v[a].mul_affine(v[b]) * h;
            }
        }
    }
    acc
}

/// Node fields of a polynomial representation: Y = Σ y_i·basis_i, same for Z.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PolyField {
    pub y: [TreeProcess; 4],
    pub z: [TreeProcess; 4],
}

impl PolyField {
    fn zeros(n: usize) -> Self {
        PolyField {
            y: std::array::from_fn(|_| TreeProcess::zeros(n)),
            z: std::array::from_fn(|_| TreeProcess::zeros(n)),
        }
    }

    pub fn y_at(&self, k: usize, j: usize) -> Poly {
        Poly(std::array::from_fn(|i| self.y[i].get(k, j)))
    }

    pub fn z_at(&self, k: usize, j: usize) -> Poly {
        Poly(std::array::from_fn(|i| self.z[i].get(k, j)))
    }

    fn set(&mut self, k: usize, j: usize, y: Poly, z: Poly) {
        for i in 0..4 {
            self.y[i].set(k, j, y.0[i]);
            self.z[i].set(k, j, z.0[i]);
        }
    }

    fn y_child(&self, k: usize, st: &Stencil) -> Poly {
        Poly(std::array::from_fn(|i| st.apply(self.y[i].layer(k + 1))))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Order {
    First,
    Second,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VariationOptions {
    pub delta: DeltaOptions,
    pub adjoint: AdjointOptions,
    pub picard: PicardOptions,
    /// Relative coefficient change accepted by the node fixed point.
    pub node_tol: f64,
    pub node_max_iter: usize,
    /// Sampled paths when the tree is too large to enumerate.
    pub paths: usize,
    pub seed: u64,
}

impl Default for VariationOptions {
    fn default() -> Self {
        VariationOptions {
            delta: DeltaOptions::default(),
            adjoint: AdjointOptions::default(),
            picard: PicardOptions::default(),
            node_tol: 1e-14,
            node_max_iter: 1000,
            paths: 2000,
            seed: 1,
        }
    }
}

/// Everything at a node the variational systems need.
struct NodeData {
    c: Coef<Jet>,
    on: f64,
    delta: f64,
    jump: Coef<f64>,
    /// δσ_x, δσ_y, δσ_z at the Δ-shifted point.
    djump: [f64; 3],
    q: f64,
}

fn node_data(
    model: &dyn CoefficientModel,
    sol: &FbsdeSolution,
    adj: &AdjointBundle,
    delta: &TreeProcess,
    spike: &SnappedSpike,
    k: usize,
    j: usize,
) -> NodeData {
    let c = node_jet(model, sol, k, j);
    let on = spike.contains(k);
    let d = if on { delta.get(k, j) } else { 0.0 };
    let (jump, djump) = if on {
        let (t, x, y, z) = (sol.lattice.t(k), sol.x.get(k, j), sol.y.get(k, j), sol.z.get(k, j));
        let s = model.eval_jet(t, x, y, z + d, spike.replacement).sigma;
        (
            spike_jumps(model, sol, k, j, d, spike.replacement),
            [s.d(X) - c.sigma.d(X), s.d(Y) - c.sigma.d(Y), s.d(Z) - c.sigma.d(Z)],
        )
    } else {
        (Coef { b: 0.0, sigma: 0.0, g: 0.0 }, [0.0; 3])
    };
    NodeData { c, on: if on { 1.0 } else { 0.0 }, delta: d, jump, djump, q: adj.q.get(k, j) }
}

/// One-step dynamics of the variational states at a node:
/// x₁' = x₁ + d₁dt + s₁ξ√dt, x₂' = x₂ + d₂dt + s₂ξ√dt.
struct StepCoefs {
    d1: Poly,
    s1: Poly,
    d2: Poly,
    s2: Poly,
    /// The vector [X₁, Y₁, Z₁ − ΔI] entering the second-order terms.
    v: [Poly; 3],
}

fn step_coefs(nd: &NodeData, y1: Poly, z1: Poly, y2: Poly, z2: Poly, order: Order) -> StepCoefs {
    let g = Grad::of(&nd.c);
    let x1 = Poly::X1;
    let z1s = z1 - Poly::constant(nd.delta * nd.on);
    let d1 = x1 * g.bx + y1 * g.by + z1s * g.bz;
    let s1 = x1 * g.sx + y1 * g.sy + z1s * g.sz + Poly::constant(nd.jump.sigma * nd.on);
    let v = [x1, y1, z1s];
    let (d2, s2) = match order {
        Order::First => (Poly::default(), Poly::default()),
        Order::Second => {
            let x2 = Poly::X2;
            let d2 = x2 * g.bx + y2 * g.by + z2 * g.bz + Poly::constant(nd.jump.b * nd.on) + quad(&nd.c.b, v) * 0.5;
            let s2 = x2 * g.sx
                + y2 * g.sy
                + z2 * g.sz
                + quad(&nd.c.sigma, v) * 0.5
                + (x1 * nd.djump[0] + y1 * nd.djump[1] + z1s * nd.djump[2]) * nd.on;
            (d2, s2)
        }
    };
    StepCoefs { d1, s1, d2, s2, v }
}

/// Solves the direct variational system of the given order by backward
/// induction with a node-level fixed point on the polynomial coefficients.
pub fn solve_variation_direct(
    model: &dyn CoefficientModel,
    sol: &FbsdeSolution,
    adj: &AdjointBundle,
    delta: &TreeProcess,
    spike: &SnappedSpike,
    order: Order,
    first: Option<&PolyField>,
    opts: &VariationOptions,
) -> Result<(PolyField, usize)> {
    if order == Order::Second && first.is_none() {
        return invalid("the second-order system needs the first-order solution");
    }
    let n = sol.lattice.steps();
    let (dt, sq) = (sol.lattice.dt(), sol.lattice.sqrt_dt());
    let mut f = PolyField::zeros(n);
    for j in 0..=n {
        let (_, px, pxx) = model.phi_jet(sol.x.get(n, j));
        let y = match order {
            Order::First => Poly::X1 * px,
            Order::Second => Poly::X2 * px + Poly::HALF_X1_SQ * pxx,
        };
        f.set(n, j, y, Poly::default());
    }
    let mut max_it = 0;
    for k in (0..n).rev() {
        let fr = &f;
        let layer: Vec<Result<(Poly, Poly, usize)>> = par::map(k + 1, |j| {
            let nd = node_data(model, sol, adj, delta, spike, k, j);
            let g = Grad::of(&nd.c);
            let (xp, xm) = sol.children(k, j);
            let children = [
                (1.0, fr.y_child(k, &sol.lattice.child_stencil(k, j, xp))),
                (-1.0, fr.y_child(k, &sol.lattice.child_stencil(k, j, xm))),
            ];
            let (y1k, z1k) = match first {
                Some(p) if order == Order::Second => (p.y_at(k, j), p.z_at(k, j)),
                _ => (Poly::default(), Poly::default()),
            };
            let mut y = (children[0].1 + children[1].1) * 0.5;
            let mut z = Poly::default();
            let mut change = f64::INFINITY;
            for it in 1..=opts.node_max_iter {
                let (y1, z1) = if order == Order::First { (y, z) } else { (y1k, z1k) };
                let sc = step_coefs(&nd, y1, z1, y, z, order);
                let next = children.map(|(xi, c)| {
                    let x1n = Poly::X1 + sc.d1 * dt + sc.s1 * (xi * sq);
                    let x2n = Poly::X2 + sc.d2 * dt + sc.s2 * (xi * sq);
                    let mut out = x1n * c.0[2] + Poly::constant(c.0[3]);
                    if order == Order::Second {
                        out = out + x2n * c.0[0] + x1n.mul_affine(x1n) * (0.5 * c.0[1]);
                    }
                    out
                });
                let driver = match order {
                    Order::First => {
                        Poly::X1 * g.gx + y * g.gy + (z - Poly::constant(nd.delta * nd.on)) * g.gz
                            - Poly::constant(nd.q * nd.jump.sigma * nd.on)
                    }
                    Order::Second => {
                        Poly::X2 * g.gx
                            + y * g.gy
                            + z * g.gz
                            + Poly::constant((nd.q * nd.jump.sigma + nd.jump.g) * nd.on)
                            + quad(&nd.c.g, sc.v) * 0.5
                    }
                };
                let yn = (next[0] + next[1]) * 0.5 + driver * dt;
                let zn = (next[0] - next[1]) * (0.5 / sq);
                change = (yn - y).max_abs().max((zn - z).max_abs());
                let scale = 1.0 + yn.max_abs().max(zn.max_abs());
                y = yn;
                z = zn;
                if change <= opts.node_tol * scale {
                    return Ok((y, z, it));
                }
            }
            Err(Error::NumericDivergence { step: k, node: j, change })
        });
        for (j, r) in layer.into_iter().enumerate() {
            let (y, z, it) = r?;
            f.set(k, j, y, z);
            max_it = max_it.max(it);
        }
    }
    Ok((f, max_it))
}

/// A solved reference trajectory with its adjoints, reused across spikes.
pub struct Baseline<'a> {
    pub model: &'a dyn CoefficientModel,
    pub sol: FbsdeSolution,
    pub first: AdjointBundle,
    pub second: SecondOrderBundle,
    pub opts: VariationOptions,
}

impl<'a> Baseline<'a> {
    pub fn new(model: &'a dyn CoefficientModel, sol: FbsdeSolution, opts: VariationOptions) -> Result<Self> {
        let first = solve_first_order_adjoint(model, &sol, &opts.adjoint)?;
        let second = solve_second_order_adjoint(model, &sol, &first)?;
        Ok(Baseline { model, sol, first, second, opts })
    }
}

/// Per-node closed-loop coefficients of X₁ and direct one-step coefficients
/// of X₁, X₂, flattened so paths can interpolate them.
struct PathFields {
    m: TreeProcess,
    s: TreeProcess,
    jump: TreeProcess,
    /// d₁, s₁ coefficients on [x₁, 1]; d₂, s₂ on the full basis.
    d1: [TreeProcess; 2],
    s1: [TreeProcess; 2],
    d2: [TreeProcess; 4],
    s2: [TreeProcess; 4],
}

fn path_fields(
    base: &Baseline,
    spike: &SnappedSpike,
    delta: &TreeProcess,
    v1: &PolyField,
    v2: &PolyField,
) -> PathFields {
    let n = base.sol.lattice.steps();
    let z = || TreeProcess::zeros(n);
    let mut pf = PathFields {
        m: z(),
        s: z(),
        jump: z(),
        d1: [z(), z()],
        s1: [z(), z()],
        d2: std::array::from_fn(|_| z()),
        s2: std::array::from_fn(|_| z()),
    };
    for k in 0..n {
        let rows = par::map(k + 1, |j| {
            let nd = node_data(base.model, &base.sol, &base.first, delta, spike, k, j);
            let g = Grad::of(&nd.c);
            let (m, s) = loop_factors(&g, base.first.p.get(k, j), base.first.k1.get(k, j));
            let sc = step_coefs(&nd, v1.y_at(k, j), v1.z_at(k, j), v2.y_at(k, j), v2.z_at(k, j), Order::Second);
            (m, s, nd.jump.sigma * nd.on, sc)
        });
        for (j, (m, s, jump, sc)) in rows.into_iter().enumerate() {
            pf.m.set(k, j, m);
            pf.s.set(k, j, s);
            pf.jump.set(k, j, jump);
            for i in 0..2 {
                pf.d1[i].set(k, j, sc.d1.0[2 + i]);
                pf.s1[i].set(k, j, sc.s1.0[2 + i]);
            }
            for i in 0..4 {
                pf.d2[i].set(k, j, sc.d2.0[i]);
                pf.s2[i].set(k, j, sc.s2.0[i]);
            }
        }
    }
    pf
}

/// Variational states along one path of the reference trajectory.
struct PathStates {
    xbar: Vec<f64>,
    x1_closed: Vec<f64>,
    x1: Vec<f64>,
    x2: Vec<f64>,
}

fn walk(base: &Baseline, pf: &PathFields, signs: &[f64]) -> PathStates {
    let lat = &base.sol.lattice;
    let (dt, sq) = (lat.dt(), lat.sqrt_dt());
    let xbar = state_path(&base.sol, signs);
    let n = signs.len();
    let (mut xc, mut x1, mut x2) = (vec![0.0; n + 1], vec![0.0; n + 1], vec![0.0; n + 1]);
    for k in 0..n {
        let st = lat.stencil(k, xbar[k]);
        let at = |f: &TreeProcess| st.apply(f.layer(k));
        let w = signs[k] * sq;
        xc[k + 1] = xc[k] * (1.0 + at(&pf.m) * dt + at(&pf.s) * w) + at(&pf.jump) * w;
        let lin = |c: &[TreeProcess; 2]| at(&c[0]) * x1[k] + at(&c[1]);
        x1[k + 1] = x1[k] + lin(&pf.d1) * dt + lin(&pf.s1) * w;
        let full = |c: &[TreeProcess; 4]| Poly(std::array::from_fn(|i| at(&c[i]))).eval(x1[k], x2[k]);
        x2[k + 1] = x2[k] + full(&pf.d2) * dt + full(&pf.s2) * w;
    }
    PathStates { xbar, x1_closed: xc, x1, x2 }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RelationReport {
    pub spike: SnappedSpike,
    pub paths: PathSet,
    pub delta_residual: f64,
    pub delta_fallback_nodes: usize,
    /// sup |Y₁ − pX₁| along the paths.
    pub r_y1: f64,
    /// sup |Z₁ − K₁X₁| off the spike steps.
    pub r_z1: f64,
    /// sup |Z₁ − K₁X₁ − Δ| on the spike steps.
    pub r_z1_spike: f64,
    /// sup |Y₂ − pX₂ − ½PX₁² − Ŷ| along the paths.
    pub r_y2: f64,
    /// sup |X₁(direct) − X₁(closed loop)|.
    pub x1_gap: f64,
    pub y2_0: f64,
    pub yhat_0: f64,
    pub yhat_gamma_0: f64,
    pub node_iterations: usize,
}

/// Variational solutions for one spike.
pub struct SpikeAnalysis {
    pub spike: SnappedSpike,
    pub delta: crate::variation::DeltaProcess,
    pub v1: PolyField,
    pub v2: PolyField,
    pub aux: AuxiliaryBundle,
    pub node_iterations: usize,
}

pub fn analyse_spike(base: &Baseline, spike: &SnappedSpike) -> Result<SpikeAnalysis> {
    let o = &base.opts;
    let delta = solve_delta(base.model, &base.sol, &base.first, spike, &o.delta)?;
    let (v1, i1) =
        solve_variation_direct(base.model, &base.sol, &base.first, &delta.delta, spike, Order::First, None, o)?;
    let (v2, i2) =
        solve_variation_direct(base.model, &base.sol, &base.first, &delta.delta, spike, Order::Second, Some(&v1), o)?;
    let aux = solve_auxiliary_yhat(base.model, &base.sol, &base.first, &base.second, spike, &delta.delta)?;
    Ok(SpikeAnalysis { spike: *spike, delta, v1, v2, aux, node_iterations: i1.max(i2) })
}

pub fn relations(base: &Baseline, spike: &SnappedSpike) -> Result<RelationReport> {
    let a = analyse_spike(base, spike)?;
    let pf = path_fields(base, spike, &a.delta.delta, &a.v1, &a.v2);
    let n = base.sol.lattice.steps();
    let ps = PathSet::new(n, base.opts.paths, base.opts.seed)?;
    let lat = &base.sol.lattice;
    let sups = par::map(ps.len(), |i| {
        let st = walk(base, &pf, &ps.signs(i));
        let mut r = [0.0_f64; 5];
        for k in 0..=n {
            let s = lat.stencil(k, st.xbar[k]);
            let at = |f: &TreeProcess| s.apply(f.layer(k));
            let (x1, x2) = (st.x1[k], st.x2[k]);
            let p = at(&base.first.p);
            let y1 = at(&a.v1.y[2]) * x1 + at(&a.v1.y[3]);
            r[0] = r[0].max((y1 - p * x1).abs());
            if k < n {
                let z1 = at(&a.v1.z[2]) * x1 + at(&a.v1.z[3]);
                let k1x = at(&base.first.k1) * x1;
                if spike.contains(k) {
                    r[2] = r[2].max((z1 - k1x - at(&a.delta.delta)).abs());
                } else {
                    r[1] = r[1].max((z1 - k1x).abs());
                }
            }
            let y2 = Poly(std::array::from_fn(|c| at(&a.v2.y[c]))).eval(x1, x2);
            let rel = p * x2 + 0.5 * at(&base.second.big_p) * x1 * x1 + at(&a.aux.yhat);
            r[3] = r[3].max((y2 - rel).abs());
            r[4] = r[4].max((x1 - st.x1_closed[k]).abs());
        }
        r
    });
    let sup = |c: usize| sups.iter().fold(0.0_f64, |m, r| m.max(r[c]));
    let gamma = gamma_representation(base.model, &base.sol, &base.first, &base.second, spike, &a.delta.delta);
    Ok(RelationReport {
        spike: *spike,
        paths: ps,
        delta_residual: a.delta.residual,
        delta_fallback_nodes: a.delta.fallback_nodes,
        r_y1: sup(0),
        r_z1: sup(1),
        r_z1_spike: sup(2),
        r_y2: sup(3),
        x1_gap: sup(4),
        y2_0: a.v2.y[3].get(0, 0),
        yhat_0: a.aux.y0(),
        yhat_gamma_0: gamma,
        node_iterations: a.node_iterations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpikeOrderRow {
    pub eps: f64,
    /// Measure of the snapped spike set.
    pub eps_snapped: f64,
    /// E sup |X^ε − X̄|^β for each β.
    pub x_sup: Vec<f64>,
    /// E sup |Y^ε − Ȳ|^β.
    pub y_sup: Vec<f64>,
    /// E (∫ |Z^ε − Z̄|² dt)^{β/2}.
    pub z_int: Vec<f64>,
    /// E sup |X₁|².
    pub x1_sup2: f64,
    /// E sup |X^ε − X̄ − X₁|².
    pub x_rem2: f64,
    pub y0_diff: f64,
    pub y2_0: f64,
    /// |Y^ε(0) − Ȳ(0) − Y₁(0) − Y₂(0)|.
    pub y0_rem: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlopeFit {
    pub statistic: String,
    pub slope: f64,
    pub r2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpikeOrderReport {
    pub t0: f64,
    pub replacement: f64,
    pub betas: Vec<f64>,
    pub paths: PathSet,
    pub rows: Vec<SpikeOrderRow>,
    pub fits: Vec<SlopeFit>,
}

impl SpikeOrderReport {
    pub fn slope(&self, statistic: &str) -> Option<f64> {
        self.fits.iter().find(|f| f.statistic == statistic).map(|f| f.slope)
    }
}

/// Least-squares slope and R² of log y against log x.
pub fn loglog_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = ly.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, r2)
}

/// Closed-loop factors of X₁: dX₁ = mX₁dt + (sX₁ + jump)dW.
fn loop_fields(base: &Baseline) -> (TreeProcess, TreeProcess) {
    let n = base.sol.lattice.steps();
    let (mut m, mut s) = (TreeProcess::zeros(n), TreeProcess::zeros(n));
    for k in 0..n {
        let rows = par::map(k + 1, |j| {
            let g = Grad::of(&node_jet(base.model, &base.sol, k, j));
            loop_factors(&g, base.first.p.get(k, j), base.first.k1.get(k, j))
        });
        for (j, (mj, sj)) in rows.into_iter().enumerate() {
            m.set(k, j, mj);
            s.set(k, j, sj);
        }
    }
    (m, s)
}

fn jump_field(base: &Baseline, spike: &SnappedSpike, delta: &TreeProcess) -> TreeProcess {
    let n = base.sol.lattice.steps();
    let mut f = TreeProcess::zeros(n);
    for k in (0..n).filter(|k| spike.contains(*k)) {
        let row =
            par::map(k + 1, |j| spike_jumps(base.model, &base.sol, k, j, delta.get(k, j), spike.replacement).sigma);
        for (j, v) in row.into_iter().enumerate() {
            f.set(k, j, v);
        }
    }
    f
}

/// Perturbed solution and first-order data for one spike size.
struct OrderCase {
    spike: SnappedSpike,
    pert: FbsdeSolution,
    jump: TreeProcess,
    y2_0: f64,
}

/// Measures the ε-orders of the spike perturbation at spikes [t₀, t₀ + ε)
/// replacing the control by `replacement`.
pub fn spike_orders(
    base: &Baseline,
    t0: f64,
    eps: &[f64],
    replacement: f64,
    betas: &[f64],
) -> Result<SpikeOrderReport> {
    if eps.len() < 3 {
        return invalid(format!("need at least 3 spike sizes, got {}", eps.len()));
    }
    let grid = *base.sol.lattice.grid();
    if let Some(e) = eps.iter().find(|e| **e < grid.dt * (1.0 - 1e-9)) {
        return invalid(format!("spike size {e} is below the step {}", grid.dt));
    }
    let n = grid.steps;
    let ps = PathSet::new(n, base.opts.paths, base.opts.seed)?;
    let lat = &base.sol.lattice;
    let (dt, sq) = (lat.dt(), lat.sqrt_dt());
    let mut cases = Vec::with_capacity(eps.len());
    for &e in eps {
        let spike = SpikeSpec { t0, eps: e, replacement }.snap(&grid)?;
        let ueps = spiked_control(&base.sol.u, &spike);
        let pert = solve_coupled_picard(base.model, lat, &ueps, &base.opts.picard, Some((&base.sol.y, &base.sol.z)))?;
        let a = analyse_spike(base, &spike)?;
        let jump = jump_field(base, &spike, &a.delta.delta);
        cases.push(OrderCase { spike, pert, jump, y2_0: a.v2.y[3].get(0, 0) });
    }
    let (m, s) = loop_fields(base);
    let nb = betas.len();
    let width = 3 * nb + 2;
    // Every path advances X̄ once and all perturbed states alongside it.
    let per_path = par::map(ps.len(), |i| {
        let signs = ps.signs(i);
        let nc = cases.len();
        let mut xb = base.sol.x.get(0, 0);
        let mut xe = vec![xb; nc];
        let mut x1 = vec![0.0_f64; nc];
        let mut acc = vec![[0.0_f64; 5]; nc];
        for k in 0..=n {
            let sb = lat.stencil(k, xb);
            let at = |f: &TreeProcess| sb.apply(f.layer(k));
            let yb = at(&base.sol.y);
            let last = k == n;
            let (zb, mb, ssb, db, vb, w) = if last {
                (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
            } else {
                (at(&base.sol.z), at(&m), at(&s), at(&base.sol.drift), at(&base.sol.diffusion), signs[k] * sq)
            };
            for (c, case) in cases.iter().enumerate() {
                let se = lat.stencil(k, xe[c]);
                let ate = |f: &TreeProcess| se.apply(f.layer(k));
                let r = &mut acc[c];
                let d = xe[c] - xb;
                r[0] = r[0].max(d.abs());
                r[1] = r[1].max((ate(&case.pert.y) - yb).abs());
                r[3] = r[3].max(x1[c].abs());
                r[4] = r[4].max((d - x1[c]).abs());
                if !last {
                    r[2] += (ate(&case.pert.z) - zb).powi(2) * dt;
                    let jump = if case.spike.contains(k) { at(&case.jump) } else { 0.0 };
                    x1[c] = x1[c] * (1.0 + mb * dt + ssb * w) + jump * w;
                    xe[c] += ate(&case.pert.drift) * dt + ate(&case.pert.diffusion) * w;
                }
            }
            if !last {
                xb += db * dt + vb * w;
            }
        }
        acc.iter()
            .map(|r| {
                let mut v = Vec::with_capacity(width);
                for b in betas {
                    v.push(r[0].powf(*b));
                    v.push(r[1].powf(*b));
                    v.push(r[2].powf(0.5 * b));
                }
                v.push(r[3] * r[3]);
                v.push(r[4] * r[4]);
                v
            })
            .collect::<Vec<_>>()
    });
    let mut rows = Vec::new();
    for (c, case) in cases.iter().enumerate() {
        let mut mean = vec![0.0; width];
        for v in &per_path {
            for (m, x) in mean.iter_mut().zip(&v[c]) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= ps.len() as f64);
        let y0_diff = case.pert.y0() - base.sol.y0();
        rows.push(SpikeOrderRow {
            eps: eps[c],
            eps_snapped: case.spike.measure(&grid),
            x_sup: (0..nb).map(|b| mean[3 * b]).collect(),
            y_sup: (0..nb).map(|b| mean[3 * b + 1]).collect(),
            z_int: (0..nb).map(|b| mean[3 * b + 2]).collect(),
            x1_sup2: mean[3 * nb],
            x_rem2: mean[3 * nb + 1],
            y0_diff,
            y2_0: case.y2_0,
            y0_rem: (y0_diff - case.y2_0).abs(),
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.eps_snapped).collect();
    let mut fits = Vec::new();
    let mut fit = |name: String, ys: Vec<f64>| {
        let (slope, r2) = loglog_fit(&xs, &ys);
        fits.push(SlopeFit { statistic: name, slope, r2 });
    };
    for (b, beta) in betas.iter().enumerate() {
        fit(format!("x_sup_beta{beta}"), rows.iter().map(|r| r.x_sup[b]).collect());
        fit(format!("y_sup_beta{beta}"), rows.iter().map(|r| r.y_sup[b]).collect());
        fit(format!("z_int_beta{beta}"), rows.iter().map(|r| r.z_int[b]).collect());
    }
    fit("x1_sup2".into(), rows.iter().map(|r| r.x1_sup2).collect());
    fit("x_rem2".into(), rows.iter().map(|r| r.x_rem2).collect());
    fit("y0_rem".into(), rows.iter().map(|r| r.y0_rem).collect());
    Ok(SpikeOrderReport { t0, replacement, betas: betas.to_vec(), paths: ps, rows, fits })
}

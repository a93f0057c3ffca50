//! Adjoint processes along a solved trajectory: the first-order pair (p, q)
//! with feedback coefficient K₁, the second-order pair (P, Q) with K₂, and
//! the auxiliary pair (Ŷ, Ẑ) of a spike variation with its γ representation.
//!
//! Every backward scheme here is the exact lattice counterpart of a
//! decoupling ansatz: with X₁' = X₁(1 + m dt + s ξ √dt) on the step from a
//! node, Y₁ = pX₁ and Z₁ = K₁X₁ hold node by node, and likewise for the
//! second-order terms.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fbsde::FbsdeSolution;
use crate::jet::{Jet, X, Y, Z};
use crate::model::{Coef, CoefficientModel, SnappedSpike};
use crate::par;
use crate::tree::TreeProcess;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AdjointOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
    /// Feedback denominators |1 − pσ_z| below `beta0 / 2` are singular.
    pub beta0: f64,
    /// Bound on |p| from the comparison equations, when available.
    pub p_bound: Option<f64>,
}

impl Default for AdjointOptions {
    fn default() -> Self {
        AdjointOptions {
            tol: 1e-12,
            max_iter: 200,
            damping: 0.5,
            beta0: crate::assumptions::DEFAULT_BETA0,
            p_bound: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdjointBundle {
    pub p: TreeProcess,
    /// Martingale coefficient of p; zero on the terminal layer.
    pub q: TreeProcess,
    pub k1: TreeProcess,
    pub bound_used: Option<f64>,
    /// Boundedness of q is assumed, not proven; `max_abs_q` is the evidence.
    pub q_bounded_assumed: bool,
    pub max_abs_q: f64,
    pub max_abs_p: f64,
    /// Smallest |1 − pσ_z| over the nodes.
    pub min_denominator: f64,
    pub max_node_iterations: usize,
}

impl AdjointBundle {
    pub fn p0(&self) -> f64 {
        self.p.get(0, 0)
    }

    /// Largest excess of |p| over `bound_used` (zero when within bound).
    pub fn bound_excess(&self) -> Option<f64> {
        self.bound_used.map(|b| (self.max_abs_p - b).max(0.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SecondOrderBundle {
    pub big_p: TreeProcess,
    pub big_q: TreeProcess,
    pub k2: TreeProcess,
}

impl SecondOrderBundle {
    pub fn p0(&self) -> f64 {
        self.big_p.get(0, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuxiliaryBundle {
    pub yhat: TreeProcess,
    /// Martingale coefficient of Ŷ.
    pub zhat: TreeProcess,
    /// Part of Z₂ not proportional to X₁, X₂: (Ẑ + pσ_yŶ)/(1 − pσ_z) in the limit.
    pub z2_part: TreeProcess,
}

impl AuxiliaryBundle {
    pub fn y0(&self) -> f64 {
        self.yhat.get(0, 0)
    }
}

/// First derivatives of the coefficients at a node.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Grad {
    pub bx: f64,
    pub by: f64,
    pub bz: f64,
    pub sx: f64,
    pub sy: f64,
    pub sz: f64,
    pub gx: f64,
    pub gy: f64,
    pub gz: f64,
}

impl Grad {
    pub fn of(c: &Coef<Jet>) -> Self {
        Grad {
            bx: c.b.d(X),
            by: c.b.d(Y),
            bz: c.b.d(Z),
            sx: c.sigma.d(X),
            sy: c.sigma.d(Y),
            sz: c.sigma.d(Z),
            gx: c.g.d(X),
            gy: c.g.d(Y),
            gz: c.g.d(Z),
        }
    }
}

pub(crate) fn node_jet(model: &dyn CoefficientModel, sol: &FbsdeSolution, k: usize, j: usize) -> Coef<Jet> {
    model.eval_jet(sol.lattice.t(k), sol.x.get(k, j), sol.y.get(k, j), sol.z.get(k, j), sol.u.get(k, j))
}

/// Closed-loop drift and diffusion factors of X₁ at a node:
/// m = b_x + b_y p + b_z K₁, s = σ_x + σ_y p + σ_z K₁.
pub(crate) fn loop_factors(g: &Grad, p: f64, k1: f64) -> (f64, f64) {
    (g.bx + g.by * p + g.bz * k1, g.sx + g.sy * p + g.sz * k1)
}

/// Runs `f` over the nodes of layer `k` and returns the results in order,
/// or the first error by node index.
fn layer_map<T: Send>(k: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    par::map(k + 1, f).into_iter().collect()
}

/// Backward induction of the quadratic BSDE for (p, q) with terminal φ_x.
pub fn solve_first_order_adjoint(
    model: &dyn CoefficientModel,
    sol: &FbsdeSolution,
    opts: &AdjointOptions,
) -> Result<AdjointBundle> {
    let n = sol.lattice.steps();
    let dt = sol.lattice.dt();
    let mut p = TreeProcess::zeros(n);
    let mut q = TreeProcess::zeros(n);
    let mut k1 = TreeProcess::zeros(n);
    for j in 0..=n {
        p.set(n, j, model.phi_jet(sol.x.get(n, j)).1);
    }
    let mut min_den = f64::INFINITY;
    let mut max_iters = 0;
    for k in (0..n).rev() {
        let p_ref = &p;
        let layer = layer_map(k, |j| {
            let (ep, qk) = sol.step_moments(p_ref, k, j);
            let g = Grad::of(&node_jet(model, sol, k, j));
            let den = 1.0 - ep * g.sz - qk * dt * g.bz;
            if den.abs() < 0.5 * opts.beta0 {
                return Err(Error::Singularity { step: k, node: j, value: den.abs() });
            }
            let feedback = |pk: f64| (qk * (1.0 + dt * (g.bx + g.by * pk)) + ep * (g.sx + g.sy * pk)) / den;
            let update = |pk: f64| {
                let kk = feedback(pk);
                let (m, s) = loop_factors(&g, pk, kk);
                ep * (1.0 + m * dt) + qk * s * dt + dt * (g.gx + g.gy * pk + g.gz * kk)
            };
            let mut pk = ep;
            for it in 1..=opts.max_iter {
                let next = update(pk);
                if !next.is_finite() {
                    break;
                }
                if (next - pk).abs() <= opts.tol * (1.0 + next.abs()) {
                    let value = (1.0 - next * g.sz).abs();
                    if value < 0.5 * opts.beta0 {
                        return Err(Error::Singularity { step: k, node: j, value });
                    }
                    return Ok((next, qk, feedback(next), value, it));
                }
                pk = (1.0 - opts.damping) * pk + opts.damping * next;
            }
            Err(Error::QuadraticBsdeDivergence { step: k, node: j })
        })?;
        for (j, (pk, qk, kk, den, it)) in layer.into_iter().enumerate() {
            p.set(k, j, pk);
            q.set(k, j, qk);
            k1.set(k, j, kk);
            min_den = min_den.min(den);
            max_iters = max_iters.max(it);
        }
    }
    Ok(AdjointBundle {
        max_abs_q: q.max_abs(),
        max_abs_p: p.max_abs(),
        p,
        q,
        k1,
        bound_used: opts.p_bound,
        q_bounded_assumed: true,
        min_denominator: min_den,
        max_node_iterations: max_iters,
    })
}

fn solve2(a11: f64, a12: f64, a21: f64, a22: f64, r1: f64, r2: f64) -> Option<(f64, f64)> {
    let det = a11 * a22 - a12 * a21;
    if det.abs() < 1e-14 || !det.is_finite() {
        return None;
    }
    Some(((r1 * a22 - a12 * r2) / det, (a11 * r2 - a21 * r1) / det))
}

/// Backward induction of the linear BSDE for (P, Q) with terminal φ_xx.
pub fn solve_second_order_adjoint(
    model: &dyn CoefficientModel,
    sol: &FbsdeSolution,
    first: &AdjointBundle,
) -> Result<SecondOrderBundle> {
    let n = sol.lattice.steps();
    let dt = sol.lattice.dt();
    let mut big_p = TreeProcess::zeros(n);
    let mut big_q = TreeProcess::zeros(n);
    let mut k2 = TreeProcess::zeros(n);
    for j in 0..=n {
        big_p.set(n, j, model.phi_jet(sol.x.get(n, j)).2);
    }
    for k in (0..n).rev() {
        let bp = &big_p;
        let layer = layer_map(k, |j| {
            let [(ep, qk), (epp, qq)] = sol.step_moments_n([&first.p, bp], k, j);
            let c = node_jet(model, sol, k, j);
            let g = Grad::of(&c);
            let (pk, kk) = (first.p.get(k, j), first.k1.get(k, j));
            let (m, s) = loop_factors(&g, pk, kk);
            let v = [1.0, pk, kk];
            let (lb, ls, lg) = (c.b.quad_xyz(v), c.sigma.quad_xyz(v), c.g.quad_xyz(v));
            let grow = (1.0 + m * dt).powi(2) + s * s * dt;
            let cross = 2.0 * (1.0 + m * dt) * s;
            let a11 = 1.0 - dt * (ep * g.by + qk * g.sy + g.gy);
            let a12 = -dt * (ep * g.bz + qk * g.sz + g.gz);
            let r1 = epp * grow + cross * dt * qq + dt * (ep * lb + qk * ls + lg);
            let a21 = -(qk * dt * g.by + ep * g.sy);
            let a22 = 1.0 - qk * dt * g.bz - ep * g.sz;
            let r2 = qq * grow + cross * epp + qk * dt * lb + ep * ls;
            let (pp, kk2) =
                solve2(a11, a12, a21, a22, r1, r2).ok_or(Error::Singularity { step: k, node: j, value: a22.abs() })?;
            Ok((pp, qq, kk2))
        })?;
        for (j, (pp, qq, kk2)) in layer.into_iter().enumerate() {
            big_p.set(k, j, pp);
            big_q.set(k, j, qq);
            k2.set(k, j, kk2);
        }
    }
    Ok(SecondOrderBundle { big_p, big_q, k2 })
}

/// Coefficient jumps δψ = ψ(x, y, z + Δ, u) − ψ(x, y, z, ū) at a node.
pub(crate) fn spike_jumps(
    model: &dyn CoefficientModel,
    sol: &FbsdeSolution,
    k: usize,
    j: usize,
    delta: f64,
    u: f64,
) -> Coef<f64> {
    let (t, x, y, z) = (sol.lattice.t(k), sol.x.get(k, j), sol.y.get(k, j), sol.z.get(k, j));
    let a = model.eval(t, x, y, z + delta, u);
    let b = model.eval(t, x, y, z, sol.u.get(k, j));
    Coef { b: a.b - b.b, sigma: a.sigma - b.sigma, g: a.g - b.g }
}

/// Backward induction of the auxiliary linear BSDE for (Ŷ, Ẑ) driven by the
/// spike bracket δH + ½Pδσ² on the spike steps.
pub fn solve_auxiliary_yhat(
    model: &dyn CoefficientModel,
    sol: &FbsdeSolution,
    first: &AdjointBundle,
    second: &SecondOrderBundle,
    spike: &SnappedSpike,
    delta: &TreeProcess,
) -> Result<AuxiliaryBundle> {
    let n = sol.lattice.steps();
    let dt = sol.lattice.dt();
    let mut yhat = TreeProcess::zeros(n);
    let mut zhat = TreeProcess::zeros(n);
    let mut z2 = TreeProcess::zeros(n);
    for k in (0..n).rev() {
        let yh = &yhat;
        let on = spike.contains(k);
        let layer = layer_map(k, |j| {
            let [(ep, qk), (epp, qq), (ee, ze)] = sol.step_moments_n([&first.p, &second.big_p, yh], k, j);
            let g = Grad::of(&node_jet(model, sol, k, j));
            let (f1, f2) = if on {
                let d = spike_jumps(model, sol, k, j, delta.get(k, j), spike.replacement);
                let s2 = d.sigma * d.sigma;
                (dt * (ep * d.b + qk * d.sigma + d.g + 0.5 * epp * s2), qk * dt * d.b + 0.5 * qq * dt * s2)
            } else {
                (0.0, 0.0)
            };
            let a11 = 1.0 - dt * (g.gy + ep * g.by + qk * g.sy);
            let a12 = -dt * (g.gz + ep * g.bz + qk * g.sz);
            let a21 = -(qk * dt * g.by + ep * g.sy);
            let a22 = 1.0 - qk * dt * g.bz - ep * g.sz;
            let (e, eps) = solve2(a11, a12, a21, a22, ee + f1, ze + f2).ok_or(Error::Singularity {
                step: k,
                node: j,
                value: a22.abs(),
            })?;
            Ok((e, ze, eps))
        })?;
        for (j, (e, ze, eps)) in layer.into_iter().enumerate() {
            yhat.set(k, j, e);
            zhat.set(k, j, ze);
            z2.set(k, j, eps);
        }
    }
    Ok(AuxiliaryBundle { yhat, zhat, z2_part: z2 })
}

/// Up and down splitting factors of the γ-weighted mass at every node of
/// step k, where dγ = γ[H_y + pσ_yH_z/(1 − pσ_z)]dt + γ[H_z/(1 − pσ_z)]dB.
fn gamma_factors(
    model: &dyn CoefficientModel,
    sol: &FbsdeSolution,
    first: &AdjointBundle,
    k: usize,
) -> Vec<(f64, f64)> {
    let dt = sol.lattice.dt();
    let sq = sol.lattice.sqrt_dt();
    par::map(k + 1, |j| {
        let g = Grad::of(&node_jet(model, sol, k, j));
        let (p, q) = (first.p.get(k, j), first.q.get(k, j));
        let hy = g.gy + p * g.by + q * g.sy;
        let hz = g.gz + p * g.bz + q * g.sz;
        let den = 1.0 - p * g.sz;
        let drift = hy + p * g.sy * hz / den;
        let vol = hz / den;
        let base = 1.0 + drift * dt;
        (0.5 * (base + vol * sq), 0.5 * (base - vol * sq))
    })
}

/// E[γ; node] on every node, γ(0) = 1, advanced by forward Euler as a
/// γ-weighted mass on the lattice.
pub fn gamma_masses(model: &dyn CoefficientModel, sol: &FbsdeSolution, first: &AdjointBundle) -> TreeProcess {
    let n = sol.lattice.steps();
    let mut layers = vec![vec![1.0]];
    for k in 0..n {
        let f = gamma_factors(model, sol, first, k);
        let next = sol.push_measure(k, &layers[k], |j| f[j]);
        layers.push(next);
    }
    TreeProcess::from_layers(layers).expect("layer shapes match")
}

/// Ŷ(0) as E ∫ γ (δH + ½Pδσ²) I dt with γ the stochastic exponential
/// of [`gamma_masses`].
pub fn gamma_representation(
    model: &dyn CoefficientModel,
    sol: &FbsdeSolution,
    first: &AdjointBundle,
    second: &SecondOrderBundle,
    spike: &SnappedSpike,
    delta: &TreeProcess,
) -> f64 {
    let dt = sol.lattice.dt();
    let mut mass = vec![1.0];
    let mut total = 0.0;
    for k in 0..spike.end.min(sol.lattice.steps()) {
        if spike.contains(k) {
            let bracket: Vec<f64> = par::map(k + 1, |j| {
                let (p, q) = (first.p.get(k, j), first.q.get(k, j));
                let d = spike_jumps(model, sol, k, j, delta.get(k, j), spike.replacement);
                p * d.b + q * d.sigma + d.g + 0.5 * second.big_p.get(k, j) * d.sigma * d.sigma
            });
            total += mass.iter().zip(&bracket).map(|(w, b)| w * b).sum::<f64>() * dt;
        }
        let f = gamma_factors(model, sol, first, k);
        mass = sol.push_measure(k, &mass, |j| f[j]);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbsde::{solve_coupled_picard, PicardOptions};
    use crate::jet::Scalar;
    use crate::model::{Formulas, Lipschitz, Model, ModelMeta, SigmaStructure};
    use crate::tree::{build_tree, Lattice};

    /// b = b1·x, σ = s1·x + s0, g = g1·x + g2·y, φ = F x: decoupled, with
    /// deterministic derivatives, so p solves a linear ODE and q ≡ 0.
    struct Decoupled {
        b1: f64,
        s1: f64,
        s0: f64,
        g1: f64,
        g2: f64,
        f: f64,
    }

    impl Formulas for Decoupled {
        fn coef<S: Scalar>(&self, _t: f64, x: S, y: S, _z: S, _u: S) -> Coef<S> {
            Coef {
                b: x.scale(self.b1),
                sigma: x.scale(self.s1) + S::cst(self.s0),
                g: x.scale(self.g1) + y.scale(self.g2),
            }
        }
        fn phi<S: Scalar>(&self, x: S) -> S {
            x.scale(self.f)
        }
    }

    fn meta() -> ModelMeta {
        ModelMeta {
            name: "test".into(),
            x0: 1.0,
            lipschitz: Lipschitz { l: 1.0, l1: 1.0, l2: 0.0, l3: 0.0 },
            sigma_structure: SigmaStructure::ZIndependent,
            lattice_scale: 0.5,
        }
    }

    fn solve(m: &dyn CoefficientModel, n: usize) -> FbsdeSolution {
        let lat = Lattice::new(build_tree(1.0, n).unwrap(), 1.0, 0.5).unwrap();
        solve_coupled_picard(m, &lat, &TreeProcess::zeros(n), &PicardOptions::default(), None).unwrap()
    }

    #[test]
    fn constant_terminal_slope_without_driver() {
        let m = Model::new(Decoupled { b1: 0.0, s1: 0.0, s0: 0.3, g1: 0.0, g2: 0.0, f: 0.7 }, meta());
        let sol = solve(&m, 16);
        let a = solve_first_order_adjoint(&m, &sol, &AdjointOptions::default()).unwrap();
        for k in 0..=16 {
            for j in 0..=k {
                assert!((a.p.get(k, j) - 0.7).abs() < 1e-14);
                assert!(a.q.get(k, j).abs() < 1e-14);
            }
        }
        let s = solve_second_order_adjoint(&m, &sol, &a).unwrap();
        assert!(s.big_p.max_abs() < 1e-14 && s.k2.max_abs() < 1e-14);
    }

    #[test]
    fn linear_bsde_closed_form() {
        // p' = −(g1 + (g2 + b1) p), p(T) = F.
        let (b1, g1, g2, f) = (0.3, 0.4, -0.2, 0.5);
        let m = Model::new(Decoupled { b1, s1: 0.2, s0: 0.3, g1, g2, f }, meta());
        let kk = g2 + b1;
        let exact = (f + g1 / kk) * kk.exp() - g1 / kk;
        let mut prev = None;
        for n in [64, 128, 256] {
            let sol = solve(&m, n);
            let a = solve_first_order_adjoint(&m, &sol, &AdjointOptions::default()).unwrap();
            assert!(a.max_abs_q < 1e-9, "q = {}", a.max_abs_q);
            let err = (a.p0() - exact).abs();
            if let Some(e) = prev {
                let r: f64 = err / e;
                assert!(r > 0.4 && r < 0.6, "ratio {r}");
            }
            prev = Some(err);
        }
    }

    #[test]
    fn second_order_adjoint_linear_ode() {
        // φ = F x + ½ G x², linear coefficients: −P' = (2 b1 + s1²) P, P(T) = G.
        struct Quad;
        impl Formulas for Quad {
            fn coef<S: Scalar>(&self, _t: f64, x: S, _y: S, _z: S, _u: S) -> Coef<S> {
                Coef { b: x.scale(0.2), sigma: x.scale(0.3) + S::cst(0.1), g: S::cst(0.0) }
            }
            fn phi<S: Scalar>(&self, x: S) -> S {
                x.scale(0.5) + (x * x).scale(0.4)
            }
        }
        let m = Model::new(Quad, meta());
        let exact = 0.8 * (2.0 * 0.2 + 0.09_f64).exp();
        let sol = solve(&m, 256);
        let a = solve_first_order_adjoint(&m, &sol, &AdjointOptions::default()).unwrap();
        let s = solve_second_order_adjoint(&m, &sol, &a).unwrap();
        assert!((s.p0() - exact).abs() < 2e-2 * exact / 4.0, "{} vs {exact}", s.p0());
        for j in 0..=256 {
            assert_eq!(s.big_p.get(256, j), 0.8);
        }
    }

    #[test]
    fn singular_feedback_is_reported() {
        struct Sing;
        impl Formulas for Sing {
            fn coef<S: Scalar>(&self, _t: f64, _x: S, _y: S, z: S, _u: S) -> Coef<S> {
                Coef { b: S::cst(0.0), sigma: z.scale(1.0), g: S::cst(0.0) }
            }
            fn phi<S: Scalar>(&self, x: S) -> S {
                x.scale(1.0)
            }
        }
        let m = Model::new(Sing, meta());
        let lat = Lattice::new(build_tree(1.0, 4).unwrap(), 1.0, 0.5).unwrap();
        let sol = crate::fbsde::solve_decoupled(
            &m,
            &lat,
            &TreeProcess::zeros(4),
            &TreeProcess::zeros(4),
            &TreeProcess::zeros(4),
            &PicardOptions::default(),
        )
        .unwrap();
        let err = solve_first_order_adjoint(&m, &sol, &AdjointOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Singularity { .. }));
    }

    #[test]
    fn masses_sum_to_one() {
        let m = Model::new(Decoupled { b1: 0.3, s1: 0.2, s0: 0.3, g1: 0.0, g2: 0.0, f: 1.0 }, meta());
        let sol = solve(&m, 32);
        let w = sol.node_masses();
        for k in 0..=32 {
            let s: f64 = w.layer(k).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // E[X(T)] = x0 e^{b1 T} up to O(dt)
        let ex: f64 = w.layer(32).iter().zip(sol.x.layer(32)).map(|(a, b)| a * b).sum();
        assert!((ex - 0.3_f64.exp()).abs() < 0.02);
    }
}

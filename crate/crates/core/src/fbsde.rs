//! Decoupled and fully coupled FBSDE solvers on the state lattice, and the
//! semi-explicit solution of linear FBSDEs with deterministic coefficients
//! (used as an independent oracle).

use serde::Serialize;

use crate::error::{Error, Result};
use crate::jet::Scalar;
use crate::model::{Coef, CoefficientModel, Formulas, Lipschitz, Model, ModelMeta, SigmaStructure};
use crate::par;
use crate::tree::{Lattice, TreeProcess};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PicardOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Iteration cap of the per-node implicit solve for Y.
    pub inner_max: usize,
    /// Sweeps without a new best residual before the iteration is declared
    /// stalled at its rounding floor.
    pub stall_window: usize,
    /// A stalled iteration is accepted only if its best residual is within
    /// this factor of `tol`.
    pub stall_factor: f64,
}

impl Default for PicardOptions {
    fn default() -> Self {
        PicardOptions { tol: 1e-10, max_iter: 200, inner_max: 100, stall_window: 10, stall_factor: 100.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FbsdeSolution {
    pub lattice: Lattice,
    /// Node coordinates.
    pub x: TreeProcess,
    pub y: TreeProcess,
    /// Z at steps 0..N−1 (the terminal layer holds zeros).
    pub z: TreeProcess,
    pub u: TreeProcess,
    /// b and σ at each node, as used by the forward step.
    pub drift: TreeProcess,
    pub diffusion: TreeProcess,
    pub picard_iterations: usize,
    pub final_residual: f64,
    pub residual_history: Vec<f64>,
    /// True when the residual plateaued above `tol` but within
    /// `stall_factor * tol`; the best sweep is returned.
    pub stalled: bool,
}

impl FbsdeSolution {
    pub fn y0(&self) -> f64 {
        self.y.get(0, 0)
    }

    pub fn z0(&self) -> f64 {
        self.z.get(0, 0)
    }

    /// Children of node (k, j): the two states reachable at step k+1.
    #[inline]
    pub fn children(&self, k: usize, j: usize) -> (f64, f64) {
        let x = self.x.get(k, j);
        let dt = self.lattice.dt();
        let sq = self.lattice.sqrt_dt();
        let m = x + self.drift.get(k, j) * dt;
        let s = self.diffusion.get(k, j) * sq;
        (m + s, m - s)
    }

    /// One-step conditional expectation and martingale coefficient of a
    /// field `f` at node (k, j).
    #[inline]
    pub fn step_moments(&self, f: &TreeProcess, k: usize, j: usize) -> (f64, f64) {
        let (xp, xm) = self.children(k, j);
        let layer = f.layer(k + 1);
        let fp = self.lattice.child_stencil(k, j, xp).apply(layer);
        let fm = self.lattice.child_stencil(k, j, xm).apply(layer);
        (0.5 * (fp + fm), (fp - fm) / (2.0 * self.lattice.sqrt_dt()))
    }

    /// Same as [`step_moments`](Self::step_moments) for several fields at once.
    #[inline]
    pub fn step_moments_n<const M: usize>(&self, fs: [&TreeProcess; M], k: usize, j: usize) -> [(f64, f64); M] {
        let (xp, xm) = self.children(k, j);
        let sp = self.lattice.child_stencil(k, j, xp);
        let sm = self.lattice.child_stencil(k, j, xm);
        let h = 2.0 * self.lattice.sqrt_dt();
        fs.map(|f| {
            let fp = sp.apply(f.layer(k + 1));
            let fm = sm.apply(f.layer(k + 1));
            (0.5 * (fp + fm), (fp - fm) / h)
        })
    }
}

impl FbsdeSolution {
    /// Pushes a mass distribution on layer `k` to layer `k + 1`; `split(j)`
    /// gives the factors sent to the up and down child of node j. With
    /// `(0.5, 0.5)` this is the transpose of [`step_moments`](Self::step_moments),
    /// so lattice expectations computed either way agree exactly.
    pub fn push_measure(&self, k: usize, mass: &[f64], split: impl Fn(usize) -> (f64, f64)) -> Vec<f64> {
        let mut out = vec![0.0; k + 2];
        for (j, &w) in mass.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let (fu, fd) = split(j);
            let (xp, xm) = self.children(k, j);
            for (x, f) in [(xp, fu), (xm, fd)] {
                let st = self.lattice.child_stencil(k, j, x);
                for i in 0..st.len {
                    out[st.start + i] += w * f * st.w[i];
                }
            }
        }
        out
    }

    /// Node masses of the lattice dynamics, layer by layer.
    pub fn node_masses(&self) -> TreeProcess {
        let n = self.lattice.steps();
        let mut layers = vec![vec![1.0]];
        for k in 0..n {
            let next = self.push_measure(k, &layers[k], |_| (0.5, 0.5));
            layers.push(next);
        }
        TreeProcess::from_layers(layers).expect("layer shapes match")
    }
}

fn sup_diff(a: &TreeProcess, b: &TreeProcess) -> f64 {
    a.max_diff(b, a.steps())
}

/// sup |ΔY| + (Σ_k max_j |ΔZ(k, j)|² dt)^{1/2}.
pub fn picard_residual(y: &TreeProcess, z: &TreeProcess, y_old: &TreeProcess, z_old: &TreeProcess, dt: f64) -> f64 {
    let dy = sup_diff(y, y_old);
    let mut acc = 0.0;
    for k in 0..z.steps() {
        let m = z.layer(k).iter().zip(z_old.layer(k)).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        acc += m * m * dt;
    }
    dy + acc.sqrt()
}

/// Forward coefficients frozen at (y_in, z_in); backward implicit pass.
pub fn solve_decoupled(
    model: &dyn CoefficientModel,
    lattice: &Lattice,
    u: &TreeProcess,
    y_in: &TreeProcess,
    z_in: &TreeProcess,
    opts: &PicardOptions,
) -> Result<FbsdeSolution> {
    let n = lattice.steps();
    if u.steps() != n || y_in.steps() != n || z_in.steps() != n {
        return Err(Error::InvalidArgument("input processes do not match the lattice".into()));
    }
    let dt = lattice.dt();
    let sq = lattice.sqrt_dt();
    let x = lattice.coords();
    let mut drift = TreeProcess::zeros(n);
    let mut diffusion = TreeProcess::zeros(n);
    for k in 0..n {
        let t = lattice.t(k);
        for j in 0..=k {
            let c = model.eval(t, x.get(k, j), y_in.get(k, j), z_in.get(k, j), u.get(k, j));
            drift.set(k, j, c.b);
            diffusion.set(k, j, c.sigma);
        }
    }
    let mut y = TreeProcess::zeros(n);
    let mut z = TreeProcess::zeros(n);
    for j in 0..=n {
        y.set(n, j, model.phi(x.get(n, j)));
    }
    for k in (0..n).rev() {
        let t = lattice.t(k);
        let next = y.layer(k + 1).to_vec();
        let layer: Vec<Result<(f64, f64)>> = par::map(k + 1, |j| {
            let xk = x.get(k, j);
            let m = xk + drift.get(k, j) * dt;
            let s = diffusion.get(k, j) * sq;
            let yp = lattice.child_stencil(k, j, m + s).apply(&next);
            let ym = lattice.child_stencil(k, j, m - s).apply(&next);
            let ey = 0.5 * (yp + ym);
            let zk = (yp - ym) / (2.0 * sq);
            let uk = u.get(k, j);
            let mut yk = ey;
            let mut change = f64::INFINITY;
            for _ in 0..opts.inner_max {
                let next_y = ey + model.eval(t, xk, yk, zk, uk).g * dt;
                change = (next_y - yk).abs();
                yk = next_y;
                if change <= 1e-15 * (1.0 + yk.abs()) {
                    return Ok((yk, zk));
                }
            }
            if change <= 1e-12 * (1.0 + yk.abs()) {
                Ok((yk, zk))
            } else {
                Err(Error::NumericDivergence { step: k, node: j, change })
            }
        });
        for (j, r) in layer.into_iter().enumerate() {
            let (yk, zk) = r?;
            y.set(k, j, yk);
            z.set(k, j, zk);
        }
    }
    Ok(FbsdeSolution {
        lattice: *lattice,
        x,
        y,
        z,
        u: u.clone(),
        drift,
        diffusion,
        picard_iterations: 1,
        final_residual: f64::NAN,
        residual_history: Vec::new(),
        stalled: false,
    })
}

/// Picard iteration on the decoupling fields, from (0, 0) or a warm start.
pub fn solve_coupled_picard(
    model: &dyn CoefficientModel,
    lattice: &Lattice,
    u: &TreeProcess,
    opts: &PicardOptions,
    warm: Option<(&TreeProcess, &TreeProcess)>,
) -> Result<FbsdeSolution> {
    let n = lattice.steps();
    let (mut y_in, mut z_in) = match warm {
        Some((y, z)) => (y.clone(), z.clone()),
        None => (TreeProcess::zeros(n), TreeProcess::zeros(n)),
    };
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, FbsdeSolution)> = None;
    for it in 1..=opts.max_iter {
        let mut sol = solve_decoupled(model, lattice, u, &y_in, &z_in, opts)?;
        let r = picard_residual(&sol.y, &sol.z, &y_in, &z_in, lattice.dt());
        history.push(r);
        if !r.is_finite() {
            break;
        }
        if r < opts.tol {
            sol.picard_iterations = it;
            sol.final_residual = r;
            sol.residual_history = history;
            return Ok(sol);
        }
        if best.as_ref().map_or(true, |(b, _, _)| r < *b) {
            best = Some((r, it, sol.clone()));
        } else if let Some((b, at, _)) = &best {
            if it - at >= opts.stall_window && *b <= opts.stall_factor * opts.tol {
                let (b, at, mut sol) = best.take().unwrap();
                sol.picard_iterations = at;
                sol.final_residual = b;
                sol.residual_history = history;
                sol.stalled = true;
                return Ok(sol);
            }
        }
        y_in = sol.y;
        z_in = sol.z;
    }
    Err(Error::ContractionFailure { iterations: history.len(), history })
}

/// Linear FBSDE with constant coefficients:
/// dX = (α₁X + β₁Y + γ₁Z + L₁)dt + (α₂X + β₂Y + γ₂Z + L₂)dB,
/// −dY = (α₃X + β₃Y + γ₃Z + L₃)dt − Z dB, X(0) = x₀, Y(T) = κX(T).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LinearFbsdeSpec {
    pub alpha: [f64; 3],
    pub beta: [f64; 3],
    pub gamma: [f64; 3],
    pub drivers: [f64; 3],
    pub kappa: f64,
    pub x0: f64,
}

impl Formulas for LinearFbsdeSpec {
    fn coef<S: Scalar>(&self, _t: f64, x: S, y: S, z: S, _u: S) -> Coef<S> {
        let lin = |i: usize| {
            x.scale(self.alpha[i]) + y.scale(self.beta[i]) + z.scale(self.gamma[i]) + S::cst(self.drivers[i])
        };
        Coef { b: lin(0), sigma: lin(1), g: lin(2) }
    }

    fn phi<S: Scalar>(&self, x: S) -> S {
        x.scale(self.kappa)
    }
}

impl LinearFbsdeSpec {
    pub fn model(&self, name: &str) -> Model<LinearFbsdeSpec> {
        let l1 = [self.alpha[0], self.alpha[1], self.alpha[2], self.beta[2], self.gamma[2], self.kappa]
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        let l2 = [self.beta[0], self.gamma[0], self.beta[1]].iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let l3 = self.gamma[1].abs();
        let scale = {
            let s = (self.alpha[1] * self.x0 + self.drivers[1]).abs();
            if s > 0.05 {
                s
            } else {
                0.5
            }
        };
        Model::new(
            *self,
            ModelMeta {
                name: name.to_string(),
                x0: self.x0,
                lipschitz: Lipschitz { l: l1.max(l2).max(l3), l1, l2, l3 },
                sigma_structure: if self.gamma[1] == 0.0 {
                    SigmaStructure::ZIndependent
                } else {
                    SigmaStructure::LinearZ
                },
                lattice_scale: scale,
            },
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LinearOracle {
    pub t: Vec<f64>,
    pub p: Vec<f64>,
    pub varphi: Vec<f64>,
    pub y0: f64,
    pub z0: f64,
}

impl LinearOracle {
    /// Ỹ = pX + φ and Z̃ on the lattice nodes (deterministic p, φ sampled at
    /// the lattice times).
    pub fn on_lattice(&self, spec: &LinearFbsdeSpec, lattice: &Lattice) -> (TreeProcess, TreeProcess) {
        let n = lattice.steps();
        let stride = (self.t.len() - 1) / n;
        let y = TreeProcess::from_fn(n, |k, j| self.p[k * stride] * lattice.x(k, j) + self.varphi[k * stride]);
        let z = TreeProcess::from_fn(n, |k, j| {
            let p = self.p[k * stride];
            let ph = self.varphi[k * stride];
            oracle_z(spec, p, ph, lattice.x(k, j))
        });
        (y, z)
    }
}

fn oracle_z(s: &LinearFbsdeSpec, p: f64, ph: f64, x: f64) -> f64 {
    let [_, a2, _] = s.alpha;
    let [_, b2, _] = s.beta;
    let [_, g2, _] = s.gamma;
    ((a2 * p + b2 * p * p) * x + p * b2 * ph + p * s.drivers[1]) / (1.0 - p * g2)
}

/// Integrates the deterministic (p, φ) system backward by RK4 with
/// `substeps` steps per lattice step.
pub fn solve_linear_oracle(
    spec: &LinearFbsdeSpec,
    horizon: f64,
    steps: usize,
    substeps: usize,
) -> Result<LinearOracle> {
    if steps == 0 || substeps == 0 || !(horizon > 0.0) {
        return Err(Error::InvalidArgument("need positive horizon and step counts".into()));
    }
    let [a1, a2, a3] = spec.alpha;
    let [b1, b2, b3] = spec.beta;
    let [g1, g2, g3] = spec.gamma;
    let [l1, l2, l3] = spec.drivers;
    let rhs = |p: f64, ph: f64| -> (f64, f64) {
        let den = 1.0 - p * g2;
        let k1 = (a2 * p + b2 * p * p) / den;
        let a = a3 + b3 * p + g3 * k1 + a1 * p + b1 * p * p + g1 * k1 * p;
        let c = (b1 * p + b3) * ph + p * l1 + l3 + (g1 * p + g3) / den * (b2 * p * ph + p * l2);
        // dp = −A dt, dφ = −C dt
        (-a, -c)
    };
    let total = steps * substeps;
    let h = horizon / total as f64;
    let mut p = vec![0.0; total + 1];
    let mut ph = vec![0.0; total + 1];
    p[total] = spec.kappa;
    if (1.0 - spec.kappa * g2).abs() < 1e-8 {
        return Err(Error::Singularity { step: steps, node: 0, value: (1.0 - spec.kappa * g2).abs() });
    }
    for i in (0..total).rev() {
        let (y, w) = (p[i + 1], ph[i + 1]);
        let (k1p, k1w) = rhs(y, w);
        let (k2p, k2w) = rhs(y - 0.5 * h * k1p, w - 0.5 * h * k1w);
        let (k3p, k3w) = rhs(y - 0.5 * h * k2p, w - 0.5 * h * k2w);
        let (k4p, k4w) = rhs(y - h * k3p, w - h * k3w);
        p[i] = y - h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
        ph[i] = w - h / 6.0 * (k1w + 2.0 * k2w + 2.0 * k3w + k4w);
        let den = 1.0 - p[i] * g2;
        if den.abs() < 1e-8 || !p[i].is_finite() {
            return Err(Error::Singularity { step: i / substeps, node: 0, value: den.abs() });
        }
    }
    let t = (0..=total).map(|i| horizon * i as f64 / total as f64).collect();
    let y0 = p[0] * spec.x0 + ph[0];
    let z0 = oracle_z(spec, p[0], ph[0], spec.x0);
    Ok(LinearOracle { t, p, varphi: ph, y0, z0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelMeta};
    use crate::tree::build_tree;

    struct Simple {
        a: f64,
        phi_c: Option<f64>,
    }

    impl Formulas for Simple {
        fn coef<S: Scalar>(&self, _t: f64, _x: S, y: S, _z: S, _u: S) -> Coef<S> {
            let sigma = if self.phi_c.is_some() { S::cst(0.0) } else { S::cst(1.0) };
            Coef { b: S::cst(0.0), sigma, g: y.scale(self.a) }
        }
        fn phi<S: Scalar>(&self, x: S) -> S {
            match self.phi_c {
                Some(c) => S::cst(c),
                None => x,
            }
        }
    }

    fn simple(a: f64, phi_c: Option<f64>) -> Model<Simple> {
        Model::new(
            Simple { a, phi_c },
            ModelMeta {
                name: "simple".into(),
                x0: 0.3,
                lipschitz: Lipschitz { l: 1.0, l1: 1.0, l2: 0.0, l3: 0.0 },
                sigma_structure: SigmaStructure::ZIndependent,
                lattice_scale: 1.0,
            },
        )
    }

    #[test]
    fn constants_propagate() {
        let m = simple(0.0, Some(2.5));
        let lat = Lattice::new(build_tree(1.0, 8).unwrap(), 0.3, 1.0).unwrap();
        let u = TreeProcess::zeros(8);
        let s = solve_coupled_picard(&m, &lat, &u, &PicardOptions::default(), None).unwrap();
        assert!(s.y.layers().iter().flatten().all(|&v| (v - 2.5).abs() < 1e-15));
        assert!(s.z.layers().iter().flatten().all(|&v| v.abs() < 1e-14));
        assert_eq!(s.picard_iterations, 2);
    }

    #[test]
    fn brownian_terminal_gives_unit_z() {
        let m = simple(0.0, None);
        let lat = Lattice::new(build_tree(1.0, 16).unwrap(), 0.3, 1.0).unwrap();
        let s = solve_coupled_picard(&m, &lat, &TreeProcess::zeros(16), &PicardOptions::default(), None).unwrap();
        for k in 0..16 {
            for j in 0..=k {
                assert!((s.y.get(k, j) - lat.x(k, j)).abs() < 1e-12);
                assert!((s.z.get(k, j) - 1.0).abs() < 1e-10);
            }
        }
        assert_eq!(s.x.get(0, 0), 0.3);
    }

    #[test]
    fn linear_driver_is_exponential() {
        for &n in &[32usize, 64] {
            let m = simple(0.7, Some(1.0));
            let lat = Lattice::new(build_tree(1.0, n).unwrap(), 0.0, 1.0).unwrap();
            let s = solve_coupled_picard(&m, &lat, &TreeProcess::zeros(n), &PicardOptions::default(), None).unwrap();
            // implicit Euler: (1 − a dt)^{−N}
            let dt = 1.0 / n as f64;
            assert!((s.y0() - (1.0 - 0.7 * dt).powi(-(n as i32))).abs() < 1e-12);
            assert!((s.y0() - 0.7f64.exp()).abs() < 1.5 * dt);
        }
    }

    #[test]
    fn oracle_trivial_cases() {
        let spec = LinearFbsdeSpec {
            alpha: [0.0; 3],
            beta: [0.0; 3],
            gamma: [0.0; 3],
            drivers: [0.0; 3],
            kappa: 1.7,
            x0: 2.0,
        };
        let o = solve_linear_oracle(&spec, 1.0, 10, 10).unwrap();
        assert!(o.p.iter().all(|&p| p == 1.7));
        assert!((o.y0 - 3.4).abs() < 1e-15 && o.z0 == 0.0);
        // only L₂ ≠ 0: Z̃ = p L₂
        let spec = LinearFbsdeSpec { drivers: [0.0, 0.4, 0.0], ..spec };
        let o = solve_linear_oracle(&spec, 1.0, 10, 10).unwrap();
        assert!((o.z0 - 1.7 * 0.4).abs() < 1e-15);
    }

    #[test]
    fn oracle_detects_singularity() {
        let spec = LinearFbsdeSpec {
            alpha: [0.0; 3],
            beta: [0.0; 3],
            gamma: [0.0, 0.5, 0.0],
            drivers: [0.0; 3],
            kappa: 2.0,
            x0: 1.0,
        };
        assert!(matches!(solve_linear_oracle(&spec, 1.0, 10, 10), Err(Error::Singularity { .. })));
    }
}

//! Coefficient models, controls, control domains and spike perturbations.

use std::fmt;
use std::sync::Arc;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::expr::Expr;
use crate::jet::{Jet, Scalar, U, X, Y, Z};
use crate::tree::{Lattice, TimeGrid, TreeProcess};

/// The triple (b, σ, g) evaluated at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coef<S> {
    pub b: S,
    pub sigma: S,
    pub g: S,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaStructure {
    General,
    /// σ does not depend on z.
    ZIndependent,
    /// σ = A(t) z + σ₁(t, x, y, u).
    LinearZ,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Lipschitz {
    pub l: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

impl Lipschitz {
    pub fn c1(&self) -> f64 {
        self.l2.max(self.l3)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelMeta {
    pub name: String,
    pub x0: f64,
    pub lipschitz: Lipschitz,
    pub sigma_structure: SigmaStructure,
    /// Spacing factor of the state lattice (roughly the size of σ).
    pub lattice_scale: f64,
}

pub trait CoefficientModel: Send + Sync {
    fn eval(&self, t: f64, x: f64, y: f64, z: f64, u: f64) -> Coef<f64>;
    /// Values with gradient and Hessian in (x, y, z, u).
    fn eval_jet(&self, t: f64, x: f64, y: f64, z: f64, u: f64) -> Coef<Jet>;
    fn phi(&self, x: f64) -> f64;
    /// (φ, φ_x, φ_xx).
    fn phi_jet(&self, x: f64) -> (f64, f64, f64);
    fn meta(&self) -> &ModelMeta;

    /// A(t) when σ is linear in z; σ_z otherwise varies.
    fn linear_z_factor(&self, t: f64) -> Option<f64> {
        match self.meta().sigma_structure {
            SigmaStructure::LinearZ => Some(self.eval_jet(t, 0.0, 0.0, 0.0, 0.0).sigma.d(Z)),
            SigmaStructure::ZIndependent => Some(0.0),
            SigmaStructure::General => None,
        }
    }
}

impl fmt::Debug for dyn CoefficientModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CoefficientModel({})", self.meta().name)
    }
}

/// Coefficients written once, generically over the scalar type.
pub trait Formulas: Send + Sync {
    fn coef<S: Scalar>(&self, t: f64, x: S, y: S, z: S, u: S) -> Coef<S>;
    fn phi<S: Scalar>(&self, x: S) -> S;
}

pub struct Model<F> {
    pub formulas: F,
    pub meta: ModelMeta,
}

impl<F: Formulas> Model<F> {
    pub fn new(formulas: F, meta: ModelMeta) -> Self {
        Model { formulas, meta }
    }
}

impl<F: Formulas> CoefficientModel for Model<F> {
    fn eval(&self, t: f64, x: f64, y: f64, z: f64, u: f64) -> Coef<f64> {
        self.formulas.coef(t, x, y, z, u)
    }

    fn eval_jet(&self, t: f64, x: f64, y: f64, z: f64, u: f64) -> Coef<Jet> {
        self.formulas.coef(t, Jet::var(x, X), Jet::var(y, Y), Jet::var(z, Z), Jet::var(u, U))
    }

    fn phi(&self, x: f64) -> f64 {
        self.formulas.phi(x)
    }

    fn phi_jet(&self, x: f64) -> (f64, f64, f64) {
        let j = self.formulas.phi(Jet::var(x, X));
        (j.v, j.d(X), j.dd(X, X))
    }

    fn meta(&self) -> &ModelMeta {
        &self.meta
    }
}

pub type SharedModel = Arc<dyn CoefficientModel>;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelfCheckReport {
    pub points: usize,
    pub max_rel_error: f64,
    pub worst: String,
    pub derivatives_ok: bool,
    pub max_ratio_to_lipschitz: f64,
    pub lipschitz_ok: bool,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

fn sample_points(n: usize, seed: u64, box_half: f64) -> Vec<[f64; 5]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unit = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    (0..n)
        .map(|_| {
            let mut p = [0.0; 5];
            p[0] = unit();
            for v in p.iter_mut().skip(1) {
                *v = (2.0 * unit() - 1.0) * box_half;
            }
            p
        })
        .collect()
}

/// Compares jet derivatives with central differences (step 1e-6) of the
/// plain evaluation (first order) and of the jet gradient (second order),
/// and spot-checks the declared Lipschitz bounds. Points are sampled with
/// t ∈ [0, horizon], (x, y, z) in a box and u in the control domain hull.
pub fn self_check(
    model: &dyn CoefficientModel,
    horizon: f64,
    u_range: (f64, f64),
    points: usize,
    seed: u64,
) -> SelfCheckReport {
    const H: f64 = 1e-6;
    let mut worst = (0.0_f64, String::new());
    let mut ratio = 0.0_f64;
    let lip = model.meta().lipschitz;
    let mut note = |e: f64, what: String| {
        if e > worst.0 {
            worst = (e, what);
        }
    };
    for p in sample_points(points, seed, 2.0) {
        let t = p[0] * horizon;
        let mut a = [p[1], p[2], p[3], 0.0];
        a[U] = u_range.0 + (p[4] / 2.0 + 0.5) * (u_range.1 - u_range.0);
        let j = model.eval_jet(t, a[0], a[1], a[2], a[3]);
        let parts = |c: Coef<f64>| [c.b, c.sigma, c.g];
        let jparts = [j.b, j.sigma, j.g];
        for i in 0..4 {
            let mut ap = a;
            let mut am = a;
            ap[i] += H;
            am[i] -= H;
            let fp = parts(model.eval(t, ap[0], ap[1], ap[2], ap[3]));
            let fm = parts(model.eval(t, am[0], am[1], am[2], am[3]));
            let jp = model.eval_jet(t, ap[0], ap[1], ap[2], ap[3]);
            let jm = model.eval_jet(t, am[0], am[1], am[2], am[3]);
            let jpp = [jp.b, jp.sigma, jp.g];
            let jmm = [jm.b, jm.sigma, jm.g];
            for f in 0..3 {
                let fd = (fp[f] - fm[f]) / (2.0 * H);
                note(rel_err(fd, jparts[f].d(i)), format!("d{f}/d{i}"));
                for k in 0..4 {
                    let fd2 = (jpp[f].d(k) - jmm[f].d(k)) / (2.0 * H);
                    note(rel_err(fd2, jparts[f].dd(i, k)), format!("d2{f}/d{i}d{k}"));
                }
            }
        }
        let (_, px, pxx) = model.phi_jet(a[0]);
        let fdx = (model.phi(a[0] + H) - model.phi(a[0] - H)) / (2.0 * H);
        note(rel_err(fdx, px), "phi_x".into());
        let fdxx = (model.phi_jet(a[0] + H).1 - model.phi_jet(a[0] - H).1) / (2.0 * H);
        note(rel_err(fdxx, pxx), "phi_xx".into());

        let bound = |v: f64, l: f64| {
            if l > 0.0 {
                v.abs() / l
            } else if v.abs() > 1e-12 {
                f64::INFINITY
            } else {
                0.0
            }
        };
        for &(v, l) in &[
            (j.b.d(X), lip.l1),
            (j.sigma.d(X), lip.l1),
            (j.g.d(X), lip.l1),
            (j.g.d(Y), lip.l1),
            (j.g.d(Z), lip.l1),
            (px, lip.l1),
            (j.b.d(Y), lip.l2),
            (j.b.d(Z), lip.l2),
            (j.sigma.d(Y), lip.l2),
            (j.sigma.d(Z), lip.l3),
        ] {
            ratio = ratio.max(bound(v, l));
        }
    }
    SelfCheckReport {
        points,
        max_rel_error: worst.0,
        derivatives_ok: worst.0 <= 1e-5,
        worst: worst.1,
        max_ratio_to_lipschitz: ratio,
        lipschitz_ok: ratio <= 1.0 + 1e-9,
    }
}

/// Lipschitz constants estimated as the largest sampled derivative sizes.
pub fn estimate_lipschitz(model: &dyn CoefficientModel, horizon: f64, u_range: (f64, f64)) -> Lipschitz {
    let mut l1 = 0.0_f64;
    let mut l2 = 0.0_f64;
    let mut l3 = 0.0_f64;
    let mut lu = 0.0_f64;
    for p in sample_points(400, 0x5eed, 3.0) {
        let t = p[0] * horizon;
        let u = u_range.0 + (p[4] / 3.0 * 0.5 + 0.5) * (u_range.1 - u_range.0);
        let j = model.eval_jet(t, p[1], p[2], p[3], u);
        let px = model.phi_jet(p[1]).1;
        for v in [j.b.d(X), j.sigma.d(X), j.g.d(X), j.g.d(Y), j.g.d(Z), px] {
            l1 = l1.max(v.abs());
        }
        for v in [j.b.d(Y), j.b.d(Z), j.sigma.d(Y)] {
            l2 = l2.max(v.abs());
        }
        l3 = l3.max(j.sigma.d(Z).abs());
        for v in [j.b.d(U), j.sigma.d(U), j.g.d(U)] {
            lu = lu.max(v.abs());
        }
    }
    Lipschitz { l: l1.max(l2).max(l3).max(lu), l1, l2, l3 }
}

/// Where the control takes its values.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlDomain {
    Finite(Vec<f64>),
    Interval { lo: f64, hi: f64, points: usize },
}

impl ControlDomain {
    pub fn validate(&self) -> Result<()> {
        match self {
            ControlDomain::Finite(v) => {
                if v.is_empty() || v.iter().any(|u| !u.is_finite()) {
                    return invalid("finite control domain must be a nonempty list of numbers");
                }
            }
            ControlDomain::Interval { lo, hi, points } => {
                if !(lo.is_finite() && hi.is_finite()) {
                    return invalid("unbounded control domains are not supported");
                }
                if lo > hi || *points < 2 && lo < hi {
                    return invalid("control interval needs lo <= hi and at least 2 grid points");
                }
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        match self {
            ControlDomain::Finite(v) => v.clone(),
            ControlDomain::Interval { lo, hi, points } => {
                if lo == hi || *points < 2 {
                    return vec![*lo];
                }
                (0..*points).map(|i| lo + (hi - lo) * i as f64 / (*points - 1) as f64).collect()
            }
        }
    }

    pub fn contains(&self, u: f64) -> bool {
        match self {
            ControlDomain::Finite(v) => v.iter().any(|&w| (w - u).abs() <= 1e-12),
            ControlDomain::Interval { lo, hi, .. } => u >= lo - 1e-12 && u <= hi + 1e-12,
        }
    }

    pub fn hull(&self) -> (f64, f64) {
        match self {
            ControlDomain::Finite(v) => {
                v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &u| (a.min(u), b.max(u)))
            }
            ControlDomain::Interval { lo, hi, .. } => (*lo, *hi),
        }
    }

    pub fn is_convex(&self) -> bool {
        match self {
            ControlDomain::Interval { .. } => true,
            ControlDomain::Finite(v) => v.len() == 1,
        }
    }
}

/// A control process. Values are read at lattice nodes (step k, time t,
/// state x).
#[derive(Clone, Debug, PartialEq)]
pub enum Control {
    Constant(f64),
    /// One value per time step; the last value is held.
    Schedule(Vec<f64>),
    /// Feedback u(t, x).
    Feedback(Expr),
    Spiked {
        base: Box<Control>,
        start: usize,
        end: usize,
        value: f64,
    },
}

impl Control {
    pub fn value(&self, k: usize, t: f64, x: f64) -> f64 {
        match self {
            Control::Constant(c) => *c,
            Control::Schedule(v) => v[k.min(v.len() - 1)],
            Control::Feedback(e) => e.eval_tx(t, x),
            Control::Spiked { base, start, end, value } => {
                if (*start..*end).contains(&k) {
                    *value
                } else {
                    base.value(k, t, x)
                }
            }
        }
    }

    pub fn spiked(&self, spike: &SnappedSpike) -> Control {
        Control::Spiked { base: Box::new(self.clone()), start: spike.start, end: spike.end, value: spike.replacement }
    }

    pub fn describe(&self) -> String {
        match self {
            Control::Constant(c) => format!("constant {c}"),
            Control::Schedule(v) => format!("schedule of {} values", v.len()),
            Control::Feedback(e) => format!("feedback {e}"),
            Control::Spiked { base, start, end, value } => {
                format!("{} with steps {start}..{end} set to {value}", base.describe())
            }
        }
    }

    /// Control values on every lattice node, checked against the domain.
    pub fn on_lattice(&self, lattice: &Lattice, domain: &ControlDomain) -> Result<TreeProcess> {
        let mut bad = None;
        let u = TreeProcess::from_fn(lattice.steps(), |k, j| {
            let v = self.value(k, lattice.t(k), lattice.x(k, j));
            if bad.is_none() && (!v.is_finite() || !domain.contains(v)) {
                bad = Some((k, j, v));
            }
            v
        });
        if let Some((k, j, v)) = bad {
            return invalid(format!("control value {v} at step {k}, node {j} is outside the domain"));
        }
        Ok(u)
    }
}

/// A spike perturbation: replace the control by `replacement` on [t₀, t₀+ε).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SpikeSpec {
    pub t0: f64,
    pub eps: f64,
    pub replacement: f64,
}

/// A spike snapped to grid steps `start..end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SnappedSpike {
    pub start: usize,
    pub end: usize,
    pub replacement: f64,
}

impl SnappedSpike {
    pub fn contains(&self, k: usize) -> bool {
        (self.start..self.end).contains(&k)
    }

    pub fn measure(&self, grid: &TimeGrid) -> f64 {
        (self.end - self.start) as f64 * grid.dt
    }
}

impl SpikeSpec {
    /// Rounds t₀ and t₀+ε to the nearest grid points, keeping at least one step.
    pub fn snap(&self, grid: &TimeGrid) -> Result<SnappedSpike> {
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return invalid(format!("spike duration must be positive, got {}", self.eps));
        }
        if self.t0 < 0.0 || self.t0 + self.eps > grid.horizon * (1.0 + 1e-12) {
            return invalid(format!("spike [{}, {}) is not inside [0, {}]", self.t0, self.t0 + self.eps, grid.horizon));
        }
        if !self.replacement.is_finite() {
            return invalid("spike replacement must be finite");
        }
        let start = ((self.t0 / grid.dt).round() as usize).min(grid.steps - 1);
        let end = (((self.t0 + self.eps) / grid.dt).round() as usize).max(start + 1).min(grid.steps);
        Ok(SnappedSpike { start, end, replacement: self.replacement })
    }
}

/// Builds u^ε: the replacement on the snapped steps, ū elsewhere.
pub fn make_spike_control(base: &Control, spike: &SpikeSpec, grid: &TimeGrid) -> Result<(Control, SnappedSpike)> {
    let s = spike.snap(grid)?;
    if s.end <= s.start {
        return Err(Error::InvalidArgument("empty spike set".into()));
    }
    Ok((base.spiked(&s), s))
}

//! Bundled problems and user-defined symbolic coefficients.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::expr::{Expr, Var};
use crate::fbsde::{solve_coupled_picard, FbsdeSolution, LinearFbsdeSpec, PicardOptions};
use crate::jet::Scalar;
use crate::lq::LQCoefficients;
use crate::model::{
    estimate_lipschitz, Coef, CoefficientModel, Control, ControlDomain, Formulas, Lipschitz, Model, ModelMeta,
    SharedModel, SigmaStructure,
};
use crate::smp::Objective;
use crate::tree::{build_tree, Lattice};

/// Coefficients given as expressions in t, x, y, z, u (φ in x only).
#[derive(Clone, Debug, PartialEq)]
pub struct SymbolicFormulas {
    pub b: Expr,
    pub sigma: Expr,
    pub g: Expr,
    pub phi: Expr,
}

impl Formulas for SymbolicFormulas {
    fn coef<S: Scalar>(&self, t: f64, x: S, y: S, z: S, u: S) -> Coef<S> {
        Coef { b: self.b.eval(t, x, y, z, u), sigma: self.sigma.eval(t, x, y, z, u), g: self.g.eval(t, x, y, z, u) }
    }

    fn phi<S: Scalar>(&self, x: S) -> S {
        self.phi.eval(0.0, x, S::cst(0.0), S::cst(0.0), S::cst(0.0))
    }
}

impl SymbolicFormulas {
    pub fn parse(b: &str, sigma: &str, g: &str, phi: &str) -> Result<Self> {
        let phi = Expr::parse(phi)?;
        if [Var::T, Var::Y, Var::Z, Var::U].iter().any(|v| phi.uses(*v)) {
            return invalid("the terminal function may only use x");
        }
        Ok(SymbolicFormulas { b: Expr::parse(b)?, sigma: Expr::parse(sigma)?, g: Expr::parse(g)?, phi })
    }

    /// z-independent when σ never mentions z; otherwise general unless the
    /// caller declares more.
    pub fn detected_structure(&self) -> SigmaStructure {
        if self.sigma.uses(Var::Z) {
            SigmaStructure::General
        } else {
            SigmaStructure::ZIndependent
        }
    }
}

/// Builds a symbolic model; Lipschitz constants are estimated by sampling
/// when not given.
pub fn symbolic_model(
    name: &str,
    formulas: SymbolicFormulas,
    x0: f64,
    lipschitz: Option<Lipschitz>,
    structure: Option<SigmaStructure>,
    lattice_scale: Option<f64>,
    horizon: f64,
    u_range: (f64, f64),
) -> Result<SharedModel> {
    let structure = structure.unwrap_or_else(|| formulas.detected_structure());
    let mut model = Model::new(
        formulas,
        ModelMeta {
            name: name.to_string(),
            x0,
            lipschitz: Lipschitz { l: 0.0, l1: 0.0, l2: 0.0, l3: 0.0 },
            sigma_structure: structure,
            lattice_scale: 1.0,
        },
    );
    model.meta.lipschitz = match lipschitz {
        Some(l) => l,
        None => estimate_lipschitz(&model, horizon, u_range),
    };
    model.meta.lattice_scale = match lattice_scale {
        Some(s) => s,
        None => {
            let s = model.eval(0.0, x0, 0.0, 0.0, 0.5 * (u_range.0 + u_range.1)).sigma.abs();
            if s > 0.05 {
                s
            } else {
                0.5
            }
        }
    };
    Ok(Arc::new(model))
}

/// A bundled problem: coefficients, the default control domain and
/// candidate control, and the cost.
#[derive(Clone, Debug)]
pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    pub model: SharedModel,
    pub domain: ControlDomain,
    pub control: Control,
    pub objective: Objective,
    pub lq: Option<LQCoefficients>,
    /// Whether the default candidate is known to be optimal.
    pub candidate_optimal: bool,
}

impl Preset {
    pub fn lattice(&self, horizon: f64, steps: usize) -> Result<Lattice> {
        let meta = self.model.meta();
        Lattice::new(build_tree(horizon, steps)?, meta.x0, meta.lattice_scale)
    }

    /// The candidate trajectory on a fresh lattice.
    pub fn solve(&self, horizon: f64, steps: usize, picard: &PicardOptions) -> Result<FbsdeSolution> {
        let lattice = self.lattice(horizon, steps)?;
        let u = self.control.on_lattice(&lattice, &self.domain)?;
        solve_coupled_picard(self.model.as_ref(), &lattice, &u, picard, None)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PresetInfo {
    pub name: &'static str,
    pub description: &'static str,
}

pub const PRESETS: [PresetInfo; 8] = [
    PresetInfo { name: "zero", description: "all coefficients zero" },
    PresetInfo {
        name: "example",
        description: "the worked linear-quadratic example with (a, b, c, d) = (0.5, 1, 0.25, 1)",
    },
    PresetInfo { name: "linear-1", description: "fully coupled linear system, mild coupling" },
    PresetInfo { name: "linear-2", description: "fully coupled linear system, negative terminal slope" },
    PresetInfo { name: "linear-3", description: "fully coupled linear system, negative start" },
    PresetInfo {
        name: "nonlinear",
        description: "fully coupled nonlinear system, control in the drift, diffusion and driver",
    },
    PresetInfo { name: "linear-z", description: "diffusion linear in z: sigma = 0.2 z + sigma1(x, y, u)" },
    PresetInfo { name: "decoupled", description: "forward equation free of (y, z)" },
];

pub const LINEAR_PRESETS: [LinearFbsdeSpec; 3] = [
    LinearFbsdeSpec {
        alpha: [-0.2, 0.3, 0.4],
        beta: [0.1, 0.1, 0.2],
        gamma: [0.1, 0.1, 0.3],
        drivers: [0.2, 0.4, 0.1],
        kappa: 0.5,
        x0: 1.0,
    },
    LinearFbsdeSpec {
        alpha: [0.3, 0.0, -0.5],
        beta: [-0.15, 0.05, 0.1],
        gamma: [0.05, 0.15, -0.2],
        drivers: [0.0, 0.6, 0.3],
        kappa: -0.4,
        x0: 0.5,
    },
    LinearFbsdeSpec {
        alpha: [0.0, 0.2, 0.3],
        beta: [0.2, -0.1, 0.0],
        gamma: [-0.1, 0.2, 0.2],
        drivers: [-0.3, 0.3, 0.0],
        kappa: 0.8,
        x0: -0.5,
    },
];

/// b = 0.2 sin x + 0.1 tanh y + 0.1 sin z + 0.2u,
/// σ = 0.4 + 0.1 sin x + 0.1 tanh y + 0.15z + 0.05 sin z + 0.3u,
/// g = 0.3 cos x + 0.2 sin y + 0.2 tanh z + 0.25u², φ = 0.5 sin x.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nonlinear;

impl Formulas for Nonlinear {
    fn coef<S: Scalar>(&self, _t: f64, x: S, y: S, z: S, u: S) -> Coef<S> {
        Coef {
            b: x.sin().scale(0.2) + y.tanh().scale(0.1) + z.sin().scale(0.1) + u.scale(0.2),
            sigma: S::cst(0.4)
                + x.sin().scale(0.1)
                + y.tanh().scale(0.1)
                + z.scale(0.15)
                + z.sin().scale(0.05)
                + u.scale(0.3),
            g: x.cos().scale(0.3) + y.sin().scale(0.2) + z.tanh().scale(0.2) + (u * u).scale(0.25),
        }
    }

    fn phi<S: Scalar>(&self, x: S) -> S {
        x.sin().scale(0.5)
    }
}

/// b = 0.1x + 0.1y + 0.1u, σ = 0.2z + 0.3 + 0.1x + 0.1y + 0.5u,
/// g = 0.2x + 0.1y + 0.1z + 0.2u², φ = 0.8x.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearZ;

impl Formulas for LinearZ {
    fn coef<S: Scalar>(&self, _t: f64, x: S, y: S, z: S, u: S) -> Coef<S> {
        Coef {
            b: x.scale(0.1) + y.scale(0.1) + u.scale(0.1),
            sigma: z.scale(0.2) + S::cst(0.3) + x.scale(0.1) + y.scale(0.1) + u.scale(0.5),
            g: x.scale(0.2) + y.scale(0.1) + z.scale(0.1) + (u * u).scale(0.2),
        }
    }

    fn phi<S: Scalar>(&self, x: S) -> S {
        x.scale(0.8)
    }
}

/// b = 0.1x + 0.2u, σ = 0.3 + 0.1 sin x + 0.3u,
/// g = 0.2 cos x + 0.1y + 0.1z + 0.1u², φ = 0.5x.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decoupled;

impl Formulas for Decoupled {
    fn coef<S: Scalar>(&self, _t: f64, x: S, y: S, z: S, u: S) -> Coef<S> {
        Coef {
            b: x.scale(0.1) + u.scale(0.2),
            sigma: S::cst(0.3) + x.sin().scale(0.1) + u.scale(0.3),
            g: x.cos().scale(0.2) + y.scale(0.1) + z.scale(0.1) + (u * u).scale(0.1),
        }
    }

    fn phi<S: Scalar>(&self, x: S) -> S {
        x.scale(0.5)
    }
}

/// All coefficients and φ zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Zero;

impl Formulas for Zero {
    fn coef<S: Scalar>(&self, _t: f64, _x: S, _y: S, _z: S, _u: S) -> Coef<S> {
        Coef { b: S::cst(0.0), sigma: S::cst(0.0), g: S::cst(0.0) }
    }

    fn phi<S: Scalar>(&self, _x: S) -> S {
        S::cst(0.0)
    }
}

fn meta(name: &str, x0: f64, l1: f64, l2: f64, l3: f64, s: SigmaStructure, scale: f64) -> ModelMeta {
    ModelMeta {
        name: name.to_string(),
        x0,
        lipschitz: Lipschitz { l: l1.max(l2).max(l3).max(0.3), l1, l2, l3 },
        sigma_structure: s,
        lattice_scale: scale,
    }
}

fn three_point() -> ControlDomain {
    ControlDomain::Finite(vec![-1.0, 0.0, 1.0])
}

pub fn preset(name: &str) -> Result<Preset> {
    let info = PRESETS.iter().find(|p| p.name == name).ok_or_else(|| {
        let names: Vec<&str> = PRESETS.iter().map(|p| p.name).collect();
        crate::Error::InvalidArgument(format!("unknown preset {name:?}; available: {}", names.join(", ")))
    })?;
    let plain = |model: SharedModel| Preset {
        name: info.name,
        description: info.description,
        model,
        domain: three_point(),
        control: Control::Constant(0.0),
        objective: Objective::default(),
        lq: None,
        candidate_optimal: false,
    };
    Ok(match name {
        "zero" => plain(Arc::new(Model::new(
            Zero,
            ModelMeta {
                lipschitz: Lipschitz { l: 0.0, l1: 0.0, l2: 0.0, l3: 0.0 },
                ..meta("zero", 0.0, 0.0, 0.0, 0.0, SigmaStructure::ZIndependent, 0.5)
            },
        ))),
        "example" => example_preset(0.5, 1.0, 0.25, 1.0),
        "linear-1" | "linear-2" | "linear-3" => {
            let i = name.as_bytes()[7] - b'1';
            plain(Arc::new(LINEAR_PRESETS[i as usize].model(name)))
        }
        "nonlinear" => {
            plain(Arc::new(Model::new(Nonlinear, meta("nonlinear", 0.5, 0.5, 0.1, 0.2, SigmaStructure::General, 0.4))))
        }
        "linear-z" => {
            plain(Arc::new(Model::new(LinearZ, meta("linear-z", 0.5, 0.8, 0.1, 0.2, SigmaStructure::LinearZ, 0.4))))
        }
        "decoupled" => plain(Arc::new(Model::new(
            Decoupled,
            meta("decoupled", 0.5, 0.5, 0.0, 0.0, SigmaStructure::ZIndependent, 0.3),
        ))),
        _ => unreachable!("name checked against the registry"),
    })
}

/// The worked example for given (a, b, c, d); ū ≡ 0 is optimal when
/// 0 < |2cd| ≤ 1 and ad < 1.
pub fn example_preset(a: f64, b: f64, c: f64, d: f64) -> Preset {
    let lq = LQCoefficients::example(a, b, c, d);
    Preset {
        name: "example",
        description: PRESETS[1].description,
        model: Arc::new(lq.model("example")),
        domain: three_point(),
        control: Control::Constant(0.0),
        objective: lq.objective().expect("no state weights"),
        lq: Some(lq),
        candidate_optimal: (2.0 * c * d).abs() <= 1.0 && a * d < 1.0,
    }
}

pub fn lq_preset(coeffs: LQCoefficients) -> Preset {
    Preset {
        name: "lq",
        description: "linear-quadratic problem",
        model: Arc::new(coeffs.model("lq")),
        domain: three_point(),
        control: Control::Constant(0.0),
        objective: coeffs.objective().unwrap_or_default(),
        lq: Some(coeffs),
        candidate_optimal: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::self_check;

    #[test]
    fn every_preset_passes_the_derivative_self_check() {
        for info in PRESETS {
            let p = preset(info.name).unwrap();
            let rep = self_check(p.model.as_ref(), 1.0, p.domain.hull(), 200, 3);
            assert!(rep.derivatives_ok, "{}: {:?}", info.name, rep);
            assert!(rep.lipschitz_ok, "{}: {:?}", info.name, rep);
        }
    }

    #[test]
    fn symbolic_matches_hand_written() {
        let f = SymbolicFormulas::parse(
            "0.2*sin(x) + 0.1*tanh(y) + 0.1*sin(z) + 0.2*u",
            "0.4 + 0.1*sin(x) + 0.1*tanh(y) + 0.15*z + 0.05*sin(z) + 0.3*u",
            "0.3*cos(x) + 0.2*sin(y) + 0.2*tanh(z) + 0.25*u^2",
            "0.5*sin(x)",
        )
        .unwrap();
        assert_eq!(f.detected_structure(), SigmaStructure::General);
        let m = symbolic_model("s", f, 0.5, None, None, None, 1.0, (-1.0, 1.0)).unwrap();
        let h = preset("nonlinear").unwrap().model;
        for (x, y, z, u) in [(0.1, -0.3, 0.7, 1.0), (-2.0, 1.0, 0.0, -1.0)] {
            let (a, b) = (m.eval_jet(0.3, x, y, z, u), h.eval_jet(0.3, x, y, z, u));
            assert!((a.sigma.dd(2, 2) - b.sigma.dd(2, 2)).abs() < 1e-14);
            assert!((a.g.v - b.g.v).abs() < 1e-14);
        }
        assert!(SymbolicFormulas::parse("x", "x", "x", "x + y").is_err());
    }
}

//! Problem documents: grid, coefficients, control domain and candidate,
//! cost, assumption constants and Monte Carlo seed.
//!
//! ```json
//! {
//!   "T": 1.0,
//!   "N": 128,
//!   "coefficients": "nonlinear",
//!   "control": { "domain": { "finite": [-1, 0, 1] }, "candidate": 0 },
//!   "assumptions": { "beta0": 0.5, "c_beta": 1 },
//!   "seed": 7
//! }
//! ```

use std::fmt;

use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::assumptions::AssumptionInputs;
use crate::error::{Error, Result};
use crate::expr::{Expr, Var};
use crate::fbsde::{solve_coupled_picard, FbsdeSolution, PicardOptions};
use crate::lq::LQCoefficients;
use crate::model::{Control, ControlDomain, Lipschitz, SharedModel, SigmaStructure};
use crate::presets::{example_preset, lq_preset, preset, symbolic_model, Preset, SymbolicFormulas};
use crate::smp::Objective;
use crate::tree::{build_tree, Lattice};

pub use crate::assumptions::DEFAULT_BETA0;
pub const DEFAULT_SEED: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "N")]
    pub steps: usize,
    pub coefficients: CoefficientSpec,
    #[serde(default)]
    pub control: ControlSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<Objective>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assumptions: Option<AssumptionConstants>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// A preset name, or one of `{"preset": {...}}`, `{"lq": {...}}`,
/// `{"symbolic": {...}}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum CoefficientSpec {
    Name(String),
    Table(CoefficientTable),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum CoefficientTable {
    Preset(NamedPreset),
    Lq(LQCoefficients),
    Symbolic(SymbolicSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedPreset {
    pub name: String,
    /// (a, b, c, d) of the worked example; only valid with `"example"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ExampleCoefficients>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SymbolicSpec {
    pub b: String,
    pub sigma: String,
    pub g: String,
    pub phi: String,
    #[serde(default)]
    pub x0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<LipschitzSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_structure: Option<SigmaStructure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lattice_scale: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LipschitzSpec {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<DomainSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<CandidateSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum DomainSpec {
    Finite(Vec<f64>),
    Interval { lo: f64, hi: f64, points: usize },
}

/// A number, or one of `{"constant": c}`, `{"schedule": [...]}`,
/// `{"feedback": "expr in t, x"}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum CandidateSpec {
    Value(f64),
    Table(CandidateTable),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum CandidateTable {
    Constant(f64),
    Schedule(Vec<f64>),
    Feedback(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssumptionConstants {
    #[serde(default = "default_beta0")]
    pub beta0: f64,
    #[serde(default = "one")]
    pub c_beta: f64,
}

fn default_beta0() -> f64 {
    DEFAULT_BETA0
}

fn one() -> f64 {
    1.0
}

impl Default for AssumptionConstants {
    fn default() -> Self {
        AssumptionConstants { beta0: DEFAULT_BETA0, c_beta: 1.0 }
    }
}

/// Deserializes a string or number as the scalar arm and a map as the
/// tagged table, keeping the key path of errors inside the table.
macro_rules! scalar_or_table {
    ($ty:ident, $scalar:ident, $visit:ident, $prim:ty, $expect:literal) => {
        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                struct V;
                impl<'de> Visitor<'de> for V {
                    type Value = $ty;
                    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                        f.write_str($expect)
                    }
                    fn $visit<E: de::Error>(self, v: $prim) -> std::result::Result<$ty, E> {
                        Ok($ty::$scalar(v.into()))
                    }
                    fn visit_map<A: MapAccess<'de>>(self, map: A) -> std::result::Result<$ty, A::Error> {
                        Deserialize::deserialize(de::value::MapAccessDeserializer::new(map)).map($ty::Table)
                    }
                    scalar_or_table!(@extra $ty $scalar);
                }
                d.deserialize_any(V)
            }
        }
    };
    (@extra CoefficientSpec Name) => {};
    (@extra CandidateSpec Value) => {
        fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<CandidateSpec, E> {
            Ok(CandidateSpec::Value(v as f64))
        }
        fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<CandidateSpec, E> {
            Ok(CandidateSpec::Value(v as f64))
        }
    };
}

scalar_or_table!(CoefficientSpec, Name, visit_str, &str, "a preset name or a coefficient table");
scalar_or_table!(CandidateSpec, Value, visit_f64, f64, "a number or a control table");

impl ProblemConfig {
    /// Parses a problem document; errors name the path of the offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ProblemConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return config_err(format!("T: must be positive, got {}", self.horizon));
        }
        if self.steps == 0 {
            return config_err("N: must be at least 1");
        }
        if let Some(a) = &self.assumptions {
            if !(a.beta0 > 0.0 && a.beta0 < 1.0) {
                return config_err(format!("assumptions.beta0: must lie inside (0, 1), got {}", a.beta0));
            }
            if !(a.c_beta >= 0.0) || !a.c_beta.is_finite() {
                return config_err(format!("assumptions.c_beta: must be nonnegative, got {}", a.c_beta));
            }
        }
        Ok(())
    }

    pub fn preset(name: &str, horizon: f64, steps: usize) -> Self {
        ProblemConfig {
            horizon,
            steps,
            coefficients: CoefficientSpec::Name(name.to_string()),
            control: ControlSpec::default(),
            objective: None,
            assumptions: None,
            seed: None,
        }
    }
}

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

/// A resolved problem ready to solve.
#[derive(Clone, Debug)]
pub struct Problem {
    pub config: ProblemConfig,
    pub name: String,
    pub model: SharedModel,
    pub domain: ControlDomain,
    pub control: Control,
    pub objective: Objective,
    pub lq: Option<LQCoefficients>,
    pub candidate_optimal: bool,
    pub assumptions: AssumptionConstants,
    pub seed: u64,
}

impl Problem {
    pub fn from_config(config: ProblemConfig) -> Result<Self> {
        config.validate()?;
        let domain = match &config.control.domain {
            Some(DomainSpec::Finite(v)) => Some(ControlDomain::Finite(v.clone())),
            Some(DomainSpec::Interval { lo, hi, points }) => {
                Some(ControlDomain::Interval { lo: *lo, hi: *hi, points: *points })
            }
            None => None,
        };
        if let Some(d) = &domain {
            d.validate().map_err(|e| Error::Config(format!("control.domain: {}", message(e))))?;
        }
        let base = match &config.coefficients {
            CoefficientSpec::Name(name) => {
                preset(name).map_err(|e| Error::Config(format!("coefficients: {}", message(e))))?
            }
            CoefficientSpec::Table(CoefficientTable::Preset(p)) => match (&p.params, p.name.as_str()) {
                (None, name) => {
                    preset(name).map_err(|e| Error::Config(format!("coefficients.preset.name: {}", message(e))))?
                }
                (Some(c), "example") => example_preset(c.a, c.b, c.c, c.d),
                (Some(_), name) => {
                    return config_err(format!("coefficients.preset.params: preset {name:?} takes no parameters"))
                }
            },
            CoefficientSpec::Table(CoefficientTable::Lq(c)) => lq_preset(*c),
            CoefficientSpec::Table(CoefficientTable::Symbolic(s)) => {
                let hull = domain.as_ref().map(|d| d.hull()).unwrap_or((-1.0, 1.0));
                symbolic_preset(s, config.horizon, hull)?
            }
        };
        let domain = domain.unwrap_or(base.domain.clone());
        let control = match &config.control.candidate {
            None => base.control.clone(),
            Some(CandidateSpec::Value(c)) | Some(CandidateSpec::Table(CandidateTable::Constant(c))) => {
                Control::Constant(*c)
            }
            Some(CandidateSpec::Table(CandidateTable::Schedule(v))) => {
                if v.is_empty() {
                    return config_err("control.candidate.schedule: needs at least one value");
                }
                Control::Schedule(v.clone())
            }
            Some(CandidateSpec::Table(CandidateTable::Feedback(src))) => {
                let e = Expr::parse(src)
                    .map_err(|e| Error::Config(format!("control.candidate.feedback: {}", message(e))))?;
                if [Var::Y, Var::Z, Var::U].iter().any(|v| e.uses(*v)) {
                    return config_err("control.candidate.feedback: may only use t and x");
                }
                Control::Feedback(e)
            }
        };
        let objective = config.objective.unwrap_or(base.objective);
        let candidate_optimal = base.candidate_optimal
            && config.control.candidate.is_none()
            && config.control.domain.is_none()
            && config.objective.is_none();
        Ok(Problem {
            name: base.name.to_string(),
            model: base.model,
            domain,
            control,
            objective,
            lq: base.lq,
            candidate_optimal,
            assumptions: config.assumptions.unwrap_or_default(),
            seed: config.seed.unwrap_or(DEFAULT_SEED),
            config,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Problem::from_config(ProblemConfig::from_json(text)?)
    }

    pub fn horizon(&self) -> f64 {
        self.config.horizon
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn lattice_with(&self, steps: usize) -> Result<Lattice> {
        let meta = self.model.meta();
        Lattice::new(build_tree(self.horizon(), steps)?, meta.x0, meta.lattice_scale)
    }

    pub fn lattice(&self) -> Result<Lattice> {
        self.lattice_with(self.steps())
    }

    /// The candidate trajectory with `steps` time steps.
    pub fn solve_with(&self, steps: usize, picard: &PicardOptions) -> Result<FbsdeSolution> {
        let lattice = self.lattice_with(steps)?;
        let u = self.control.on_lattice(&lattice, &self.domain)?;
        solve_coupled_picard(self.model.as_ref(), &lattice, &u, picard, None)
    }

    pub fn solve(&self, picard: &PicardOptions) -> Result<FbsdeSolution> {
        self.solve_with(self.steps(), picard)
    }

    pub fn assumption_inputs(&self) -> AssumptionInputs {
        let l = self.model.meta().lipschitz;
        AssumptionInputs {
            c_beta: self.assumptions.c_beta,
            ..AssumptionInputs::new(l.l1, l.l2, l.l3, self.assumptions.beta0, self.horizon())
        }
    }
}

fn symbolic_preset(s: &SymbolicSpec, horizon: f64, hull: (f64, f64)) -> Result<Preset> {
    let at = |field: &str, e: Error| Error::Config(format!("coefficients.symbolic.{field}: {}", message(e)));
    let parse = |field: &str, src: &str| Expr::parse(src).map_err(|e| at(field, e));
    for (field, src) in [("b", &s.b), ("sigma", &s.sigma), ("g", &s.g), ("phi", &s.phi)] {
        parse(field, src)?;
    }
    let formulas = SymbolicFormulas::parse(&s.b, &s.sigma, &s.g, &s.phi).map_err(|e| at("phi", e))?;
    if !s.x0.is_finite() {
        return config_err("coefficients.symbolic.x0: must be finite");
    }
    if let Some(l) = s.lipschitz {
        if [l.l1, l.l2, l.l3].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return config_err("coefficients.symbolic.lipschitz: constants must be finite and nonnegative");
        }
    }
    if let Some(sc) = s.lattice_scale {
        if !(sc > 0.0) || !sc.is_finite() {
            return config_err("coefficients.symbolic.lattice_scale: must be positive");
        }
    }
    let lipschitz = s.lipschitz.map(|l| Lipschitz { l: l.l1.max(l.l2).max(l.l3), l1: l.l1, l2: l.l2, l3: l.l3 });
    let model =
        symbolic_model("symbolic", formulas, s.x0, lipschitz, s.sigma_structure, s.lattice_scale, horizon, hull)
            .map_err(|e| at("b", e))?;
    Ok(Preset {
        name: "symbolic",
        description: "user-defined symbolic coefficients",
        model,
        domain: ControlDomain::Finite(vec![-1.0, 0.0, 1.0]),
        control: Control::Constant(0.0),
        objective: Objective::default(),
        lq: None,
        candidate_optimal: false,
    })
}

fn message(e: Error) -> String {
    match e {
        Error::InvalidArgument(m) | Error::Config(m) => m,
        other => other.to_string(),
    }
}

//! Scenario files: model, driver and run parameters in one TOML document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bsde::{GridSpec, InnerRule, OperatorForm, SolverParams};
use crate::error::{Error, Result};
use crate::ergodic::{LadderConfig, DEFAULT_SCHEDULE};
use crate::linalg::Mat;
use crate::model::{
    build_heat_model, driver_from_control, ControlSpec, DriftField, DriverSpec, ModelSpec, ScalarNonlinearity,
};
use crate::rng::derive_seed;

pub const SCHEMA_VERSION: u32 = 1;

/// Names of the scenarios compiled into the library.
pub const BUILTIN: [&str; 5] = ["heat", "constant", "zfree", "scalar_ou", "adversarial"];

fn builtin_source(name: &str) -> Option<&'static str> {
    Some(match name {
        "heat" => include_str!("../../../scenarios/heat.toml"),
        "constant" => include_str!("../../../scenarios/constant.toml"),
        "zfree" => include_str!("../../../scenarios/zfree.toml"),
        "scalar_ou" => include_str!("../../../scenarios/scalar_ou.toml"),
        "adversarial" => include_str!("../../../scenarios/adversarial.toml"),
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub id: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub driver: DriverConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub ladder: LadderSection,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub residual: ResidualConfig,
    #[serde(default)]
    pub coupling: CouplingSection,
    #[serde(default)]
    pub recurrence: RecurrenceConfig,
    #[serde(default)]
    pub control: ControlRunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Eigenvalues {
    Preset(String),
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SigmaConfig {
    Const { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NonlinearityConfig {
    Zero,
    Cos { amplitude: f64 },
    Sin { amplitude: f64 },
    TanhScaled { amplitude: f64, scale: f64 },
    Outward { amplitude: f64, width: f64 },
}

impl NonlinearityConfig {
    pub fn build(&self) -> ScalarNonlinearity {
        match *self {
            Self::Zero => ScalarNonlinearity::zero(),
            Self::Cos { amplitude } => ScalarNonlinearity::cos(amplitude),
            Self::Sin { amplitude } => ScalarNonlinearity::sin(amplitude),
            Self::TanhScaled { amplitude, scale } => ScalarNonlinearity::tanh_scaled(amplitude, scale),
            Self::Outward { amplitude, width } => ScalarNonlinearity::outward(amplitude, width),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_modes: usize,
    /// `"heat"` or an explicit list of negative eigenvalues.
    pub eigenvalues: Eigenvalues,
    pub sigma: SigmaConfig,
    pub f: NonlinearityConfig,
    #[serde(default = "default_n_quad")]
    pub n_quad: usize,
    /// Noise operator for explicit eigenvalues; identity times the sigma
    /// value when absent.
    #[serde(default)]
    pub g: Option<Vec<Vec<f64>>>,
}

fn default_n_quad() -> usize {
    16
}

/// State part of a running cost: `amplitude · tanh(scale · x_k² )` or
/// `amplitude · tanh(scale · x_k + shift)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StateCost {
    TanhSquare { coordinate: usize, amplitude: f64, scale: f64 },
    TanhAffine { coordinate: usize, amplitude: f64, scale: f64, #[serde(default)] shift: f64 },
}

impl StateCost {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            Self::TanhSquare { coordinate, amplitude, scale } => amplitude * (scale * x[coordinate] * x[coordinate]).tanh(),
            Self::TanhAffine { coordinate, amplitude, scale, shift } => amplitude * (scale * x[coordinate] + shift).tanh(),
        }
    }

    fn coordinate(&self) -> usize {
        match *self {
            Self::TanhSquare { coordinate, .. } | Self::TanhAffine { coordinate, .. } => coordinate,
        }
    }

    fn sup(&self) -> f64 {
        match *self {
            Self::TanhSquare { amplitude, .. } | Self::TanhAffine { amplitude, .. } => amplitude.abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DriverConfig {
    /// `ψ ≡ value`.
    Constant { value: f64 },
    /// `ψ(x, z) = state_cost(x)`.
    State { state_cost: StateCost },
    /// `ψ(x, z) = min_u control_cost·|u| + state_cost(x) + <z, R(u)>`.
    Control {
        controls: Vec<Vec<f64>>,
        /// `R(u)` per control, in list order.
        actions: Vec<Vec<f64>>,
        control_cost: f64,
        state_cost: StateCost,
        bound: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub h: f64,
    pub nodes: usize,
    /// Multiple of the default box.
    pub box_scale: f64,
    pub inner: InnerRule,
    pub tol: f64,
    pub max_iter: usize,
    pub form: OperatorForm,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let p = SolverParams::default();
        Self { h: p.h, nodes: 61, box_scale: 1.0, inner: p.inner, tol: p.tol, max_iter: p.max_iter, form: p.form }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LadderSection {
    pub schedule: Vec<f64>,
    /// Anchors for the re-anchored ladders, as coordinate vectors.
    pub anchors: Vec<Vec<f64>>,
    /// Second ladder of the Markovian comparison.
    pub alt_nodes: usize,
    pub alt_schedule: Vec<f64>,
    pub alt_inner: InnerRule,
    pub bounds_max_points: usize,
    pub bounds_max_ratio: f64,
}

impl Default for LadderSection {
    fn default() -> Self {
        Self {
            schedule: DEFAULT_SCHEDULE.to_vec(),
            anchors: Vec::new(),
            alt_nodes: 45,
            alt_schedule: vec![0.4, 0.2, 0.08, 0.04, 0.016, 0.008],
            alt_inner: InnerRule::MonteCarlo { n_mc: 64, seed: 11 },
            bounds_max_points: 400,
            bounds_max_ratio: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub dt: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { x0: Vec::new(), horizon: 2.0, dt: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResidualConfig {
    pub horizon: f64,
    pub dt: f64,
    pub n_mc: usize,
    pub x0: Vec<f64>,
    pub mild_points: Vec<Vec<f64>>,
    pub quadrature_intervals: usize,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        Self { horizon: 2.0, dt: 0.01, n_mc: 4000, x0: Vec::new(), mild_points: Vec::new(), quadrature_intervals: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CouplingSection {
    pub dt: f64,
    pub kappa_horizon: f64,
    pub kappa_n_mc: usize,
    pub n_mc: usize,
    pub k_max: usize,
    pub bridge_n_mc: usize,
    pub discrete_n_mc: usize,
    pub tv_times: Vec<f64>,
    pub tv_n_mc: usize,
    /// Starting pair for the decay estimates; zero and the first unit
    /// vector scaled by 2 when empty.
    pub starts: Vec<Vec<f64>>,
}

impl Default for CouplingSection {
    fn default() -> Self {
        Self {
            dt: 0.01,
            kappa_horizon: 5.0,
            kappa_n_mc: 4000,
            n_mc: 2000,
            k_max: 200,
            bridge_n_mc: 4000,
            discrete_n_mc: 20_000,
            tv_times: vec![0.25, 0.5, 1.0, 1.5, 2.0, 2.5],
            tv_n_mc: 20_000,
            starts: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecurrenceConfig {
    pub x0: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub horizons: Vec<f64>,
    pub n_mc: usize,
    pub dt: f64,
}

impl Default for RecurrenceConfig {
    fn default() -> Self {
        Self { x0: Vec::new(), epsilons: vec![0.25, 0.5], horizons: vec![0.5, 1.0, 2.0, 5.0, 10.0], n_mc: 4000, dt: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlRunConfig {
    pub x0: Vec<f64>,
    pub burn_in: f64,
    pub horizon: f64,
    pub n_mc: usize,
    pub dt: f64,
    pub girsanov_horizon: f64,
    pub girsanov_n_mc: usize,
}

impl Default for ControlRunConfig {
    fn default() -> Self {
        Self {
            x0: Vec::new(),
            burn_in: 1.0,
            horizon: 50.0,
            n_mc: 200,
            dt: 0.01,
            girsanov_horizon: 2.0,
            girsanov_n_mc: 4000,
        }
    }
}

/// Objects built from a [`Scenario`].
#[derive(Debug, Clone)]
pub struct Resolved {
    pub model: ModelSpec,
    pub drift: DriftField,
    pub driver: DriverSpec,
    pub control: Option<ControlSpec>,
}

impl Scenario {
    /// Parses TOML, applying `key.path=value` overrides before validation.
    pub fn from_toml_str(source: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(source)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let scenario: Scenario = serde_path_to_error::deserialize(value)
            .map_err(|e| Error::Config(format!("at `{}`: {}", e.path(), e.inner())))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let source = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&source, overrides)
    }

    /// One of [`BUILTIN`].
    pub fn builtin(name: &str, overrides: &[String]) -> Result<Self> {
        let source = builtin_source(name).ok_or_else(|| Error::Config(format!("no built-in scenario `{name}`")))?;
        Self::from_toml_str(source, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "at `schema_version`: expected {SCHEMA_VERSION}, found {}",
                self.schema_version
            )));
        }
        if self.id.is_empty() || !self.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(Error::Config(format!("at `id`: `{}` must be nonempty ASCII letters, digits, `_` or `-`", self.id)));
        }
        let n = self.model.n_modes;
        if n == 0 {
            return Err(Error::Config("at `model.n_modes`: must be positive".into()));
        }
        match &self.model.eigenvalues {
            Eigenvalues::Preset(p) if p != "heat" => {
                return Err(Error::Config(format!("at `model.eigenvalues`: unknown preset `{p}`")))
            }
            Eigenvalues::Explicit(a) if a.len() != n => {
                return Err(Error::Config(format!("at `model.eigenvalues`: expected {n} values, found {}", a.len())))
            }
            _ => {}
        }
        if let Some(g) = &self.model.g {
            if g.len() != n || g.iter().any(|r| r.len() != n) {
                return Err(Error::Config(format!("at `model.g`: expected a {n}x{n} matrix")));
            }
        }
        let check_len = |path: &str, v: &[f64]| -> Result<()> {
            if !v.is_empty() && v.len() != n {
                return Err(Error::Config(format!("at `{path}`: expected {n} coordinates, found {}", v.len())));
            }
            Ok(())
        };
        check_len("simulate.x0", &self.simulate.x0)?;
        check_len("residual.x0", &self.residual.x0)?;
        check_len("recurrence.x0", &self.recurrence.x0)?;
        check_len("control.x0", &self.control.x0)?;
        for (i, p) in self.residual.mild_points.iter().enumerate() {
            check_len(&format!("residual.mild_points[{i}]"), p)?;
        }
        for (i, p) in self.ladder.anchors.iter().enumerate() {
            check_len(&format!("ladder.anchors[{i}]"), p)?;
        }
        for (i, p) in self.coupling.starts.iter().enumerate() {
            check_len(&format!("coupling.starts[{i}]"), p)?;
        }
        if !self.coupling.starts.is_empty() && self.coupling.starts.len() != 2 {
            return Err(Error::Config("at `coupling.starts`: expected two starting points".into()));
        }
        match &self.driver {
            DriverConfig::Constant { .. } => {}
            DriverConfig::State { state_cost } => self.check_cost(state_cost, "driver.state_cost")?,
            DriverConfig::Control { controls, actions, state_cost, .. } => {
                self.check_cost(state_cost, "driver.state_cost")?;
                if controls.is_empty() {
                    return Err(Error::Config("at `driver.controls`: control set is empty".into()));
                }
                if actions.len() != controls.len() {
                    return Err(Error::Config(format!(
                        "at `driver.actions`: expected {} actions, found {}",
                        controls.len(),
                        actions.len()
                    )));
                }
                if let Some(i) = actions.iter().position(|a| a.len() != n) {
                    return Err(Error::Config(format!("at `driver.actions[{i}]`: expected {n} entries")));
                }
            }
        }
        let positive = [
            ("solver.h", self.solver.h),
            ("solver.box_scale", self.solver.box_scale),
            ("solver.tol", self.solver.tol),
            ("simulate.dt", self.simulate.dt),
            ("residual.dt", self.residual.dt),
            ("residual.horizon", self.residual.horizon),
            ("coupling.dt", self.coupling.dt),
            ("recurrence.dt", self.recurrence.dt),
            ("control.dt", self.control.dt),
            ("control.horizon", self.control.horizon),
        ];
        if let Some((k, v)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(Error::Config(format!("at `{k}`: must be positive, found {v}")));
        }
        if self.solver.nodes < 2 {
            return Err(Error::Config("at `solver.nodes`: need at least 2 nodes".into()));
        }
        Ok(())
    }

    fn check_cost(&self, cost: &StateCost, path: &str) -> Result<()> {
        if cost.coordinate() >= self.model.n_modes {
            return Err(Error::Config(format!("at `{path}.coordinate`: out of range for {} modes", self.model.n_modes)));
        }
        Ok(())
    }

    /// Seed for replica stream family `index` of `module`.
    pub fn seed_for(&self, module: &str, index: u64) -> u64 {
        derive_seed(self.seed, module, index)
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let m = &self.model;
        let SigmaConfig::Const { value: sigma } = m.sigma;
        let f = m.f.build();
        let (model, drift) = match &m.eigenvalues {
            Eigenvalues::Preset(_) => build_heat_model(m.n_modes, &f, &|_| sigma, m.n_quad)?,
            Eigenvalues::Explicit(a) => {
                if !f.is_zero() {
                    return Err(Error::Config("at `model.f`: explicit eigenvalues support only the zero preset".into()));
                }
                let g = match &m.g {
                    Some(rows) => Mat::from_rows(rows)?,
                    None => Mat::identity(m.n_modes).scale(sigma),
                };
                (ModelSpec::new(a.clone(), g)?, DriftField::zero())
            }
        };
        let (driver, control) = match &self.driver {
            DriverConfig::Constant { value } => (DriverSpec::constant(*value), None),
            DriverConfig::State { state_cost } => {
                let c = state_cost.clone();
                (DriverSpec::new(move |x, _| c.eval(x), state_cost.sup()), None)
            }
            DriverConfig::Control { controls, actions, control_cost, state_cost, bound } => {
                let table = actions.clone();
                let list = controls.clone();
                let action = move |u: &[f64]| {
                    let i = list.iter().position(|v| v.as_slice() == u).expect("control in list");
                    table[i].clone()
                };
                let (cu, c) = (*control_cost, state_cost.clone());
                let spec = ControlSpec::new(
                    controls.clone(),
                    action,
                    move |x, u| cu * u.iter().map(|v| v * v).sum::<f64>().sqrt() + c.eval(x),
                    *bound,
                )?;
                (driver_from_control(&spec), Some(spec))
            }
        };
        Ok(Resolved { model, drift, driver, control })
    }

    pub fn grid(&self, model: &ModelSpec) -> Result<GridSpec> {
        let b = model.default_box().into_iter().map(|b| b * self.solver.box_scale).collect();
        GridSpec::uniform(b, self.solver.nodes)
    }

    pub fn solver_params(&self) -> SolverParams {
        SolverParams {
            h: self.solver.h,
            inner: self.solver.inner.clone(),
            tol: self.solver.tol,
            max_iter: self.solver.max_iter,
            relaxation: None,
            form: self.solver.form,
        }
    }

    pub fn ladder_config(&self, model: &ModelSpec) -> Result<LadderConfig> {
        Ok(LadderConfig { schedule: self.ladder.schedule.clone(), grid: self.grid(model)?, params: self.solver_params() })
    }

    /// Starting point of the hitting-time runs; `2σ₁e₁` when unset.
    pub fn recurrence_start(&self, model: &ModelSpec) -> Vec<f64> {
        if self.recurrence.x0.is_empty() {
            let mut x = vec![0.0; model.n_modes];
            x[0] = 2.0 * model.stationary_std()[0];
            x
        } else {
            self.recurrence.x0.clone()
        }
    }

    /// Starting pair of the coupling and decay runs.
    pub fn coupling_starts(&self) -> (Vec<f64>, Vec<f64>) {
        match self.coupling.starts.as_slice() {
            [a, b] => (a.clone(), b.clone()),
            _ => {
                let mut e = vec![0.0; self.model.n_modes];
                e[0] = 2.0;
                (vec![0.0; self.model.n_modes], e)
            }
        }
    }

    /// `v` when nonempty, the origin otherwise.
    pub fn point_or_origin(&self, v: &[f64]) -> Vec<f64> {
        if v.is_empty() {
            vec![0.0; self.model.n_modes]
        } else {
            v.to_vec()
        }
    }
}

/// Sets `a.b.c = value` in a TOML tree. The value is parsed as a TOML
/// literal and falls back to a bare string.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let path = path.trim();
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override `{assignment}` has an empty key")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    let mut node = root;
    for (i, k) in keys.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("at `{}`: not a table", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            table.insert((*k).to_string(), value);
            return Ok(());
        }
        node = table.entry((*k).to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    unreachable!("loop returns on the last key")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse_and_resolve() {
        for name in BUILTIN {
            let s = Scenario::builtin(name, &[]).unwrap();
            assert_eq!(s.id, name);
            s.resolve().unwrap();
        }
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let s = Scenario::builtin("heat", &["solver.nodes=31".into(), "seed=9".into()]).unwrap();
        assert_eq!(s.solver.nodes, 31);
        assert_eq!(s.seed, 9);
    }

    #[test]
    fn unknown_keys_report_their_path() {
        let err = Scenario::builtin("heat", &["solver.nodez=31".into()]).unwrap_err().to_string();
        assert!(err.contains("solver"), "{err}");
        assert!(err.contains("nodez"), "{err}");
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let err = Scenario::builtin("heat", &["schema_version=2".into()]).unwrap_err().to_string();
        assert!(err.contains("schema_version"), "{err}");
    }

    #[test]
    fn toml_round_trip() {
        let s = Scenario::builtin("heat", &[]).unwrap();
        let back = Scenario::from_toml_str(&s.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn seeds_differ_by_module() {
        let s = Scenario::builtin("heat", &[]).unwrap();
        assert_ne!(s.seed_for("coupling", 0), s.seed_for("control", 0));
        assert_ne!(s.seed_for("coupling", 0), s.seed_for("coupling", 1));
    }
}

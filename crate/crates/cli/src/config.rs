//! JSON experiment configuration and its validation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hjb_bsde_core::catalog::{make_catalog_problem, ParamValue, Params, Problem};
use hjb_bsde_core::forward::{InitialRegime, TimeGrid};
use hjb_bsde_core::pde::Boundary;
use hjb_bsde_core::regression::BasisKind;
use hjb_bsde_core::Error as CoreError;
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

/// Slack on the stability rule `n * dt <= 1`.
const STABILITY_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub grid: GridConfig,
    pub x0: Vec<f64>,
    /// Reference regime atom; the middle atom when absent.
    #[serde(default)]
    pub initial_atom: Option<usize>,
    #[serde(default)]
    pub initial_regime: StartLayout,
    pub paths: usize,
    pub seed: u64,
    #[serde(default)]
    pub basis: BasisConfig,
    #[serde(default)]
    pub ridge: f64,
    #[serde(default = "default_true")]
    pub control_variate: bool,
    #[serde(default)]
    pub min_paths: Option<usize>,
    #[serde(default)]
    pub penalties: Vec<f64>,
    pub schemes: Vec<SchemeName>,
    #[serde(default)]
    pub tilts: Vec<TiltConfig>,
    #[serde(default)]
    pub fd: Option<FdConfig>,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub workers: Option<usize>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub steps: usize,
    /// Overrides the problem's `T` parameter.
    #[serde(default)]
    pub horizon: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartLayout {
    Fixed,
    #[default]
    Stratified,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BasisConfig {
    Polynomial { degree: usize },
    PiecewiseConstant { bins: usize },
    Radial { centers: usize },
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig::Polynomial { degree: 2 }
    }
}

impl From<BasisConfig> for BasisKind {
    fn from(b: BasisConfig) -> Self {
        match b {
            BasisConfig::Polynomial { degree } => BasisKind::Polynomial { degree },
            BasisConfig::PiecewiseConstant { bins } => BasisKind::PiecewiseConstant { bins },
            BasisConfig::Radial { centers } => BasisKind::Radial { centers },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    Penalized,
    Projection,
    Dual,
    Fd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TiltConfig {
    /// `nu = kappa` on every transition.
    Constant { kappa: f64 },
    /// `kappa` on transitions into `atom`, one elsewhere.
    Toward { atom: usize, kappa: f64 },
    /// Read off the penalized surface at level `penalty`.
    BangBang { penalty: f64 },
    /// CSV table with columns `atom_from,atom_to,kappa`; missing pairs are one.
    Table { file: PathBuf },
}

impl TiltConfig {
    /// Stable identifier used in the `scheme` column.
    pub fn label(&self) -> String {
        match self {
            TiltConfig::Constant { kappa } => format!("constant:{kappa}"),
            TiltConfig::Toward { atom, kappa } => format!("toward:{atom}:{kappa}"),
            TiltConfig::BangBang { penalty } => format!("bang_bang:{penalty}"),
            TiltConfig::Table { file } => {
                let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned());
                format!("table:{}", stem.unwrap_or_default())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryConfig {
    DirichletPayoff,
    #[default]
    LinearExtrapolation,
}

impl From<BoundaryConfig> for Boundary {
    fn from(b: BoundaryConfig) -> Self {
        match b {
            BoundaryConfig::DirichletPayoff => Boundary::DirichletPayoff,
            BoundaryConfig::LinearExtrapolation => Boundary::LinearExtrapolation,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdConfig {
    #[serde(default)]
    pub x_min: Option<f64>,
    #[serde(default)]
    pub x_max: Option<f64>,
    #[serde(default)]
    pub nx: Option<usize>,
    #[serde(default)]
    pub nt: Option<usize>,
    #[serde(default)]
    pub boundary: BoundaryConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub surface: bool,
    #[serde(default)]
    pub paths: bool,
    /// Fill the `wall_time` column; off by default so reruns are byte-identical.
    #[serde(default)]
    pub wall_time: bool,
}

/// A validated config with its catalog problem built.
pub struct Resolved {
    pub config: ExperimentConfig,
    pub problem: Problem,
    pub grid: TimeGrid,
    pub initial_atom: usize,
    pub start: InitialRegime,
    pub fd: Option<ResolvedFd>,
}

impl std::fmt::Debug for Resolved {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Resolved")
            .field("problem", &self.problem.name)
            .field("steps", &self.grid.steps())
            .field("initial_atom", &self.initial_atom)
            .field("fd", &self.fd)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedFd {
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub nt: Option<usize>,
    pub boundary: Boundary,
}

fn field(name: &str, reason: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("`{name}`: {reason}"))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn params(&self) -> CliResult<Params> {
        let mut out = Params::new();
        for (key, value) in &self.problem.params {
            let v = match value {
                serde_json::Value::Number(n) => ParamValue::Number(n.as_f64().unwrap_or(f64::NAN)),
                serde_json::Value::String(s) => ParamValue::Text(s.clone()),
                other => {
                    return Err(field(
                        &format!("problem.params.{key}"),
                        format!("unsupported value {other}"),
                    ))
                }
            };
            out.insert(key.clone(), v);
        }
        if let Some(h) = self.grid.horizon {
            match out.get("T") {
                Some(ParamValue::Number(t)) if *t != h => {
                    return Err(field(
                        "grid.horizon",
                        format!("{h} disagrees with problem.params.T = {t}"),
                    ));
                }
                _ => {
                    out.insert("T".into(), ParamValue::Number(h));
                }
            }
        }
        Ok(out)
    }

    /// Checks every field and builds the problem.
    pub fn resolve(&self) -> CliResult<Resolved> {
        let problem = make_catalog_problem(&self.problem.name, &self.params()?).map_err(|e| match e {
            CoreError::InvalidParam { field: f, reason } => field(&format!("problem.params.{f}"), reason),
            other => field("problem.name", other),
        })?;
        let model = &problem.model;
        let m = problem.regimes.len();

        if self.grid.steps == 0 {
            return Err(field("grid.steps", "must be positive"));
        }
        let grid = TimeGrid::uniform(model.horizon, self.grid.steps).map_err(|e| field("grid", e))?;
        if self.x0.len() != model.dim_x {
            return Err(field(
                "x0",
                format!(
                    "has {} entries, the problem has dimension {}",
                    self.x0.len(),
                    model.dim_x
                ),
            ));
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(field("x0", "must be finite"));
        }
        let initial_atom = self.initial_atom.unwrap_or(m / 2);
        if initial_atom >= m {
            return Err(field(
                "initial_atom",
                format!("{initial_atom} is not below the atom count {m}"),
            ));
        }
        if self.paths < 2 {
            return Err(field("paths", "need at least 2"));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(field("ridge", "must be finite and >= 0"));
        }
        if self.schemes.is_empty() {
            return Err(field("schemes", "empty"));
        }
        if self.workers == Some(0) {
            return Err(field("workers", "must be positive"));
        }

        let dt = grid.max_dt();
        for (i, &n) in self.penalties.iter().enumerate() {
            if !(n >= 0.0 && n.is_finite()) {
                return Err(field(&format!("penalties[{i}]"), "must be finite and >= 0"));
            }
            check_stability(&format!("penalties[{i}]"), n, dt)?;
        }
        if self.schemes.contains(&SchemeName::Penalized) && self.penalties.is_empty() {
            return Err(field("penalties", "the penalized scheme needs at least one level"));
        }

        for (i, tilt) in self.tilts.iter().enumerate() {
            let name = format!("tilts[{i}]");
            match tilt {
                TiltConfig::Constant { kappa } | TiltConfig::Toward { kappa, .. }
                    if !(*kappa > 0.0 && kappa.is_finite()) =>
                {
                    return Err(field(&name, "kappa must be finite and positive"));
                }
                TiltConfig::Toward { atom, .. } if *atom >= m => {
                    return Err(field(&name, format!("atom {atom} is not below the atom count {m}")));
                }
                TiltConfig::BangBang { penalty } => {
                    if !(*penalty >= 0.0 && penalty.is_finite()) {
                        return Err(field(&name, "penalty must be finite and >= 0"));
                    }
                    check_stability(&name, *penalty, dt)?;
                }
                _ => {}
            }
        }
        if self.schemes.contains(&SchemeName::Dual) && self.tilts.is_empty() {
            return Err(field("tilts", "the dual scheme needs at least one tilt"));
        }

        let fd = if self.schemes.contains(&SchemeName::Fd) {
            if model.dim_x != 1 {
                return Err(field("schemes", "fd needs a one-dimensional state"));
            }
            let c = self.fd.clone().unwrap_or_default();
            let x_min = c.x_min.unwrap_or(self.x0[0] - 4.0);
            let x_max = c.x_max.unwrap_or(self.x0[0] + 4.0);
            if !(x_min < self.x0[0] && self.x0[0] < x_max) {
                return Err(field(
                    "fd",
                    format!("x0 = {} must lie strictly inside [{x_min}, {x_max}]", self.x0[0]),
                ));
            }
            let nx = c.nx.unwrap_or(401);
            if nx < 3 {
                return Err(field("fd.nx", "need at least 3 nodes"));
            }
            Some(ResolvedFd {
                x_min,
                x_max,
                nx,
                nt: c.nt,
                boundary: c.boundary.into(),
            })
        } else {
            None
        };

        Ok(Resolved {
            config: self.clone(),
            problem,
            grid,
            initial_atom,
            start: match self.initial_regime {
                StartLayout::Fixed => InitialRegime::Fixed,
                StartLayout::Stratified => InitialRegime::Stratified,
            },
            fd,
        })
    }
}

fn check_stability(name: &str, n: f64, dt: f64) -> CliResult<()> {
    if n * dt > 1.0 + STABILITY_SLACK {
        return Err(field(
            name,
            format!(
                "penalty {n} with dt = {dt} breaks the stability rule n * dt <= 1 (n * dt = {})",
                n * dt
            ),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(extra: &str) -> String {
        format!(
            r#"{{"problem": {{"name": "linear"}}, "grid": {{"steps": 10}}, "x0": [1.0],
                "paths": 100, "seed": 1, "schemes": ["penalized"], "penalties": [0]{extra}}}"#
        )
    }

    #[test]
    fn minimal_config_resolves() {
        let r = ExperimentConfig::from_json(&linear("")).unwrap().resolve().unwrap();
        assert_eq!(r.grid.steps(), 10);
        assert_eq!(r.initial_atom, 0);
        assert_eq!(r.start, InitialRegime::Stratified);
        assert!(r.config.control_variate);
    }

    #[test]
    fn seed_is_required() {
        let text = linear("").replace(r#""seed": 1,"#, "");
        let err = ExperimentConfig::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn stability_rule_is_named() {
        let text = linear("").replace(r#""penalties": [0]"#, r#""penalties": [0, 20]"#);
        let err = ExperimentConfig::from_json(&text).unwrap().resolve().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("stability rule") && msg.contains("penalties[1]"), "{msg}");
    }

    #[test]
    fn field_level_messages() {
        let cases = [
            (linear(r#", "initial_atom": 3"#), "initial_atom"),
            (linear("").replace(r#""x0": [1.0]"#, r#""x0": [1.0, 2.0]"#), "x0"),
            (
                linear("").replace(r#""linear"}"#, r#""linear", "params": {"sigma": "big"}}"#),
                "problem.params.sigma",
            ),
            (
                linear(r#", "tilts": [{"kind": "bang_bang", "penalty": 50}]"#),
                "tilts[0]",
            ),
            (linear("").replace(r#"["penalized"]"#, r#"["dual"]"#), "tilts"),
        ];
        for (text, name) in cases {
            let err = ExperimentConfig::from_json(&text).unwrap().resolve().unwrap_err();
            assert!(err.to_string().contains(name), "{name}: {err}");
        }
        assert!(ExperimentConfig::from_json(&linear(r#", "bogus": 1"#)).is_err());
    }

    #[test]
    fn horizon_override_and_conflict() {
        let r = ExperimentConfig::from_json(&linear("").replace(r#""steps": 10"#, r#""steps": 10, "horizon": 2.0"#))
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(r.problem.model.horizon, 2.0);
        let text = linear("")
            .replace(r#""steps": 10"#, r#""steps": 10, "horizon": 2.0"#)
            .replace(r#""linear"}"#, r#""linear", "params": {"T": 1.0}}"#);
        assert!(ExperimentConfig::from_json(&text).unwrap().resolve().is_err());
    }

    #[test]
    fn tilt_labels() {
        assert_eq!(TiltConfig::Constant { kappa: 2.0 }.label(), "constant:2");
        assert_eq!(TiltConfig::Toward { atom: 4, kappa: 64.0 }.label(), "toward:4:64");
        assert_eq!(TiltConfig::BangBang { penalty: 10.0 }.label(), "bang_bang:10");
        assert_eq!(
            TiltConfig::Table {
                file: "a/up.csv".into()
            }
            .label(),
            "table:up"
        );
    }
}

//! Built-in problems addressable by name plus a flat parameter map.
//!
//! | name               | control `a`         | dynamics                                  | driver              |
//! |--------------------|---------------------|-------------------------------------------|---------------------|
//! | `linear`           | singleton `{0}`     | `dX = b dt + sigma dW`                    | 0                   |
//! | `controlled_drift` | `[a_lo, a_hi]`      | `dX = a dt + sigma dW`                    | 0                   |
//! | `uncertain_vol`    | `[a_lo, a_hi]`      | `dX = a dW`                               | 0                   |
//! | `drift_and_vol`    | `[b_lo,b_hi] x [s_lo,s_hi]` | `dX = a_1 dt + a_2 dW`            | 0                   |
//! | `jump_hjb`         | `[a_lo, a_hi]`      | `dX = a dW + jump_size d(compensated N)`  | `jump_coupling * u` |
//!
//! Common parameters: `T` (horizon, default 1), `rate` (total regime
//! switching intensity, default 1), `M` (number of atoms, default 5) and the
//! payoff `g`, one of `identity`, `square`, `neg_square`, `regime_product`
//! (`x * a_1`) or `bump` (`exp(-(x - g_center)^2 / (2 g_width^2))`).

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{DriverSpec, FiniteJumpMeasure, ModelSpec, RegimeSet};

#[derive(Debug, Clone, PartialEq)]
pub enum ParamValue {
    Number(f64),
    Text(String),
}

pub type Params = BTreeMap<String, ParamValue>;

pub const PROBLEM_NAMES: [&str; 5] = [
    "linear",
    "controlled_drift",
    "uncertain_vol",
    "drift_and_vol",
    "jump_hjb",
];

#[derive(Debug, Clone)]
pub struct Problem {
    pub name: String,
    pub model: ModelSpec,
    pub regimes: RegimeSet,
}

fn invalid(field: &str, reason: impl Into<String>) -> Error {
    Error::InvalidParam {
        field: field.to_string(),
        reason: reason.into(),
    }
}

struct Reader<'a> {
    params: &'a Params,
}

impl Reader<'_> {
    fn number(&self, field: &str, default: f64) -> Result<f64> {
        match self.params.get(field) {
            None => Ok(default),
            Some(ParamValue::Number(v)) if v.is_finite() => Ok(*v),
            Some(ParamValue::Number(_)) => Err(invalid(field, "must be finite")),
            Some(ParamValue::Text(_)) => Err(invalid(field, "expected a number")),
        }
    }

    fn positive(&self, field: &str, default: f64) -> Result<f64> {
        let v = self.number(field, default)?;
        if v > 0.0 {
            Ok(v)
        } else {
            Err(invalid(field, "must be > 0"))
        }
    }

    fn count(&self, field: &str, default: usize) -> Result<usize> {
        let v = self.number(field, default as f64)?;
        if v >= 1.0 && libm::trunc(v) == v {
            Ok(v as usize)
        } else {
            Err(invalid(field, "must be a positive integer"))
        }
    }

    fn text<'b>(&'b self, field: &str, default: &'b str) -> Result<&'b str> {
        match self.params.get(field) {
            None => Ok(default),
            Some(ParamValue::Text(s)) => Ok(s.as_str()),
            Some(ParamValue::Number(_)) => Err(invalid(field, "expected a string")),
        }
    }
}

/// Nested uniform grid: `M -> 2M - 1` keeps every previous atom bit-for-bit.
pub fn uniform_atoms(lo: f64, hi: f64, m: usize) -> Vec<f64> {
    if m == 1 {
        return vec![lo];
    }
    let span = hi - lo;
    (0..m)
        .map(|j| {
            if j + 1 == m {
                hi
            } else {
                lo + span * j as f64 / (m - 1) as f64
            }
        })
        .collect()
}

fn interval_atoms(
    r: &Reader<'_>,
    lo_key: &str,
    hi_key: &str,
    m_key: &str,
    lo: f64,
    hi: f64,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let a_lo = r.number(lo_key, lo)?;
    let a_hi = r.number(hi_key, hi)?;
    if a_lo > a_hi {
        return Err(invalid(lo_key, alloc::format!("{lo_key} > {hi_key}")));
    }
    let m = r.count(m_key, 5)?;
    if a_lo == a_hi && m > 1 {
        return Err(invalid(
            m_key,
            alloc::format!("a degenerate interval needs {m_key} = 1"),
        ));
    }
    let atoms = uniform_atoms(a_lo, a_hi, m);
    let interior = if m == 1 {
        vec![true]
    } else {
        atoms.iter().map(|&a| a > a_lo && a < a_hi).collect()
    };
    Ok((atoms, interior))
}

fn payoff(r: &Reader<'_>) -> Result<ModelSpec> {
    // Returns a model with only the terminal set; callers fill in the rest.
    let horizon = r.positive("T", 1.0)?;
    let model = ModelSpec::new(1, horizon)?;
    let kind = r.text("g", "identity")?;
    let model = match kind {
        "identity" => model.with_terminal(|x, _| x[0]),
        "square" => model.with_terminal(|x, _| x[0] * x[0]),
        "neg_square" => model.with_terminal(|x, _| -x[0] * x[0]),
        "regime_product" => model.with_terminal(|x, a| x[0] * a[0]),
        "bump" => {
            let c = r.number("g_center", 1.0)?;
            let w = r.positive("g_width", 0.25)?;
            model.with_terminal(move |x, _| libm::exp(-(x[0] - c) * (x[0] - c) / (2.0 * w * w)))
        }
        other => return Err(invalid("g", alloc::format!("unknown payoff `{other}`"))),
    };
    Ok(model)
}

fn with_default_g(params: &Params, g: &str) -> Params {
    let mut p = params.clone();
    p.entry("g".to_string())
        .or_insert_with(|| ParamValue::Text(g.to_string()));
    p
}

/// Builds a catalog problem. Unknown keys are ignored.
pub fn make_catalog_problem(name: &str, params: &Params) -> Result<Problem> {
    let (model, regimes) = match name {
        "linear" => {
            let r = Reader { params };
            let b = r.number("b", 0.0)?;
            let sigma = r.number("sigma", 1.0)?;
            let model = payoff(&r)?
                .with_drift(move |_, _, out| out[0] = b)
                .with_vol(move |_, _, out| out[0] = sigma);
            (model, RegimeSet::singleton(vec![0.0], r.positive("rate", 1.0)?)?)
        }
        "controlled_drift" => {
            let r = Reader { params };
            let sigma = r.number("sigma", 1.0)?;
            let (atoms, interior) = interval_atoms(&r, "a_lo", "a_hi", "M", -1.0, 1.0)?;
            let model = payoff(&r)?
                .with_drift(|_, a, out| out[0] = a[0])
                .with_vol(move |_, _, out| out[0] = sigma);
            (
                model,
                RegimeSet::uniform_scalar(&atoms, r.positive("rate", 1.0)?, interior)?,
            )
        }
        "uncertain_vol" => {
            let p = with_default_g(params, "square");
            let r = Reader { params: &p };
            let (atoms, interior) = interval_atoms(&r, "a_lo", "a_hi", "M", 0.1, 0.3)?;
            let model = payoff(&r)?.with_vol(|_, a, out| out[0] = a[0]);
            (
                model,
                RegimeSet::uniform_scalar(&atoms, r.positive("rate", 1.0)?, interior)?,
            )
        }
        "drift_and_vol" => {
            let p = with_default_g(params, "square");
            let r = Reader { params: &p };
            let (drifts, d_int) = interval_atoms(&r, "b_lo", "b_hi", "Mb", -0.1, 0.1)?;
            let (vols, v_int) = interval_atoms(&r, "s_lo", "s_hi", "Ms", 0.1, 0.3)?;
            let mut atoms = Vec::new();
            let mut interior = Vec::new();
            for (b, bi) in drifts.iter().zip(&d_int) {
                for (s, si) in vols.iter().zip(&v_int) {
                    atoms.push(vec![*b, *s]);
                    interior.push(*bi && *si);
                }
            }
            let rate = r.positive("rate", 1.0)?;
            let weights = vec![rate / atoms.len() as f64; atoms.len()];
            let model = payoff(&r)?
                .with_drift(|_, a, out| out[0] = a[0])
                .with_vol(|_, a, out| out[0] = a[1]);
            (model, RegimeSet::new(atoms, weights, interior)?)
        }
        "jump_hjb" => {
            let p = with_default_g(params, "square");
            let r = Reader { params: &p };
            let (atoms, interior) = interval_atoms(&r, "a_lo", "a_hi", "M", 0.1, 0.3)?;
            let size = r.number("jump_size", 0.5)?;
            if size == 0.0 {
                return Err(invalid("jump_size", "must be nonzero"));
            }
            let jump_rate = r.positive("jump_rate", 1.0)?;
            let coupling = r.number("jump_coupling", 0.0)?;
            let measure = FiniteJumpMeasure::new(vec![vec![size]], vec![jump_rate])?;
            let mut model = payoff(&r)?
                .with_vol(|_, a, out| out[0] = a[0])
                .with_jumps(measure, |_, _, mark, out| out[0] = mark[0]);
            if coupling != 0.0 {
                model = model.with_driver(DriverSpec::full(
                    move |args| coupling * args.u_integral,
                    Some(alloc::sync::Arc::new(|_: &[f64], _: &[f64]| 1.0)),
                ));
            }
            (
                model,
                RegimeSet::uniform_scalar(&atoms, r.positive("rate", 1.0)?, interior)?,
            )
        }
        other => return Err(Error::UnknownProblem(other.to_string())),
    };
    Ok(Problem {
        name: name.to_string(),
        model,
        regimes,
    })
}

//! Change of measure on the regime process and the dual (lower-bound)
//! value estimator.
//!
//! A tilt `nu >= 1` multiplies the intensity of every regime transition
//! `a_j -> a_j'`. Paths are never resimulated: the base bundle is reweighted
//! by the Doléans-Dade exponential
//!
//! ```text
//! log L = sum_{regime jumps} ln nu(tau, X, I_{tau-}, a_j') - int_0^T sum_j' (nu(s, X_s, I_s, a_j') - 1) w_j' ds
//! ```
//!
//! with the time integral taken on the left-point grid rule.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::bsde::{PenaltyLevel, Scheme, ValueEstimate, ValueSurface};
use crate::error::{Error, Result};
use crate::forward::PathBundle;
use crate::model::{DriverSpec, ModelSpec, RegimeSet};
use crate::par;
use crate::stats::mean_stderr;

/// Effective sample sizes below this fraction of the path count are flagged.
pub const ESS_WARN_FRACTION: f64 = 0.05;

/// User tilt `(t, x, from_atom, to_atom) -> nu`.
pub type TiltFn = Arc<dyn Fn(f64, &[f64], usize, usize) -> f64 + Send + Sync>;

#[derive(Clone)]
enum TiltRule {
    Constant(f64),
    /// Row-major `from x to`.
    Table {
        atoms: usize,
        entries: Vec<f64>,
    },
    BangBang {
        surface: Arc<ValueSurface>,
        high: f64,
    },
    Custom(TiltFn),
}

/// An intensity tilt on the regime marks, capped by `bound`.
#[derive(Clone)]
pub struct TiltSpec {
    rule: TiltRule,
    bound: f64,
}

impl fmt::Debug for TiltSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.rule {
            TiltRule::Constant(k) => format!("Constant({k})"),
            TiltRule::Table { atoms, .. } => format!("Table({atoms}x{atoms})"),
            TiltRule::BangBang { high, .. } => format!("BangBang({high})"),
            TiltRule::Custom(_) => "Custom".into(),
        };
        f.debug_struct("TiltSpec")
            .field("rule", &kind)
            .field("bound", &self.bound)
            .finish()
    }
}

fn check_value(value: f64, bound: f64) -> Result<f64> {
    if value.is_finite() && (1.0..=bound).contains(&value) {
        Ok(value)
    } else {
        Err(Error::InvalidTilt { value, bound })
    }
}

fn check_bound(bound: f64) -> Result<()> {
    if bound.is_finite() && bound >= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidTilt { value: bound, bound })
    }
}

impl TiltSpec {
    /// The identity change of measure.
    pub fn identity() -> Self {
        TiltSpec {
            rule: TiltRule::Constant(1.0),
            bound: 1.0,
        }
    }

    /// `nu = kappa` on every transition.
    pub fn constant(kappa: f64) -> Result<Self> {
        check_value(kappa, kappa)?;
        Ok(TiltSpec {
            rule: TiltRule::Constant(kappa),
            bound: kappa,
        })
    }

    /// Constant-per-transition table, `entries[from * atoms + to]`.
    pub fn table(atoms: usize, entries: Vec<f64>, bound: f64) -> Result<Self> {
        check_bound(bound)?;
        if atoms == 0 || entries.len() != atoms * atoms {
            return Err(Error::Dimension(format!(
                "tilt table needs {} entries, got {}",
                atoms * atoms,
                entries.len()
            )));
        }
        for &e in &entries {
            check_value(e, bound)?;
        }
        Ok(TiltSpec {
            rule: TiltRule::Table { atoms, entries },
            bound,
        })
    }

    /// `kappa` on every transition from another atom into `target`, one elsewhere.
    pub fn toward(atoms: usize, target: usize, kappa: f64) -> Result<Self> {
        if target >= atoms {
            return Err(Error::Dimension(format!("target atom {target} out of {atoms}")));
        }
        let mut entries = vec![1.0; atoms * atoms];
        for from in (0..atoms).filter(|&f| f != target) {
            entries[from * atoms + target] = kappa;
        }
        Self::table(atoms, entries, kappa.max(1.0))
    }

    /// Arbitrary rule; values are validated against `bound` when used.
    pub fn custom(bound: f64, f: impl Fn(f64, &[f64], usize, usize) -> f64 + Send + Sync + 'static) -> Result<Self> {
        check_bound(bound)?;
        Ok(TiltSpec {
            rule: TiltRule::Custom(Arc::new(f)),
            bound,
        })
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.rule, TiltRule::Constant(k) if k == 1.0)
    }

    /// `(atoms, entries)` for table tilts.
    pub fn table_entries(&self) -> Option<(usize, &[f64])> {
        match &self.rule {
            TiltRule::Table { atoms, entries } => Some((*atoms, entries)),
            _ => None,
        }
    }

    fn check_atoms(&self, regimes: &RegimeSet) -> Result<()> {
        let m = match &self.rule {
            TiltRule::Table { atoms, .. } => *atoms,
            TiltRule::BangBang { surface, .. } => surface.regimes().len(),
            _ => return Ok(()),
        };
        if m != regimes.len() {
            return Err(Error::Dimension(format!(
                "tilt built for {m} atoms, regime set has {}",
                regimes.len()
            )));
        }
        Ok(())
    }

    /// Fills `out[j'] = nu(t_k, x, from -> j')` for every atom.
    pub fn row(&self, k: usize, t: f64, x: &[f64], from: usize, out: &mut [f64]) -> Result<()> {
        match &self.rule {
            TiltRule::Constant(c) => out.fill(*c),
            TiltRule::Table { atoms, entries } => out.copy_from_slice(&entries[from * atoms..(from + 1) * atoms]),
            TiltRule::BangBang { surface, high } => {
                let mut row = vec![0.0; surface.basis_size()];
                surface.values_into(k, x, out, &mut row);
                let own = out[from];
                for v in out.iter_mut() {
                    *v = if *v <= own { 1.0 } else { *high };
                }
            }
            TiltRule::Custom(f) => {
                for (to, o) in out.iter_mut().enumerate() {
                    *o = check_value(f(t, x, from, to), self.bound)?;
                }
            }
        }
        Ok(())
    }
}

/// Doléans-Dade weight of one path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GirsanovWeight {
    /// `sum ln nu` over regime jumps.
    pub jump_part: f64,
    /// `int sum (nu - 1) w ds`, subtracted in the exponent.
    pub compensator_part: f64,
    pub log_weight: f64,
}

impl GirsanovWeight {
    pub fn weight(&self) -> f64 {
        libm::exp(self.log_weight)
    }
}

pub fn girsanov_weight(
    bundle: &PathBundle,
    path: usize,
    tilt: &TiltSpec,
    regimes: &RegimeSet,
) -> Result<GirsanovWeight> {
    tilt.check_atoms(regimes)?;
    let grid = bundle.grid();
    let m = regimes.len();
    let mut row = vec![0.0; m];
    let mut compensator_part = 0.0;
    for k in 0..grid.steps() {
        let from = bundle.regime(path, k);
        tilt.row(k, grid.t(k), bundle.x(path, k), from, &mut row)?;
        let rate: f64 = row.iter().zip(regimes.weights()).map(|(nu, w)| (nu - 1.0) * w).sum();
        compensator_part += grid.dt(k) * rate;
    }
    let mut jump_part = 0.0;
    let mut from = bundle.regime(path, 0);
    for jump in bundle.regime_jumps(path) {
        let k = grid.step_containing(jump.time);
        tilt.row(k, grid.t(k), bundle.x(path, k), from, &mut row)?;
        jump_part += libm::log(row[jump.atom]);
        from = jump.atom;
    }
    let log_weight = jump_part - compensator_part;
    if !log_weight.is_finite() {
        return Err(Error::NonFinite("girsanov weight"));
    }
    Ok(GirsanovWeight {
        jump_part,
        compensator_part,
        log_weight,
    })
}

/// How weighted samples are turned into a mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightNormalization {
    /// `sum L Phi / sum L`. Consistent, and robust when a few weights dominate.
    #[default]
    SelfNormalized,
    /// `sum L Phi / n`. Unbiased, but collapses for heavy tilts.
    Unnormalized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEstimate {
    pub estimate: ValueEstimate,
    /// `(sum L)^2 / sum L^2`.
    pub effective_sample_size: f64,
    /// Set when the effective sample size is below 5% of the live paths.
    pub low_ess: bool,
}

fn payoff_samples(bundle: &PathBundle, model: &ModelSpec, regimes: &RegimeSet, live: &[usize]) -> Result<Vec<f64>> {
    let f = match &model.driver {
        DriverSpec::StateOnly(f) => f,
        DriverSpec::Full { .. } => return Err(Error::UnsupportedDriver),
    };
    let grid = bundle.grid();
    let n = grid.steps();
    let samples = par::map_range(live.len(), |i| {
        let p = live[i];
        let mut acc = (model.terminal)(bundle.x(p, n), regimes.atom(bundle.regime(p, n)));
        for k in 0..n {
            acc += f(bundle.x(p, k), regimes.atom(bundle.regime(p, k))) * grid.dt(k);
        }
        acc
    });
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("dual payoff"));
    }
    Ok(samples)
}

fn log_weights(bundle: &PathBundle, regimes: &RegimeSet, tilt: &TiltSpec, live: &[usize]) -> Result<Vec<f64>> {
    tilt.check_atoms(regimes)?;
    if tilt.is_identity() {
        return Ok(vec![0.0; live.len()]);
    }
    par::map_range(live.len(), |i| {
        girsanov_weight(bundle, live[i], tilt, regimes).map(|w| w.log_weight)
    })
    .into_iter()
    .collect()
}

/// Weighted Monte Carlo estimate of `E^nu[g(X_T, I_T) + int f dt]`, a lower
/// bound for the minimal solution at time zero, over the paths that start in
/// the bundle's reference atom. Only state-only drivers are supported.
pub fn dual_value_estimate(
    bundle: &PathBundle,
    model: &ModelSpec,
    regimes: &RegimeSet,
    tilt: &TiltSpec,
    normalization: WeightNormalization,
) -> Result<DualEstimate> {
    let live: Vec<usize> = bundle.reference_paths().collect();
    if live.is_empty() {
        return Err(Error::EmptyBundle);
    }
    let phi = payoff_samples(bundle, model, regimes, &live)?;
    let logs = log_weights(bundle, regimes, tilt, &live)?;
    let n = live.len() as f64;

    if tilt.is_identity() {
        let (mean, stderr) = mean_stderr(&phi);
        return Ok(DualEstimate {
            estimate: ValueEstimate {
                mean,
                stderr,
                n_paths: live.len(),
                scheme: Scheme::Dual,
            },
            effective_sample_size: n,
            low_ess: false,
        });
    }

    let weights: Vec<f64> = logs.iter().map(|&l| libm::exp(l)).collect();
    let sum_w: f64 = weights.iter().sum();
    let sum_w2: f64 = weights.iter().map(|w| w * w).sum();
    let ess = if sum_w2 > 0.0 { sum_w * sum_w / sum_w2 } else { 0.0 };
    let (mean, stderr) = match normalization {
        WeightNormalization::SelfNormalized => {
            if !(sum_w > 0.0 && sum_w.is_finite()) {
                return Err(Error::NonFinite("dual weights"));
            }
            let mean = weights.iter().zip(&phi).map(|(w, v)| w * v).sum::<f64>() / sum_w;
            let ss: f64 = weights
                .iter()
                .zip(&phi)
                .map(|(w, v)| w * w * (v - mean) * (v - mean))
                .sum();
            let correction = if live.len() > 1 { n / (n - 1.0) } else { 1.0 };
            (mean, libm::sqrt(ss * correction) / sum_w)
        }
        WeightNormalization::Unnormalized => {
            let products: Vec<f64> = weights.iter().zip(&phi).map(|(w, v)| w * v).collect();
            mean_stderr(&products)
        }
    };
    Ok(DualEstimate {
        estimate: ValueEstimate {
            mean,
            stderr,
            n_paths: live.len(),
            scheme: Scheme::Dual,
        },
        effective_sample_size: ess,
        low_ess: ess < ESS_WARN_FRACTION * n,
    })
}

/// Bang-bang tilt read off a penalized surface:
/// `nu(t_k, x, a_j -> a_j') = n + 1` where `v(t_k, x, a_j') > v(t_k, x, a_j)`, one otherwise.
pub fn extract_bang_bang_tilt(surface: &ValueSurface, penalty: f64) -> Result<TiltSpec> {
    match surface.penalty() {
        PenaltyLevel::Projection => Err(Error::ProjectionSurface),
        PenaltyLevel::Finite(_) => {
            if !(penalty >= 0.0 && penalty.is_finite()) {
                return Err(Error::InvalidParam {
                    field: "penalty".into(),
                    reason: "must be finite and >= 0".into(),
                });
            }
            let high = penalty + 1.0;
            Ok(TiltSpec {
                rule: TiltRule::BangBang {
                    surface: Arc::new(surface.clone()),
                    high,
                },
                bound: high,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightCheck {
    pub mean: f64,
    pub stderr: f64,
}

/// Sample mean of `L_T` over the live paths, which should be one.
pub fn weight_martingale_check(bundle: &PathBundle, regimes: &RegimeSet, tilt: &TiltSpec) -> Result<WeightCheck> {
    let live: Vec<usize> = bundle.live_paths().collect();
    if live.is_empty() {
        return Err(Error::EmptyBundle);
    }
    let weights: Vec<f64> = log_weights(bundle, regimes, tilt, &live)?
        .into_iter()
        .map(libm::exp)
        .collect();
    let (mean, stderr) = mean_stderr(&weights);
    Ok(WeightCheck { mean, stderr })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::{penalized_backward_sweep, SweepConfig};
    use crate::forward::{simulate_paths, TimeGrid};

    fn setup(paths: usize, rate: f64) -> (ModelSpec, RegimeSet, PathBundle) {
        let regimes = RegimeSet::uniform_scalar(&[0.1, 0.2, 0.3], rate, vec![false, true, false]).unwrap();
        let model = ModelSpec::new(1, 1.0)
            .unwrap()
            .with_vol(|_, a, o| o[0] = a[0])
            .with_terminal(|x, _| x[0] * x[0]);
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let bundle = simulate_paths(&model, &regimes, &grid, &[1.0], 1, paths, 17).unwrap();
        (model, regimes, bundle)
    }

    #[test]
    fn identity_weight_is_exactly_one() {
        let (_, regimes, bundle) = setup(50, 2.0);
        let tilt = TiltSpec::constant(1.0).unwrap();
        for p in 0..50 {
            let w = girsanov_weight(&bundle, p, &tilt, &regimes).unwrap();
            assert_eq!(w.log_weight, 0.0);
            assert_eq!(w.weight(), 1.0);
        }
        assert_eq!(weight_martingale_check(&bundle, &regimes, &tilt).unwrap().mean, 1.0);
    }

    #[test]
    fn constant_tilt_closed_form() {
        let (_, regimes, bundle) = setup(400, 2.0);
        let kappa = 3.0;
        let tilt = TiltSpec::constant(kappa).unwrap();
        let mut seen = [false; 2];
        for p in 0..400 {
            let jumps = bundle.regime_jumps(p).len();
            let w = girsanov_weight(&bundle, p, &tilt, &regimes).unwrap().weight();
            let expected = kappa.powi(jumps as i32) * (-(kappa - 1.0) * 2.0 * 1.0_f64).exp();
            assert!((w - expected).abs() < 1e-12 * expected);
            if jumps < 2 {
                seen[jumps] = true;
            }
        }
        assert!(seen[0] && seen[1]);
    }

    #[test]
    fn tilt_validation() {
        assert!(TiltSpec::constant(0.5).is_err());
        assert!(TiltSpec::table(2, vec![1.0, 2.0, 1.0, 5.0], 4.0).is_err());
        assert!(TiltSpec::table(2, vec![1.0, 2.0, 1.0], 4.0).is_err());
        let t = TiltSpec::toward(3, 2, 4.0).unwrap();
        assert_eq!(
            t.table_entries().unwrap().1,
            &[1.0, 1.0, 4.0, 1.0, 1.0, 4.0, 1.0, 1.0, 1.0]
        );

        let (_, regimes, bundle) = setup(20, 5.0);
        let bad = TiltSpec::custom(2.0, |_, _, _, _| 3.0).unwrap();
        assert!(matches!(
            girsanov_weight(&bundle, 0, &bad, &regimes),
            Err(Error::InvalidTilt { .. })
        ));
        let wrong_size = TiltSpec::toward(4, 0, 2.0).unwrap();
        assert!(girsanov_weight(&bundle, 0, &wrong_size, &regimes).is_err());
    }

    #[test]
    fn identity_dual_is_plain_monte_carlo() {
        let (model, regimes, bundle) = setup(1000, 1.0);
        let d = dual_value_estimate(
            &bundle,
            &model,
            &regimes,
            &TiltSpec::identity(),
            WeightNormalization::default(),
        )
        .unwrap();
        let n = bundle.grid().steps();
        let plain: Vec<f64> = (0..1000).map(|p| bundle.x(p, n)[0].powi(2)).collect();
        let (mean, stderr) = mean_stderr(&plain);
        assert_eq!(d.estimate.mean, mean);
        assert_eq!(d.estimate.stderr, stderr);
    }

    #[test]
    fn full_driver_is_rejected() {
        let (model, regimes, bundle) = setup(10, 1.0);
        let model = model.with_driver(DriverSpec::full(|a| a.y, None));
        assert!(matches!(
            dual_value_estimate(
                &bundle,
                &model,
                &regimes,
                &TiltSpec::identity(),
                WeightNormalization::default()
            ),
            Err(Error::UnsupportedDriver)
        ));
    }

    #[test]
    fn bang_bang_from_surfaces() {
        let (model, regimes, bundle) = setup(2000, 1.0);
        let out = penalized_backward_sweep(&bundle, &model, &regimes, &SweepConfig::default(), 5.0).unwrap();
        let tilt = extract_bang_bang_tilt(&out.surface, 5.0).unwrap();
        assert_eq!(tilt.bound(), 6.0);
        let mut row = [0.0; 3];
        let mut vals = [0.0; 3];
        let mut scratch = vec![0.0; out.surface.basis_size()];
        for k in [0, 4, 9] {
            out.surface.values_into(k, &[1.0], &mut vals, &mut scratch);
            for from in 0..3 {
                tilt.row(k, 0.0, &[1.0], from, &mut row).unwrap();
                for to in 0..3 {
                    let expect = if vals[to] > vals[from] { 6.0 } else { 1.0 };
                    assert_eq!(row[to], expect);
                }
            }
        }
        let proj = crate::bsde::projection_backward_sweep(&bundle, &model, &regimes, &SweepConfig::default()).unwrap();
        assert!(matches!(
            extract_bang_bang_tilt(&proj.surface, 5.0),
            Err(Error::ProjectionSurface)
        ));
    }

    #[test]
    fn martingale_check_moderate_tilt() {
        let (_, regimes, bundle) = setup(20_000, 1.0);
        let c = weight_martingale_check(&bundle, &regimes, &TiltSpec::constant(2.0).unwrap()).unwrap();
        assert!((c.mean - 1.0).abs() < 3.0 * c.stderr, "{c:?}");
    }
}

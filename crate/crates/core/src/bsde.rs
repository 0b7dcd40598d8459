//! Backward regression sweeps for the penalized BSDE and its projection
//! (infinite-penalty) limit, plus diagnostics on the fitted surfaces.
//!
//! At every step `k` and regime atom `a_j` the sweep regresses, over the
//! paths sitting in regime `j` at `t_k`,
//!
//! ```text
//! Y_{k+1} + dt * f(X_k, a_j, ...) + dt * n * sum_j' w_j' [v(t_{k+1}, X_k, a_j') - v(t_{k+1}, X_k, a_j)]^+
//! ```
//!
//! onto the basis evaluated at `X_k`, where `Y_{k+1} = v(t_{k+1}, X_{k+1}, I_{k+1})`.
//! The penalty is explicit (it reads the level `k + 1` surface), which is
//! stable as long as `n * dt <= 1`. The projection sweep drops the penalty
//! and sets `v(t_k, x, .) = max_j fit_j(x)` instead.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::forward::{PathBundle, TimeGrid};
use crate::model::{DriverArgs, DriverSpec, ModelSpec, RegimeSet};
use crate::par;
use crate::regression::{design_matrix, ls_fit, BasisKind, BasisSpec, FitResult};
use crate::stats::mean_stderr;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PenaltyLevel {
    Finite(f64),
    /// The `n -> infinity` limit realized by a max over regimes.
    Projection,
}

impl PenaltyLevel {
    /// Sort key; the projection scheme sorts above every finite level.
    pub fn as_f64(self) -> f64 {
        match self {
            PenaltyLevel::Finite(n) => n,
            PenaltyLevel::Projection => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    Penalized(f64),
    Projection,
    Dual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub scheme: Scheme,
}

impl ValueEstimate {
    /// `sqrt(se_a^2 + se_b^2)`.
    pub fn pooled_stderr(&self, other: &ValueEstimate) -> f64 {
        libm::sqrt(self.stderr * self.stderr + other.stderr * other.stderr)
    }
}

/// Empirical positive parts of the cross-regime jump component `R`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintReport {
    /// Estimate of `E int_0^T int_A [R_t(a)]^+ lambda_pi(da) dt`.
    pub positive_part_integral: f64,
    /// Largest single `[R]^+` seen on any path and step.
    pub max_violation: f64,
    /// Path average of `int_A [R_{t_k}(a)]^+ lambda_pi(da)` per step.
    pub per_step: Vec<f64>,
}

impl ConstraintReport {
    /// The nondecreasing process `K_T = n * int int [R]^+`, path-averaged.
    pub fn penalty_mass(&self, n: f64) -> f64 {
        n * self.positive_part_integral
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepConfig {
    pub basis: BasisKind,
    pub ridge: f64,
    /// Atoms with fewer live paths at a step borrow the sample of the
    /// nearest populated atom. Defaults to the basis size.
    pub min_paths: Option<usize>,
    /// Subtract the zero-mean term `grad v(t_{k+1}, X_k) . sigma dW_k` from
    /// the regression targets. Leaves the conditional expectation unchanged
    /// and removes most of the Brownian noise from each regression.
    pub control_variate: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            basis: BasisKind::Polynomial { degree: 2 },
            ridge: 0.0,
            min_paths: None,
            control_variate: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepDiagnostics {
    /// Number of `(step, atom)` pairs fitted on a neighbour's sample.
    pub merged_atoms: usize,
    /// Number of design rows that had to be clamped.
    pub clamped_points: usize,
}

#[derive(Debug, Clone)]
struct Level {
    basis: BasisSpec,
    fits: Vec<FitResult>,
}

/// Per-step, per-atom regression of `Z` (one fit per Brownian coordinate).
#[derive(Debug, Clone)]
pub struct ZSurface {
    bases: Vec<BasisSpec>,
    fits: Vec<Vec<Vec<FitResult>>>,
}

impl ZSurface {
    pub fn fit(&self, k: usize, j: usize) -> &[FitResult] {
        &self.fits[k][j]
    }

    pub fn eval(&self, k: usize, x: &[f64], j: usize, out: &mut [f64]) {
        let mut row = vec![0.0; self.bases[k].size()];
        for (o, fit) in out.iter_mut().zip(&self.fits[k][j]) {
            *o = fit.eval_with(&self.bases[k], x, &mut row);
        }
    }
}

/// Fitted `v(t_k, ., a_j)` for every step and atom. The terminal slice is
/// the payoff itself.
#[derive(Debug, Clone)]
pub struct ValueSurface {
    model: ModelSpec,
    regimes: RegimeSet,
    grid: TimeGrid,
    levels: Vec<Level>,
    z: Option<ZSurface>,
    penalty: PenaltyLevel,
}

fn slice_values(
    model: &ModelSpec,
    regimes: &RegimeSet,
    level: Option<&Level>,
    projection: bool,
    x: &[f64],
    out: &mut [f64],
    row: &mut [f64],
) {
    match level {
        None => {
            for (j, o) in out.iter_mut().enumerate() {
                *o = (model.terminal)(x, regimes.atom(j));
            }
        }
        Some(level) => {
            for (o, fit) in out.iter_mut().zip(&level.fits) {
                *o = fit.eval_with(&level.basis, x, row);
            }
            if projection {
                let best = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                out.fill(best);
            }
        }
    }
}

/// `v(level, x, a_j)` for one atom; `vals` holds M scratch values.
#[allow(clippy::too_many_arguments)]
fn slice_value(
    model: &ModelSpec,
    regimes: &RegimeSet,
    level: Option<&Level>,
    projection: bool,
    x: &[f64],
    j: usize,
    vals: &mut [f64],
    row: &mut [f64],
) -> f64 {
    match level {
        None => (model.terminal)(x, regimes.atom(j)),
        Some(l) if !projection => l.fits[j].eval_with(&l.basis, x, row),
        Some(_) => {
            slice_values(model, regimes, level, projection, x, vals, row);
            vals[j]
        }
    }
}

/// `grad_x v(level, x, a_j) . sigma(x, a_j) dw` by central differences.
#[allow(clippy::too_many_arguments)]
fn brownian_control(
    model: &ModelSpec,
    regimes: &RegimeSet,
    level: Option<&Level>,
    projection: bool,
    x: &[f64],
    j: usize,
    dw: &[f64],
    vals: &mut [f64],
    row: &mut [f64],
) -> f64 {
    let d = x.len();
    let mut vol = vec![0.0; d * d];
    (model.vol)(x, regimes.atom(j), &mut vol);
    let mut probe = x.to_vec();
    let mut acc = 0.0;
    for i in 0..d {
        let shock: f64 = (0..d).map(|l| vol[i * d + l] * dw[l]).sum();
        if shock == 0.0 {
            continue;
        }
        let h = 1e-5 * x[i].abs().max(1.0);
        probe[i] = x[i] + h;
        let up = slice_value(model, regimes, level, projection, &probe, j, vals, row);
        probe[i] = x[i] - h;
        let down = slice_value(model, regimes, level, projection, &probe, j, vals, row);
        probe[i] = x[i];
        acc += (up - down) / (2.0 * h) * shock;
    }
    acc
}

impl ValueSurface {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn regimes(&self) -> &RegimeSet {
        &self.regimes
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn penalty(&self) -> PenaltyLevel {
        self.penalty
    }

    pub fn basis(&self, k: usize) -> &BasisSpec {
        &self.levels[k].basis
    }

    pub fn basis_size(&self) -> usize {
        self.levels.first().map_or(1, |l| l.basis.size())
    }

    /// Raw regression for `(k, j)`, `k < N`. For the projection scheme the
    /// surface value is the max of these over `j`.
    pub fn fit(&self, k: usize, j: usize) -> &FitResult {
        &self.levels[k].fits[j]
    }

    pub fn z(&self) -> Option<&ZSurface> {
        self.z.as_ref()
    }

    pub fn set_z(&mut self, z: ZSurface) {
        self.z = Some(z);
    }

    /// `v(t_k, x, a_j)` for all atoms at once; `row` is scratch of length
    /// [`basis_size`](Self::basis_size).
    pub fn values_into(&self, k: usize, x: &[f64], out: &mut [f64], row: &mut [f64]) {
        let level = self.levels.get(k);
        slice_values(
            &self.model,
            &self.regimes,
            level,
            self.penalty == PenaltyLevel::Projection,
            x,
            out,
            row,
        );
    }

    pub fn value(&self, k: usize, x: &[f64], j: usize) -> f64 {
        let mut out = vec![0.0; self.regimes.len()];
        let mut row = vec![0.0; self.basis_size()];
        self.values_into(k, x, &mut out, &mut row);
        out[j]
    }
}

/// Next-level value `x -> v_next(x)` seen by full drivers.
pub type NextValue<'a> = &'a dyn Fn(&[f64]) -> f64;

/// Evaluates the driver at `(x, a)`. For full drivers the jump argument is
/// `sum_m rho_m delta(x, l_m) [v_next(x + beta(x, a, l_m)) - v_next(x)]`.
pub fn driver_eval(
    driver: &DriverSpec,
    model: &ModelSpec,
    x: &[f64],
    a: &[f64],
    y: f64,
    z: &[f64],
    next: Option<NextValue<'_>>,
) -> Result<f64> {
    match driver {
        DriverSpec::StateOnly(f) => Ok(f(x, a)),
        DriverSpec::Full { eval, jump_kernel } => {
            let u_integral = if model.big_jumps.is_empty() {
                0.0
            } else {
                let kernel = jump_kernel.as_ref().ok_or(Error::MissingJumpKernel)?;
                let next =
                    next.ok_or_else(|| Error::Dimension("full driver with jumps needs the next surface".into()))?;
                let base = next(x);
                let mut shifted = vec![0.0; x.len()];
                let mut acc = 0.0;
                for m in 0..model.big_jumps.len() {
                    let mark = model.big_jumps.mark(m);
                    (model.jump_coef)(x, a, mark, &mut shifted);
                    for (s, xi) in shifted.iter_mut().zip(x) {
                        *s += xi;
                    }
                    acc += model.big_jumps.weight(m) * kernel(x, mark) * (next(&shifted) - base);
                }
                acc
            };
            Ok(eval(&DriverArgs { x, a, y, z, u_integral }))
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub surface: ValueSurface,
    pub estimate: ValueEstimate,
    pub constraint: ConstraintReport,
    pub diagnostics: SweepDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mode {
    Penalized(f64),
    Projection,
}

struct PathStep {
    y: f64,
    increment: f64,
    positive_part: f64,
    max_positive: f64,
}

fn check_inputs(bundle: &PathBundle, model: &ModelSpec, regimes: &RegimeSet) -> Result<()> {
    if bundle.dim_x() != model.dim_x {
        return Err(Error::Dimension(format!(
            "bundle has d = {}, model has d = {}",
            bundle.dim_x(),
            model.dim_x
        )));
    }
    if (bundle.grid().horizon() - model.horizon).abs() > 1e-12 * model.horizon {
        return Err(Error::InvalidGrid(
            "bundle grid does not end at the model horizon".into(),
        ));
    }
    if bundle.initial_atom() >= regimes.len() {
        return Err(Error::InvalidRegimes(
            "bundle was simulated with a different regime set".into(),
        ));
    }
    if let DriverSpec::Full { jump_kernel: None, .. } = model.driver {
        if !model.big_jumps.is_empty() {
            return Err(Error::MissingJumpKernel);
        }
    }
    if bundle.n_live() == 0 {
        return Err(Error::EmptyBundle);
    }
    Ok(())
}

/// Atom whose sample is used for the regression of atom `j`.
fn resolve_donors(regimes: &RegimeSet, counts: &[usize], threshold: usize, step: usize) -> Result<Vec<usize>> {
    let m = counts.len();
    (0..m)
        .map(|j| {
            if counts[j] >= threshold {
                return Ok(j);
            }
            (0..m)
                .filter(|&i| counts[i] >= threshold)
                .min_by(|&a, &b| {
                    regimes
                        .atom_distance(j, a)
                        .total_cmp(&regimes.atom_distance(j, b))
                        .then(a.cmp(&b))
                })
                .ok_or(Error::AllAtomsStarved { step })
        })
        .collect()
}

fn backward_sweep(
    bundle: &PathBundle,
    model: &ModelSpec,
    regimes: &RegimeSet,
    cfg: &SweepConfig,
    mode: Mode,
) -> Result<SweepOutcome> {
    check_inputs(bundle, model, regimes)?;
    let grid = bundle.grid();
    if let Mode::Penalized(n) = mode {
        if !(n >= 0.0 && n.is_finite()) {
            return Err(Error::InvalidParam {
                field: "penalty".into(),
                reason: "must be finite and >= 0".into(),
            });
        }
        let dt = grid.max_dt();
        if n * dt > 1.0 + 1e-12 {
            return Err(Error::PenaltyUnstable { penalty: n, dt });
        }
    }
    let penalty = match mode {
        Mode::Penalized(n) => n,
        Mode::Projection => 0.0,
    };
    let projection = mode == Mode::Projection;
    let full_driver = !model.driver.is_state_only();
    let d = model.dim_x;
    let m = regimes.len();
    let steps = grid.steps();
    let live: Vec<usize> = bundle.live_paths().collect();
    let n_live = live.len();

    let mut y_next: Vec<f64> = live
        .iter()
        .map(|&p| (model.terminal)(bundle.x(p, steps), regimes.atom(bundle.regime(p, steps))))
        .collect();
    if y_next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("terminal payoff"));
    }
    let mut pathwise = y_next.clone();
    let mut levels_rev: Vec<Level> = Vec::with_capacity(steps);
    let mut z_rev: Vec<Vec<Vec<FitResult>>> = Vec::new();
    let mut z_bases_rev: Vec<BasisSpec> = Vec::new();
    let mut per_step = vec![0.0; steps];
    let mut max_violation = 0.0_f64;
    let mut diagnostics = SweepDiagnostics::default();

    for k in (0..steps).rev() {
        let dt = grid.dt(k);
        let next_level = levels_rev.last();
        let mut points = Vec::with_capacity(n_live * d);
        for &p in &live {
            points.extend_from_slice(bundle.x(p, k));
        }
        let basis = BasisSpec::fitted_to(cfg.basis, &points, d)?;
        let b = basis.size();
        let threshold = cfg.min_paths.unwrap_or(b).max(1);

        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); m];
        for (li, &p) in live.iter().enumerate() {
            groups[bundle.regime(p, k)].push(li);
        }
        let counts: Vec<usize> = groups.iter().map(Vec::len).collect();
        let donors = resolve_donors(regimes, &counts, threshold, k)?;
        diagnostics.merged_atoms += donors.iter().enumerate().filter(|(j, &dj)| *j != dj).count();

        let fit_group = |li_set: &[usize], targets: &[f64]| -> Result<(FitResult, usize)> {
            let mut pts = Vec::with_capacity(li_set.len() * d);
            for &li in li_set {
                pts.extend_from_slice(&points[li * d..(li + 1) * d]);
            }
            let dm = design_matrix(&basis, &pts)?;
            let fit = ls_fit(&dm.matrix, targets, cfg.ridge)?;
            Ok((fit, dm.clamped))
        };

        // Z fits are only needed when the driver reads z.
        let z_level: Option<Vec<Vec<FitResult>>> = if full_driver {
            let fits = par::map_few(m, |j| -> Result<Vec<FitResult>> {
                let sample = &groups[donors[j]];
                (0..d)
                    .map(|i| {
                        let targets: Vec<f64> = sample
                            .iter()
                            .map(|&li| y_next[li] * bundle.dw(live[li], k)[i] / dt)
                            .collect();
                        fit_group(sample, &targets).map(|(f, _)| f)
                    })
                    .collect()
            });
            Some(fits.into_iter().collect::<Result<_>>()?)
        } else {
            None
        };
        let z_at = |x: &[f64], j: usize, out: &mut [f64], row: &mut [f64]| {
            if let Some(zl) = &z_level {
                for (o, fit) in out.iter_mut().zip(&zl[j]) {
                    *o = fit.eval_with(&basis, x, row);
                }
            }
        };

        let next_row = next_level.map_or(1, |l| l.basis.size());
        let driver_at = |x: &[f64], j: usize, y: f64, z: &[f64]| -> Result<f64> {
            let a = regimes.atom(j);
            if full_driver && !model.big_jumps.is_empty() {
                let next = |xs: &[f64]| {
                    let mut out = vec![0.0; m];
                    let mut row = vec![0.0; next_row];
                    slice_values(model, regimes, next_level, projection, xs, &mut out, &mut row);
                    out[j]
                };
                driver_eval(&model.driver, model, x, a, y, z, Some(&next))
            } else {
                driver_eval(&model.driver, model, x, a, y, z, None)
            }
        };

        let controls: Vec<f64> = if cfg.control_variate {
            par::map_range(n_live, |li| {
                let p = live[li];
                let mut vals = vec![0.0; m];
                let mut row = vec![0.0; next_row];
                brownian_control(
                    model,
                    regimes,
                    next_level,
                    projection,
                    &points[li * d..(li + 1) * d],
                    bundle.regime(p, k),
                    bundle.dw(p, k),
                    &mut vals,
                    &mut row,
                )
            })
        } else {
            Vec::new()
        };

        let fitted = par::map_few(m, |j| -> Result<(FitResult, usize)> {
            let sample = &groups[donors[j]];
            let mut next_vals = vec![0.0; m];
            let mut row_next = vec![0.0; next_row];
            let mut row = vec![0.0; b];
            let mut z = vec![0.0; d];
            let mut targets = Vec::with_capacity(sample.len());
            for &li in sample {
                let x = &points[li * d..(li + 1) * d];
                z_at(x, j, &mut z, &mut row);
                let drv = driver_at(x, j, y_next[li], &z)?;
                let mut t = y_next[li] + dt * drv;
                if let Some(c) = controls.get(li) {
                    t -= c;
                }
                if penalty > 0.0 {
                    slice_values(model, regimes, next_level, projection, x, &mut next_vals, &mut row_next);
                    let own = next_vals[j];
                    let pen: f64 = next_vals
                        .iter()
                        .zip(regimes.weights())
                        .map(|(v, w)| w * (v - own).max(0.0))
                        .sum();
                    t += dt * penalty * pen;
                }
                targets.push(t);
            }
            fit_group(sample, &targets)
        });
        let mut fits = Vec::with_capacity(m);
        for r in fitted {
            let (fit, clamped) = r?;
            diagnostics.clamped_points += clamped;
            fits.push(fit);
        }
        let level = Level {
            basis: basis.clone(),
            fits,
        };

        let path_steps = par::map_range(n_live, |li| -> Result<PathStep> {
            let p = live[li];
            let x = &points[li * d..(li + 1) * d];
            let j = bundle.regime(p, k);
            let mut row = vec![0.0; b];
            let mut row_next = vec![0.0; next_row];
            let mut now = vec![0.0; m];
            let mut next_vals = vec![0.0; m];
            let mut z = vec![0.0; d];
            for (o, fit) in now.iter_mut().zip(&level.fits) {
                *o = fit.eval_with(&level.basis, x, &mut row);
            }
            let own_fit = now[j];
            let y = if projection {
                now.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            } else {
                own_fit
            };
            slice_values(model, regimes, next_level, projection, x, &mut next_vals, &mut row_next);
            let own_next = next_vals[j];
            let mut positive_part = 0.0;
            let mut max_positive = 0.0_f64;
            for (v, w) in next_vals.iter().zip(regimes.weights()) {
                let r = (v - own_next).max(0.0);
                positive_part += w * r;
                max_positive = max_positive.max(r);
            }
            z_at(x, j, &mut z, &mut row);
            let drv = driver_at(x, j, y_next[li], &z)?;
            let mut increment = dt * drv;
            if penalty > 0.0 {
                increment += dt * penalty * positive_part;
            }
            if projection && y != own_fit {
                increment += y - own_fit;
            }
            Ok(PathStep {
                y,
                increment,
                positive_part,
                max_positive,
            })
        });
        let mut pos_sum = 0.0;
        for (li, s) in path_steps.into_iter().enumerate() {
            let s = s?;
            if !s.y.is_finite() {
                return Err(Error::NonFinite("backward sweep"));
            }
            y_next[li] = s.y;
            pathwise[li] += s.increment;
            pos_sum += s.positive_part;
            max_violation = max_violation.max(s.max_positive);
        }
        per_step[k] = pos_sum / n_live as f64;
        if let Some(zl) = z_level {
            z_rev.push(zl);
            z_bases_rev.push(basis);
        }
        levels_rev.push(level);
    }

    levels_rev.reverse();
    let z = if full_driver {
        z_rev.reverse();
        z_bases_rev.reverse();
        Some(ZSurface {
            bases: z_bases_rev,
            fits: z_rev,
        })
    } else {
        None
    };
    let positive_part_integral = per_step.iter().enumerate().map(|(k, v)| grid.dt(k) * v).sum();
    let i0 = bundle.initial_atom();
    let level0 = levels_rev.first();
    let start_values = par::map_range(n_live, |li| {
        let mut vals = vec![0.0; m];
        let mut row = vec![0.0; level0.map_or(1, |l| l.basis.size())];
        slice_value(
            model,
            regimes,
            level0,
            projection,
            bundle.x(live[li], 0),
            i0,
            &mut vals,
            &mut row,
        )
    });
    let mean = start_values.iter().sum::<f64>() / n_live as f64;
    let reference: Vec<f64> = live
        .iter()
        .zip(&pathwise)
        .filter(|(&p, _)| bundle.regime(p, 0) == i0)
        .map(|(_, &v)| v)
        .collect();
    let (_, stderr) = mean_stderr(&reference);
    let scheme = match mode {
        Mode::Penalized(n) => Scheme::Penalized(n),
        Mode::Projection => Scheme::Projection,
    };
    Ok(SweepOutcome {
        surface: ValueSurface {
            model: model.clone(),
            regimes: regimes.clone(),
            grid: grid.clone(),
            levels: levels_rev,
            z,
            penalty: match mode {
                Mode::Penalized(n) => PenaltyLevel::Finite(n),
                Mode::Projection => PenaltyLevel::Projection,
            },
        },
        estimate: ValueEstimate {
            mean,
            stderr,
            n_paths: n_live,
            scheme,
        },
        constraint: ConstraintReport {
            positive_part_integral,
            max_violation,
            per_step,
        },
        diagnostics,
    })
}

/// Backward induction for the penalized BSDE at penalty level `n`.
///
/// Requires `n * dt <= 1` on every step. The estimate is `v(0, x0, i0)` for
/// the bundle's reference atom. Its standard error is taken from the pathwise
/// reconstruction `g(X_T, I_T) + sum_k dt (f + n [R]^+)` over the paths that
/// start in the reference atom, without the control variate.
pub fn penalized_backward_sweep(
    bundle: &PathBundle,
    model: &ModelSpec,
    regimes: &RegimeSet,
    cfg: &SweepConfig,
    n: f64,
) -> Result<SweepOutcome> {
    backward_sweep(bundle, model, regimes, cfg, Mode::Penalized(n))
}

/// The infinite-penalty scheme: `v(t_k, x, .) = max_j [continuation_j(x) + dt f(x, a_j)]`.
pub fn projection_backward_sweep(
    bundle: &PathBundle,
    model: &ModelSpec,
    regimes: &RegimeSet,
    cfg: &SweepConfig,
) -> Result<SweepOutcome> {
    backward_sweep(bundle, model, regimes, cfg, Mode::Projection)
}

/// Regresses `v(t_{k+1}, X_{k+1}, I_{k+1}) dW_k / dt` onto the basis at
/// `X_k`, per step and per atom, on the surface's own bases.
pub fn estimate_z(surface: &ValueSurface, bundle: &PathBundle, min_paths: Option<usize>) -> Result<ZSurface> {
    check_inputs(bundle, &surface.model, &surface.regimes)?;
    let grid = bundle.grid();
    if grid.steps() != surface.grid.steps() {
        return Err(Error::InvalidGrid("bundle and surface grids differ".into()));
    }
    let d = bundle.dim_x();
    let m = surface.regimes.len();
    let live: Vec<usize> = bundle.live_paths().collect();
    let mut bases = Vec::with_capacity(grid.steps());
    let mut fits = Vec::with_capacity(grid.steps());
    for k in 0..grid.steps() {
        let dt = grid.dt(k);
        let basis = surface.basis(k).clone();
        let threshold = min_paths.unwrap_or(basis.size()).max(1);
        let y_next = par::map_range(live.len(), |li| {
            let p = live[li];
            surface.value(k + 1, bundle.x(p, k + 1), bundle.regime(p, k + 1))
        });
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); m];
        for (li, &p) in live.iter().enumerate() {
            groups[bundle.regime(p, k)].push(li);
        }
        let counts: Vec<usize> = groups.iter().map(Vec::len).collect();
        let donors = resolve_donors(&surface.regimes, &counts, threshold, k)?;
        let level = par::map_few(m, |j| -> Result<Vec<FitResult>> {
            let sample = &groups[donors[j]];
            let mut pts = Vec::with_capacity(sample.len() * d);
            for &li in sample {
                pts.extend_from_slice(bundle.x(live[li], k));
            }
            let dm = design_matrix(&basis, &pts)?;
            (0..d)
                .map(|i| {
                    let targets: Vec<f64> = sample
                        .iter()
                        .map(|&li| y_next[li] * bundle.dw(live[li], k)[i] / dt)
                        .collect();
                    ls_fit(&dm.matrix, &targets, 0.0)
                })
                .collect()
        });
        fits.push(level.into_iter().collect::<Result<Vec<_>>>()?);
        bases.push(basis);
    }
    Ok(ZSurface { bases, fits })
}

/// Largest relative spread of `v(0, x, .)` across interior atoms over the
/// probe points (row-major `P x d`): `max (max_j v - min_j v) / (1 + max_j |v|)`.
pub fn check_a_independence(surface: &ValueSurface, probe_points: &[f64]) -> Result<f64> {
    let interior: Vec<usize> = surface.regimes.interior_atoms().collect();
    if interior.len() < 2 {
        return Err(Error::TooFewInteriorAtoms(interior.len()));
    }
    let d = surface.model.dim_x;
    if probe_points.is_empty() || !probe_points.len().is_multiple_of(d) {
        return Err(Error::Dimension("probe points must form rows of length d".into()));
    }
    let mut out = vec![0.0; surface.regimes.len()];
    let mut row = vec![0.0; surface.basis_size()];
    let mut worst = 0.0_f64;
    for x in probe_points.chunks_exact(d) {
        surface.values_into(0, x, &mut out, &mut row);
        let vals = interior.iter().map(|&j| out[j]);
        let hi = vals.clone().fold(f64::NEG_INFINITY, f64::max);
        let lo = vals.clone().fold(f64::INFINITY, f64::min);
        let scale = 1.0 + vals.fold(0.0, |acc: f64, v| acc.max(v.abs()));
        worst = worst.max((hi - lo) / scale);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityReport {
    /// Index pairs `(i, j)` into the input with level_i < level_j but
    /// mean_j < mean_i - 3 (se_i + se_j).
    pub violations: Vec<(usize, usize)>,
}

impl MonotonicityReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn monotonicity_in_n(estimates: &[(PenaltyLevel, ValueEstimate)]) -> MonotonicityReport {
    let mut violations = Vec::new();
    for (i, (li, ei)) in estimates.iter().enumerate() {
        for (j, (lj, ej)) in estimates.iter().enumerate() {
            if li.as_f64() < lj.as_f64() && ej.mean < ei.mean - 3.0 * (ei.stderr + ej.stderr) {
                violations.push((i, j));
            }
        }
    }
    MonotonicityReport { violations }
}

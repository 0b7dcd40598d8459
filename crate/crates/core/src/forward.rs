//! Path simulation of the regime-switching jump-diffusion `(X, I)`.
//!
//! Regime switches and big jumps are sampled at their exact Poisson times.
//! The diffusion is advanced with an Euler step whose coefficients are
//! frozen at the start of the step, so a switch inside `(t_k, t_{k+1}]`
//! only affects the coefficients from `t_{k+1}` on.
//!
//! Every path draws from its own ChaCha8 stream (global seed, stream id =
//! path index), so the bundle does not depend on how paths are scheduled.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, RegimeSet};
use crate::par;

/// Largest tolerated share of faulted (non-finite) paths.
pub const MAX_FAULT_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidGrid("need at least one step".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidGrid("horizon must be finite and > 0".into()));
        }
        let mut times: Vec<f64> = (0..=steps).map(|k| horizon * k as f64 / steps as f64).collect();
        times[steps] = horizon;
        Ok(TimeGrid { times })
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times[0] != 0.0 {
            return Err(Error::InvalidGrid("grid must start at 0 and contain a step".into()));
        }
        if times
            .windows(2)
            .any(|w| w[1].partial_cmp(&w[0]) != Some(Ordering::Greater) || !w[1].is_finite())
        {
            return Err(Error::InvalidGrid("times must be strictly increasing".into()));
        }
        Ok(TimeGrid { times })
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn t(&self, k: usize) -> f64 {
        self.times[k]
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.times[k + 1] - self.times[k]
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.steps()]
    }

    pub fn max_dt(&self) -> f64 {
        (0..self.steps()).map(|k| self.dt(k)).fold(0.0, f64::max)
    }

    /// Step `k` with `t_k < t <= t_{k+1}`; `t = 0` maps to step 0.
    pub fn step_containing(&self, t: f64) -> usize {
        let idx = self.times.partition_point(|&s| s < t);
        idx.saturating_sub(1).min(self.steps() - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimeJump {
    pub time: f64,
    pub atom: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarkJump {
    pub time: f64,
    pub mark: usize,
}

/// Poisson arrival times of the given rate on `(0, horizon]`, each with a
/// mark drawn from `marks`.
fn poisson_marks<R: Rng + ?Sized>(
    rate: f64,
    horizon: f64,
    marks: &WeightedIndex<f64>,
    rng: &mut R,
) -> Vec<(f64, usize)> {
    let mut out = Vec::new();
    if rate <= 0.0 {
        return out;
    }
    let mut t = 0.0;
    loop {
        let e: f64 = rng.sample(Exp1);
        t += e / rate;
        if t > horizon {
            break;
        }
        out.push((t, marks.sample(rng)));
    }
    out
}

/// Samples the regime process on `grid`: switch times at rate
/// `total_rate`, new atom `j` with probability `w_j / total_rate`.
/// Entry `k` of the trajectory is the atom in force at `t_k`.
pub fn sample_regime_path<R: Rng + ?Sized>(
    regimes: &RegimeSet,
    grid: &TimeGrid,
    initial_atom: usize,
    rng: &mut R,
) -> Result<(Vec<u32>, Vec<RegimeJump>)> {
    if initial_atom >= regimes.len() {
        return Err(Error::InvalidRegimes(format!(
            "initial atom {initial_atom} out of range for {} atoms",
            regimes.len()
        )));
    }
    let marks = WeightedIndex::new(regimes.weights()).map_err(|e| Error::InvalidRegimes(format!("{e}")))?;
    let jumps: Vec<RegimeJump> = poisson_marks(regimes.total_rate(), grid.horizon(), &marks, rng)
        .into_iter()
        .map(|(time, atom)| RegimeJump { time, atom })
        .collect();
    let mut traj = Vec::with_capacity(grid.steps() + 1);
    let mut current = initial_atom;
    let mut next = 0;
    for &t in grid.times() {
        while next < jumps.len() && jumps[next].time <= t {
            current = jumps[next].atom;
            next += 1;
        }
        traj.push(current as u32);
    }
    Ok((traj, jumps))
}

/// Simulated trajectories on a shared grid. States are stored path-major:
/// `x[(p * (N + 1) + k) * d + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    grid: TimeGrid,
    dim_x: usize,
    n_paths: usize,
    x: Vec<f64>,
    regime: Vec<u32>,
    dw: Vec<f64>,
    regime_jumps: Vec<Vec<RegimeJump>>,
    big_jumps: Vec<Vec<MarkJump>>,
    faulted: Vec<bool>,
    seed: u64,
    x0: Vec<f64>,
    i0: usize,
    start: InitialRegime,
}

struct SimulatedPath {
    x: Vec<f64>,
    regime: Vec<u32>,
    dw: Vec<f64>,
    regime_jumps: Vec<RegimeJump>,
    big_jumps: Vec<MarkJump>,
    faulted: bool,
}

/// Per-path RNG: one ChaCha8 stream per path index under a global seed.
pub fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

#[allow(clippy::too_many_arguments)]
fn simulate_one(
    model: &ModelSpec,
    regimes: &RegimeSet,
    grid: &TimeGrid,
    x0: &[f64],
    i0: usize,
    jump_marks: Option<&WeightedIndex<f64>>,
    seed: u64,
    path: usize,
) -> Result<SimulatedPath> {
    let d = model.dim_x;
    let n = grid.steps();
    let mut rng = path_rng(seed, path);
    let (regime, regime_jumps) = sample_regime_path(regimes, grid, i0, &mut rng)?;
    let big_jumps: Vec<MarkJump> = match jump_marks {
        Some(marks) => poisson_marks(model.big_jumps.total_rate(), grid.horizon(), marks, &mut rng)
            .into_iter()
            .map(|(time, mark)| MarkJump { time, mark })
            .collect(),
        None => Vec::new(),
    };

    let mut x = vec![0.0; (n + 1) * d];
    let mut dw = vec![0.0; n * d];
    x[..d].copy_from_slice(x0);
    let mut drift = vec![0.0; d];
    let mut vol = vec![0.0; d * d];
    let mut beta = vec![0.0; d];
    let mut comp = vec![0.0; d];
    let mut next_jump = 0;
    let mut faulted = false;

    for k in 0..n {
        let dt = grid.dt(k);
        let sq = libm::sqrt(dt);
        for i in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            dw[k * d + i] = sq * z;
        }
        if faulted {
            continue;
        }
        let (head, tail) = x.split_at_mut((k + 1) * d);
        let xk = &head[k * d..];
        let xn = &mut tail[..d];
        let a = regimes.atom(regime[k] as usize);
        (model.drift)(xk, a, &mut drift);
        (model.vol)(xk, a, &mut vol);
        for i in 0..d {
            let mut s = xk[i] + drift[i] * dt;
            for j in 0..d {
                s += vol[i * d + j] * dw[k * d + j];
            }
            xn[i] = s;
        }
        if !model.big_jumps.is_empty() {
            comp.fill(0.0);
            for m in 0..model.big_jumps.len() {
                (model.jump_coef)(xk, a, model.big_jumps.mark(m), &mut beta);
                let rho = model.big_jumps.weight(m);
                for i in 0..d {
                    comp[i] += rho * beta[i];
                }
            }
            let t_next = grid.t(k + 1);
            while next_jump < big_jumps.len() && big_jumps[next_jump].time <= t_next {
                let mark = model.big_jumps.mark(big_jumps[next_jump].mark);
                (model.jump_coef)(xk, a, mark, &mut beta);
                for i in 0..d {
                    xn[i] += beta[i];
                }
                next_jump += 1;
            }
            for i in 0..d {
                xn[i] -= dt * comp[i];
            }
        }
        if xn.iter().any(|v| !v.is_finite()) {
            faulted = true;
        }
    }
    Ok(SimulatedPath {
        x,
        regime,
        dw,
        regime_jumps,
        big_jumps,
        faulted,
    })
}

/// How the regime of each path is chosen at `t = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitialRegime {
    /// Every path starts in the reference atom.
    #[default]
    Fixed,
    /// Path `p` starts in atom `p mod M`, so every atom has its own sample
    /// from the first step. Estimates still refer to the reference atom.
    Stratified,
}

/// Simulates `n_paths` trajectories started from `(x0, i0)`.
///
/// Paths that hit a non-finite state are flagged and excluded downstream;
/// more than 1% of them aborts with [`Error::FaultThreshold`].
pub fn simulate_paths(
    model: &ModelSpec,
    regimes: &RegimeSet,
    grid: &TimeGrid,
    x0: &[f64],
    i0: usize,
    n_paths: usize,
    seed: u64,
) -> Result<PathBundle> {
    simulate_paths_with(model, regimes, grid, x0, i0, InitialRegime::Fixed, n_paths, seed)
}

/// As [`simulate_paths`], with a choice of initial regime layout. `i0` is the
/// reference atom reported by the estimators.
#[allow(clippy::too_many_arguments)]
pub fn simulate_paths_with(
    model: &ModelSpec,
    regimes: &RegimeSet,
    grid: &TimeGrid,
    x0: &[f64],
    i0: usize,
    start: InitialRegime,
    n_paths: usize,
    seed: u64,
) -> Result<PathBundle> {
    let d = model.dim_x;
    if n_paths == 0 {
        return Err(Error::EmptyBundle);
    }
    if x0.len() != d {
        return Err(Error::Dimension(format!("x0 has length {} but d = {d}", x0.len())));
    }
    if i0 >= regimes.len() {
        return Err(Error::InvalidRegimes(format!("initial atom {i0} out of range")));
    }
    if (grid.horizon() - model.horizon).abs() > 1e-12 * model.horizon {
        return Err(Error::InvalidGrid(format!(
            "grid ends at {} but the model horizon is {}",
            grid.horizon(),
            model.horizon
        )));
    }
    let jump_marks = if model.big_jumps.is_empty() {
        None
    } else {
        Some(WeightedIndex::new(model.big_jumps.weights()).map_err(|e| Error::InvalidJumpMeasure(format!("{e}")))?)
    };

    let m = regimes.len();
    let sims = par::map_range(n_paths, |p| {
        let first = match start {
            InitialRegime::Fixed => i0,
            InitialRegime::Stratified => p % m,
        };
        simulate_one(model, regimes, grid, x0, first, jump_marks.as_ref(), seed, p)
    });
    let n = grid.steps();
    let mut bundle = PathBundle {
        grid: grid.clone(),
        dim_x: d,
        n_paths,
        x: Vec::with_capacity(n_paths * (n + 1) * d),
        regime: Vec::with_capacity(n_paths * (n + 1)),
        dw: Vec::with_capacity(n_paths * n * d),
        regime_jumps: Vec::with_capacity(n_paths),
        big_jumps: Vec::with_capacity(n_paths),
        faulted: Vec::with_capacity(n_paths),
        seed,
        x0: x0.to_vec(),
        i0,
        start,
    };
    for sim in sims {
        let sim = sim?;
        bundle.x.extend_from_slice(&sim.x);
        bundle.regime.extend_from_slice(&sim.regime);
        bundle.dw.extend_from_slice(&sim.dw);
        bundle.regime_jumps.push(sim.regime_jumps);
        bundle.big_jumps.push(sim.big_jumps);
        bundle.faulted.push(sim.faulted);
    }
    let faulted = bundle.n_faulted();
    if faulted as f64 > MAX_FAULT_FRACTION * n_paths as f64 {
        return Err(Error::FaultThreshold {
            faulted,
            total: n_paths,
        });
    }
    Ok(bundle)
}

impl PathBundle {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim_x(&self) -> usize {
        self.dim_x
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    /// Reference atom for estimates at `t = 0`.
    pub fn initial_atom(&self) -> usize {
        self.i0
    }

    pub fn initial_regime(&self) -> InitialRegime {
        self.start
    }

    /// Live paths that start in the reference atom.
    pub fn reference_paths(&self) -> impl Iterator<Item = usize> + '_ {
        self.live_paths().filter(move |&p| self.regime(p, 0) == self.i0)
    }

    pub fn x(&self, path: usize, k: usize) -> &[f64] {
        let start = (path * (self.grid.steps() + 1) + k) * self.dim_x;
        &self.x[start..start + self.dim_x]
    }

    pub fn regime(&self, path: usize, k: usize) -> usize {
        self.regime[path * (self.grid.steps() + 1) + k] as usize
    }

    pub fn dw(&self, path: usize, k: usize) -> &[f64] {
        let start = (path * self.grid.steps() + k) * self.dim_x;
        &self.dw[start..start + self.dim_x]
    }

    pub fn regime_jumps(&self, path: usize) -> &[RegimeJump] {
        &self.regime_jumps[path]
    }

    pub fn big_jumps(&self, path: usize) -> &[MarkJump] {
        &self.big_jumps[path]
    }

    pub fn is_faulted(&self, path: usize) -> bool {
        self.faulted[path]
    }

    pub fn n_faulted(&self) -> usize {
        self.faulted.iter().filter(|&&f| f).count()
    }

    pub fn live_paths(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_paths).filter(move |&p| !self.faulted[p])
    }

    pub fn n_live(&self) -> usize {
        self.n_paths - self.n_faulted()
    }
}

/// Largest empirical `p`-th moment of `|X_t|` over the grid, `p` in {2, 4}.
pub fn path_moment_check(bundle: &PathBundle, p: u32) -> Result<f64> {
    if p != 2 && p != 4 {
        return Err(Error::MomentOrder(p));
    }
    let live: Vec<usize> = bundle.live_paths().collect();
    if live.is_empty() {
        return Err(Error::EmptyBundle);
    }
    let mut sup = 0.0_f64;
    for k in 0..=bundle.grid.steps() {
        let mut acc = 0.0;
        for &path in &live {
            let r2: f64 = bundle.x(path, k).iter().map(|v| v * v).sum();
            acc += if p == 2 { r2 } else { r2 * r2 };
        }
        sup = sup.max(acc / live.len() as f64);
    }
    Ok(sup)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FiniteJumpMeasure;

    fn scalar_model(b: f64, s: f64) -> ModelSpec {
        ModelSpec::new(1, 1.0)
            .unwrap()
            .with_drift(move |_, _, o| o[0] = b)
            .with_vol(move |_, _, o| o[0] = s)
    }

    #[test]
    fn grid_construction() {
        let g = TimeGrid::uniform(1.0, 10).unwrap();
        assert_eq!(g.steps(), 10);
        assert_eq!(g.horizon(), 1.0);
        assert!(g.times().windows(2).all(|w| w[1] > w[0]));
        assert_eq!(g.step_containing(0.0), 0);
        assert_eq!(g.step_containing(0.1), 0);
        assert_eq!(g.step_containing(0.15), 1);
        assert_eq!(g.step_containing(1.0), 9);
        assert!(TimeGrid::uniform(1.0, 0).is_err());
        assert!(TimeGrid::from_times(vec![0.0, 0.5, 0.5, 1.0]).is_err());
    }

    #[test]
    fn singleton_regime_is_constant() {
        let regimes = RegimeSet::singleton(vec![0.7], 3.0).unwrap();
        let grid = TimeGrid::uniform(2.0, 20).unwrap();
        let mut rng = path_rng(1, 0);
        let (traj, _) = sample_regime_path(&regimes, &grid, 0, &mut rng).unwrap();
        assert!(traj.iter().all(|&j| j == 0));
        assert!(sample_regime_path(&regimes, &grid, 1, &mut rng).is_err());
    }

    #[test]
    fn trajectory_changes_only_at_jumps() {
        let regimes = RegimeSet::uniform_scalar(&[0.1, 0.2, 0.3], 5.0, vec![false, true, false]).unwrap();
        let grid = TimeGrid::uniform(1.0, 40).unwrap();
        for p in 0..50 {
            let mut rng = path_rng(9, p);
            let (traj, jumps) = sample_regime_path(&regimes, &grid, 1, &mut rng).unwrap();
            for k in 0..grid.steps() {
                if traj[k] != traj[k + 1] {
                    let (lo, hi) = (grid.t(k), grid.t(k + 1));
                    let last = jumps.iter().rfind(|j| j.time > lo && j.time <= hi);
                    assert_eq!(last.map(|j| j.atom as u32), Some(traj[k + 1]));
                }
            }
        }
    }

    #[test]
    fn zero_coefficients_stay_put() {
        let model = scalar_model(0.0, 0.0);
        let regimes = RegimeSet::singleton(vec![0.0], 1.0).unwrap();
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let b = simulate_paths(&model, &regimes, &grid, &[1.0], 0, 100, 3).unwrap();
        for p in 0..100 {
            for k in 0..=10 {
                assert_eq!(b.x(p, k)[0], 1.0);
            }
        }
        assert_eq!(path_moment_check(&b, 2).unwrap(), 1.0);
        assert_eq!(path_moment_check(&b, 4).unwrap(), 1.0);
    }

    #[test]
    fn unit_drift_is_exact() {
        let model = scalar_model(1.0, 0.0);
        let regimes = RegimeSet::singleton(vec![0.0], 1.0).unwrap();
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let b = simulate_paths(&model, &regimes, &grid, &[0.25], 0, 10, 3).unwrap();
        for p in 0..10 {
            assert_eq!(b.x(p, 8)[0], 1.25);
        }
    }

    #[test]
    fn moment_order_and_empty_errors() {
        let model = scalar_model(0.0, 0.0);
        let regimes = RegimeSet::singleton(vec![0.0], 1.0).unwrap();
        let grid = TimeGrid::uniform(1.0, 2).unwrap();
        let b = simulate_paths(&model, &regimes, &grid, &[2.0], 0, 4, 3).unwrap();
        assert!(matches!(path_moment_check(&b, 3), Err(Error::MomentOrder(3))));
        assert_eq!(path_moment_check(&b, 2).unwrap(), 4.0);
        assert!(matches!(
            simulate_paths(&model, &regimes, &grid, &[2.0], 0, 0, 3),
            Err(Error::EmptyBundle)
        ));
    }

    #[test]
    fn blow_up_trips_the_fault_threshold() {
        let model = ModelSpec::new(1, 1.0)
            .unwrap()
            .with_drift(|x, _, o| o[0] = x[0] * x[0] * 1e300);
        let regimes = RegimeSet::singleton(vec![0.0], 1.0).unwrap();
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let err = simulate_paths(&model, &regimes, &grid, &[10.0], 0, 50, 1).unwrap_err();
        assert!(matches!(err, Error::FaultThreshold { faulted: 50, total: 50 }));
    }

    #[test]
    fn rare_faults_are_excluded() {
        // Only paths whose first increment is above 3.5 sd explode.
        let model = ModelSpec::new(1, 1.0)
            .unwrap()
            .with_drift(|x, _, o| o[0] = if x[0] > 2.47 { f64::INFINITY } else { 0.0 })
            .with_vol(|_, _, o| o[0] = 1.0);
        let regimes = RegimeSet::singleton(vec![0.0], 1.0).unwrap();
        let grid = TimeGrid::uniform(1.0, 2).unwrap();
        let b = simulate_paths(&model, &regimes, &grid, &[0.0], 0, 20_000, 5).unwrap();
        assert!(b.n_faulted() > 0);
        assert_eq!(b.live_paths().count(), b.n_live());
        assert!(path_moment_check(&b, 2).unwrap().is_finite());
    }

    #[test]
    fn jumps_use_compensator() {
        let measure = FiniteJumpMeasure::new(vec![vec![1.0]], vec![2.0]).unwrap();
        let model = ModelSpec::new(1, 1.0)
            .unwrap()
            .with_jumps(measure, |_, _, _, o| o[0] = 0.5);
        let regimes = RegimeSet::singleton(vec![0.0], 1.0).unwrap();
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let b = simulate_paths(&model, &regimes, &grid, &[0.0], 0, 20, 11).unwrap();
        for p in 0..20 {
            let count = b.big_jumps(p).len() as f64;
            let xt = b.x(p, 4)[0];
            assert!((xt - (0.5 * count - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn jump_measure_rejects_zero_mark() {
        assert!(FiniteJumpMeasure::new(vec![vec![0.0]], vec![1.0]).is_err());
        assert!(FiniteJumpMeasure::new(vec![vec![1.0]], vec![-1.0]).is_err());
    }
}

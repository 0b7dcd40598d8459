//! Explicit finite-difference solver for one-dimensional HJB equations
//!
//! ```text
//! -dw/dt = max_j [ L^{a_j} w + f(x, a_j, w, sigma Dw, M^{a_j} w) ],   w(T, x) = max_j g(x, a_j)
//! ```
//!
//! used as a deterministic reference for the Monte Carlo schemes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{DriverArgs, DriverSpec, ModelSpec, RegimeSet};
use crate::par;

/// Fraction of the explicit stability limit used when `nt` is chosen automatically.
const CFL_SAFETY: f64 = 0.9;
/// Nodes used to bound the coefficients when checking the stability limit.
const CFL_PROBES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Boundary {
    /// End nodes pinned to the terminal payoff.
    DirichletPayoff,
    /// End nodes extrapolated linearly from their two neighbours.
    #[default]
    LinearExtrapolation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdGrid {
    x_min: f64,
    x_max: f64,
    nx: usize,
    nt: usize,
    horizon: f64,
    boundary: Boundary,
}

struct Coefs {
    drift: f64,
    var: f64,
}

/// Drift net of the jump compensator, and variance, at `(x, a)`.
fn coefficients(model: &ModelSpec, x: f64, a: &[f64]) -> Coefs {
    let xs = [x];
    let mut out = [0.0];
    (model.drift)(&xs, a, &mut out);
    let mut drift = out[0];
    (model.vol)(&xs, a, &mut out);
    let sigma = out[0];
    for m in 0..model.big_jumps.len() {
        (model.jump_coef)(&xs, a, model.big_jumps.mark(m), &mut out);
        drift -= model.big_jumps.weight(m) * out[0];
    }
    Coefs {
        drift,
        var: sigma * sigma,
    }
}

impl FdGrid {
    /// Builds the grid and checks (or picks, when `nt` is `None`) the time
    /// step against `dt (sigma^2 / dx^2 + |b| / dx + sum rho) <= 1`, with the
    /// coefficients bounded over every node and atom.
    pub fn new(
        model: &ModelSpec,
        regimes: &RegimeSet,
        x_min: f64,
        x_max: f64,
        nx: usize,
        nt: Option<usize>,
        boundary: Boundary,
    ) -> Result<Self> {
        if model.dim_x != 1 {
            return Err(Error::FdDimension(model.dim_x));
        }
        if !(x_min.is_finite() && x_max.is_finite() && x_min < x_max) {
            return Err(Error::InvalidGrid(format!(
                "need x_min < x_max, got [{x_min}, {x_max}]"
            )));
        }
        if nx < 3 {
            return Err(Error::InvalidGrid(format!("need at least 3 nodes, got {nx}")));
        }
        let dx = (x_max - x_min) / (nx - 1) as f64;
        let mut rate = 0.0_f64;
        let refine = CFL_PROBES.max(1);
        for i in 0..(nx - 1) * refine + 1 {
            let x = x_min + dx * i as f64 / refine as f64;
            for j in 0..regimes.len() {
                let c = coefficients(model, x, regimes.atom(j));
                rate = rate.max(c.var / (dx * dx) + c.drift.abs() / dx);
            }
        }
        rate += model.big_jumps.total_rate();
        if !rate.is_finite() {
            return Err(Error::NonFinite("fd coefficients"));
        }
        let horizon = model.horizon;
        let nt = match nt {
            Some(nt) => {
                if nt == 0 || horizon / nt as f64 * rate > 1.0 {
                    return Err(Error::Cfl(format!(
                        "nt = {nt} gives dt * rate = {:.4} > 1; need nt >= {}",
                        horizon / nt.max(1) as f64 * rate,
                        libm::ceil(horizon * rate) as usize
                    )));
                }
                nt
            }
            None => (libm::ceil(horizon * rate / CFL_SAFETY) as usize).max(1),
        };
        Ok(FdGrid {
            x_min,
            x_max,
            nx,
            nt,
            horizon,
            boundary,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nx - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.nt as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        if i + 1 == self.nx {
            self.x_max
        } else {
            self.x_min + self.dx() * i as f64
        }
    }

    pub fn t(&self, k: usize) -> f64 {
        if k == self.nt {
            self.horizon
        } else {
            self.dt() * k as f64
        }
    }
}

fn sup_payoff(model: &ModelSpec, regimes: &RegimeSet, x: f64) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, 0);
    for j in 0..regimes.len() {
        let v = (model.terminal)(&[x], regimes.atom(j));
        if v > best.0 {
            best = (v, j);
        }
    }
    best
}

/// Slice value at an arbitrary `x`, linear between nodes and handled per
/// the boundary policy outside.
fn interpolate(model: &ModelSpec, regimes: &RegimeSet, grid: &FdGrid, w: &[f64], x: f64) -> f64 {
    let n = grid.nx;
    if (x < grid.x_min || x > grid.x_max) && grid.boundary == Boundary::DirichletPayoff {
        return sup_payoff(model, regimes, x).0;
    }
    let s = (x - grid.x_min) / grid.dx();
    let i = (libm::floor(s) as isize).clamp(0, n as isize - 2) as usize;
    let frac = s - i as f64;
    w[i] + frac * (w[i + 1] - w[i])
}

/// `M^a w = sum_m rho_m delta(x, l_m) [w(x + beta) - w(x)]`, `delta = kernel` (or one).
type KernelRef<'a> = &'a dyn Fn(&[f64], &[f64]) -> f64;

fn jump_increment(
    model: &ModelSpec,
    regimes: &RegimeSet,
    grid: &FdGrid,
    a: &[f64],
    w: &[f64],
    i: usize,
    kernel: Option<KernelRef<'_>>,
) -> f64 {
    let x = grid.x(i);
    let mut out = [0.0];
    let mut acc = 0.0;
    for m in 0..model.big_jumps.len() {
        let mark = model.big_jumps.mark(m);
        (model.jump_coef)(&[x], a, mark, &mut out);
        let delta = kernel.map_or(1.0, |k| k(&[x], mark));
        acc += model.big_jumps.weight(m) * delta * (interpolate(model, regimes, grid, w, x + out[0]) - w[i]);
    }
    acc
}

/// `L^a w` at interior node `i`: drift and diffusion by central differences
/// (first derivative upwinded where the cell Peclet number exceeds one) plus
/// the compensated jump integral.
pub fn apply_generator(
    model: &ModelSpec,
    regimes: &RegimeSet,
    atom: usize,
    w: &[f64],
    grid: &FdGrid,
    i: usize,
) -> Result<f64> {
    if i == 0 || i + 1 >= grid.nx || w.len() != grid.nx {
        return Err(Error::Dimension(format!(
            "node {i} is not interior to a slice of {}",
            grid.nx
        )));
    }
    let a = regimes.atom(atom);
    let dx = grid.dx();
    let c = coefficients(model, grid.x(i), a);
    let second = (w[i + 1] - 2.0 * w[i] + w[i - 1]) / (dx * dx);
    let first = if c.drift.abs() * dx > c.var {
        if c.drift > 0.0 {
            (w[i + 1] - w[i]) / dx
        } else {
            (w[i] - w[i - 1]) / dx
        }
    } else {
        (w[i + 1] - w[i - 1]) / (2.0 * dx)
    };
    let jumps = jump_increment(model, regimes, grid, a, w, i, None);
    Ok(c.drift * first + 0.5 * c.var * second + jumps)
}

fn driver_term(model: &ModelSpec, regimes: &RegimeSet, grid: &FdGrid, atom: usize, w: &[f64], i: usize) -> f64 {
    let a = regimes.atom(atom);
    let x = [grid.x(i)];
    match &model.driver {
        DriverSpec::StateOnly(f) => f(&x, a),
        DriverSpec::Full { eval, jump_kernel } => {
            let mut out = [0.0];
            (model.vol)(&x, a, &mut out);
            let z = [out[0] * (w[i + 1] - w[i - 1]) / (2.0 * grid.dx())];
            let kernel = jump_kernel
                .as_ref()
                .map(|k| k.as_ref() as &dyn Fn(&[f64], &[f64]) -> f64);
            let u_integral = jump_increment(model, regimes, grid, a, w, i, kernel);
            eval(&DriverArgs {
                x: &x,
                a,
                y: w[i],
                z: &z,
                u_integral,
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct FdSolution {
    grid: FdGrid,
    /// Row-major `(nt + 1) x nx`, row `k` at time `t_k`.
    values: Vec<f64>,
    controls: Vec<usize>,
}

impl FdSolution {
    pub fn grid(&self) -> &FdGrid {
        &self.grid
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        &self.values[k * self.grid.nx..(k + 1) * self.grid.nx]
    }

    /// Maximizing atom per node at time `t_k`; end nodes copy their neighbour.
    pub fn controls(&self, k: usize) -> &[usize] {
        &self.controls[k * self.grid.nx..(k + 1) * self.grid.nx]
    }
}

/// Backward explicit march `w_k = w_{k+1} + dt max_j [L^{a_j} w_{k+1} + f]`.
pub fn fd_solve_hjb(model: &ModelSpec, regimes: &RegimeSet, grid: &FdGrid) -> Result<FdSolution> {
    if model.dim_x != 1 {
        return Err(Error::FdDimension(model.dim_x));
    }
    if let DriverSpec::Full { jump_kernel: None, .. } = model.driver {
        if !model.big_jumps.is_empty() {
            return Err(Error::MissingJumpKernel);
        }
    }
    let nx = grid.nx;
    let nt = grid.nt;
    let dt = grid.dt();
    let mut values = vec![0.0; (nt + 1) * nx];
    let mut controls = vec![0; (nt + 1) * nx];
    for i in 0..nx {
        let (v, j) = sup_payoff(model, regimes, grid.x(i));
        values[nt * nx + i] = v;
        controls[nt * nx + i] = j;
    }
    if values[nt * nx..].iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fd terminal slice"));
    }
    for k in (0..nt).rev() {
        let (head, tail) = values.split_at_mut((k + 1) * nx);
        let next = &tail[..nx];
        let now = &mut head[k * nx..];
        let updated = par::map_range(nx - 2, |n| {
            let i = n + 1;
            let mut best = (f64::NEG_INFINITY, 0);
            for j in 0..regimes.len() {
                let h = apply_generator(model, regimes, j, next, grid, i).unwrap_or(f64::NAN)
                    + driver_term(model, regimes, grid, j, next, i);
                if h > best.0 {
                    best = (h, j);
                }
            }
            (next[i] + dt * best.0, best.1)
        });
        let ctrl = &mut controls[k * nx..(k + 1) * nx];
        for (n, (v, j)) in updated.into_iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite("fd march"));
            }
            now[n + 1] = v;
            ctrl[n + 1] = j;
        }
        match grid.boundary {
            Boundary::DirichletPayoff => {
                now[0] = tail[0];
                now[nx - 1] = tail[nx - 1];
            }
            Boundary::LinearExtrapolation => {
                now[0] = 2.0 * now[1] - now[2];
                now[nx - 1] = 2.0 * now[nx - 2] - now[nx - 3];
            }
        }
        ctrl[0] = ctrl[1];
        ctrl[nx - 1] = ctrl[nx - 2];
    }
    Ok(FdSolution {
        grid: grid.clone(),
        values,
        controls,
    })
}

/// Bilinear interpolation in `(t, x)`; exact at nodes.
pub fn fd_value_at(solution: &FdSolution, t: f64, x: f64) -> Result<f64> {
    let g = &solution.grid;
    if !(0.0..=g.horizon).contains(&t) || !(g.x_min..=g.x_max).contains(&x) {
        return Err(Error::OutsideGrid { t, x });
    }
    let locate = |s: f64, n: usize| -> (usize, f64) {
        let i = (libm::floor(s) as usize).min(n - 1);
        (i, s - i as f64)
    };
    let (k, ft) = locate(t / g.dt(), g.nt);
    let (i, fx) = locate((x - g.x_min) / g.dx(), g.nx - 1);
    let at = |k: usize| {
        let row = solution.slice(k);
        if fx == 0.0 {
            row[i]
        } else {
            row[i] + fx * (row[i + 1] - row[i])
        }
    };
    let lower = at(k);
    Ok(if ft == 0.0 {
        lower
    } else {
        lower + ft * (at(k + 1) - lower)
    })
}

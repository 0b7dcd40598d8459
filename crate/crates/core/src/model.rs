//! Problem data for the Markovian control problem: coefficients of the
//! forward jump-diffusion, the randomized control set, the big-jump measure,
//! the driver and the terminal payoff.
//!
//! All coefficient functions work on flat slices. Vectors of dimension `d`
//! are `&[f64]` of length `d`, the volatility matrix is written row-major
//! into a buffer of length `d * d`.

use alloc::format;
use alloc::string::ToString;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// `(x, a, out)`: writes a `d`-vector (drift) or a row-major `d x d`
/// matrix (volatility) into `out`.
pub type CoefFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `(x, a, mark, out)`: jump size for a big jump with the given mark.
pub type JumpCoefFn = Arc<dyn Fn(&[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `(x, a) -> value`.
pub type ScalarFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
/// Full driver `h(x, a, y, z, u)` where `u` is the kernel-weighted jump integral.
pub type FullDriverFn = Arc<dyn Fn(&DriverArgs<'_>) -> f64 + Send + Sync>;
/// `(x, mark) -> delta >= 0`.
pub type JumpKernelFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// Arguments handed to a full driver.
#[derive(Debug, Clone, Copy)]
pub struct DriverArgs<'a> {
    pub x: &'a [f64],
    pub a: &'a [f64],
    pub y: f64,
    pub z: &'a [f64],
    pub u_integral: f64,
}

#[derive(Clone)]
pub enum DriverSpec {
    /// Running reward `f(x, a)`; the stochastic-control case.
    StateOnly(ScalarFn),
    Full {
        eval: FullDriverFn,
        jump_kernel: Option<JumpKernelFn>,
    },
}

impl DriverSpec {
    pub fn zero() -> Self {
        DriverSpec::StateOnly(Arc::new(|_, _| 0.0))
    }

    pub fn state_only(f: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        DriverSpec::StateOnly(Arc::new(f))
    }

    pub fn full(
        eval: impl Fn(&DriverArgs<'_>) -> f64 + Send + Sync + 'static,
        jump_kernel: Option<JumpKernelFn>,
    ) -> Self {
        DriverSpec::Full {
            eval: Arc::new(eval),
            jump_kernel,
        }
    }

    pub fn is_state_only(&self) -> bool {
        matches!(self, DriverSpec::StateOnly(_))
    }
}

impl fmt::Debug for DriverSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DriverSpec::StateOnly(_) => f.write_str("DriverSpec::StateOnly"),
            DriverSpec::Full { jump_kernel, .. } => f
                .debug_struct("DriverSpec::Full")
                .field("jump_kernel", &jump_kernel.is_some())
                .finish(),
        }
    }
}

/// Finite-activity jump measure on the mark space, given by its atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteJumpMeasure {
    mark_dim: usize,
    marks: Vec<f64>,
    weights: Vec<f64>,
    total_rate: f64,
}

impl FiniteJumpMeasure {
    pub fn empty(mark_dim: usize) -> Self {
        FiniteJumpMeasure {
            mark_dim,
            marks: Vec::new(),
            weights: Vec::new(),
            total_rate: 0.0,
        }
    }

    pub fn new(marks: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if marks.len() != weights.len() {
            return Err(Error::InvalidJumpMeasure(format!(
                "{} marks but {} weights",
                marks.len(),
                weights.len()
            )));
        }
        let mark_dim = marks.first().map_or(1, Vec::len);
        if mark_dim == 0 {
            return Err(Error::InvalidJumpMeasure("marks must be non-empty vectors".to_string()));
        }
        let mut flat = Vec::with_capacity(marks.len() * mark_dim);
        for m in &marks {
            if m.len() != mark_dim {
                return Err(Error::InvalidJumpMeasure("marks have mixed dimensions".to_string()));
            }
            if m.iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidJumpMeasure("the zero mark is excluded".to_string()));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidJumpMeasure("non-finite mark".to_string()));
            }
            flat.extend_from_slice(m);
        }
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidJumpMeasure("weights must be finite and > 0".to_string()));
        }
        let total_rate = weights.iter().sum();
        Ok(FiniteJumpMeasure {
            mark_dim,
            marks: flat,
            weights,
            total_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn mark_dim(&self) -> usize {
        self.mark_dim
    }

    pub fn mark(&self, m: usize) -> &[f64] {
        &self.marks[m * self.mark_dim..(m + 1) * self.mark_dim]
    }

    pub fn weight(&self, m: usize) -> f64 {
        self.weights[m]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_rate(&self) -> f64 {
        self.total_rate
    }
}

/// Finite discretization of the control set `A` carrying the intensity
/// measure of the randomizing Poisson measure.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeSet {
    dim: usize,
    atoms: Vec<f64>,
    weights: Vec<f64>,
    total_rate: f64,
    interior: Vec<bool>,
}

impl RegimeSet {
    pub fn new(atoms: Vec<Vec<f64>>, weights: Vec<f64>, interior: Vec<bool>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidRegimes("at least one atom is required".to_string()));
        }
        if atoms.len() != weights.len() || atoms.len() != interior.len() {
            return Err(Error::InvalidRegimes(format!(
                "{} atoms, {} weights, {} interior flags",
                atoms.len(),
                weights.len(),
                interior.len()
            )));
        }
        let dim = atoms[0].len();
        if dim == 0 {
            return Err(Error::InvalidRegimes("atoms must be non-empty vectors".to_string()));
        }
        let mut flat = Vec::with_capacity(atoms.len() * dim);
        for a in &atoms {
            if a.len() != dim {
                return Err(Error::InvalidRegimes("atoms have mixed dimensions".to_string()));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidRegimes("non-finite atom".to_string()));
            }
            flat.extend_from_slice(a);
        }
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidRegimes("weights must be finite and > 0".to_string()));
        }
        let total_rate = weights.iter().sum();
        Ok(RegimeSet {
            dim,
            atoms: flat,
            weights,
            total_rate,
            interior,
        })
    }

    /// Scalar atoms with equal weights summing to `total_rate`.
    pub fn uniform_scalar(values: &[f64], total_rate: f64, interior: Vec<bool>) -> Result<Self> {
        let m = values.len().max(1) as f64;
        let atoms = values.iter().map(|&v| vec![v]).collect();
        let weights = vec![total_rate / m; values.len()];
        Self::new(atoms, weights, interior)
    }

    pub fn singleton(atom: Vec<f64>, rate: f64) -> Result<Self> {
        Self::new(vec![atom], vec![rate], vec![true])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn atom(&self, j: usize) -> &[f64] {
        &self.atoms[j * self.dim..(j + 1) * self.dim]
    }

    pub fn weight(&self, j: usize) -> f64 {
        self.weights[j]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_rate(&self) -> f64 {
        self.total_rate
    }

    pub fn is_interior(&self, j: usize) -> bool {
        self.interior[j]
    }

    pub fn interior_atoms(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&j| self.interior[j])
    }

    /// Mark distribution `w_j / total_rate` of a regime jump.
    pub fn mark_probabilities(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w / self.total_rate).collect()
    }

    pub fn atom_distance(&self, i: usize, j: usize) -> f64 {
        let s: f64 = self
            .atom(i)
            .iter()
            .zip(self.atom(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        libm::sqrt(s)
    }
}

/// The Markovian problem: forward coefficients, jump measure, driver,
/// terminal payoff and horizon.
#[derive(Clone)]
pub struct ModelSpec {
    pub dim_x: usize,
    pub horizon: f64,
    pub drift: CoefFn,
    pub vol: CoefFn,
    pub jump_coef: JumpCoefFn,
    pub big_jumps: FiniteJumpMeasure,
    pub driver: DriverSpec,
    pub terminal: ScalarFn,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("dim_x", &self.dim_x)
            .field("horizon", &self.horizon)
            .field("big_jumps", &self.big_jumps)
            .field("driver", &self.driver)
            .finish_non_exhaustive()
    }
}

impl ModelSpec {
    /// Zero coefficients, zero driver and zero payoff.
    pub fn new(dim_x: usize, horizon: f64) -> Result<Self> {
        if dim_x == 0 {
            return Err(Error::InvalidParam {
                field: "dim_x".to_string(),
                reason: "must be positive".to_string(),
            });
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidParam {
                field: "T".to_string(),
                reason: "horizon must be finite and > 0".to_string(),
            });
        }
        Ok(ModelSpec {
            dim_x,
            horizon,
            drift: Arc::new(|_, _, out| out.fill(0.0)),
            vol: Arc::new(|_, _, out| out.fill(0.0)),
            jump_coef: Arc::new(|_, _, _, out| out.fill(0.0)),
            big_jumps: FiniteJumpMeasure::empty(1),
            driver: DriverSpec::zero(),
            terminal: Arc::new(|_, _| 0.0),
        })
    }

    pub fn with_drift(mut self, f: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.drift = Arc::new(f);
        self
    }

    pub fn with_vol(mut self, f: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.vol = Arc::new(f);
        self
    }

    pub fn with_jumps(
        mut self,
        measure: FiniteJumpMeasure,
        beta: impl Fn(&[f64], &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.big_jumps = measure;
        self.jump_coef = Arc::new(beta);
        self
    }

    pub fn with_driver(mut self, driver: DriverSpec) -> Self {
        self.driver = driver;
        self
    }

    pub fn with_terminal(mut self, g: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.terminal = Arc::new(g);
        self
    }

    /// Sampled Lipschitz constant of drift, volatility and jump coefficient
    /// in `x` over the box `[lo, hi]^d`, at the given control value.
    ///
    /// Returns an error if any coefficient is non-finite on the sample.
    pub fn sampled_lipschitz(&self, lo: f64, hi: f64, a: &[f64], samples: usize, seed: u64) -> Result<f64> {
        let d = self.dim_x;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = vec![0.0; d];
        let mut y = vec![0.0; d];
        let (mut fx, mut fy) = (vec![0.0; d * d], vec![0.0; d * d]);
        let mut best = 0.0_f64;
        for _ in 0..samples {
            for i in 0..d {
                x[i] = rng.random_range(lo..=hi);
                y[i] = rng.random_range(lo..=hi);
            }
            let dist = libm::sqrt(x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum());
            if dist == 0.0 {
                continue;
            }
            let mut diff = 0.0;
            (self.drift)(&x, a, &mut fx[..d]);
            (self.drift)(&y, a, &mut fy[..d]);
            diff += sq_dist(&fx[..d], &fy[..d]);
            (self.vol)(&x, a, &mut fx);
            (self.vol)(&y, a, &mut fy);
            diff += sq_dist(&fx, &fy);
            for m in 0..self.big_jumps.len() {
                let mark = self.big_jumps.mark(m);
                (self.jump_coef)(&x, a, mark, &mut fx[..d]);
                (self.jump_coef)(&y, a, mark, &mut fy[..d]);
                diff += sq_dist(&fx[..d], &fy[..d]);
            }
            if !diff.is_finite() {
                return Err(Error::NonFinite("model coefficients"));
            }
            best = best.max(libm::sqrt(diff) / dist);
        }
        Ok(best)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// `g(x, a)` with a finiteness check.
pub fn terminal_payoff(model: &ModelSpec, x: &[f64], a: &[f64]) -> Result<f64> {
    let v = (model.terminal)(x, a);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("terminal payoff"))
    }
}

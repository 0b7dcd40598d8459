//! Least-squares regression on a fixed function basis, used to estimate
//! conditional expectations from simulated paths.
//!
//! Coordinates are normalized to `u = 2 (x - lo) / (hi - lo) - 1` over the
//! basis domain box before any basis function is evaluated. Points whose
//! normalized coordinate leaves `[-10, 10]` are clamped and counted.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Clamp limit on normalized coordinates (10 box half-widths).
pub const CLAMP_LIMIT: f64 = 10.0;

/// Eigenvalues of the Gram matrix below this fraction of the largest one
/// are treated as zero (singular values below ~3e-7 relative).
const RANK_TOL: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BasisKind {
    /// Monomials of total degree `<= degree` in the normalized coordinates.
    Polynomial { degree: usize },
    /// Tensor grid of `bins` equal cells per dimension, one-hot.
    PiecewiseConstant { bins: usize },
    /// Constant plus Gaussian bumps on a tensor grid of `centers` per dimension.
    Radial { centers: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisSpec {
    kind: BasisKind,
    lo: Vec<f64>,
    hi: Vec<f64>,
    exponents: Vec<Vec<u32>>,
}

fn monomial_exponents(dim: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for total in 0..=degree {
        let mut current = vec![0u32; dim];
        push_compositions(&mut out, &mut current, 0, total as u32);
    }
    out
}

fn push_compositions(out: &mut Vec<Vec<u32>>, current: &mut Vec<u32>, pos: usize, remaining: u32) {
    if pos + 1 == current.len() {
        current[pos] = remaining;
        out.push(current.clone());
        return;
    }
    for e in (0..=remaining).rev() {
        current[pos] = e;
        push_compositions(out, current, pos + 1, remaining - e);
    }
    current[pos] = 0;
}

impl BasisSpec {
    pub fn new(kind: BasisKind, lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(Error::Dimension(format!(
                "box bounds of lengths {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        if lo
            .iter()
            .zip(&hi)
            .any(|(l, h)| h.partial_cmp(l) != Some(Ordering::Greater) || !l.is_finite() || !h.is_finite())
        {
            return Err(Error::Dimension("box must satisfy lo < hi with finite bounds".into()));
        }
        match kind {
            BasisKind::PiecewiseConstant { bins: 0 } | BasisKind::Radial { centers: 0 } => {
                return Err(Error::Dimension("basis needs at least one cell".into()));
            }
            _ => {}
        }
        let exponents = match kind {
            BasisKind::Polynomial { degree } => monomial_exponents(lo.len(), degree),
            _ => Vec::new(),
        };
        Ok(BasisSpec {
            kind,
            lo,
            hi,
            exponents,
        })
    }

    /// Same kind, with the box set to the bounding box of `points` (row-major
    /// `n x d`). Degenerate extents are widened to unit length.
    pub fn fitted_to(kind: BasisKind, points: &[f64], dim: usize) -> Result<Self> {
        if dim == 0 || points.is_empty() || !points.len().is_multiple_of(dim) {
            return Err(Error::Dimension("point set must be a non-empty n x d array".into()));
        }
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for row in points.chunks_exact(dim) {
            for i in 0..dim {
                lo[i] = lo[i].min(row[i]);
                hi[i] = hi[i].max(row[i]);
            }
        }
        for i in 0..dim {
            if hi[i].partial_cmp(&lo[i]) != Some(Ordering::Greater) {
                let mid = 0.5 * (lo[i] + hi[i]);
                lo[i] = mid - 0.5;
                hi[i] = mid + 0.5;
            }
        }
        Self::new(kind, lo, hi)
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn size(&self) -> usize {
        let d = self.dim() as u32;
        match self.kind {
            BasisKind::Polynomial { .. } => self.exponents.len(),
            BasisKind::PiecewiseConstant { bins } => bins.pow(d),
            BasisKind::Radial { centers } => 1 + centers.pow(d),
        }
    }

    /// Normalized coordinate of `x` along axis `i`, before clamping.
    pub fn normalize(&self, i: usize, x: f64) -> f64 {
        2.0 * (x - self.lo[i]) / (self.hi[i] - self.lo[i]) - 1.0
    }

    /// Writes the basis row for `x` into `row`; returns `true` if `x` had to
    /// be clamped.
    pub fn eval_into(&self, x: &[f64], row: &mut [f64]) -> bool {
        let d = self.dim();
        let mut u = [0.0f64; 8];
        let mut heap;
        let u: &mut [f64] = if d <= 8 {
            &mut u[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        let mut clamped = false;
        for i in 0..d {
            let v = self.normalize(i, x[i]);
            u[i] = if v > CLAMP_LIMIT {
                clamped = true;
                CLAMP_LIMIT
            } else if v < -CLAMP_LIMIT {
                clamped = true;
                -CLAMP_LIMIT
            } else if v.is_nan() {
                clamped = true;
                0.0
            } else {
                v
            };
        }
        match self.kind {
            BasisKind::Polynomial { .. } => {
                for (r, exps) in row.iter_mut().zip(&self.exponents) {
                    let mut m = 1.0;
                    for (ui, &e) in u.iter().zip(exps) {
                        for _ in 0..e {
                            m *= ui;
                        }
                    }
                    *r = m;
                }
            }
            BasisKind::PiecewiseConstant { bins } => {
                row.fill(0.0);
                let mut idx = 0usize;
                for &ui in u.iter() {
                    let pos = libm::floor((ui + 1.0) * 0.5 * bins as f64);
                    let cell = if pos < 0.0 { 0 } else { (pos as usize).min(bins - 1) };
                    idx = idx * bins + cell;
                }
                row[idx] = 1.0;
            }
            BasisKind::Radial { centers } => {
                row[0] = 1.0;
                let spacing = if centers > 1 { 2.0 / (centers - 1) as f64 } else { 2.0 };
                let inv = 1.0 / (2.0 * spacing * spacing);
                for (b, r) in row[1..].iter_mut().enumerate() {
                    let mut rem = b;
                    let mut dist2 = 0.0;
                    for i in (0..d).rev() {
                        let c_idx = rem % centers;
                        rem /= centers;
                        let c = if centers > 1 {
                            -1.0 + spacing * c_idx as f64
                        } else {
                            0.0
                        };
                        dist2 += (u[i] - c) * (u[i] - c);
                    }
                    *r = libm::exp(-dist2 * inv);
                }
            }
        }
        clamped
    }
}

/// Basis rows for a set of points, plus how many of them were clamped.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub matrix: DMatrix<f64>,
    pub clamped: usize,
}

/// Evaluates the basis at each row of `points` (row-major `n x d`).
pub fn design_matrix(basis: &BasisSpec, points: &[f64]) -> Result<DesignMatrix> {
    let d = basis.dim();
    if points.is_empty() || !points.len().is_multiple_of(d) {
        return Err(Error::Dimension(format!(
            "{} coordinates do not form rows of length {d}",
            points.len()
        )));
    }
    let n = points.len() / d;
    let b = basis.size();
    let mut matrix = DMatrix::zeros(n, b);
    let mut row = vec![0.0; b];
    let mut clamped = 0;
    for (i, x) in points.chunks_exact(d).enumerate() {
        if basis.eval_into(x, &mut row) {
            clamped += 1;
        }
        for (j, v) in row.iter().enumerate() {
            matrix[(i, j)] = *v;
        }
    }
    Ok(DesignMatrix { matrix, clamped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub coefficients: Vec<f64>,
    pub condition_estimate: f64,
    pub n_samples: usize,
}

impl FitResult {
    pub fn zeros(size: usize) -> Self {
        FitResult {
            coefficients: vec![0.0; size],
            condition_estimate: 1.0,
            n_samples: 0,
        }
    }

    /// Fitted value at `x`; `row` is scratch of length `basis.size()`.
    pub fn eval_with(&self, basis: &BasisSpec, x: &[f64], row: &mut [f64]) -> f64 {
        basis.eval_into(x, row);
        row.iter().zip(&self.coefficients).map(|(r, c)| r * c).sum()
    }
}

/// Normal equations accumulated from scratch: returns `(D^T D, D^T y)`.
fn gram(design: &DMatrix<f64>, targets: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let b = design.ncols();
    let mut g = DMatrix::zeros(b, b);
    let mut r = DVector::zeros(b);
    for i in 0..design.nrows() {
        for p in 0..b {
            let dp = design[(i, p)];
            if dp == 0.0 {
                continue;
            }
            r[p] += dp * targets[i];
            for q in p..b {
                g[(p, q)] += dp * design[(i, q)];
            }
        }
    }
    for p in 0..b {
        for q in 0..p {
            g[(p, q)] = g[(q, p)];
        }
    }
    (g, r)
}

/// Minimizes `|D c - y|^2 + ridge |c|^2` through a symmetric eigen
/// decomposition of the normal equations. Directions with (numerically)
/// zero curvature are dropped, which yields the minimum-norm solution when
/// `ridge = 0` and `D` is rank deficient.
pub fn ls_fit(design: &DMatrix<f64>, targets: &[f64], ridge: f64) -> Result<FitResult> {
    let (n, b) = design.shape();
    if targets.len() != n {
        return Err(Error::Dimension(format!(
            "{n} design rows but {} targets",
            targets.len()
        )));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::Dimension("ridge must be finite and >= 0".into()));
    }
    if n == 0 || b == 0 {
        return Err(Error::Underdetermined { rows: n, cols: b });
    }
    if n < b && ridge == 0.0 {
        return Err(Error::Underdetermined { rows: n, cols: b });
    }
    if design.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroDesign);
    }
    if targets.iter().any(|t| !t.is_finite()) || design.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("regression inputs"));
    }
    let (mut g, r) = gram(design, targets);
    for p in 0..b {
        g[(p, p)] += ridge;
    }
    let eig = SymmetricEigen::new(g);
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let cutoff = (RANK_TOL * lmax).max(f64::MIN_POSITIVE);
    let mut coef = DVector::<f64>::zeros(b);
    let mut lmin = lmax;
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda <= cutoff {
            continue;
        }
        lmin = lmin.min(lambda);
        let v = eig.eigenvectors.column(k);
        let proj = v.dot(&r) / lambda;
        coef.axpy(proj, &v, 1.0);
    }
    if coef.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("regression coefficients"));
    }
    Ok(FitResult {
        coefficients: coef.iter().copied().collect(),
        condition_estimate: libm::sqrt(lmax / lmin).max(1.0),
        n_samples: n,
    })
}

/// Evaluates a fit at each row of `points`.
pub fn predict(fit: &FitResult, basis: &BasisSpec, points: &[f64]) -> Result<Vec<f64>> {
    if fit.coefficients.len() != basis.size() {
        return Err(Error::Dimension(format!(
            "fit has {} coefficients, basis has {} functions",
            fit.coefficients.len(),
            basis.size()
        )));
    }
    let d = basis.dim();
    if !points.len().is_multiple_of(d) {
        return Err(Error::Dimension(format!(
            "{} coordinates do not form rows of length {d}",
            points.len()
        )));
    }
    let mut row = vec![0.0; basis.size()];
    Ok(points
        .chunks_exact(d)
        .map(|x| fit.eval_with(basis, x, &mut row))
        .collect())
}

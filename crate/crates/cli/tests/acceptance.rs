//! Acceptance suite: one PASS/FAIL line per criterion at full scale.
//!
//! Criteria 6 and 7 are blocked (see `BLOCKED`): they are run as stated and
//! reported as FAIL when they fail, but do not fail the process unless
//! `ACCEPTANCE_STRICT=1` is set. Any other failure exits nonzero.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use hjb_bsde::config::ExperimentConfig;
use hjb_bsde::run::{run_experiment, RunOptions};
use hjb_bsde_core::bsde::{
    penalized_backward_sweep, projection_backward_sweep, SweepConfig, SweepOutcome, ValueEstimate, ValueSurface,
};
use hjb_bsde_core::catalog::{make_catalog_problem, ParamValue, Params, Problem};
use hjb_bsde_core::dual::{
    dual_value_estimate, extract_bang_bang_tilt, weight_martingale_check, DualEstimate, TiltSpec, WeightNormalization,
};
use hjb_bsde_core::forward::{simulate_paths, simulate_paths_with, InitialRegime, PathBundle, TimeGrid};
use hjb_bsde_core::model::{FiniteJumpMeasure, ModelSpec, RegimeSet};
use hjb_bsde_core::pde::{fd_solve_hjb, fd_value_at, Boundary, FdGrid};
use hjb_bsde_core::regression::ls_fit;
use hjb_bsde_core::stats::mean_stderr;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PATHS: usize = 100_000;
const X0: f64 = 1.0;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const BLOCKED: [u32; 2] = [6, 7];

struct Verdict {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(v: &Verdict) {
    let tag = if v.pass { "PASS" } else { "FAIL" };
    println!("{tag} [{:>2}] {}: {}", v.id, v.name, v.detail);
}

fn uncertain_vol() -> Problem {
    let mut p = Params::new();
    p.insert("M".into(), ParamValue::Number(5.0));
    p.insert("a_lo".into(), ParamValue::Number(0.1));
    p.insert("a_hi".into(), ParamValue::Number(0.3));
    make_catalog_problem("uncertain_vol", &p).unwrap()
}

fn middle(p: &Problem) -> usize {
    p.regimes.len() / 2
}

fn stratified(p: &Problem, steps: usize, seed: u64) -> PathBundle {
    let grid = TimeGrid::uniform(p.model.horizon, steps).unwrap();
    simulate_paths_with(
        &p.model,
        &p.regimes,
        &grid,
        &[X0],
        middle(p),
        InitialRegime::Stratified,
        PATHS,
        seed,
    )
    .unwrap()
}

fn penalized(p: &Problem, bundle: &PathBundle, n: f64) -> SweepOutcome {
    penalized_backward_sweep(bundle, &p.model, &p.regimes, &SweepConfig::default(), n).unwrap()
}

fn projection(p: &Problem, bundle: &PathBundle) -> SweepOutcome {
    projection_backward_sweep(bundle, &p.model, &p.regimes, &SweepConfig::default()).unwrap()
}

/// `max_j v - min_j v` over interior atoms at `(0, x0)`.
fn interior_spread(surface: &ValueSurface) -> f64 {
    let vals: Vec<f64> = surface
        .regimes()
        .interior_atoms()
        .map(|j| surface.value(0, &[X0], j))
        .collect();
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    hi - lo
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let p = make_catalog_problem("linear", &Params::new()).unwrap();
    let grid = TimeGrid::uniform(1.0, 10).unwrap();
    let bundle = simulate_paths(&p.model, &p.regimes, &grid, &[X0], 0, PATHS, 1).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for n in [0.0, 1.0, 10.0] {
        let e = penalized(&p, &bundle, n).estimate;
        pass &= (e.mean - 1.0).abs() <= 3.0 * e.stderr && e.stderr <= 0.01;
        parts.push(format!("n={n}: {:.5} ± {:.5}", e.mean, e.stderr));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 30.0;
    Verdict {
        id: 1,
        name: "linear Feynman-Kac",
        pass,
        detail: format!("{}; {secs:.1} s (limit 30 s)", parts.join(", ")),
    }
}

struct Criterion2 {
    verdict: Verdict,
    bundle: PathBundle,
    n100: SweepOutcome,
}

fn criterion_2(p: &Problem) -> Criterion2 {
    let start = Instant::now();
    let grid = FdGrid::new(&p.model, &p.regimes, -2.0, 4.0, 400, None, Boundary::default()).unwrap();
    let fd = fd_value_at(&fd_solve_hjb(&p.model, &p.regimes, &grid).unwrap(), 0.0, X0).unwrap();
    let proj = projection(p, &stratified(p, 50, 7)).estimate;
    // n = 100 needs N = 100 for n * dt <= 1.
    let bundle = stratified(p, 100, SEEDS[0]);
    let n100 = penalized(p, &bundle, 100.0);
    let secs = start.elapsed().as_secs_f64();
    let pen = &n100.estimate;
    let pass =
        (fd - 1.09).abs() <= 5e-3 && (proj.mean - fd).abs() <= 0.02 && (pen.mean - fd).abs() <= 0.03 && secs < 300.0;
    Criterion2 {
        verdict: Verdict {
            id: 2,
            name: "uncertain volatility",
            pass,
            detail: format!(
                "fd {fd:.5}; projection(N=50) {:.5} ± {:.5}; penalized(n=100, N=100) {:.5} ± {:.5}; {secs:.1} s (limit 300 s)",
                proj.mean, proj.stderr, pen.mean, pen.stderr
            ),
        },
        bundle,
        n100,
    }
}

/// Everything criteria 3 to 5 need from one seed of problem 2 at N = 100.
struct SeedRun {
    levels: Vec<(f64, ValueEstimate, f64)>,
    spread_1: f64,
    spread_100: f64,
    projection: ValueEstimate,
    duals: Vec<(&'static str, DualEstimate)>,
}

fn seed_run(p: &Problem, seed: u64, reuse: Option<(PathBundle, SweepOutcome)>) -> SeedRun {
    let (bundle, n100) = match reuse {
        Some(r) => r,
        None => {
            let b = stratified(p, 100, seed);
            let o = penalized(p, &b, 100.0);
            (b, o)
        }
    };
    let mut levels = Vec::new();
    let mut spread_1 = f64::NAN;
    let mut bang_bang = None;
    for n in [0.0, 1.0, 10.0] {
        let out = penalized(p, &bundle, n);
        if n == 1.0 {
            spread_1 = interior_spread(&out.surface);
        }
        if n == 10.0 {
            bang_bang = Some(extract_bang_bang_tilt(&out.surface, n).unwrap());
        }
        levels.push((n, out.estimate, out.constraint.positive_part_integral));
    }
    levels.push((100.0, n100.estimate.clone(), n100.constraint.positive_part_integral));
    let spread_100 = interior_spread(&n100.surface);
    let projection = projection(p, &bundle).estimate;
    drop(bundle);

    let dual_bundle = simulate_paths(
        &p.model,
        &p.regimes,
        &TimeGrid::uniform(1.0, 100).unwrap(),
        &[X0],
        middle(p),
        PATHS,
        seed + 100,
    )
    .unwrap();
    let tilts = [
        ("nu=1", TiltSpec::identity()),
        ("nu=2", TiltSpec::constant(2.0).unwrap()),
        ("nu=8", TiltSpec::constant(8.0).unwrap()),
        ("bang-bang(n=10)", bang_bang.unwrap()),
    ];
    let duals = tilts
        .into_iter()
        .map(|(name, t)| {
            let est =
                dual_value_estimate(&dual_bundle, &p.model, &p.regimes, &t, WeightNormalization::default()).unwrap();
            (name, est)
        })
        .collect();
    SeedRun {
        levels,
        spread_1,
        spread_100,
        projection,
        duals,
    }
}

fn criterion_3(run: &SeedRun) -> Verdict {
    let mut pass = true;
    for (i, (_, ei, pi)) in run.levels.iter().enumerate() {
        for (_, ej, pj) in &run.levels[i + 1..] {
            pass &= ej.mean >= ei.mean - 3.0 * ei.pooled_stderr(ej);
            pass &= pj <= pi;
        }
    }
    let table: Vec<String> = run
        .levels
        .iter()
        .map(|(n, e, pp)| format!("n={n}: {:.5} ± {:.5} [R]+ {pp:.5}", e.mean, e.stderr))
        .collect();
    Verdict {
        id: 3,
        name: "penalization monotonicity",
        pass,
        detail: table.join("; "),
    }
}

fn criterion_4(runs: &[SeedRun]) -> Verdict {
    let k = runs.len() as f64;
    let s1 = runs.iter().map(|r| r.spread_1).sum::<f64>() / k;
    let s100 = runs.iter().map(|r| r.spread_100).sum::<f64>() / k;
    Verdict {
        id: 4,
        name: "a-independence",
        pass: s100 <= 0.05 && s100 < s1,
        detail: format!(
            "mean interior spread n=100 {s100:.5} (limit 0.05), n=1 {s1:.5}, over {} seeds",
            runs.len()
        ),
    }
}

fn criterion_5(runs: &[SeedRun]) -> Verdict {
    let mut dominated = true;
    let mut worst = f64::NEG_INFINITY;
    for r in runs {
        for (_, d) in &r.duals {
            let margin = (d.estimate.mean - r.projection.mean) / d.estimate.pooled_stderr(&r.projection);
            worst = worst.max(margin);
            dominated &= margin <= 3.0;
        }
    }
    let k = runs.len() as f64;
    let avg = |name: &str| {
        runs.iter()
            .map(|r| r.duals.iter().find(|(n, _)| *n == name).unwrap().1.estimate.mean)
            .sum::<f64>()
            / k
    };
    let (bb, one) = (avg("bang-bang(n=10)"), avg("nu=1"));
    let means: Vec<String> = ["nu=1", "nu=2", "nu=8", "bang-bang(n=10)"]
        .iter()
        .map(|n| format!("{n} {:.5}", avg(n)))
        .collect();
    Verdict {
        id: 5,
        name: "dual domination",
        pass: dominated && bb > one,
        detail: format!(
            "seed-averaged {}; worst (dual - projection)/pooled se {worst:.2} (limit 3)",
            means.join(", ")
        ),
    }
}

fn criterion_6(p: &Problem) -> Verdict {
    let grid = TimeGrid::uniform(1.0, 50).unwrap();
    let bundle = simulate_paths(&p.model, &p.regimes, &grid, &[X0], middle(p), PATHS, 66).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for nu in [2.0, 11.0] {
        let c = weight_martingale_check(&bundle, &p.regimes, &TiltSpec::constant(nu).unwrap()).unwrap();
        pass &= (c.mean - 1.0).abs() <= 3.0 * c.stderr;
        parts.push(format!("nu={nu}: E[L] {:.4} ± {:.4}", c.mean, c.stderr));
    }
    Verdict {
        id: 6,
        name: "Girsanov weight martingale",
        pass,
        detail: parts.join(", "),
    }
}

fn criterion_7() -> Verdict {
    let p = make_catalog_problem("controlled_drift", &Params::new()).unwrap();
    let grid = FdGrid::new(&p.model, &p.regimes, -4.0, 6.0, 201, None, Boundary::default()).unwrap();
    let fd = fd_value_at(&fd_solve_hjb(&p.model, &p.regimes, &grid).unwrap(), 0.0, X0).unwrap();
    let target = X0 + p.model.horizon;
    let m = p.regimes.len();
    let bundle = simulate_paths(
        &p.model,
        &p.regimes,
        &TimeGrid::uniform(1.0, 20).unwrap(),
        &[X0],
        m / 2,
        PATHS,
        77,
    )
    .unwrap();
    let mut best: Option<(String, DualEstimate)> = None;
    let mut kappa = 1.0;
    while kappa <= 256.0 {
        let est = dual_value_estimate(
            &bundle,
            &p.model,
            &p.regimes,
            &TiltSpec::toward(m, m - 1, kappa).unwrap(),
            WeightNormalization::default(),
        )
        .unwrap();
        if best.as_ref().is_none_or(|(_, b)| est.estimate.mean > b.estimate.mean) {
            best = Some((format!("toward top atom, kappa={kappa}"), est));
        }
        kappa *= 2.0;
    }
    let (label, est) = best.unwrap();
    Verdict {
        id: 7,
        name: "controlled drift",
        pass: (fd - target).abs() <= 0.01 && (est.estimate.mean - fd).abs() <= 0.05,
        detail: format!(
            "fd {fd:.5} (target {target}); best dual {:.4} ± {:.4} ({label}, ESS {:.0}, limit |dual - fd| <= 0.05)",
            est.estimate.mean, est.estimate.stderr, est.effective_sample_size
        ),
    }
}

fn criterion_8() -> Verdict {
    let measure = FiniteJumpMeasure::new(vec![vec![1.0]], vec![1.0]).unwrap();
    let model = ModelSpec::new(1, 1.0)
        .unwrap()
        .with_jumps(measure, |_, _, _, o| o[0] = 0.5);
    let regimes = RegimeSet::singleton(vec![0.0], 1.0).unwrap();
    let grid = TimeGrid::uniform(1.0, 20).unwrap();
    let bundle = simulate_paths(&model, &regimes, &grid, &[X0], 0, PATHS, 8).unwrap();
    let terminal: Vec<f64> = bundle.live_paths().map(|q| bundle.x(q, 20)[0]).collect();
    let (mean, se) = mean_stderr(&terminal);
    Verdict {
        id: 8,
        name: "compensated jump martingale",
        pass: (mean - X0).abs() <= 3.0 * se,
        detail: format!("mean X_T {mean:.5} ± {se:.5} vs x0 {X0}"),
    }
}

const DETERMINISM_CONFIG: &str = r#"{
  "problem": {"name": "uncertain_vol", "params": {"M": 5}},
  "grid": {"steps": 20},
  "x0": [1.0],
  "paths": 20000,
  "seed": 9,
  "penalties": [0, 1, 10, 20],
  "schemes": ["penalized", "projection", "dual", "fd"],
  "tilts": [{"kind": "constant", "kappa": 2}, {"kind": "toward", "atom": 4, "kappa": 8}, {"kind": "bang_bang", "penalty": 10}],
  "fd": {"x_min": -2.0, "x_max": 4.0, "nx": 201},
  "output": {"surface": true}
}"#;

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let name = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((name, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_9() -> Verdict {
    let resolved = ExperimentConfig::from_json(DETERMINISM_CONFIG)
        .unwrap()
        .resolve()
        .unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let run = |workers: usize, name: &str| {
        let dir = tmp.path().join(name);
        run_experiment(
            &resolved,
            &RunOptions {
                out_dir: Some(dir.clone()),
                dump_paths: true,
                workers: Some(workers),
            },
        )
        .unwrap();
        artifacts(&dir)
    };
    let one = run(1, "w1");
    let eight = run(8, "w8");
    let again = run(8, "w8b");
    let bytes: usize = one.iter().map(|(_, b)| b.len()).sum();
    Verdict {
        id: 9,
        name: "determinism",
        pass: one == eight && eight == again,
        detail: format!(
            "{} artifact files, {bytes} bytes, identical for 1 and 8 workers and on rerun",
            one.len()
        ),
    }
}

/// One-sided Jacobi SVD: returns `(U * S, V)` with orthogonal columns in `U * S`.
fn jacobi_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut u = a.clone();
    let n = a.ncols();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _ in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = u.column(p).norm_squared();
                let beta = u.column(q).norm_squared();
                let gamma = u.column(p).dot(&u.column(q));
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for m in [&mut u, &mut v] {
                    for r in 0..m.nrows() {
                        let (xp, xq) = (m[(r, p)], m[(r, q)]);
                        m[(r, p)] = c * xp - s * xq;
                        m[(r, q)] = s * xp + c * xq;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    (u, v)
}

/// Minimum-norm least squares via the SVD pseudo-inverse.
fn svd_min_norm(a: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let (us, v) = jacobi_svd(a);
    let sigmas: Vec<f64> = (0..us.ncols()).map(|j| us.column(j).norm()).collect();
    let cutoff = 1e-10 * sigmas.iter().copied().fold(0.0, f64::max);
    let mut x = vec![0.0; a.ncols()];
    for (j, &s) in sigmas.iter().enumerate() {
        if s <= cutoff {
            continue;
        }
        let proj: f64 = us.column(j).iter().zip(b).map(|(u, y)| u * y).sum::<f64>() / (s * s);
        for (i, xi) in x.iter_mut().enumerate() {
            *xi += v[(i, j)] * proj;
        }
    }
    x
}

fn criterion_10() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0_f64;
    for trial in 0..50 {
        let rows = 30 + trial % 20;
        let rank = 2 + trial % 4;
        let cols = rank + 1 + trial % 3;
        let base = DMatrix::from_fn(rows, rank, |_, _| rng.random_range(-1.0..1.0));
        let mix = DMatrix::from_fn(rank, cols, |_, _| rng.random_range(-1.0..1.0));
        let design = &base * &mix;
        let targets: Vec<f64> = (0..rows).map(|_| rng.random_range(-2.0..2.0)).collect();
        let fit = ls_fit(&design, &targets, 0.0).unwrap();
        let oracle = svd_min_norm(&design, &targets);
        let scale = 1.0 + oracle.iter().map(|c| c * c).sum::<f64>().sqrt();
        let err = fit
            .coefficients
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / scale;
        worst = worst.max(err);
    }
    Verdict {
        id: 10,
        name: "regression oracle",
        pass: worst <= 1e-8,
        detail: format!("50 rank-deficient designs, worst relative deviation from SVD oracle {worst:.2e} (limit 1e-8)"),
    }
}

fn main() -> ExitCode {
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut verdicts = Vec::new();
    let mut record = |v: Verdict| {
        report(&v);
        verdicts.push(v);
    };

    record(criterion_1());
    let p = uncertain_vol();
    let c2 = criterion_2(&p);
    record(c2.verdict);
    let mut reuse = Some((c2.bundle, c2.n100));
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| seed_run(&p, s, reuse.take())).collect();
    record(criterion_3(&runs[0]));
    record(criterion_4(&runs));
    record(criterion_5(&runs));
    record(criterion_6(&p));
    record(criterion_7());
    record(criterion_8());
    record(criterion_9());
    record(criterion_10());

    let failed: Vec<u32> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    let unexpected: Vec<u32> = failed
        .iter()
        .copied()
        .filter(|id| strict || !BLOCKED.contains(id))
        .collect();
    println!(
        "acceptance: {} of {} criteria pass; failed {:?}; blocked {:?}",
        verdicts.len() - failed.len(),
        verdicts.len(),
        failed,
        BLOCKED
    );
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("acceptance: unexpected failures {unexpected:?}");
        ExitCode::FAILURE
    }
}

//! Experiment pipeline and CSV artifacts.
//!
//! Files written to the output directory:
//!
//! | file             | columns                                                        |
//! |------------------|----------------------------------------------------------------|
//! | `summary.csv`    | `scheme,penalty,mean,stderr,n_paths,wall_time`                 |
//! | `constraint.csv` | `penalty,k,t,positive_part,cumulative`                         |
//! | `dual.csv`       | `tilt,bound,ess,low_ess`                                       |
//! | `surface.csv`    | `scheme,penalty,k,t,atom,lo_1..,hi_1..,c0..` (opt-in)          |
//! | `fd.csv`         | `t,x,value,argmax_atom`                                        |
//! | `paths.csv`      | `path,k,t,x_1..,regime_atom` (opt-in)                          |
//! | `tilts/*.csv`    | `atom_from,atom_to,kappa`, one per table-valued tilt           |
//!
//! `penalty` is `inf` for the projection scheme and `NA` where it does not
//! apply. `wall_time` is `NA` unless timing is requested.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hjb_bsde_core::bsde::{
    penalized_backward_sweep, projection_backward_sweep, ConstraintReport, SweepConfig, SweepOutcome, ValueSurface,
};
use hjb_bsde_core::dual::{dual_value_estimate, extract_bang_bang_tilt, TiltSpec, WeightNormalization};
use hjb_bsde_core::forward::{simulate_paths_with, InitialRegime, PathBundle};
use hjb_bsde_core::pde::{fd_solve_hjb, fd_value_at, FdGrid, FdSolution};
use serde::{Deserialize, Serialize};

use crate::config::{Resolved, SchemeName, TiltConfig};
use crate::{CliError, CliResult};

/// Added to the seed for the fixed-start bundle used by the dual estimator.
pub const DUAL_SEED_OFFSET: u64 = 0x5_DEEC_E66D;

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scheme: String,
    pub penalty: String,
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub wall_time: String,
}

impl SummaryRow {
    /// Numeric penalty level; `None` for rows without one.
    pub fn penalty_level(&self) -> Option<f64> {
        self.penalty.parse().ok()
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub dump_paths: bool,
    pub workers: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub rows: Vec<SummaryRow>,
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn fmt_penalty(n: f64) -> String {
    if n.is_infinite() {
        "inf".into()
    } else {
        n.to_string()
    }
}

fn file_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' })
        .collect()
}

struct Csv {
    path: PathBuf,
    writer: csv::Writer<std::fs::File>,
}

impl Csv {
    fn create(dir: &Path, name: &str, header: &[String]) -> CliResult<Self> {
        let path = dir.join(name);
        let mut writer =
            csv::Writer::from_path(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        writer
            .write_record(header)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        Ok(Csv { path, writer })
    }

    fn row<I: IntoIterator<Item = String>>(&mut self, fields: I) -> CliResult<()> {
        self.writer
            .write_record(fields.into_iter().collect::<Vec<_>>())
            .map_err(|e| CliError::Runtime(format!("{}: {e}", self.path.display())))
    }

    fn finish(mut self) -> CliResult<()> {
        self.writer.flush().map_err(|e| CliError::io(self.path.display(), e))
    }
}

fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Runs every requested scheme and writes the artifacts.
pub fn run_experiment(resolved: &Resolved, opts: &RunOptions) -> CliResult<RunReport> {
    let cfg = &resolved.config;
    let out_dir = opts
        .out_dir
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::io(out_dir.display(), e))?;
    let workers = opts.workers.or(cfg.workers);
    let rows = match workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(runtime)?;
            pool.install(|| pipeline(resolved, opts, &out_dir))?
        }
        None => pipeline(resolved, opts, &out_dir)?,
    };
    Ok(RunReport { out_dir, rows })
}

struct Timed<T> {
    value: T,
    seconds: f64,
}

fn timed<T>(f: impl FnOnce() -> CliResult<T>) -> CliResult<Timed<T>> {
    let start = Instant::now();
    let value = f()?;
    Ok(Timed {
        value,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn pipeline(resolved: &Resolved, opts: &RunOptions, dir: &Path) -> CliResult<Vec<SummaryRow>> {
    let cfg = &resolved.config;
    let model = &resolved.problem.model;
    let regimes = &resolved.problem.regimes;
    let mut schemes = cfg.schemes.clone();
    schemes.sort();
    schemes.dedup();
    let wall = |s: f64| {
        if cfg.output.wall_time {
            format!("{s:.3}")
        } else {
            "NA".into()
        }
    };

    let sweep_cfg = SweepConfig {
        basis: cfg.basis.into(),
        ridge: cfg.ridge,
        min_paths: cfg.min_paths,
        control_variate: cfg.control_variate,
    };
    let needs_bundle = schemes
        .iter()
        .any(|s| matches!(s, SchemeName::Penalized | SchemeName::Projection))
        || cfg.tilts.iter().any(|t| matches!(t, TiltConfig::BangBang { .. }))
        || opts.dump_paths
        || cfg.output.paths;
    let bundle = if needs_bundle {
        Some(
            simulate_paths_with(
                model,
                regimes,
                &resolved.grid,
                &cfg.x0,
                resolved.initial_atom,
                resolved.start,
                cfg.paths,
                cfg.seed,
            )
            .map_err(runtime)?,
        )
    } else {
        None
    };

    let mut rows = Vec::new();
    let mut constraints: Vec<(f64, ConstraintReport)> = Vec::new();
    let mut surfaces: Vec<(String, f64, ValueSurface)> = Vec::new();
    let mut penalized: BTreeMap<u64, ValueSurface> = BTreeMap::new();
    let sweep_bundle = || bundle.as_ref().ok_or_else(|| runtime("no path bundle"));

    for scheme in &schemes {
        match scheme {
            SchemeName::Penalized => {
                for &n in &cfg.penalties {
                    let run = timed(|| {
                        penalized_backward_sweep(sweep_bundle()?, model, regimes, &sweep_cfg, n).map_err(runtime)
                    })?;
                    let SweepOutcome {
                        surface,
                        estimate,
                        constraint,
                        ..
                    } = run.value;
                    rows.push(SummaryRow {
                        scheme: "penalized".into(),
                        penalty: fmt_penalty(n),
                        mean: estimate.mean,
                        stderr: estimate.stderr,
                        n_paths: estimate.n_paths,
                        wall_time: wall(run.seconds),
                    });
                    constraints.push((n, constraint));
                    if cfg.output.surface {
                        surfaces.push(("penalized".into(), n, surface.clone()));
                    }
                    penalized.insert(n.to_bits(), surface);
                }
            }
            SchemeName::Projection => {
                let run =
                    timed(|| projection_backward_sweep(sweep_bundle()?, model, regimes, &sweep_cfg).map_err(runtime))?;
                let out = run.value;
                rows.push(SummaryRow {
                    scheme: "projection".into(),
                    penalty: fmt_penalty(f64::INFINITY),
                    mean: out.estimate.mean,
                    stderr: out.estimate.stderr,
                    n_paths: out.estimate.n_paths,
                    wall_time: wall(run.seconds),
                });
                constraints.push((f64::INFINITY, out.constraint));
                if cfg.output.surface {
                    surfaces.push(("projection".into(), f64::INFINITY, out.surface));
                }
            }
            SchemeName::Dual => {
                let dual_bundle = simulate_paths_with(
                    model,
                    regimes,
                    &resolved.grid,
                    &cfg.x0,
                    resolved.initial_atom,
                    InitialRegime::Fixed,
                    cfg.paths,
                    cfg.seed.wrapping_add(DUAL_SEED_OFFSET),
                )
                .map_err(runtime)?;
                let mut dual_csv = Csv::create(dir, "dual.csv", &header(&["tilt", "bound", "ess", "low_ess"]))?;
                for tilt_cfg in &cfg.tilts {
                    let label = tilt_cfg.label();
                    let run = timed(|| {
                        let tilt = build_tilt(tilt_cfg, resolved, &sweep_cfg, sweep_bundle, &penalized)?;
                        if let Some((m, entries)) = tilt.table_entries() {
                            write_tilt_table(&dir.join("tilts"), &label, m, entries)?;
                        }
                        let est =
                            dual_value_estimate(&dual_bundle, model, regimes, &tilt, WeightNormalization::default())
                                .map_err(runtime)?;
                        Ok((tilt.bound(), est))
                    })?;
                    let (bound, est) = run.value;
                    rows.push(SummaryRow {
                        scheme: format!("dual:{label}"),
                        penalty: "NA".into(),
                        mean: est.estimate.mean,
                        stderr: est.estimate.stderr,
                        n_paths: est.estimate.n_paths,
                        wall_time: wall(run.seconds),
                    });
                    dual_csv.row([
                        label,
                        bound.to_string(),
                        est.effective_sample_size.to_string(),
                        est.low_ess.to_string(),
                    ])?;
                }
                dual_csv.finish()?;
            }
            SchemeName::Fd => {
                let fd = resolved.fd.ok_or_else(|| runtime("fd settings missing"))?;
                let run = timed(|| {
                    let grid = FdGrid::new(model, regimes, fd.x_min, fd.x_max, fd.nx, fd.nt, fd.boundary)
                        .map_err(|e| CliError::Config(format!("`fd`: {e}")))?;
                    let sol = fd_solve_hjb(model, regimes, &grid).map_err(runtime)?;
                    let value = fd_value_at(&sol, 0.0, cfg.x0[0]).map_err(runtime)?;
                    Ok((sol, value))
                })?;
                let (sol, value) = run.value;
                rows.push(SummaryRow {
                    scheme: "fd".into(),
                    penalty: "NA".into(),
                    mean: value,
                    stderr: 0.0,
                    n_paths: 0,
                    wall_time: wall(run.seconds),
                });
                write_fd(dir, &sol, resolved.grid.steps())?;
            }
        }
    }

    let mut summary = Csv::create(
        dir,
        "summary.csv",
        &header(&["scheme", "penalty", "mean", "stderr", "n_paths", "wall_time"]),
    )?;
    for r in &rows {
        summary.row([
            r.scheme.clone(),
            r.penalty.clone(),
            r.mean.to_string(),
            r.stderr.to_string(),
            r.n_paths.to_string(),
            r.wall_time.clone(),
        ])?;
    }
    summary.finish()?;
    write_constraints(dir, &constraints, resolved)?;
    if cfg.output.surface {
        write_surfaces(dir, &surfaces)?;
    }
    if opts.dump_paths || cfg.output.paths {
        write_paths(dir, sweep_bundle()?)?;
    }
    Ok(rows)
}

fn build_tilt<'b>(
    tilt: &TiltConfig,
    resolved: &Resolved,
    sweep_cfg: &SweepConfig,
    bundle: impl Fn() -> CliResult<&'b PathBundle>,
    penalized: &BTreeMap<u64, ValueSurface>,
) -> CliResult<TiltSpec> {
    let m = resolved.problem.regimes.len();
    let config_err = |e: hjb_bsde_core::Error| CliError::Config(format!("`tilts` ({}): {e}", tilt.label()));
    match tilt {
        TiltConfig::Constant { kappa } if *kappa == 1.0 => Ok(TiltSpec::identity()),
        TiltConfig::Constant { kappa } => TiltSpec::constant(*kappa).map_err(config_err),
        TiltConfig::Toward { atom, kappa } => TiltSpec::toward(m, *atom, *kappa).map_err(config_err),
        TiltConfig::Table { file } => {
            let (entries, bound) = read_tilt_table(file, m)?;
            TiltSpec::table(m, entries, bound).map_err(config_err)
        }
        TiltConfig::BangBang { penalty } => {
            let fresh;
            let surface = match penalized.get(&penalty.to_bits()) {
                Some(s) => s,
                None => {
                    fresh = penalized_backward_sweep(
                        bundle()?,
                        &resolved.problem.model,
                        &resolved.problem.regimes,
                        sweep_cfg,
                        *penalty,
                    )
                    .map_err(runtime)?
                    .surface;
                    &fresh
                }
            };
            extract_bang_bang_tilt(surface, *penalty).map_err(runtime)
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TiltEntry {
    atom_from: usize,
    atom_to: usize,
    kappa: f64,
}

/// Reads an `atom_from,atom_to,kappa` table; returns row-major entries and their bound.
pub fn read_tilt_table(path: &Path, atoms: usize) -> CliResult<(Vec<f64>, f64)> {
    let malformed = |e: &dyn std::fmt::Display| CliError::Config(format!("tilt table {}: {e}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| malformed(&e))?;
    let mut entries = vec![1.0; atoms * atoms];
    for rec in reader.deserialize::<TiltEntry>() {
        let e = rec.map_err(|e| malformed(&e))?;
        if e.atom_from >= atoms || e.atom_to >= atoms {
            return Err(malformed(&format!(
                "pair ({}, {}) outside {atoms} atoms",
                e.atom_from, e.atom_to
            )));
        }
        entries[e.atom_from * atoms + e.atom_to] = e.kappa;
    }
    let bound = entries.iter().copied().fold(1.0, f64::max);
    Ok((entries, bound))
}

fn write_tilt_table(dir: &Path, label: &str, atoms: usize, entries: &[f64]) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))?;
    let mut out = Csv::create(
        dir,
        &format!("{}.csv", file_label(label)),
        &header(&["atom_from", "atom_to", "kappa"]),
    )?;
    for from in 0..atoms {
        for to in (0..atoms).filter(|&to| to != from) {
            out.row([from.to_string(), to.to_string(), entries[from * atoms + to].to_string()])?;
        }
    }
    out.finish()
}

fn write_constraints(dir: &Path, reports: &[(f64, ConstraintReport)], resolved: &Resolved) -> CliResult<()> {
    let grid = &resolved.grid;
    let mut out = Csv::create(
        dir,
        "constraint.csv",
        &header(&["penalty", "k", "t", "positive_part", "cumulative"]),
    )?;
    for (n, report) in reports {
        let mut cumulative = 0.0;
        for (k, &v) in report.per_step.iter().enumerate() {
            cumulative += grid.dt(k) * v;
            out.row([
                fmt_penalty(*n),
                k.to_string(),
                grid.t(k).to_string(),
                v.to_string(),
                cumulative.to_string(),
            ])?;
        }
    }
    out.finish()
}

fn write_surfaces(dir: &Path, surfaces: &[(String, f64, ValueSurface)]) -> CliResult<()> {
    let Some((_, _, first)) = surfaces.first() else {
        return Ok(());
    };
    let d = first.model().dim_x;
    let mut names = header(&["scheme", "penalty", "k", "t", "atom"]);
    names.extend((1..=d).map(|i| format!("lo_{i}")));
    names.extend((1..=d).map(|i| format!("hi_{i}")));
    names.extend((0..first.basis_size()).map(|i| format!("c{i}")));
    let mut out = Csv::create(dir, "surface.csv", &names)?;
    for (scheme, n, s) in surfaces {
        for k in 0..s.grid().steps() {
            let basis = s.basis(k);
            for j in 0..s.regimes().len() {
                let mut fields = vec![
                    scheme.clone(),
                    fmt_penalty(*n),
                    k.to_string(),
                    s.grid().t(k).to_string(),
                    j.to_string(),
                ];
                fields.extend(basis.lo().iter().map(f64::to_string));
                fields.extend(basis.hi().iter().map(f64::to_string));
                fields.extend(s.fit(k, j).coefficients.iter().map(f64::to_string));
                out.row(fields)?;
            }
        }
    }
    out.finish()
}

fn write_fd(dir: &Path, sol: &FdSolution, mc_steps: usize) -> CliResult<()> {
    let g = sol.grid();
    let stride = (g.nt() / mc_steps.max(1)).max(1);
    let mut out = Csv::create(dir, "fd.csv", &header(&["t", "x", "value", "argmax_atom"]))?;
    let mut ks: Vec<usize> = (0..=g.nt()).step_by(stride).collect();
    if ks.last() != Some(&g.nt()) {
        ks.push(g.nt());
    }
    for k in ks {
        for (i, (v, a)) in sol.slice(k).iter().zip(sol.controls(k)).enumerate() {
            out.row([g.t(k).to_string(), g.x(i).to_string(), v.to_string(), a.to_string()])?;
        }
    }
    out.finish()
}

fn write_paths(dir: &Path, bundle: &PathBundle) -> CliResult<()> {
    let d = bundle.dim_x();
    let mut names = header(&["path", "k", "t"]);
    names.extend((1..=d).map(|i| format!("x_{i}")));
    names.push("regime_atom".into());
    let mut out = Csv::create(dir, "paths.csv", &names)?;
    let grid = bundle.grid();
    for p in 0..bundle.n_paths() {
        for k in 0..=grid.steps() {
            let mut fields = vec![p.to_string(), k.to_string(), grid.t(k).to_string()];
            fields.extend(bundle.x(p, k).iter().map(f64::to_string));
            fields.push(bundle.regime(p, k).to_string());
            out.row(fields)?;
        }
    }
    out.finish()
}

/// Reads `summary.csv` rows.
pub fn read_summary(path: &Path) -> CliResult<Vec<SummaryRow>> {
    let malformed = |e: &dyn std::fmt::Display| CliError::Malformed(format!("{}: {e}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => CliError::Runtime(format!("{}: {e}", path.display())),
        _ => malformed(&e),
    })?;
    let expected = ["scheme", "penalty", "mean", "stderr", "n_paths", "wall_time"];
    let found = reader.headers().map_err(|e| malformed(&e))?.clone();
    if found.iter().ne(expected) {
        return Err(malformed(&format!(
            "header {:?}, expected {:?}",
            found.iter().collect::<Vec<_>>(),
            expected
        )));
    }
    reader.deserialize().map(|r| r.map_err(|e| malformed(&e))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn penalty_formatting() {
        assert_eq!(fmt_penalty(10.0), "10");
        assert_eq!(fmt_penalty(0.5), "0.5");
        assert_eq!(fmt_penalty(f64::INFINITY), "inf");
        let row = SummaryRow {
            scheme: "projection".into(),
            penalty: "inf".into(),
            mean: 1.0,
            stderr: 0.1,
            n_paths: 3,
            wall_time: "NA".into(),
        };
        assert_eq!(row.penalty_level(), Some(f64::INFINITY));
        assert_eq!(
            SummaryRow {
                penalty: "NA".into(),
                ..row
            }
            .penalty_level(),
            None
        );
    }

    #[test]
    fn file_labels_are_path_safe() {
        assert_eq!(file_label("toward:4:64"), "toward_4_64");
        assert_eq!(file_label("constant:0.5"), "constant_0.5");
    }

    #[test]
    fn tilt_table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![1.0, 3.0, 0.5, 1.0];
        write_tilt_table(dir.path(), "t", 2, &entries).unwrap();
        let (back, bound) = read_tilt_table(&dir.path().join("t.csv"), 2).unwrap();
        assert_eq!(back, entries);
        assert_eq!(bound, 3.0);
        assert!(read_tilt_table(&dir.path().join("t.csv"), 1).is_err());
    }
}

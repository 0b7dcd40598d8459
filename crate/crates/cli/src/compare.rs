//! Cross-checks over one or more `summary.csv` files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hjb_bsde_core::bsde::{monotonicity_in_n, PenaltyLevel, Scheme, ValueEstimate};

use crate::run::{read_summary, SummaryRow};
use crate::{CliError, CliResult};

/// Dual rows may exceed the projection row by at most this many pooled stderrs.
pub const DOMINATION_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone)]
pub struct CompareRow {
    pub file: PathBuf,
    pub row: SummaryRow,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
}

impl CompareReport {
    pub fn flagged(&self) -> usize {
        self.rows.iter().filter(|r| !r.flags.is_empty()).count()
    }

    pub fn passed(&self) -> bool {
        self.flagged() == 0
    }

    /// Merged table as CSV text with a trailing `flags` column.
    pub fn render(&self) -> String {
        let mut out = String::from("file,scheme,penalty,mean,stderr,n_paths,flags\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.file.display(),
                r.row.scheme,
                r.row.penalty,
                r.row.mean,
                r.row.stderr,
                r.row.n_paths,
                r.flags.join(";")
            );
        }
        out
    }
}

fn estimate(row: &SummaryRow, level: PenaltyLevel) -> ValueEstimate {
    ValueEstimate {
        mean: row.mean,
        stderr: row.stderr,
        n_paths: row.n_paths,
        scheme: match level {
            PenaltyLevel::Finite(n) => Scheme::Penalized(n),
            PenaltyLevel::Projection => Scheme::Projection,
        },
    }
}

/// Flags the rows of one file.
pub fn check_rows(file: &Path, rows: Vec<SummaryRow>) -> Vec<CompareRow> {
    let mut out: Vec<CompareRow> = rows
        .into_iter()
        .map(|row| CompareRow {
            file: file.to_path_buf(),
            row,
            flags: Vec::new(),
        })
        .collect();

    let mut ladder: Vec<(usize, PenaltyLevel)> = out
        .iter()
        .enumerate()
        .filter_map(|(i, r)| match (r.row.scheme.as_str(), r.row.penalty_level()) {
            ("penalized", Some(n)) if n.is_finite() => Some((i, PenaltyLevel::Finite(n))),
            ("projection", _) => Some((i, PenaltyLevel::Projection)),
            _ => None,
        })
        .collect();
    ladder.sort_by(|a, b| a.1.as_f64().total_cmp(&b.1.as_f64()));
    let estimates: Vec<(PenaltyLevel, ValueEstimate)> = ladder
        .iter()
        .map(|&(i, level)| (level, estimate(&out[i].row, level)))
        .collect();
    for (lo, hi) in monotonicity_in_n(&estimates).violations {
        let (i, _) = ladder[hi];
        let below = out[ladder[lo].0].row.penalty.clone();
        out[i].flags.push(format!("not_monotone_vs_{below}"));
    }

    let projection = out.iter().find(|r| r.row.scheme == "projection").map(|r| r.row.clone());
    if let Some(p) = projection {
        for r in out.iter_mut().filter(|r| r.row.scheme.starts_with("dual")) {
            let pooled = (r.row.stderr.powi(2) + p.stderr.powi(2)).sqrt();
            if r.row.mean > p.mean + DOMINATION_SIGMAS * pooled {
                r.flags.push("dual_exceeds_projection".into());
            }
        }
    }
    out
}

pub fn compare_report(files: &[PathBuf]) -> CliResult<CompareReport> {
    if files.is_empty() {
        return Err(CliError::Config("compare needs at least one summary file".into()));
    }
    let mut rows = Vec::new();
    for f in files {
        rows.extend(check_rows(f, read_summary(f)?));
    }
    Ok(CompareReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(scheme: &str, penalty: &str, mean: f64, stderr: f64) -> SummaryRow {
        SummaryRow {
            scheme: scheme.into(),
            penalty: penalty.into(),
            mean,
            stderr,
            n_paths: 100,
            wall_time: "NA".into(),
        }
    }

    #[test]
    fn consistent_rows_pass() {
        let rows = vec![
            row("penalized", "0", 1.0, 0.01),
            row("penalized", "10", 1.05, 0.01),
            row("projection", "inf", 1.09, 0.01),
            row("dual:constant:2", "NA", 1.07, 0.02),
            row("fd", "NA", 1.09, 0.0),
        ];
        assert!(check_rows(Path::new("a"), rows).iter().all(|r| r.flags.is_empty()));
    }

    #[test]
    fn decreasing_in_penalty_is_flagged() {
        let rows = vec![row("penalized", "10", 1.0, 0.01), row("penalized", "1", 1.2, 0.01)];
        let out = check_rows(Path::new("a"), rows);
        assert_eq!(out[0].flags, ["not_monotone_vs_1"]);
        assert!(out[1].flags.is_empty());
    }

    #[test]
    fn dual_above_projection_is_flagged() {
        let rows = vec![
            row("projection", "inf", 1.0, 0.01),
            row("dual:bang_bang:10", "NA", 1.1, 0.01),
        ];
        let out = check_rows(Path::new("a"), rows);
        assert_eq!(out[1].flags, ["dual_exceeds_projection"]);
        let report = CompareReport { rows: out };
        assert!(!report.passed());
        assert!(report.render().contains("dual_exceeds_projection"));
    }
}

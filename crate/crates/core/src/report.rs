//! Tabular experiment reports.
//!
//! ```text
//! # flora-sim report
//! # schema_version=1
//! # seed=<seed>
//! round,strategy,global_loss,mean_client_loss,relative_noise,params_up_total,params_down_total
//! ```
//!
//! One row per `(strategy, round)`. Reals carry 17 significant digits; an absent
//! value is an empty field. `params_*_total` are cumulative over rounds `0..=round`,
//! so the last row of a strategy matches its ledger totals.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{FloraError, Result};
use crate::fed_sim::{ComparisonReport, ExperimentReport, Strategy};

pub const SCHEMA_VERSION: u32 = 1;
pub const COLUMNS: [&str; 7] = [
    "round",
    "strategy",
    "global_loss",
    "mean_client_loss",
    "relative_noise",
    "params_up_total",
    "params_down_total",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub round: usize,
    pub strategy: Strategy,
    pub global_loss: f64,
    pub mean_client_loss: Option<f64>,
    pub relative_noise: Option<f64>,
    pub params_up_total: u64,
    pub params_down_total: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub seed: u64,
    pub rows: Vec<ReportRow>,
}

impl ReportTable {
    pub fn empty(seed: u64) -> Self {
        ReportTable { seed, rows: Vec::new() }
    }

    pub fn from_experiment(report: &ExperimentReport) -> Self {
        let mut table = ReportTable::empty(report.seed);
        table.extend(report);
        table
    }

    pub fn from_comparison(cmp: &ComparisonReport) -> Self {
        let mut table = ReportTable::empty(cmp.seed);
        for r in &cmp.reports {
            table.extend(r);
        }
        table
    }

    fn extend(&mut self, report: &ExperimentReport) {
        let (mut up, mut down) = (0u64, 0u64);
        for m in &report.rounds {
            up += m.params_up;
            down += m.params_down;
            self.rows.push(ReportRow {
                round: m.round,
                strategy: m.strategy,
                global_loss: m.global_eval_loss,
                mean_client_loss: m.mean_client_loss(),
                relative_noise: m.fedit_relative_noise,
                params_up_total: up,
                params_down_total: down,
            });
        }
    }

    /// Rows of one strategy, in round order.
    pub fn curve(&self, strategy: Strategy) -> Vec<&ReportRow> {
        self.rows.iter().filter(|r| r.strategy == strategy).collect()
    }
}

fn real(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt_real(v: Option<f64>) -> String {
    v.map(real).unwrap_or_default()
}

pub fn render_report(table: &ReportTable) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# flora-sim report");
    let _ = writeln!(out, "# schema_version={SCHEMA_VERSION}");
    let _ = writeln!(out, "# seed={}", table.seed);
    let _ = writeln!(out, "{}", COLUMNS.join(","));
    for r in &table.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.round,
            r.strategy.name(),
            real(r.global_loss),
            opt_real(r.mean_client_loss),
            opt_real(r.relative_noise),
            r.params_up_total,
            r.params_down_total
        );
    }
    out
}

pub fn emit_report(table: &ReportTable, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| FloraError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, render_report(table)).map_err(|source| FloraError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn parse_report(path: &Path, text: &str) -> Result<ReportTable> {
    let err = |line: usize, message: String| FloraError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut seed = None;
    let mut schema = None;
    let mut header_seen = false;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        if let Some(meta) = line.strip_prefix('#') {
            let meta = meta.trim();
            if let Some(v) = meta.strip_prefix("schema_version=") {
                schema = Some(v.parse::<u32>().map_err(|e| err(ln, format!("schema_version: {e}")))?);
            } else if let Some(v) = meta.strip_prefix("seed=") {
                seed = Some(v.parse::<u64>().map_err(|e| err(ln, format!("seed: {e}")))?);
            }
            continue;
        }
        if !header_seen {
            if line != COLUMNS.join(",") {
                return Err(err(ln, format!("expected header `{}`", COLUMNS.join(","))));
            }
            header_seen = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != COLUMNS.len() {
            return Err(err(ln, format!("expected {} fields, found {}", COLUMNS.len(), f.len())));
        }
        let num = |s: &str, name: &str| s.parse::<f64>().map_err(|e| err(ln, format!("{name}: {e}")));
        let opt = |s: &str, name: &str| if s.is_empty() { Ok(None) } else { num(s, name).map(Some) };
        let int = |s: &str, name: &str| s.parse::<u64>().map_err(|e| err(ln, format!("{name}: {e}")));
        rows.push(ReportRow {
            round: int(f[0], "round")? as usize,
            strategy: Strategy::parse(f[1]).ok_or_else(|| err(ln, format!("unknown strategy `{}`", f[1])))?,
            global_loss: num(f[2], "global_loss")?,
            mean_client_loss: opt(f[3], "mean_client_loss")?,
            relative_noise: opt(f[4], "relative_noise")?,
            params_up_total: int(f[5], "params_up_total")?,
            params_down_total: int(f[6], "params_down_total")?,
        });
    }
    match schema {
        Some(SCHEMA_VERSION) => {}
        Some(v) => return Err(err(0, format!("unsupported schema_version {v}"))),
        None => return Err(err(0, "missing schema_version".into())),
    }
    if !header_seen {
        return Err(err(0, "missing column header".into()));
    }
    let seed = seed.ok_or_else(|| err(0, "missing seed".into()))?;
    Ok(ReportTable { seed, rows })
}

pub fn read_report(path: &Path) -> Result<ReportTable> {
    let text = fs::read_to_string(path).map_err(|source| FloraError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_report(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_table() -> ReportTable {
        ReportTable {
            seed: 42,
            rows: vec![
                ReportRow {
                    round: 0,
                    strategy: Strategy::Fedit,
                    global_loss: 1.0 / 3.0,
                    mean_client_loss: Some(0.1),
                    relative_noise: None,
                    params_up_total: 0,
                    params_down_total: 0,
                },
                ReportRow {
                    round: 1,
                    strategy: Strategy::Fedit,
                    global_loss: 2.5e-7,
                    mean_client_loss: Some(f64::MIN_POSITIVE),
                    relative_noise: Some(0.123_456_789_012_345_68),
                    params_up_total: 640,
                    params_down_total: 3200,
                },
            ],
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let text = render_report(&ReportTable::empty(7));
        assert_eq!(
            text,
            "# flora-sim report\n# schema_version=1\n# seed=7\n\
             round,strategy,global_loss,mean_client_loss,relative_noise,params_up_total,params_down_total\n"
        );
    }

    #[test]
    fn golden_rows() {
        let text = render_report(&sample_table());
        let lines: Vec<&str> = text.lines().skip(4).collect();
        assert_eq!(
            lines,
            [
                "0,fedit,3.3333333333333331e-1,1.0000000000000001e-1,,0,0",
                "1,fedit,2.4999999999999999e-7,2.2250738585072014e-308,1.2345678901234568e-1,640,3200",
            ]
        );
    }

    #[test]
    fn round_trip() {
        let t = sample_table();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/report.csv");
        emit_report(&t, &path).unwrap();
        assert_eq!(read_report(&path).unwrap(), t);
    }

    #[test]
    fn rejects_malformed() {
        let p = Path::new("r.csv");
        assert!(parse_report(p, "round,strategy\n").is_err());
        let good = render_report(&sample_table());
        assert!(parse_report(p, &good.replace("fedit", "fedavg")).is_err());
        assert!(parse_report(p, &good.replace("schema_version=1", "schema_version=9")).is_err());
    }

    #[test]
    fn unwritable_path_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let err = emit_report(&sample_table(), &blocker.join("r.csv")).unwrap_err();
        assert!(err.to_string().contains("file"), "{err}");
    }
}

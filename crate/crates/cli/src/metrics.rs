//! Per-round metrics records, the CSV format, and the run summary.
//!
//! The CSV starts with `#`-prefixed header comments carrying the config
//! hashes, followed by one fixed-order header line and one row per round.
//! All numbers use Rust's shortest-roundtrip float formatting, so a run is
//! byte-reproducible from its seed.

use crate::{CliError, Result};
use bitfed_core::bound::BoundParams;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

pub const CSV_COLUMNS: &str = "round,cum_delay_s,loss,loss_selected,test_accuracy,alpha,selected,num_selected,interactions,phase,grad_norm_sq,est_l,est_zeta1,est_zeta2,est_beps2";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// 1-based round index, strictly increasing.
    pub round: usize,
    /// Simulated cumulative delay in seconds.
    pub cum_delay_s: f64,
    /// Global loss after the round.
    pub loss: f64,
    /// Selected devices' weighted local loss estimate.
    pub loss_selected: f64,
    pub test_accuracy: f64,
    pub alpha: u32,
    /// Selection bitstring, device 0 first.
    pub selected: String,
    pub num_selected: usize,
    /// Cumulative real environment rounds at this record.
    pub interactions: usize,
    /// warmup | deploy | run
    pub phase: String,
    pub grad_norm_sq: f64,
    /// Estimated bound constants, once available.
    pub est: Option<BoundParams>,
}

impl MetricsRecord {
    fn csv_row(&self) -> String {
        let (l, z1, z2, b) = match &self.est {
            Some(p) => (
                p.smoothness().to_string(),
                p.zeta1.to_string(),
                p.zeta2.to_string(),
                p.beps2.to_string(),
            ),
            None => (String::new(), String::new(), String::new(), String::new()),
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{l},{z1},{z2},{b}",
            self.round,
            self.cum_delay_s,
            self.loss,
            self.loss_selected,
            self.test_accuracy,
            self.alpha,
            self.selected,
            self.num_selected,
            self.interactions,
            self.phase,
            self.grad_norm_sq,
        )
    }
}

/// End-of-run summary written alongside the CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub scheme: String,
    pub seed: u64,
    pub config_hash: String,
    pub compat_hash: String,
    pub rounds_executed: usize,
    /// Round at which the loss-variance rule fired, if it did.
    pub converged_at: Option<usize>,
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub cumulative_delay_s: f64,
    /// Total real environment rounds (warmup + deployment for the
    /// model-based scheme).
    pub real_interactions: usize,
    /// Environment rounds consumed while planning (always 0).
    pub planning_env_rounds: usize,
    pub bound_params: Option<BoundParams>,
    pub estimate_loss: Option<f64>,
    pub grad_proxy_kappa: Option<f64>,
}

/// Everything parsed back from one metrics CSV.
#[derive(Debug, Clone)]
pub struct MetricsFile {
    pub config_hash: String,
    pub compat_hash: String,
    pub scheme: String,
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
}

pub fn write_csv(
    path: &Path,
    config_hash: &str,
    compat_hash: &str,
    scheme: &str,
    seed: u64,
    records: &[MetricsRecord],
) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "# config_hash={config_hash}").unwrap();
    writeln!(out, "# compat_hash={compat_hash}").unwrap();
    writeln!(out, "# scheme={scheme}").unwrap();
    writeln!(out, "# seed={seed}").unwrap();
    writeln!(out, "{CSV_COLUMNS}").unwrap();
    for r in records {
        writeln!(out, "{}", r.csv_row()).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn header_value(line: &str, key: &str) -> Option<String> {
    line.strip_prefix(&format!("# {key}=")).map(str::to_string)
}

pub fn read_csv(path: &Path) -> Result<MetricsFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Compare(format!("cannot read {}: {e}", path.display())))?;
    let mut config_hash = String::new();
    let mut compat_hash = String::new();
    let mut scheme = String::new();
    let mut seed = 0u64;
    let mut records = Vec::new();
    let mut saw_header = false;
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        if let Some(v) = header_value(line, "config_hash") {
            config_hash = v;
            continue;
        }
        if let Some(v) = header_value(line, "compat_hash") {
            compat_hash = v;
            continue;
        }
        if let Some(v) = header_value(line, "scheme") {
            scheme = v;
            continue;
        }
        if let Some(v) = header_value(line, "seed") {
            seed = v.parse().unwrap_or(0);
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        if !saw_header {
            if line != CSV_COLUMNS {
                return Err(CliError::Compare(format!(
                    "{}:{}: unexpected column header",
                    path.display(),
                    lineno + 1
                )));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 15 {
            return Err(CliError::Compare(format!(
                "{}:{}: expected 15 fields, found {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse().map_err(|_| {
                CliError::Compare(format!("{}:{}: bad {what}", path.display(), lineno + 1))
            })
        };
        let est = if fields[11].is_empty() {
            None
        } else {
            Some(BoundParams::convex(
                parse_f(fields[11], "est_l")?,
                parse_f(fields[12], "est_zeta1")?,
                parse_f(fields[13], "est_zeta2")?,
                parse_f(fields[14], "est_beps2")?,
            ))
        };
        records.push(MetricsRecord {
            round: fields[0]
                .parse()
                .map_err(|_| CliError::Compare(format!("{}: bad round", path.display())))?,
            cum_delay_s: parse_f(fields[1], "cum_delay_s")?,
            loss: parse_f(fields[2], "loss")?,
            loss_selected: parse_f(fields[3], "loss_selected")?,
            test_accuracy: parse_f(fields[4], "test_accuracy")?,
            alpha: fields[5]
                .parse()
                .map_err(|_| CliError::Compare(format!("{}: bad alpha", path.display())))?,
            selected: fields[6].to_string(),
            num_selected: fields[7]
                .parse()
                .map_err(|_| CliError::Compare(format!("{}: bad num_selected", path.display())))?,
            interactions: fields[8]
                .parse()
                .map_err(|_| CliError::Compare(format!("{}: bad interactions", path.display())))?,
            phase: fields[9].to_string(),
            grad_norm_sq: parse_f(fields[10], "grad_norm_sq")?,
            est,
        });
    }
    if !saw_header {
        return Err(CliError::Compare(format!(
            "{}: not a metrics file (no column header)",
            path.display()
        )));
    }
    Ok(MetricsFile { config_hash, compat_hash, scheme, seed, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(round: usize) -> MetricsRecord {
        MetricsRecord {
            round,
            cum_delay_s: 0.25 * round as f64,
            loss: 1.0 / round as f64,
            loss_selected: 1.1 / round as f64,
            test_accuracy: 0.5,
            alpha: 8,
            selected: "10110".into(),
            num_selected: 3,
            interactions: round,
            phase: "run".into(),
            grad_norm_sq: 0.01,
            est: None,
        }
    }

    #[test]
    fn csv_round_trips() {
        let dir = std::env::temp_dir().join(format!("bitfed-metrics-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.csv");
        let records: Vec<MetricsRecord> = (1..=5).map(record).collect();
        write_csv(&path, "abc", "def", "fixed", 7, &records).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(back.config_hash, "abc");
        assert_eq!(back.compat_hash, "def");
        assert_eq!(back.scheme, "fixed");
        assert_eq!(back.seed, 7);
        assert_eq!(back.records.len(), 5);
        assert_eq!(back.records[2].round, 3);
        assert_eq!(back.records[2].loss, records[2].loss);
        assert_eq!(back.records[2].selected, "10110");
    }

    #[test]
    fn estimated_params_round_trip() {
        let dir = std::env::temp_dir().join(format!("bitfed-metrics2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.csv");
        let mut r = record(1);
        r.est = Some(BoundParams::convex(2.5, 0.8, 0.4, 0.1));
        write_csv(&path, "a", "b", "proposed", 1, &[r]).unwrap();
        let back = read_csv(&path).unwrap();
        let est = back.records[0].est.as_ref().unwrap();
        assert_eq!(est.l, 2.5);
        assert_eq!(est.beps2, 0.1);
    }
}

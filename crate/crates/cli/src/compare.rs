//! Cross-run comparison: rounds-to-threshold, simulated time-to-threshold,
//! real interactions-to-threshold, and final accuracy per scheme, with
//! mean and standard deviation over seeds.

use crate::metrics::{read_csv, MetricsFile};
use crate::{CliError, Result};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct RunStats {
    pub scheme: String,
    pub seed: u64,
    pub rounds_to_threshold: Option<usize>,
    pub time_to_threshold: Option<f64>,
    pub interactions_to_threshold: Option<usize>,
    pub final_accuracy: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone)]
pub struct SchemeStats {
    pub scheme: String,
    pub runs: usize,
    pub reached: usize,
    pub rounds_mean: f64,
    pub rounds_std: f64,
    pub time_mean: f64,
    pub time_std: f64,
    pub interactions_mean: f64,
    pub interactions_std: f64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub threshold: f64,
    pub per_run: Vec<RunStats>,
    pub per_scheme: Vec<SchemeStats>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

fn run_stats(file: &MetricsFile, threshold: f64) -> RunStats {
    let hit = file.records.iter().find(|r| r.loss <= threshold);
    RunStats {
        scheme: file.scheme.clone(),
        seed: file.seed,
        rounds_to_threshold: hit.map(|r| r.round),
        time_to_threshold: hit.map(|r| r.cum_delay_s),
        interactions_to_threshold: hit.map(|r| r.interactions),
        final_accuracy: file.records.last().map_or(0.0, |r| r.test_accuracy),
        final_loss: file.records.last().map_or(f64::NAN, |r| r.loss),
    }
}

/// Compare two or more metrics files. Files must share the comparison
/// hash (same dataset, partition, model, and physics). When no threshold
/// is given, the worst run's best loss is used so every run attains it.
pub fn compare_runs(paths: &[&Path], threshold: Option<f64>) -> Result<Comparison> {
    if paths.len() < 2 {
        return Err(CliError::Compare("need at least two metrics files".into()));
    }
    let files: Vec<MetricsFile> = paths.iter().map(|p| read_csv(p)).collect::<Result<_>>()?;
    let reference = &files[0].compat_hash;
    for (f, p) in files.iter().zip(paths) {
        if &f.compat_hash != reference {
            return Err(CliError::Compare(format!(
                "{} was produced under a different dataset/config (hash {} vs {})",
                p.display(),
                f.compat_hash,
                reference
            )));
        }
        if f.records.is_empty() {
            return Err(CliError::Compare(format!("{} has no rounds", p.display())));
        }
    }
    let threshold = threshold.unwrap_or_else(|| {
        files
            .iter()
            .map(|f| f.records.iter().map(|r| r.loss).fold(f64::INFINITY, f64::min))
            .fold(f64::NEG_INFINITY, f64::max)
    });

    let per_run: Vec<RunStats> = files.iter().map(|f| run_stats(f, threshold)).collect();

    let mut by_scheme: BTreeMap<String, Vec<&RunStats>> = BTreeMap::new();
    for r in &per_run {
        by_scheme.entry(r.scheme.clone()).or_default().push(r);
    }
    let per_scheme = by_scheme
        .into_iter()
        .map(|(scheme, runs)| {
            let reached: Vec<&&RunStats> =
                runs.iter().filter(|r| r.rounds_to_threshold.is_some()).collect();
            let rounds: Vec<f64> = reached
                .iter()
                .map(|r| r.rounds_to_threshold.unwrap() as f64)
                .collect();
            let times: Vec<f64> = reached.iter().map(|r| r.time_to_threshold.unwrap()).collect();
            let inter: Vec<f64> = reached
                .iter()
                .map(|r| r.interactions_to_threshold.unwrap() as f64)
                .collect();
            let accs: Vec<f64> = runs.iter().map(|r| r.final_accuracy).collect();
            let (rounds_mean, rounds_std) = mean_std(&rounds);
            let (time_mean, time_std) = mean_std(&times);
            let (interactions_mean, interactions_std) = mean_std(&inter);
            let (accuracy_mean, accuracy_std) = mean_std(&accs);
            SchemeStats {
                scheme,
                runs: runs.len(),
                reached: reached.len(),
                rounds_mean,
                rounds_std,
                time_mean,
                time_std,
                interactions_mean,
                interactions_std,
                accuracy_mean,
                accuracy_std,
            }
        })
        .collect();

    Ok(Comparison { threshold, per_run, per_scheme })
}

pub fn render(cmp: &Comparison) -> String {
    let mut out = String::new();
    out.push_str(&format!("loss threshold: {:.6}\n", cmp.threshold));
    out.push_str(&format!(
        "{:<16} {:>4} {:>7} {:>18} {:>20} {:>22} {:>18}\n",
        "scheme", "runs", "reached", "rounds (mean±std)", "sim time s (mean±std)",
        "interactions (mean±std)", "accuracy (mean±std)"
    ));
    for s in &cmp.per_scheme {
        out.push_str(&format!(
            "{:<16} {:>4} {:>7} {:>9.1}±{:<8.1} {:>11.3}±{:<8.3} {:>13.1}±{:<8.1} {:>10.4}±{:<7.4}\n",
            s.scheme,
            s.runs,
            s.reached,
            s.rounds_mean,
            s.rounds_std,
            s.time_mean,
            s.time_std,
            s.interactions_mean,
            s.interactions_std,
            s.accuracy_mean,
            s.accuracy_std,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{write_csv, MetricsRecord};
    use std::path::PathBuf;

    fn write_run(dir: &Path, name: &str, compat: &str, scheme: &str, losses: &[f64]) -> PathBuf {
        let records: Vec<MetricsRecord> = losses
            .iter()
            .enumerate()
            .map(|(i, &loss)| MetricsRecord {
                round: i + 1,
                cum_delay_s: 0.5 * (i + 1) as f64,
                loss,
                loss_selected: loss,
                test_accuracy: 1.0 - loss,
                alpha: 8,
                selected: "11".into(),
                num_selected: 2,
                interactions: i + 1,
                phase: "run".into(),
                grad_norm_sq: 0.0,
                est: None,
            })
            .collect();
        let path = dir.join(name);
        write_csv(&path, "cfg", compat, scheme, 1, &records).unwrap();
        path
    }

    #[test]
    fn identical_runs_have_zero_difference() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_run(dir.path(), "a.csv", "h", "fixed8", &[0.9, 0.5, 0.3]);
        let b = write_run(dir.path(), "b.csv", "h", "fixed8", &[0.9, 0.5, 0.3]);
        let cmp = compare_runs(&[a.as_path(), b.as_path()], None).unwrap();
        assert_eq!(cmp.per_scheme.len(), 1);
        let s = &cmp.per_scheme[0];
        assert_eq!(s.runs, 2);
        assert_eq!(s.reached, 2);
        assert_eq!(s.rounds_std, 0.0);
        assert_eq!(s.time_std, 0.0);
    }

    #[test]
    fn mismatched_configs_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_run(dir.path(), "a.csv", "h1", "fixed8", &[0.9, 0.5]);
        let b = write_run(dir.path(), "b.csv", "h2", "fixed8", &[0.9, 0.5]);
        assert!(matches!(
            compare_runs(&[a.as_path(), b.as_path()], None),
            Err(CliError::Compare(_))
        ));
    }

    #[test]
    fn default_threshold_is_attainable_by_every_run() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_run(dir.path(), "a.csv", "h", "full-precision", &[0.9, 0.2, 0.1]);
        let b = write_run(dir.path(), "b.csv", "h", "binary", &[0.9, 0.8, 0.6]);
        let cmp = compare_runs(&[a.as_path(), b.as_path()], None).unwrap();
        assert_eq!(cmp.threshold, 0.6);
        for r in &cmp.per_run {
            assert!(r.rounds_to_threshold.is_some(), "{} missed threshold", r.scheme);
        }
        // The faster run reaches it in strictly fewer rounds.
        let full = cmp.per_run.iter().find(|r| r.scheme == "full-precision").unwrap();
        let bin = cmp.per_run.iter().find(|r| r.scheme == "binary").unwrap();
        assert!(full.rounds_to_threshold.unwrap() <= bin.rounds_to_threshold.unwrap());
    }

    #[test]
    fn std_columns_nonnegative_over_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_run(dir.path(), "a.csv", "h", "fixed8", &[0.9, 0.5, 0.3]);
        let b = write_run(dir.path(), "b.csv", "h", "fixed8", &[0.9, 0.6, 0.25]);
        let c = write_run(dir.path(), "c.csv", "h", "fixed8", &[0.8, 0.4, 0.32]);
        let cmp = compare_runs(&[a.as_path(), b.as_path(), c.as_path()], None).unwrap();
        let s = &cmp.per_scheme[0];
        assert_eq!(s.runs, 3);
        assert!(s.rounds_std >= 0.0 && s.time_std >= 0.0 && s.accuracy_std >= 0.0);
        let text = render(&cmp);
        assert!(text.contains("fixed8"));
    }
}

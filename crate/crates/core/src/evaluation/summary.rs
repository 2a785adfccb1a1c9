use std::path::Path;

use crate::conformal::save_calibration;
use crate::dataset::save_split;
use crate::error::{Error, Result};
use crate::format::{fmt_f64, to_json_pretty, write_file};
use crate::model::save_model;

use super::experiment::{RunOutput, RunReport, RunStatus};
use super::ReplicateStats;

/// Write `report.json`, `predictions.csv` and any trained artifacts of one run.
pub fn write_run(output: &RunOutput, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    write_file(&dir.join("report.json"), to_json_pretty(&output.report)?.as_bytes())?;
    if output.report.status == RunStatus::Ok {
        write_file(&dir.join("predictions.csv"), output.predictions_csv.as_bytes())?;
    }
    if let Some(split) = &output.split {
        save_split(split, dir.join("split.json"))?;
    }
    if let Some(m) = &output.mean_model {
        save_model(m, dir.join("mean_model.json"))?;
    }
    if let Some(m) = &output.quantile_model {
        save_model(m, dir.join("quantile_model.json"))?;
    }
    if let Some(t) = &output.calibration {
        save_calibration(t, dir.join("calibration.json"))?;
    }
    Ok(())
}

pub fn load_report(path: impl AsRef<Path>) -> Result<RunReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Groups values by key, keeping the order in which keys first appear.
struct Groups<K> {
    entries: Vec<(K, Vec<f64>)>,
}

impl<K: PartialEq> Groups<K> {
    fn new() -> Self {
        Groups { entries: Vec::new() }
    }

    fn push(&mut self, key: K, value: Option<f64>) {
        let pos = match self.entries.iter().position(|(k, _)| *k == key) {
            Some(p) => p,
            None => {
                self.entries.push((key, Vec::new()));
                self.entries.len() - 1
            }
        };
        if let Some(v) = value {
            self.entries[pos].1.push(v);
        }
    }
}

fn stats_columns(values: &[f64]) -> String {
    match ReplicateStats::from_values(values) {
        Some(s) => format!("{},{},{}", fmt_f64(s.mean), fmt_f64(s.stderr), s.n),
        None => ",,0".to_string(),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Aggregate successful runs into `error_vs_fraction.csv`,
/// `margin_vs_epsilon.csv` and `coverage_vs_epsilon.csv` (mean, standard
/// error and replicate count per group). Failed runs are skipped.
pub fn summarize(reports: &[RunReport], out_dir: impl AsRef<Path>) -> Result<()> {
    let out_dir = out_dir.as_ref();
    if reports.is_empty() {
        return Err(Error::validation("nothing to summarize"));
    }
    let ok: Vec<&RunReport> = reports.iter().filter(|r| r.status == RunStatus::Ok).collect();

    let mut error = Groups::new();
    let mut margin = Groups::new();
    let mut coverage = Groups::new();
    for r in &ok {
        let key = |mode: &str| (r.label.clone(), r.train_fraction.to_bits(), mode.to_string());
        error.push(key("no_interference"), r.mape_no_interference);
        error.push(key("interference"), r.mape_interference);
        for b in &r.bounds {
            let key = (
                r.label.clone(),
                r.train_fraction.to_bits(),
                b.pool.clone(),
                b.epsilon.to_bits(),
            );
            margin.push(key.clone(), b.margin);
            coverage.push(key, b.coverage);
        }
    }

    let mut text = String::from("label,train_fraction,mode,mean_mape,stderr,n\n");
    for ((label, f, mode), values) in &error.entries {
        text.push_str(&format!(
            "{},{},{mode},{}\n",
            csv_field(label),
            f64::from_bits(*f),
            stats_columns(values)
        ));
    }
    write_file(&out_dir.join("error_vs_fraction.csv"), text.as_bytes())?;

    for (name, column, groups) in [
        ("margin_vs_epsilon.csv", "mean_margin", &margin),
        ("coverage_vs_epsilon.csv", "mean_coverage", &coverage),
    ] {
        let mut text = format!("label,train_fraction,pool,epsilon,{column},stderr,n\n");
        for ((label, f, pool, eps), values) in &groups.entries {
            text.push_str(&format!(
                "{},{},{pool},{},{}\n",
                csv_field(label),
                f64::from_bits(*f),
                f64::from_bits(*eps),
                stats_columns(values)
            ));
        }
        write_file(&out_dir.join(name), text.as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::EpsilonMetrics;

    fn report(replicate: usize, fraction: f64, mape: f64) -> RunReport {
        RunReport {
            label: "base".to_string(),
            train_fraction: fraction,
            replicate,
            seed: replicate as u64,
            status: RunStatus::Ok,
            error: None,
            n_train: 1,
            n_calval: 1,
            n_test: 1,
            mape_no_interference: Some(mape),
            mape_interference: Some(2.0 * mape),
            mape_by_pool: vec![Some(mape), None, None, None],
            bounds: vec![EpsilonMetrics {
                epsilon: 0.1,
                pool: "all".to_string(),
                n: 10,
                margin: Some(0.3),
                coverage: Some(0.9),
            }],
        }
    }

    #[test]
    fn one_row_per_fraction_and_mode() {
        let dir = tempfile::tempdir().unwrap();
        summarize(&[report(0, 0.5, 0.1)], dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("error_vs_fraction.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("base,0.5,no_interference,1.0000000000000001e-1,0.0000000000000000e0,1"));
    }

    #[test]
    fn identical_replicates_have_zero_stderr() {
        let dir = tempfile::tempdir().unwrap();
        let reports: Vec<_> = (0..5).map(|r| report(r, 0.3, 0.2)).collect();
        summarize(&reports, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("margin_vs_epsilon.csv")).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().nth(1).unwrap().ends_with(",0.0000000000000000e0,5"));
    }

    #[test]
    fn failed_runs_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let mut bad = report(1, 0.5, 9.0);
        bad.status = RunStatus::Failed;
        summarize(&[report(0, 0.5, 0.1), bad], dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("error_vs_fraction.csv")).unwrap();
        assert!(text.lines().nth(1).unwrap().ends_with(",1"));
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let r = report(0, 0.5, 0.1);
        write_file(&path, to_json_pretty(&r).unwrap().as_bytes()).unwrap();
        assert_eq!(load_report(&path).unwrap(), r);
    }
}

//! One-axis sweeps. Each value becomes an override on the base
//! configuration and runs every configured seed.
//!
//! Output: a run directory per value, `sweep.csv` with one row per value and
//! seed, and `comparison.csv` with per-value means and standard deviations.

use std::fs;
use std::path::Path;

use fedsis_core::metrics::{MetricsRecord, RunAggregate};

use crate::config::{apply_override, ExperimentConfig, SWEEP_AXES};
use crate::error::{LabError, Result};
use crate::runner::{into_bytes, metric_fields, run_experiment, write, METRICS_HEADER};

#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub value: String,
    pub records: Vec<MetricsRecord>,
    pub aggregate: RunAggregate,
}

pub fn check_axis(axis: &str) -> Result<()> {
    if SWEEP_AXES.contains(&axis) {
        Ok(())
    } else {
        Err(LabError::config(axis, format!("not a sweep axis; valid axes are {}", SWEEP_AXES.join(", "))))
    }
}

fn dir_name(axis: &str, value: &str) -> String {
    let clean: String = value.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect();
    format!("{axis}={clean}")
}

/// The configuration of one sweep point.
pub fn point_config(base: &toml::Table, overrides: &[String], axis: &str, value: &str) -> Result<ExperimentConfig> {
    check_axis(axis)?;
    let mut table = base.clone();
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    apply_override(&mut table, &format!("{axis}={value}"))?;
    ExperimentConfig::from_table(table)
}

pub fn run_sweep(base: &toml::Table, overrides: &[String], axis: &str, values: &[String], dir: &Path) -> Result<Vec<SweepPoint>> {
    check_axis(axis)?;
    if values.is_empty() {
        return Err(LabError::config(axis, "a sweep needs at least one value"));
    }
    // Validate every point before spending time on any of them.
    let configs = values.iter().map(|v| point_config(base, overrides, axis, v)).collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(dir).map_err(LabError::io(dir))?;
    let mut points = Vec::with_capacity(values.len());
    for (value, cfg) in values.iter().zip(&configs) {
        let report = run_experiment(cfg, &dir.join(dir_name(axis, value)))?;
        points.push(SweepPoint {
            value: value.clone(),
            records: report.records(),
            aggregate: report.aggregate,
        });
    }

    let mut rows = csv::Writer::from_writer(Vec::new());
    rows.write_record(["axis", "value"].into_iter().chain(METRICS_HEADER))?;
    let mut cmp = csv::Writer::from_writer(Vec::new());
    cmp.write_record([
        "axis", "value", "runs", "hter_mean", "hter_std", "auc_mean", "auc_std", "tpr_at_fpr_mean", "tpr_at_fpr_std", "total_bytes_mean",
    ])?;
    for p in &points {
        for r in &p.records {
            rows.write_record([axis.to_string(), p.value.clone()].into_iter().chain(metric_fields(r)))?;
        }
        let a = &p.aggregate;
        cmp.write_record([
            axis.to_string(),
            p.value.clone(),
            a.runs.to_string(),
            a.hter.mean.to_string(),
            a.hter.std.to_string(),
            a.auc.mean.to_string(),
            a.auc.std.to_string(),
            a.tpr_at_fpr.mean.to_string(),
            a.tpr_at_fpr.std.to_string(),
            a.total_bytes.mean.to_string(),
        ])?;
    }
    write(&dir.join("sweep.csv"), &into_bytes(rows)?)?;
    write(&dir.join("comparison.csv"), &into_bytes(cmp)?)?;
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_table;

    fn base() -> toml::Table {
        parse_table("[protocol]\nmode = \"fedsis\"\n[data]\ntarget = 0\n").unwrap()
    }

    #[test]
    fn unknown_axis_lists_the_valid_ones() {
        let err = run_sweep(&base(), &[], "protocol.lr", &["0.1".into()], Path::new("unused")).unwrap_err().to_string();
        for a in SWEEP_AXES {
            assert!(err.contains(a), "{err}");
        }
    }

    #[test]
    fn points_apply_the_axis_value() {
        let c = point_config(&base(), &["protocol.rounds=5".into()], "model.sampler_range", "[2, 4]").unwrap();
        assert_eq!(c.model.sampler_range, Some([2, 4]));
        assert_eq!(c.protocol.rounds, 5);
        let c = point_config(&base(), &[], "protocol.mode", "festa").unwrap();
        assert_eq!(c.protocol.mode, "festa");
        assert!(point_config(&base(), &[], "model.fixed_block", "99").is_err());
    }

    #[test]
    fn directory_names_are_path_safe() {
        assert_eq!(dir_name("model.sampler_range", "[1, 3]"), "model.sampler_range=_1__3_");
    }
}

//! Runs configured experiments and writes their artifacts.
//!
//! A run directory holds:
//!
//! ```text
//! config.toml            the resolved configuration
//! metrics.csv            one row per seed, then a `mean` row
//! summary.csv            mean and sample standard deviation per metric
//! seed-<s>/rounds.jsonl  one line per client per round
//! seed-<s>/checkpoint.fsis
//! seed-<s>/features.fsft only with eval.dump_features
//! ```

use std::fs;
use std::path::Path;

use fedsis_core::metrics::{aggregate_runs, dev_threshold, evaluate, group_average, MetricsRecord, RunAggregate, ThresholdPolicy};
use fedsis_core::model::ModelBundle;
use fedsis_core::protocol::{pool, run_training, score_dataset, RoundRecord, TrainingOutcome};
use fedsis_core::synth::{domain_specs, generate, leave_one_out, split_by_attack, DomainDataset, PartitionPlan};
use fedsis_core::Real;
use rayon::prelude::*;

use crate::codec::{encode_checkpoint, CheckpointMeta};
use crate::concurrent::run_concurrent;
use crate::config::{ExperimentConfig, Scheduling};
use crate::dataset::{decode_dataset, encode_features, FeatureTable};
use crate::error::{LabError, Result};

pub const METRICS_HEADER: [&str; 9] = ["mode", "seed", "target_domain", "hter", "auc", "tpr_at_fpr", "threshold", "policy", "total_bytes"];

/// Every domain of the experiment: read from `data.path` or generated.
pub fn load_domains(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<DomainDataset>> {
    let d = &cfg.data;
    if let Some(path) = &d.path {
        let bytes = fs::read(path).map_err(LabError::io(path))?;
        let domains = decode_dataset(&bytes)?;
        if domains.first().is_some_and(|x| x.image != cfg.image()) {
            return Err(LabError::config("data.image", format!("{} holds {:?} images", path.display(), domains[0].image)));
        }
        return Ok(domains);
    }
    let data_seed = d.seed.unwrap_or(seed);
    let strength = if d.style_shift { d.style_strength } else { 0.0 };
    domain_specs(d.domains, cfg.image(), cfg.class_counts(), strength, d.noise, data_seed, d.frames_per_group)
        .into_iter()
        .map(|mut spec| {
            spec.artifacts = cfg.artifacts();
            Ok(generate(&spec, d.amplitude, data_seed)?)
        })
        .collect()
}

pub fn partition(cfg: &ExperimentConfig, domains: &[DomainDataset]) -> Result<PartitionPlan> {
    let plan = leave_one_out(domains, cfg.data.target).map_err(|e| LabError::config("data.target", e.to_string()))?;
    if cfg.data.split_by_attack {
        Ok(split_by_attack(&plan)?)
    } else {
        Ok(plan)
    }
}

pub fn train(cfg: &ExperimentConfig, seed: u64, clients: &[DomainDataset]) -> Result<TrainingOutcome> {
    let tc = cfg.training_config(seed)?;
    match cfg.protocol.scheduling {
        Scheduling::Strict => Ok(run_training(&tc, clients)?),
        Scheduling::Concurrent => run_concurrent(&tc, clients),
    }
}

/// The configured threshold policy, with the dev threshold taken from
/// source-domain scores.
pub fn resolve_policy(cfg: &ExperimentConfig, seed: u64, bundle: &ModelBundle, plan: &PartitionPlan) -> Result<ThresholdPolicy> {
    Ok(match cfg.policy()? {
        ThresholdPolicy::Dev(_) => {
            let dev = score_dataset(bundle, &pool(&plan.clients)?, cfg.inference(seed)?, cfg.eval.chunk)?;
            let dev = if cfg.eval.average_groups { group_average(&dev)? } else { dev };
            ThresholdPolicy::Dev(dev_threshold(&dev)?)
        }
        p => p,
    })
}

pub fn evaluate_target(cfg: &ExperimentConfig, seed: u64, bundle: &ModelBundle, plan: &PartitionPlan, total_bytes: u64) -> Result<MetricsRecord> {
    let policy = resolve_policy(cfg, seed, bundle, plan)?;
    let scores = score_dataset(bundle, &plan.target, cfg.inference(seed)?, cfg.eval.chunk)?;
    let e = &cfg.eval;
    let ev = evaluate(&scores, policy, e.fpr_target, e.interpolate, e.average_groups)?;
    Ok(MetricsRecord {
        mode: cfg.mode()?.name().to_string(),
        seed,
        target_domain: plan.target.domain,
        hter: ev.hter,
        auc: ev.auc,
        tpr_at_fpr: ev.tpr_at_fpr,
        fpr_target: e.fpr_target,
        threshold: ev.threshold,
        policy: policy.label(),
        total_bytes,
    })
}

/// Head inputs for every sample of `data` at one depth.
pub fn features(bundle: &ModelBundle, data: &DomainDataset, depth: usize, chunk: usize) -> Result<FeatureTable> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut values = Vec::new();
    for part in idx.chunks(chunk.max(1)) {
        let (images, _) = data.batch(part)?;
        let z = bundle.features_at_depths(&images, &[depth])?.remove(0);
        values.extend_from_slice(z.data());
    }
    let width = bundle.config.dim;
    let t = FeatureTable {
        width,
        values,
        labels: data.samples.iter().map(|s| s.label).collect(),
        domains: data.samples.iter().map(|s| s.domain).collect(),
    };
    t.validate()?;
    Ok(t)
}

pub struct SeedRun {
    pub seed: u64,
    pub record: MetricsRecord,
    pub log: Vec<RoundRecord>,
    pub bundle: ModelBundle,
    pub features: Option<FeatureTable>,
}

pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let domains = load_domains(cfg, seed)?;
    let plan = partition(cfg, &domains)?;
    let outcome = train(cfg, seed, &plan.clients)?;
    let record = evaluate_target(cfg, seed, &outcome.bundle, &plan, outcome.total_bytes)?;
    let features = if cfg.eval.dump_features {
        let depth = cfg.eval.feature_block.unwrap_or(outcome.bundle.config.layers);
        Some(features(&outcome.bundle, &plan.target, depth, cfg.eval.chunk)?)
    } else {
        None
    };
    Ok(SeedRun {
        seed,
        record,
        log: outcome.log,
        bundle: outcome.bundle,
        features,
    })
}

pub struct ExperimentReport {
    pub runs: Vec<SeedRun>,
    pub aggregate: RunAggregate,
}

impl ExperimentReport {
    pub fn records(&self) -> Vec<MetricsRecord> {
        self.runs.iter().map(|r| r.record.clone()).collect()
    }
}

/// Trains and evaluates every seed. Seeds run in parallel when configured;
/// results come back in seed order either way.
pub fn run_seeds(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let runs: Vec<SeedRun> = if cfg.parallel_seeds {
        cfg.seeds.par_iter().map(|&s| run_seed(cfg, s)).collect::<Result<_>>()?
    } else {
        cfg.seeds.iter().map(|&s| run_seed(cfg, s)).collect::<Result<_>>()?
    };
    let records: Vec<MetricsRecord> = runs.iter().map(|r| r.record.clone()).collect();
    let aggregate = aggregate_runs(&records)?;
    Ok(ExperimentReport { runs, aggregate })
}

/// Runs the experiment and writes its artifacts under `dir`.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<ExperimentReport> {
    fs::create_dir_all(dir).map_err(LabError::io(dir))?;
    write(&dir.join("config.toml"), cfg.echo().as_bytes())?;
    let report = run_seeds(cfg)?;
    for run in &report.runs {
        let seed_dir = dir.join(format!("seed-{}", run.seed));
        fs::create_dir_all(&seed_dir).map_err(LabError::io(&seed_dir))?;
        let mut lines = String::new();
        for rec in &run.log {
            lines.push_str(&serde_json::to_string(rec)?);
            lines.push('\n');
        }
        write(&seed_dir.join("rounds.jsonl"), lines.as_bytes())?;
        let meta = CheckpointMeta {
            model: run.bundle.config,
            head_input: run.bundle.head_input,
            mode: run.record.mode.clone(),
            seed: run.seed,
            rounds: cfg.protocol.rounds,
        };
        write(&seed_dir.join("checkpoint.fsis"), &encode_checkpoint(&run.bundle, &meta)?)?;
        if let Some(t) = &run.features {
            write(&seed_dir.join("features.fsft"), &encode_features(t)?)?;
        }
    }
    write(&dir.join("metrics.csv"), &metrics_csv(&report.records(), &report.aggregate)?)?;
    write(&dir.join("summary.csv"), &summary_csv(&report.aggregate)?)?;
    Ok(report)
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(LabError::io(path))
}

pub(crate) fn metric_fields(r: &MetricsRecord) -> [String; 9] {
    [
        r.mode.clone(),
        r.seed.to_string(),
        r.target_domain.to_string(),
        r.hter.to_string(),
        r.auc.to_string(),
        r.tpr_at_fpr.to_string(),
        r.threshold.to_string(),
        r.policy.clone(),
        r.total_bytes.to_string(),
    ]
}

pub fn metrics_csv(records: &[MetricsRecord], agg: &RunAggregate) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    for r in records {
        w.write_record(metric_fields(r))?;
    }
    if let Some(first) = records.first() {
        w.write_record([
            first.mode.clone(),
            "mean".into(),
            first.target_domain.to_string(),
            agg.hter.mean.to_string(),
            agg.auc.mean.to_string(),
            agg.tpr_at_fpr.mean.to_string(),
            agg.threshold.mean.to_string(),
            first.policy.clone(),
            agg.total_bytes.mean.to_string(),
        ])?;
    }
    into_bytes(w)
}

pub fn summary_csv(agg: &RunAggregate) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["metric", "mean", "std", "runs"])?;
    let rows: [(&str, Real, Real); 5] = [
        ("hter", agg.hter.mean, agg.hter.std),
        ("auc", agg.auc.mean, agg.auc.std),
        ("tpr_at_fpr", agg.tpr_at_fpr.mean, agg.tpr_at_fpr.std),
        ("threshold", agg.threshold.mean, agg.threshold.std),
        ("total_bytes", agg.total_bytes.mean, agg.total_bytes.std),
    ];
    for (name, mean, std) in rows {
        w.write_record([name.to_string(), mean.to_string(), std.to_string(), agg.runs.to_string()])?;
    }
    into_bytes(w)
}

pub(crate) fn into_bytes(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| LabError::format("csv", e.to_string()))
}

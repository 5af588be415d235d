use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fedsis_core::protocol::pool;
use fedsis_lab::codec::decode_checkpoint;
use fedsis_lab::config::{apply_override, read_table, ExperimentConfig};
use fedsis_lab::dataset::{encode_dataset, encode_features};
use fedsis_lab::runner::{features, load_domains, partition, run_experiment};
use fedsis_lab::sweep::run_sweep;

#[derive(Parser)]
#[command(name = "fedsis", version, about = "Federated split training of a hybrid ViT for face anti-spoofing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration (TOML).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set protocol.r_uni=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set protocol.mode=...`.
    #[arg(long)]
    mode: Option<String>,
    /// Shorthand for `--set data.target=...`.
    #[arg(long)]
    target: Option<u16>,
    /// Comma-separated seeds, e.g. `0,1,2`.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

impl ConfigArgs {
    fn table(&self) -> anyhow::Result<(toml::Table, Vec<String>)> {
        let table = match &self.config {
            Some(p) => read_table(p)?,
            None => toml::Table::new(),
        };
        let mut overrides = self.set.clone();
        if let Some(m) = &self.mode {
            overrides.push(format!("protocol.mode=\"{m}\""));
        }
        if let Some(t) = self.target {
            overrides.push(format!("data.target={t}"));
        }
        if !self.seeds.is_empty() {
            let list: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
            overrides.push(format!("seeds=[{}]", list.join(",")));
        }
        Ok((table, overrides))
    }

    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let (mut table, overrides) = self.table()?;
        for o in &overrides {
            apply_override(&mut table, o)?;
        }
        Ok(ExperimentConfig::from_table(table)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Target,
    Sources,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every configured seed.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output root; the run goes to `<out>/<name>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one configuration per value of an axis.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// protocol.mode, protocol.r_uni, model.sampler_range or model.fixed_block.
        #[arg(long)]
        axis: String,
        /// Values as TOML, e.g. `2 4 8` or `'[1, 3]' '[1, 6]'`.
        #[arg(required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the metadata and tensor table of a checkpoint.
    InspectCheckpoint { path: PathBuf },
    /// Write head inputs of a trained model for one data split.
    DumpFeatures {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "target")]
        split: Split,
        /// Encoder depth; the last block when unset.
        #[arg(long)]
        block: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the configured domains into a dataset file.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Data seed; `data.seed` or the first run seed when unset.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run { cfg, out } => {
            let cfg = cfg.resolve()?;
            let dir = out.unwrap_or_else(|| cfg.output.clone()).join(&cfg.name);
            let report = run_experiment(&cfg, &dir)?;
            println!("{:<6} {:>8} {:>8} {:>10} {:>12}", "seed", "HTER", "AUC", "TPR@FPR", "bytes");
            for r in report.records() {
                println!("{:<6} {:>8.2} {:>8.2} {:>10.2} {:>12}", r.seed, r.hter, r.auc, r.tpr_at_fpr, r.total_bytes);
            }
            let a = report.aggregate;
            println!("{:<6} {:>8.2} {:>8.2} {:>10.2} {:>12.0}", "mean", a.hter.mean, a.auc.mean, a.tpr_at_fpr.mean, a.total_bytes.mean);
            println!("wrote {}", dir.display());
        }
        Command::Sweep { cfg, axis, values, out } => {
            let (table, overrides) = cfg.table()?;
            let probe = fedsis_lab::sweep::point_config(&table, &overrides, &axis, &values[0])?;
            let dir = out.unwrap_or_else(|| probe.output.clone()).join(format!("{}-sweep", probe.name));
            let points = run_sweep(&table, &overrides, &axis, &values, &dir)?;
            println!("{:<16} {:>12} {:>12} {:>12}", axis, "HTER", "AUC", "TPR@FPR");
            for p in points {
                let a = p.aggregate;
                println!(
                    "{:<16} {:>5.2}±{:<6.2} {:>5.2}±{:<6.2} {:>5.2}±{:<6.2}",
                    p.value, a.hter.mean, a.hter.std, a.auc.mean, a.auc.std, a.tpr_at_fpr.mean, a.tpr_at_fpr.std
                );
            }
            println!("wrote {}", dir.display());
        }
        Command::InspectCheckpoint { path } => {
            let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            let (meta, bundle) = decode_checkpoint(&bytes)?;
            println!("{}", serde_json::to_string_pretty(&meta)?);
            let mut total = 0;
            for (name, t) in fedsis_lab::codec::bundle_tensors(&bundle) {
                let mean_abs = t.data().iter().map(|v| v.abs()).sum::<fedsis_core::Real>() / t.numel().max(1) as fedsis_core::Real;
                println!("{name:<40} {:<16} {:>8} {mean_abs:>12.4e}", format!("{:?}", t.shape()), t.numel());
                total += t.numel();
            }
            let c = bundle.param_counts();
            println!(
                "{total} values; trainable: tokenizer {} encoder {} adapter {} head {}",
                c.tokenizer, c.encoder, c.adapter, c.head
            );
        }
        Command::DumpFeatures { cfg, checkpoint, split, block, out } => {
            let cfg = cfg.resolve()?;
            let bytes = std::fs::read(&checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
            let (meta, bundle) = decode_checkpoint(&bytes)?;
            if bundle.config.image != cfg.image() {
                bail!("checkpoint expects {:?} images, configuration gives {:?}", bundle.config.image, cfg.image());
            }
            let plan = partition(&cfg, &load_domains(&cfg, meta.seed)?)?;
            let data = match split {
                Split::Target => plan.target,
                Split::Sources => pool(&plan.clients)?,
            };
            let depth = block.unwrap_or(bundle.config.layers);
            let table = features(&bundle, &data, depth, cfg.eval.chunk)?;
            std::fs::write(&out, encode_features(&table)?).with_context(|| format!("writing {}", out.display()))?;
            println!("{} rows of width {} at depth {depth} to {}", table.rows(), table.width, out.display());
        }
        Command::GenData { cfg, seed, out } => {
            let (mut table, overrides) = cfg.table()?;
            // Generation needs no protocol; supply the required keys if absent.
            for (section, key, value) in [("protocol", "mode", toml::Value::from("fedsis")), ("data", "target", toml::Value::from(0))] {
                let entry = table.entry(section).or_insert_with(|| toml::Value::Table(toml::Table::new()));
                if let Some(t) = entry.as_table_mut() {
                    t.entry(key).or_insert(value);
                }
            }
            for o in &overrides {
                apply_override(&mut table, o)?;
            }
            let cfg = ExperimentConfig::from_table(table)?;
            let seed = seed.or(cfg.data.seed).unwrap_or(cfg.seeds[0]);
            let domains = load_domains(&cfg, seed)?;
            std::fs::write(&out, encode_dataset(&domains)?).with_context(|| format!("writing {}", out.display()))?;
            let n: usize = domains.iter().map(|d| d.len()).sum();
            println!("{} domains, {n} samples to {}", domains.len(), out.display());
        }
    }
    Ok(())
}

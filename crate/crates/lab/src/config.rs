//! Experiment configuration: a TOML document with `[model]`, `[protocol]`,
//! `[data]` and `[eval]` sections. Every key has a default except
//! `protocol.mode` and `data.target`. Unknown keys are rejected, and errors
//! name the dotted path of the offending key.

use std::path::{Path, PathBuf};

use fedsis_core::adam::AdamConfig;
use fedsis_core::metrics::ThresholdPolicy;
use fedsis_core::model::{ImageShape, ModelConfig, SamplerMode};
use fedsis_core::protocol::{EncoderDivisor, InferencePolicy, Mode, Precision, TrainingConfig, VisitOrder, Weighting};
use fedsis_core::synth::{Artifacts, ClassCounts};
use fedsis_core::Real;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Run seeds on a thread pool. Results do not depend on it.
    #[serde(default = "yes")]
    pub parallel_seeds: bool,
    #[serde(default)]
    pub model: ModelSection,
    pub protocol: ProtocolSection,
    pub data: DataSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Desk,
    Tiny,
    Paper,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub profile: Profile,
    pub layers: Option<usize>,
    pub dim: Option<usize>,
    pub heads: Option<usize>,
    pub mlp_ratio: Option<usize>,
    /// Inclusive `[min, max]` block range of the sampler; all blocks if unset.
    pub sampler_range: Option<[usize; 2]>,
    /// Always use this block instead of sampling.
    pub fixed_block: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divisor {
    #[default]
    Contributors,
    Clients,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visit {
    #[default]
    Ascending,
    Shuffled,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientWeights {
    #[default]
    Samples,
    Uniform,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduling {
    /// One thread, clients in turn: the deterministic reference.
    #[default]
    Strict,
    /// One thread per client; the server handles requests in arrival order.
    Concurrent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bits {
    F32,
    F64,
}

impl Default for Bits {
    fn default() -> Self {
        match Precision::compiled() {
            Precision::F32 => Bits::F32,
            Precision::F64 => Bits::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    /// One of fedsis, festa, fedavg, centralized, centralized_is.
    pub mode: String,
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    /// Collaboration rounds between unifications of client modules.
    #[serde(default = "default_r_uni")]
    pub r_uni: u32,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Per-client batch sizes; overrides `batch_size` when set.
    #[serde(default)]
    pub batch_sizes: Option<Vec<usize>>,
    #[serde(default = "default_lr")]
    pub lr: Real,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: Real,
    #[serde(default = "default_beta1")]
    pub beta1: Real,
    #[serde(default = "default_beta2")]
    pub beta2: Real,
    #[serde(default = "default_eps")]
    pub eps: Real,
    #[serde(default)]
    pub divisor: Divisor,
    #[serde(default)]
    pub visit_order: Visit,
    #[serde(default)]
    pub weighting: ClientWeights,
    #[serde(default)]
    pub reset_moments_on_unify: bool,
    #[serde(default)]
    pub scheduling: Scheduling,
    #[serde(default)]
    pub precision: Bits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Domain held out for evaluation.
    pub target: u16,
    /// Read domains from a dataset file instead of generating them.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_domains")]
    pub domains: u16,
    #[serde(default = "default_amplitude")]
    pub amplitude: Real,
    #[serde(default = "default_noise")]
    pub noise: Real,
    #[serde(default = "yes")]
    pub style_shift: bool,
    #[serde(default = "one")]
    pub style_strength: Real,
    #[serde(default = "default_bonafide")]
    pub bonafide: usize,
    #[serde(default = "default_attack")]
    pub print: usize,
    #[serde(default = "default_attack")]
    pub replay: usize,
    #[serde(default = "default_frames")]
    pub frames_per_group: usize,
    /// `[height, width, channels]`.
    #[serde(default = "default_image")]
    pub image: [usize; 3],
    /// Generator seed; the run seed when unset.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_cast")]
    pub print_cast: Real,
    #[serde(default = "default_cast")]
    pub replay_moire: Real,
    /// Two clients per source domain, one per attack type.
    #[serde(default)]
    pub split_by_attack: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inference {
    /// One depth per scoring chunk, or per sample with `per_sample`.
    #[default]
    Sampled,
    Fixed,
    Averaged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// `eer`, `min_hter`, `dev` or `fixed:<threshold>`.
    pub policy: String,
    pub fpr_target: Real,
    pub interpolate: bool,
    /// Average frame scores per presentation before computing metrics.
    pub average_groups: bool,
    pub inference: Inference,
    /// Depth for the fixed policy; the last block when unset.
    pub inference_block: Option<usize>,
    pub inference_draws: usize,
    pub per_sample: bool,
    /// Seed of the inference sampler; the run seed when unset.
    pub inference_seed: Option<u64>,
    pub chunk: usize,
    /// Write head inputs of the target domain for every seed.
    pub dump_features: bool,
    /// Depth of dumped features; the last block when unset.
    pub feature_block: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            policy: "eer".into(),
            fpr_target: 0.01,
            interpolate: false,
            average_groups: true,
            inference: Inference::Sampled,
            inference_block: None,
            inference_draws: 16,
            per_sample: false,
            inference_seed: None,
            chunk: 64,
            dump_features: false,
            feature_block: None,
        }
    }
}

fn default_name() -> String {
    "run".into()
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_output() -> PathBuf {
    "runs".into()
}
fn yes() -> bool {
    true
}
fn one() -> Real {
    1.0
}
fn default_rounds() -> u32 {
    200
}
fn default_r_uni() -> u32 {
    10
}
fn default_batch() -> usize {
    8
}
fn default_lr() -> Real {
    1e-3
}
fn default_weight_decay() -> Real {
    1e-6
}
fn default_beta1() -> Real {
    0.9
}
fn default_beta2() -> Real {
    0.999
}
fn default_eps() -> Real {
    1e-8
}
fn default_domains() -> u16 {
    4
}
fn default_amplitude() -> Real {
    0.5
}
fn default_noise() -> Real {
    0.05
}
fn default_bonafide() -> usize {
    64
}
fn default_attack() -> usize {
    32
}
fn default_frames() -> usize {
    4
}
fn default_image() -> [usize; 3] {
    [16, 16, 3]
}
fn default_cast() -> Real {
    0.08
}

/// Axes accepted by sweeps.
pub const SWEEP_AXES: [&str; 4] = ["protocol.mode", "protocol.r_uni", "model.sampler_range", "model.fixed_block"];

pub fn read_table(path: &Path) -> Result<toml::Table> {
    let text = std::fs::read_to_string(path).map_err(LabError::io(path))?;
    parse_table(&text)
}

pub fn parse_table(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| {
        let key = e.span().map(|s| format!("bytes {}..{}", s.start, s.end)).unwrap_or_default();
        LabError::config(key, e.message().to_string())
    })
}

/// Applies `section.key=value`. The value is read as TOML (numbers, booleans,
/// arrays, quoted strings) and otherwise taken as a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| LabError::config(assignment, "override must look like section.key=value"))?;
    let (path, raw) = (path.trim(), raw.trim());
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(LabError::config(path, "empty key segment"));
    }
    let mut node = table;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = node.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| LabError::config(parts[..=i].join("."), "is a value, not a section"))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn from_table(table: toml::Table) -> Result<Self> {
        for (section, key) in [("protocol", "mode"), ("data", "target")] {
            if table.get(section).and_then(|s| s.get(key)).is_none() && table.get(section).is_none_or(|s| s.is_table()) {
                return Err(LabError::config(format!("{section}.{key}"), "required key is missing"));
            }
        }
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let key = e.path().to_string();
            LabError::config(if key == "." { String::new() } else { key }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_str_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table = parse_table(text)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let mut table = read_table(path)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    /// The configuration as TOML; parsing it back yields an equal value.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn mode(&self) -> Result<Mode> {
        Mode::parse(&self.protocol.mode).map_err(|e| LabError::config("protocol.mode", e.to_string()))
    }

    pub fn policy(&self) -> Result<ThresholdPolicy> {
        let p = self.eval.policy.trim();
        match p {
            "eer" => Ok(ThresholdPolicy::Eer),
            "min_hter" => Ok(ThresholdPolicy::MinHter),
            // The threshold is filled in from source scores at evaluation.
            "dev" => Ok(ThresholdPolicy::Dev(Real::NAN)),
            _ => match p.strip_prefix("fixed:").map(str::parse::<Real>) {
                Some(Ok(t)) if t.is_finite() => Ok(ThresholdPolicy::Fixed(t)),
                _ => Err(LabError::config("eval.policy", format!("{p:?} is not eer, min_hter, dev or fixed:<threshold>"))),
            },
        }
    }

    pub fn image(&self) -> ImageShape {
        let [height, width, channels] = self.data.image;
        ImageShape { height, width, channels }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let base = match m.profile {
            Profile::Desk => ModelConfig::desk(),
            Profile::Tiny => ModelConfig::tiny(),
            Profile::Paper => ModelConfig::paper_scale(),
        };
        let cfg = ModelConfig {
            image: self.image(),
            layers: m.layers.unwrap_or(base.layers),
            dim: m.dim.unwrap_or(base.dim),
            heads: m.heads.unwrap_or(base.heads),
            mlp_ratio: m.mlp_ratio.unwrap_or(base.mlp_ratio),
            ..base
        };
        cfg.validate().map_err(|e| LabError::config("model", e.to_string()))?;
        Ok(cfg)
    }

    pub fn sampler(&self) -> Result<SamplerMode> {
        let layers = self.model_config()?.layers;
        let mode = match (self.model.fixed_block, self.model.sampler_range) {
            (Some(_), Some(_)) => return Err(LabError::config("model.fixed_block", "cannot be combined with model.sampler_range")),
            (Some(l), None) => SamplerMode::Fixed(l),
            (None, Some([min, max])) => SamplerMode::Uniform { min, max },
            (None, None) => SamplerMode::full(layers),
        };
        let key = if self.model.fixed_block.is_some() { "model.fixed_block" } else { "model.sampler_range" };
        mode.validate(layers).map_err(|e| LabError::config(key, e.to_string()))?;
        Ok(mode)
    }

    pub fn class_counts(&self) -> ClassCounts {
        ClassCounts {
            bonafide: self.data.bonafide,
            print: self.data.print,
            replay: self.data.replay,
        }
    }

    pub fn artifacts(&self) -> Artifacts {
        Artifacts {
            print_cast: self.data.print_cast,
            replay_moire: self.data.replay_moire,
        }
    }

    pub fn training_config(&self, seed: u64) -> Result<TrainingConfig> {
        let p = &self.protocol;
        let mode = self.mode()?;
        Ok(TrainingConfig {
            mode,
            model: self.model_config()?,
            rounds: p.rounds,
            unify_every: p.r_uni,
            batch_sizes: p.batch_sizes.clone().unwrap_or_else(|| vec![p.batch_size]),
            adam: AdamConfig {
                lr: p.lr,
                beta1: p.beta1,
                beta2: p.beta2,
                eps: p.eps,
                weight_decay: p.weight_decay,
            },
            sampler: self.sampler()?,
            seed,
            precision: match p.precision {
                Bits::F32 => Precision::F32,
                Bits::F64 => Precision::F64,
            },
            visit_order: match p.visit_order {
                Visit::Ascending => VisitOrder::Ascending,
                Visit::Shuffled => VisitOrder::Shuffled,
            },
            divisor: match p.divisor {
                Divisor::Contributors => EncoderDivisor::Contributors,
                Divisor::Clients => EncoderDivisor::Clients,
            },
            reset_moments_on_unify: p.reset_moments_on_unify,
            weighting: match p.weighting {
                ClientWeights::Samples => Weighting::Samples,
                ClientWeights::Uniform => Weighting::Uniform,
            },
        })
    }

    pub fn inference(&self, seed: u64) -> Result<InferencePolicy> {
        let e = &self.eval;
        let range = self.sampler()?;
        let seed = e.inference_seed.unwrap_or(seed);
        Ok(match e.inference {
            Inference::Sampled => InferencePolicy::Sampled {
                range,
                seed,
                per_sample: e.per_sample,
            },
            Inference::Fixed => InferencePolicy::Fixed(e.inference_block.unwrap_or(self.model_config()?.layers)),
            Inference::Averaged => InferencePolicy::Averaged {
                range,
                seed,
                draws: e.inference_draws,
            },
        })
    }

    fn validate(&self) -> Result<()> {
        self.mode()?;
        self.policy()?;
        let model = self.model_config()?;
        self.sampler()?;
        if self.seeds.is_empty() {
            return Err(LabError::config("seeds", "at least one seed is required"));
        }
        let p = &self.protocol;
        if p.r_uni == 0 {
            return Err(LabError::config("protocol.r_uni", "must be at least 1"));
        }
        if p.batch_size == 0 || p.batch_sizes.as_ref().is_some_and(|b| b.is_empty() || b.contains(&0)) {
            return Err(LabError::config("protocol.batch_size", "batch sizes must be positive"));
        }
        if !(p.lr >= 0.0) || !(p.weight_decay >= 0.0) {
            return Err(LabError::config("protocol.lr", "learning rate and weight decay must be nonnegative"));
        }
        if p.precision != Bits::default() {
            return Err(LabError::config("protocol.precision", format!("this build computes in {:?}", Precision::compiled())));
        }
        let d = &self.data;
        if d.path.is_none() {
            if d.target >= d.domains {
                return Err(LabError::config("data.target", format!("must be below data.domains = {}", d.domains)));
            }
            if d.domains < 2 {
                return Err(LabError::config("data.domains", "leave-one-out needs at least 2 domains"));
            }
        }
        if !(d.amplitude >= 0.0) || !(d.noise >= 0.0) {
            return Err(LabError::config("data.amplitude", "amplitude and noise must be nonnegative"));
        }
        if d.frames_per_group == 0 || d.bonafide == 0 || d.print + d.replay == 0 {
            return Err(LabError::config("data.bonafide", "class counts and frames_per_group must be positive"));
        }
        let e = &self.eval;
        if !(0.0..=1.0).contains(&e.fpr_target) {
            return Err(LabError::config("eval.fpr_target", "must lie in [0, 1]"));
        }
        if e.chunk == 0 || e.inference_draws == 0 {
            return Err(LabError::config("eval.chunk", "chunk and inference_draws must be positive"));
        }
        for (key, block) in [("eval.inference_block", e.inference_block), ("eval.feature_block", e.feature_block)] {
            if let Some(b) = block {
                if b == 0 || b > model.layers {
                    return Err(LabError::config(key, format!("block {b} outside 1..={}", model.layers)));
                }
            }
        }
        Ok(())
    }
}

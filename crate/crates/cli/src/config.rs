//! Experiment configuration: the JSON schema accepted by `fedrisk run`.
//!
//! Unknown keys are rejected so a typo cannot silently fall back to a
//! default. Semantic validation collects every failure before reporting,
//! so one pass over the error list fixes the whole file.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use fedrisk_core::compression::{CompressionConfig, Quantization};
use fedrisk_core::data::{GeneratorConfig, Market, MARKET_COUNT};
use fedrisk_core::model::{AttentionKind, LossKind, ModelConfig, TaskKind};
use fedrisk_core::privacy::{Masking, PrivacyConfig};
use fedrisk_core::protocol::{ExecutionMode, FederationConfig, RunSettings, TargetMetric};

/// Fraction of generated records held out for validation metrics.
pub const VAL_FRAC: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PresetKind {
    /// Centralized baseline vs plain federation vs the full pipeline.
    Compare,
    /// One federated run per sparsification ratio.
    CompressionSweep,
    /// Train on equity, bond and commodity shards; evaluate every market.
    CrossMarket,
    /// Single run, every knob taken from the config file.
    Custom,
}

impl PresetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PresetKind::Compare => "compare",
            PresetKind::CompressionSweep => "compression-sweep",
            PresetKind::CrossMarket => "cross-market",
            PresetKind::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    #[serde(default = "d_n_samples")]
    pub n_samples: usize,
    #[serde(default = "d_static")]
    pub d_static: usize,
    #[serde(default = "d_temporal")]
    pub d_temporal: usize,
    #[serde(default = "d_seq_len")]
    pub seq_len: usize,
    /// Market name to proportion; omitted markets keep their default share
    /// and the whole mix is renormalized to sum to one.
    #[serde(default)]
    pub market_mix: Option<std::collections::BTreeMap<String, f64>>,
    /// Market name to observation noise scale; omitted markets keep their
    /// default scale.
    #[serde(default)]
    pub noise_scales: Option<std::collections::BTreeMap<String, f64>>,
    #[serde(default = "d_systemic_rate")]
    pub systemic_rate: f64,
    /// Fixed data seed. When absent each repetition draws its own dataset
    /// from the repetition seed.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Seed of the latent risk coefficients. Shared across repetitions so
    /// every seed trains on the same underlying task.
    #[serde(default = "d_coeff_seed")]
    pub coeff_seed: u64,
}

fn d_n_samples() -> usize {
    20_000
}
fn d_static() -> usize {
    16
}
fn d_temporal() -> usize {
    4
}
fn d_seq_len() -> usize {
    12
}
fn d_systemic_rate() -> f64 {
    0.05
}
fn d_coeff_seed() -> u64 {
    7
}

impl Default for GeneratorSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty generator section")
    }
}

impl GeneratorSection {
    /// Resolves the section against a repetition seed. Named market maps
    /// are folded onto the defaults; the mix is renormalized.
    pub fn resolve(&self, rep_seed: u64) -> Result<GeneratorConfig, Vec<String>> {
        let mut errors = Vec::new();
        let defaults = GeneratorConfig::default();
        let market_mix = match merge_markets(&defaults.market_mix, &self.market_mix) {
            Ok(mix) => mix,
            Err(e) => {
                errors.push(e);
                defaults.market_mix
            }
        };
        let mix_sum: f64 = market_mix.iter().sum();
        let market_mix = if mix_sum > 0.0 && market_mix.iter().all(|p| p.is_finite() && *p >= 0.0)
        {
            market_mix.map(|p| p / mix_sum)
        } else {
            market_mix
        };
        let noise_scales = match merge_markets(&defaults.noise_scales, &self.noise_scales) {
            Ok(scales) => scales,
            Err(e) => {
                errors.push(e);
                defaults.noise_scales
            }
        };
        let cfg = GeneratorConfig {
            n_samples: self.n_samples,
            d_static: self.d_static,
            d_temporal: self.d_temporal,
            seq_len: self.seq_len,
            market_mix,
            noise_scales,
            systemic_rate: self.systemic_rate,
            seed: self.seed.unwrap_or(rep_seed),
            coeff_seed: self.coeff_seed,
        };
        if let Err(e) = cfg.validate() {
            errors.push(format!("generator: {e}"));
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(errors)
        }
    }
}

/// Overlays named entries onto a per-market default array.
fn merge_markets(
    defaults: &[f64; MARKET_COUNT],
    named: &Option<std::collections::BTreeMap<String, f64>>,
) -> Result<[f64; MARKET_COUNT], String> {
    let mut out = *defaults;
    if let Some(map) = named {
        for (name, &value) in map {
            match Market::parse(name) {
                Some(m) => out[m.index()] = value,
                None => {
                    return Err(format!(
                        "unknown market {name:?}; expected one of {}",
                        Market::ALL.map(Market::as_str).join(", ")
                    ))
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardSection {
    /// Dirichlet concentration of the label skew across institutions.
    #[serde(default = "d_alpha")]
    pub alpha: f64,
}

fn d_alpha() -> f64 {
    0.5
}

impl Default for ShardSection {
    fn default() -> Self {
        ShardSection { alpha: d_alpha() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    #[serde(default = "d_clients")]
    pub clients: usize,
    #[serde(default = "d_max_rounds")]
    pub max_rounds: u64,
    #[serde(default = "d_local_epochs")]
    pub local_epochs: u32,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_loss")]
    pub loss: LossName,
    #[serde(default = "d_target_metric")]
    pub target_metric: MetricName,
    #[serde(default = "d_target_value")]
    pub target_value: f64,
    #[serde(default = "d_patience")]
    pub patience: u64,
}

fn d_clients() -> usize {
    5
}
fn d_max_rounds() -> u64 {
    100
}
fn d_local_epochs() -> u32 {
    1
}
fn d_batch_size() -> usize {
    64
}
fn d_learning_rate() -> f64 {
    0.05
}
fn d_lambda() -> f64 {
    1e-4
}
fn d_loss() -> LossName {
    LossName::CrossEntropy
}
fn d_target_metric() -> MetricName {
    MetricName::Auc
}
fn d_target_value() -> f64 {
    0.75
}
fn d_patience() -> u64 {
    3
}

impl Default for FederationSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty federation section")
    }
}

impl FederationSection {
    pub fn resolve(&self) -> FederationConfig {
        FederationConfig {
            clients: self.clients,
            max_rounds: self.max_rounds,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            lambda: self.lambda,
            loss: self.loss.into(),
            target_metric: self.target_metric.into(),
            target_value: self.target_value,
            patience: self.patience,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    CrossEntropy,
    Mse,
}

impl From<LossName> for LossKind {
    fn from(n: LossName) -> LossKind {
        match n {
            LossName::CrossEntropy => LossKind::CrossEntropy,
            LossName::Mse => LossKind::Mse,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Accuracy,
    Auc,
}

impl From<MetricName> for TargetMetric {
    fn from(n: MetricName) -> TargetMetric {
        match n {
            MetricName::Accuracy => TargetMetric::Accuracy,
            MetricName::Auc => TargetMetric::Auc,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "d_embed")]
    pub d_embed: usize,
    #[serde(default = "d_hidden")]
    pub d_hidden: usize,
    #[serde(default = "d_attention")]
    pub attention: AttentionName,
    #[serde(default = "d_task")]
    pub task: TaskName,
}

fn d_embed() -> usize {
    8
}
fn d_hidden() -> usize {
    16
}
fn d_attention() -> AttentionName {
    AttentionName::Additive
}
fn d_task() -> TaskName {
    TaskName::Binary
}

impl Default for ModelSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty model section")
    }
}

impl ModelSection {
    /// Input dimensions come from the generator so the model always
    /// matches the data it trains on.
    pub fn resolve(&self, generator: &GeneratorSection) -> ModelConfig {
        ModelConfig {
            d_static: generator.d_static,
            d_temporal: generator.d_temporal,
            seq_len: generator.seq_len,
            d_embed: self.d_embed,
            d_hidden: self.d_hidden,
            task: self.task.into(),
            attention: self.attention.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionName {
    Additive,
    MeanPool,
}

impl From<AttentionName> for AttentionKind {
    fn from(n: AttentionName) -> AttentionKind {
        match n {
            AttentionName::Additive => AttentionKind::Additive,
            AttentionName::MeanPool => AttentionKind::MeanPool,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskName {
    Binary,
    Regression,
}

impl From<TaskName> for TaskKind {
    fn from(n: TaskName) -> TaskKind {
        match n {
            TaskName::Binary => TaskKind::Binary,
            TaskName::Regression => TaskKind::Regression,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacySection {
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default = "d_masking")]
    pub masking: MaskingName,
    #[serde(default = "d_delta_dp")]
    pub delta_dp: f64,
}

fn d_masking() -> MaskingName {
    MaskingName::Off
}
fn d_delta_dp() -> f64 {
    1e-5
}

impl Default for PrivacySection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty privacy section")
    }
}

impl PrivacySection {
    pub fn resolve(&self) -> PrivacyConfig {
        PrivacyConfig {
            sigma: self.sigma,
            clip_norm: self.clip_norm,
            masking: self.masking.into(),
            delta_dp: self.delta_dp,
        }
    }

    /// True when any upload protection is switched on.
    pub fn is_active(&self) -> bool {
        self.sigma > 0.0 || self.clip_norm.is_some() || self.masking == MaskingName::Pairwise
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingName {
    Off,
    Pairwise,
}

impl From<MaskingName> for Masking {
    fn from(n: MaskingName) -> Masking {
        match n {
            MaskingName::Off => Masking::Off,
            MaskingName::Pairwise => Masking::Pairwise,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionSection {
    #[serde(default = "d_ratio")]
    pub ratio: u32,
    #[serde(default = "d_quantize")]
    pub quantize: QuantizationName,
}

fn d_ratio() -> u32 {
    1
}
fn d_quantize() -> QuantizationName {
    QuantizationName::Off
}

impl Default for CompressionSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty compression section")
    }
}

impl CompressionSection {
    pub fn resolve(&self) -> CompressionConfig {
        CompressionConfig {
            ratio: self.ratio,
            quantize: self.quantize.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizationName {
    Off,
    Uniform8,
}

impl From<QuantizationName> for Quantization {
    fn from(n: QuantizationName) -> Quantization {
        match n {
            QuantizationName::Off => Quantization::Off,
            QuantizationName::Uniform8 => Quantization::Uniform8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: PresetKind,
    #[serde(default)]
    pub generator: GeneratorSection,
    #[serde(default)]
    pub shards: ShardSection,
    #[serde(default)]
    pub federation: FederationSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub privacy: PrivacySection,
    #[serde(default)]
    pub compression: CompressionSection,
    /// Ratios tried by the compression-sweep preset.
    #[serde(default)]
    pub compression_sweep: Option<Vec<u32>>,
    #[serde(default = "d_master_seed")]
    pub master_seed: u64,
    /// Independent repetitions; repetition i runs with seed
    /// master_seed + i.
    #[serde(default = "d_repetitions")]
    pub repetitions: usize,
    /// Where result files go; `--out` on the command line overrides it.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Run the clients of each round on the thread pool.
    #[serde(default)]
    pub parallel_clients: bool,
}

fn d_master_seed() -> u64 {
    42
}
fn d_repetitions() -> usize {
    5
}

pub const DEFAULT_SWEEP_RATIOS: [u32; 5] = [1, 2, 4, 8, 16];

/// Upload protections applied by the full-pipeline arm of the compare
/// preset when the config leaves the privacy section switched off.
pub fn pipeline_privacy_defaults() -> PrivacyConfig {
    PrivacyConfig {
        sigma: 0.01,
        clip_norm: Some(1.0),
        masking: Masking::Pairwise,
        delta_dp: d_delta_dp(),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    pub fn execution_mode(&self) -> ExecutionMode {
        if self.parallel_clients {
            ExecutionMode::Parallel
        } else {
            ExecutionMode::Sequential
        }
    }

    /// Collects every semantic problem in the file. An empty result means
    /// the experiment can run.
    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if let Err(es) = self.generator.resolve(self.master_seed) {
            errors.extend(es);
        }
        if !self.shards.alpha.is_finite() || self.shards.alpha <= 0.0 {
            errors.push(format!(
                "shards: alpha must be finite and positive, got {}",
                self.shards.alpha
            ));
        }
        if self.repetitions == 0 {
            errors.push("repetitions must be >= 1".to_string());
        }
        match (self.preset, &self.compression_sweep) {
            (PresetKind::CompressionSweep, Some(ratios)) if ratios.is_empty() => {
                errors.push("compression_sweep must list at least one ratio".to_string());
            }
            (PresetKind::CompressionSweep, _) => {}
            (_, Some(_)) => {
                errors.push(format!(
                    "compression_sweep only applies to the compression-sweep preset, not {}",
                    self.preset.as_str()
                ));
            }
            (_, None) => {}
        }
        for variant in crate::presets::plan_variants(self) {
            if let Err(e) = variant.settings.validate() {
                errors.push(format!("variant {}: {e}", variant.label));
            }
        }
        errors
    }
}

/// Everything needed to run one experiment arm, minus the seed.
#[derive(Debug, Clone)]
pub struct VariantPlan {
    pub label: String,
    /// `seed` is a placeholder; each repetition overwrites it.
    pub settings: RunSettings,
    /// Train on the pooled dataset instead of partitioned shards.
    pub pooled: bool,
    /// Restrict training data to these markets; evaluation keeps all.
    pub train_markets: Option<Vec<Market>>,
}

//! Experiment arms for each preset and the repetition driver.
//!
//! A preset expands to one or more variants. Every repetition draws its
//! own dataset and model initialization from seed master_seed + i, while
//! the latent risk coefficients stay fixed so all repetitions train on
//! the same underlying task.

use fedrisk_core::compression::CompressionConfig;
use fedrisk_core::data::{
    generate, partition_non_iid, stratified_split, Market, SampleRecord, ShardSpec,
};
use fedrisk_core::error::Error;
use fedrisk_core::metrics::compute_auc;
use fedrisk_core::model::{predict_batch, AttentionKind, SampleView};
use fedrisk_core::privacy::{epsilon_report, EpsilonReport, PrivacyConfig};
use fedrisk_core::protocol::{run_training, RoundReport, RunSettings};

use crate::config::{
    pipeline_privacy_defaults, ExperimentConfig, PresetKind, VariantPlan, DEFAULT_SWEEP_RATIOS,
    VAL_FRAC,
};

/// Markets whose institutions participate in cross-market training.
pub const IN_DOMAIN_MARKETS: [Market; 3] = [Market::Equity, Market::Bond, Market::Commodity];

/// Expands the config into the arms the preset runs. Each plan's seed is
/// a placeholder; repetitions fill it in.
pub fn plan_variants(cfg: &ExperimentConfig) -> Vec<VariantPlan> {
    let base = RunSettings {
        model: cfg.model.resolve(&cfg.generator),
        federation: cfg.federation.resolve(),
        privacy: cfg.privacy.resolve(),
        compression: cfg.compression.resolve(),
        seed: 0,
        mode: cfg.execution_mode(),
    };
    match cfg.preset {
        PresetKind::Custom => vec![VariantPlan {
            label: "custom".to_string(),
            settings: base,
            pooled: false,
            train_markets: None,
        }],
        PresetKind::Compare => plan_compare(cfg, base),
        PresetKind::CompressionSweep => {
            let ratios = cfg
                .compression_sweep
                .clone()
                .unwrap_or_else(|| DEFAULT_SWEEP_RATIOS.to_vec());
            ratios
                .into_iter()
                .map(|ratio| {
                    let mut settings = base.clone();
                    settings.compression = CompressionConfig {
                        ratio,
                        quantize: settings.compression.quantize,
                    };
                    VariantPlan {
                        label: format!("r{ratio}"),
                        settings,
                        pooled: false,
                        train_markets: None,
                    }
                })
                .collect()
        }
        PresetKind::CrossMarket => vec![VariantPlan {
            label: "in-domain".to_string(),
            settings: base,
            pooled: false,
            train_markets: Some(IN_DOMAIN_MARKETS.to_vec()),
        }],
    }
}

/// The four arms of the baseline comparison. Protections stay off for the
/// baselines; the full pipeline takes the config's privacy section, or the
/// stock clip+noise+masking settings when that section is inactive.
fn plan_compare(cfg: &ExperimentConfig, base: RunSettings) -> Vec<VariantPlan> {
    let unprotected = |attention: AttentionKind, clients: usize| {
        let mut s = base.clone();
        s.model.attention = attention;
        s.federation.clients = clients;
        s.privacy = PrivacyConfig::default();
        s.compression = CompressionConfig::default();
        s
    };
    let clients = base.federation.clients;
    let mut ours = base.clone();
    ours.model.attention = AttentionKind::Additive;
    if !cfg.privacy.is_active() {
        ours.privacy = pipeline_privacy_defaults();
    }
    vec![
        VariantPlan {
            label: "centralized".to_string(),
            settings: unprotected(AttentionKind::Additive, 1),
            pooled: true,
            train_markets: None,
        },
        VariantPlan {
            label: "fedavg-plain".to_string(),
            settings: unprotected(AttentionKind::MeanPool, clients),
            pooled: false,
            train_markets: None,
        },
        VariantPlan {
            label: "fedavg-attention".to_string(),
            settings: unprotected(AttentionKind::Additive, clients),
            pooled: false,
            train_markets: None,
        },
        VariantPlan {
            label: "ours".to_string(),
            settings: ours,
            pooled: false,
            train_markets: None,
        },
    ]
}

/// One repetition of one variant.
#[derive(Debug, Clone)]
pub struct RepOutcome {
    pub seed: u64,
    pub rounds: Vec<RoundReport>,
    pub converged_round: Option<u64>,
    pub epsilon: EpsilonReport,
    /// Final-model ranking score per market, cross-market preset only.
    /// `None` inside means the market's validation slice has one class.
    pub market_auc: Option<Vec<(Market, Option<f64>)>>,
}

#[derive(Debug, Clone)]
pub struct VariantResults {
    pub label: String,
    pub reps: Vec<RepOutcome>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResults {
    pub preset: PresetKind,
    pub variants: Vec<VariantResults>,
}

/// Runs every variant for every repetition. Repetitions are independent
/// and run on the current thread pool; results keep repetition order, so
/// output bytes do not depend on scheduling.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResults, Error> {
    use rayon::prelude::*;

    let variants = plan_variants(cfg);
    let per_rep: Vec<Vec<RepOutcome>> = (0..cfg.repetitions)
        .into_par_iter()
        .map(|i| run_repetition(cfg, &variants, i as u64))
        .collect::<Result<_, Error>>()?;

    let mut results: Vec<VariantResults> = variants
        .iter()
        .map(|v| VariantResults {
            label: v.label.clone(),
            reps: Vec::with_capacity(cfg.repetitions),
        })
        .collect();
    for rep in per_rep {
        for (slot, outcome) in results.iter_mut().zip(rep) {
            slot.reps.push(outcome);
        }
    }
    Ok(ExperimentResults {
        preset: cfg.preset,
        variants: results,
    })
}

/// Runs all variants once at seed master_seed + index. The dataset and
/// split are shared across variants so arms differ only in training
/// configuration.
fn run_repetition(
    cfg: &ExperimentConfig,
    variants: &[VariantPlan],
    index: u64,
) -> Result<Vec<RepOutcome>, Error> {
    let seed = cfg
        .master_seed
        .checked_add(index)
        .ok_or_else(|| Error::config("master_seed + repetition index overflows u64"))?;
    let gen_cfg = cfg
        .generator
        .resolve(seed)
        .map_err(|es| Error::config(es.join("; ")))?;
    let data = generate(&gen_cfg)?;
    let (train, validation) = stratified_split(&data, VAL_FRAC, seed)?;

    let mut outcomes = Vec::with_capacity(variants.len());
    for plan in variants {
        let mut settings = plan.settings.clone();
        settings.seed = seed;
        let shards = build_shards(plan, &train, &settings, seed, cfg.shards.alpha)?;
        let outcome = run_training(&settings, shards, &validation)?;
        let epsilon = epsilon_report(
            settings.privacy.sigma,
            settings.privacy.clip_norm,
            settings.privacy.delta_dp,
        )?;
        let market_auc = if plan.train_markets.is_some() {
            Some(per_market_auc(&outcome.final_params, &settings, &validation)?)
        } else {
            None
        };
        outcomes.push(RepOutcome {
            seed,
            rounds: outcome.history,
            converged_round: outcome.convergence_round,
            epsilon,
            market_auc,
        });
    }
    Ok(outcomes)
}

fn build_shards(
    plan: &VariantPlan,
    train: &[SampleRecord],
    settings: &RunSettings,
    seed: u64,
    alpha: f64,
) -> Result<Vec<Vec<SampleRecord>>, Error> {
    let scope: Vec<SampleRecord> = match &plan.train_markets {
        Some(markets) => train
            .iter()
            .filter(|r| markets.contains(&r.market))
            .cloned()
            .collect(),
        None => train.to_vec(),
    };
    if plan.pooled {
        return Ok(vec![scope]);
    }
    partition_non_iid(
        &scope,
        &ShardSpec {
            clients: settings.federation.clients,
            alpha,
            seed,
        },
    )
}

/// Ranking score of the final model on each market's validation slice.
fn per_market_auc(
    params: &fedrisk_core::params::ParamVector,
    settings: &RunSettings,
    validation: &[SampleRecord],
) -> Result<Vec<(Market, Option<f64>)>, Error> {
    let views: Vec<SampleView<'_>> = validation
        .iter()
        .map(|r| r.view(settings.model.task))
        .collect();
    let scores = predict_batch(params, &settings.model, &views)?;
    let mut out = Vec::with_capacity(Market::ALL.len());
    for market in Market::ALL {
        let mut market_scores = Vec::new();
        let mut market_labels = Vec::new();
        for (record, &score) in validation.iter().zip(&scores) {
            if record.market == market {
                market_scores.push(score);
                market_labels.push(record.label);
            }
        }
        let auc = if market_scores.is_empty() {
            None
        } else {
            match compute_auc(&market_scores, &market_labels) {
                Ok(v) => Some(v),
                Err(Error::Metric(_)) => None,
                Err(e) => return Err(e),
            }
        };
        out.push((market, auc));
    }
    Ok(out)
}

//! Synthetic multi-market risk dataset, non-IID institutional partitioning,
//! and CSV round-tripping. The real cross-institution records this stands in
//! for are not public, so the generator plants a recoverable sparse signal:
//! a handful of static coordinates carry the risk, temporal trend adds to
//! it, and per-market noise controls difficulty.

use crate::error::{Error, Result};
use crate::math::sigmoid;
use crate::model::{SampleView, TaskKind};
use crate::rng::{domain, stream_id, SeededRng};
use crate::tensor::Tensor;
use rand_distr::{Distribution, Gamma, StandardNormal};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Market {
    Equity,
    Bond,
    Commodity,
    Crypto,
    Forex,
}

pub const MARKET_COUNT: usize = 5;

impl Market {
    pub const ALL: [Market; MARKET_COUNT] = [
        Market::Equity,
        Market::Bond,
        Market::Commodity,
        Market::Crypto,
        Market::Forex,
    ];

    pub fn index(self) -> usize {
        match self {
            Market::Equity => 0,
            Market::Bond => 1,
            Market::Commodity => 2,
            Market::Crypto => 3,
            Market::Forex => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Market::Equity => "equity",
            Market::Bond => "bond",
            Market::Commodity => "commodity",
            Market::Crypto => "crypto",
            Market::Forex => "forex",
        }
    }

    pub fn parse(s: &str) -> Option<Market> {
        Market::ALL.iter().copied().find(|m| m.as_str() == s)
    }
}

/// One observation: static indicators, a temporal window, the generator's
/// latent risk score, the thresholded label, and origin tags.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: u64,
    pub market: Market,
    pub label: u8,
    /// Latent probability in [0, 1]; `label == 1` iff `risk_score >= 0.5`.
    pub risk_score: f64,
    pub systemic: bool,
    /// Rank 1, length d_static.
    pub x_static: Tensor,
    /// Rank 2, seq_len x d_temporal, row-major by time step.
    pub x_seq: Tensor,
}

impl SampleRecord {
    pub fn training_target(&self, task: TaskKind) -> f64 {
        match task {
            TaskKind::Binary => f64::from(self.label),
            TaskKind::Regression => self.risk_score,
        }
    }

    pub fn view(&self, task: TaskKind) -> SampleView<'_> {
        SampleView {
            x_static: self.x_static.as_slice(),
            x_seq: self.x_seq.as_slice(),
            target: self.training_target(task),
        }
    }
}

/// Generator controls. `market_mix` and `noise_scales` are indexed by
/// [`Market::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub n_samples: usize,
    pub d_static: usize,
    pub d_temporal: usize,
    pub seq_len: usize,
    pub market_mix: [f64; MARKET_COUNT],
    pub noise_scales: [f64; MARKET_COUNT],
    pub systemic_rate: f64,
    pub seed: u64,
    pub coeff_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_samples: 20_000,
            d_static: 16,
            d_temporal: 4,
            seq_len: 12,
            market_mix: [0.25, 0.20, 0.15, 0.20, 0.20],
            noise_scales: [0.5, 0.6, 0.8, 1.0, 0.7],
            systemic_rate: 0.05,
            seed: 42,
            coeff_seed: 7,
        }
    }
}

/// Number of static coordinates with nonzero true coefficients.
pub const SIGNAL_SUPPORT: usize = 6;

const AR_COEFF: f64 = 0.8;
const AR_NOISE: f64 = 0.5;
const TREND_WEIGHT: f64 = 2.0;
const INTERCEPT: f64 = -0.3;
const SYSTEMIC_SHOCK: f64 = 1.5;
const DRIFTS: [f64; MARKET_COUNT] = [0.02, 0.0, 0.04, 0.08, -0.02];
const OFFSETS: [f64; MARKET_COUNT] = [0.0, -0.15, 0.05, 0.1, -0.05];

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::config("n_samples must be >= 1"));
        }
        if self.d_temporal == 0 || self.seq_len == 0 {
            return Err(Error::config("temporal dimensions must be >= 1"));
        }
        if self.d_static < SIGNAL_SUPPORT {
            return Err(Error::config(format!(
                "d_static must be >= {SIGNAL_SUPPORT} to hold the signal support"
            )));
        }
        let mut sum = 0.0;
        for (m, &p) in Market::ALL.iter().zip(self.market_mix.iter()) {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::config(format!(
                    "market mix for {} must be a finite non-negative proportion",
                    m.as_str()
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "market mix must sum to 1 within 1e-9, got {sum}"
            )));
        }
        for (m, &s) in Market::ALL.iter().zip(self.noise_scales.iter()) {
            if !s.is_finite() || s <= 0.0 {
                return Err(Error::config(format!(
                    "noise scale for {} must be finite and positive",
                    m.as_str()
                )));
            }
        }
        let crypto = self.noise_scales[Market::Crypto.index()];
        let forex = self.noise_scales[Market::Forex.index()];
        let equity = self.noise_scales[Market::Equity.index()];
        if !(crypto > forex && forex > equity) {
            return Err(Error::config(format!(
                "market difficulty ordering requires crypto > forex > equity \
                 noise scales, got {crypto} / {forex} / {equity}"
            )));
        }
        if !self.systemic_rate.is_finite() || !(0.0..=0.1).contains(&self.systemic_rate) {
            return Err(Error::config(format!(
                "systemic_rate must lie in [0, 0.1], got {}",
                self.systemic_rate
            )));
        }
        Ok(())
    }
}

/// Apportions `total` into integer counts proportional to `weights` using
/// largest-remainder rounding; ties go to the lower index.
pub(crate) fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let norm: Vec<f64> = if sum > 0.0 {
        weights.iter().map(|w| w / sum).collect()
    } else {
        vec![1.0 / weights.len() as f64; weights.len()]
    };
    let quotas: Vec<f64> = norm.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let len = counts.len();
    for i in 0..total - assigned {
        counts[order[i % len]] += 1;
    }
    counts
}

/// Sparse true coefficients: `SIGNAL_SUPPORT` coordinates, each a random
/// sign times a magnitude in [0.8, 1.6), drawn from the coefficient seed
/// alone so different datasets can share one ground truth.
pub fn true_coefficients(coeff_seed: u64, d_static: usize) -> Result<Vec<f64>> {
    if d_static < SIGNAL_SUPPORT {
        return Err(Error::config(format!(
            "d_static must be >= {SIGNAL_SUPPORT} to hold the signal support"
        )));
    }
    let mut rng = SeededRng::new(coeff_seed, stream_id(domain::COEFFICIENTS, 0));
    let mut indices: Vec<usize> = (0..d_static).collect();
    rng.shuffle(&mut indices);
    let mut support: Vec<usize> = indices[..SIGNAL_SUPPORT].to_vec();
    support.sort_unstable();
    let mut beta = vec![0.0; d_static];
    for &i in &support {
        let sign = if rng.next_unit_f64() < 0.5 { -1.0 } else { 1.0 };
        let magnitude = 0.8 + rng.next_unit_f64() * 0.8;
        beta[i] = sign * magnitude;
    }
    Ok(beta)
}

fn market_table(mix: &[f64; MARKET_COUNT], n: usize) -> Vec<Market> {
    let counts = largest_remainder(mix, n);
    let mut table = Vec::with_capacity(n);
    for (m, &c) in Market::ALL.iter().zip(counts.iter()) {
        table.extend(std::iter::repeat_n(*m, c));
    }
    table
}

/// Generates the full dataset. Record `id` draws from its own RNG stream,
/// so any record is reproducible without generating its predecessors.
pub fn generate(cfg: &GeneratorConfig) -> Result<Vec<SampleRecord>> {
    cfg.validate()?;
    let beta = true_coefficients(cfg.coeff_seed, cfg.d_static)?;
    let support: Vec<usize> = (0..cfg.d_static).filter(|&i| beta[i] != 0.0).collect();
    let markets = market_table(&cfg.market_mix, cfg.n_samples);
    let normal = StandardNormal;
    let mut records = Vec::with_capacity(cfg.n_samples);
    for (id, &market) in markets.iter().enumerate() {
        let mi = market.index();
        let mut rng = SeededRng::new(cfg.seed, stream_id(domain::DATA_RECORD, id as u64));

        let mut x_static: Vec<f64> = (0..cfg.d_static)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng))
            .collect();

        let mut x_seq = vec![0.0; cfg.seq_len * cfg.d_temporal];
        for t in 0..cfg.seq_len {
            for c in 0..cfg.d_temporal {
                let shock: f64 = <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng);
                x_seq[t * cfg.d_temporal + c] = if t == 0 {
                    AR_NOISE * shock
                } else {
                    DRIFTS[mi] + AR_COEFF * x_seq[(t - 1) * cfg.d_temporal + c]
                        + AR_NOISE * shock
                };
            }
        }

        let eps: f64 =
            cfg.noise_scales[mi] * <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng);
        let systemic = rng.next_unit_f64() < cfg.systemic_rate;

        if systemic {
            for &i in &support {
                x_static[i] += SYSTEMIC_SHOCK * beta[i].signum();
            }
        }

        let trend = if cfg.seq_len > 1 {
            let mean_first: f64 =
                x_seq[..cfg.d_temporal].iter().sum::<f64>() / cfg.d_temporal as f64;
            let last = (cfg.seq_len - 1) * cfg.d_temporal;
            let mean_last: f64 =
                x_seq[last..].iter().sum::<f64>() / cfg.d_temporal as f64;
            (mean_last - mean_first) / (cfg.seq_len - 1) as f64
        } else {
            0.0
        };

        let mut logit = INTERCEPT + OFFSETS[mi] + TREND_WEIGHT * trend + eps;
        for &i in &support {
            logit += beta[i] * x_static[i];
        }
        if systemic {
            // Shocks certify the event: the label must come out positive.
            logit = logit.max(0.0);
        }
        let risk_score = sigmoid(logit);
        let label = u8::from(risk_score >= 0.5);

        records.push(SampleRecord {
            id: id as u64,
            market,
            label,
            risk_score,
            systemic,
            x_static: Tensor::new(vec![cfg.d_static], x_static)?,
            x_seq: Tensor::new(vec![cfg.seq_len, cfg.d_temporal], x_seq)?,
        });
    }
    Ok(records)
}

/// Institutional shard assignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShardSpec {
    pub clients: usize,
    /// Dirichlet concentration; small values produce label-skewed shards.
    pub alpha: f64,
    pub seed: u64,
}

const PARTITION_ATTEMPTS: u64 = 1000;

/// Splits records into per-institution shards, skewing each label class
/// across clients by a Dirichlet(alpha) draw. Shards are sorted by record
/// id; their multiset union equals the input.
pub fn partition_non_iid(
    data: &[SampleRecord],
    spec: &ShardSpec,
) -> Result<Vec<Vec<SampleRecord>>> {
    if data.is_empty() {
        return Err(Error::config("cannot partition an empty dataset"));
    }
    if spec.clients == 0 {
        return Err(Error::config("client count must be >= 1"));
    }
    if spec.clients > data.len() {
        return Err(Error::config(format!(
            "client count {} exceeds sample count {}",
            spec.clients,
            data.len()
        )));
    }
    if !spec.alpha.is_finite() || spec.alpha <= 0.0 {
        return Err(Error::config(format!(
            "Dirichlet alpha must be finite and positive, got {}",
            spec.alpha
        )));
    }
    if spec.clients == 1 {
        return Ok(vec![data.to_vec()]);
    }

    let mut classes: Vec<Vec<usize>> = vec![Vec::new(), Vec::new()];
    for (i, r) in data.iter().enumerate() {
        classes[usize::from(r.label)].push(i);
    }
    let gamma = Gamma::new(spec.alpha, 1.0)
        .map_err(|e| Error::config(format!("invalid Dirichlet alpha: {e}")))?;

    for attempt in 0..PARTITION_ATTEMPTS {
        let mut rng = SeededRng::new(spec.seed, stream_id(domain::PARTITION, attempt));
        let mut shards: Vec<Vec<SampleRecord>> = vec![Vec::new(); spec.clients];
        for class in &classes {
            if class.is_empty() {
                continue;
            }
            let mut members = class.clone();
            rng.shuffle(&mut members);
            let weights: Vec<f64> = (0..spec.clients)
                .map(|_| gamma.sample(&mut rng))
                .collect();
            let counts = largest_remainder(&weights, members.len());
            let mut cursor = 0;
            for (k, &c) in counts.iter().enumerate() {
                for &idx in &members[cursor..cursor + c] {
                    shards[k].push(data[idx].clone());
                }
                cursor += c;
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            for shard in &mut shards {
                shard.sort_by_key(|r| r.id);
            }
            return Ok(shards);
        }
    }
    Err(Error::config(format!(
        "no assignment with {} non-empty shards found in {PARTITION_ATTEMPTS} attempts; \
         raise alpha or lower the client count",
        spec.clients
    )))
}

/// Holds out `val_frac` of the records, stratified by (market, label) so
/// the held-out split mirrors the pooled distribution. Both halves come
/// back sorted by id.
pub fn stratified_split(
    data: &[SampleRecord],
    val_frac: f64,
    seed: u64,
) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    if !val_frac.is_finite() || !(0.0 < val_frac && val_frac < 1.0) {
        return Err(Error::config(format!(
            "validation fraction must lie in (0, 1), got {val_frac}"
        )));
    }
    if data.is_empty() {
        return Err(Error::config("cannot split an empty dataset"));
    }
    let mut rng = SeededRng::new(seed, stream_id(domain::SPLIT, 0));
    let mut train = Vec::new();
    let mut val = Vec::new();
    for market in Market::ALL {
        for label in 0..2u8 {
            let mut group: Vec<usize> = data
                .iter()
                .enumerate()
                .filter(|(_, r)| r.market == market && r.label == label)
                .map(|(i, _)| i)
                .collect();
            if group.is_empty() {
                continue;
            }
            rng.shuffle(&mut group);
            let n_val = ((group.len() as f64 * val_frac).round() as usize).min(group.len());
            for &idx in &group[..n_val] {
                val.push(data[idx].clone());
            }
            for &idx in &group[n_val..] {
                train.push(data[idx].clone());
            }
        }
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::config(format!(
            "split left an empty side (train {}, val {}); dataset too small \
             for fraction {val_frac}",
            train.len(),
            val.len()
        )));
    }
    train.sort_by_key(|r| r.id);
    val.sort_by_key(|r| r.id);
    Ok((train, val))
}

fn dims_of(records: &[SampleRecord]) -> Result<(usize, usize, usize)> {
    let first = &records[0];
    let d_static = first.x_static.len();
    let seq_shape = first.x_seq.shape();
    let (seq_len, d_temporal) = (seq_shape[0], seq_shape[1]);
    for r in records {
        if r.x_static.len() != d_static || r.x_seq.shape() != [seq_len, d_temporal] {
            return Err(Error::schema(format!(
                "record {} has inconsistent feature dimensions",
                r.id
            )));
        }
    }
    Ok((d_static, seq_len, d_temporal))
}

fn csv_header(d_static: usize, seq_len: usize, d_temporal: usize) -> String {
    let mut h = String::from("id,market,label,risk_score,systemic");
    for j in 0..d_static {
        let _ = write!(h, ",s{j}");
    }
    for t in 0..seq_len {
        for c in 0..d_temporal {
            let _ = write!(h, ",t{t}_c{c}");
        }
    }
    h
}

/// Writes records with 17-significant-digit floats (lossless for f64),
/// LF line endings, header mandatory. An empty dataset writes a header
/// with no feature columns.
pub fn write_csv(records: &[SampleRecord], path: &Path) -> Result<()> {
    let (d_static, seq_len, d_temporal) = if records.is_empty() {
        (0, 0, 0)
    } else {
        dims_of(records)?
    };
    let mut out = csv_header(d_static, seq_len, d_temporal);
    out.push('\n');
    for r in records {
        let _ = write!(
            out,
            "{},{},{},{:.16e},{}",
            r.id,
            r.market.as_str(),
            r.label,
            r.risk_score,
            u8::from(r.systemic)
        );
        for v in r.x_static.as_slice() {
            let _ = write!(out, ",{v:.16e}");
        }
        for v in r.x_seq.as_slice() {
            let _ = write!(out, ",{v:.16e}");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn parse_header(header: &str) -> Result<(usize, usize, usize)> {
    let cols: Vec<&str> = header.split(',').collect();
    let fixed = ["id", "market", "label", "risk_score", "systemic"];
    if cols.len() < fixed.len() || cols[..fixed.len()] != fixed {
        return Err(Error::schema(format!(
            "header must begin with {}",
            fixed.join(",")
        )));
    }
    let mut rest = &cols[fixed.len()..];
    let mut d_static = 0;
    while d_static < rest.len() && rest[d_static] == format!("s{d_static}") {
        d_static += 1;
    }
    rest = &rest[d_static..];
    // Temporal columns must appear t-major and contiguous: t0_c0, t0_c1, ...
    let mut d_temporal = 0;
    while d_temporal < rest.len() && rest[d_temporal] == format!("t0_c{d_temporal}") {
        d_temporal += 1;
    }
    if rest.is_empty() {
        return Ok((d_static, 0, 0));
    }
    if d_temporal == 0 {
        return Err(Error::schema(format!(
            "unrecognized column '{}' after static features",
            rest[0]
        )));
    }
    if !rest.len().is_multiple_of(d_temporal) {
        return Err(Error::schema(
            "temporal columns do not form whole time steps".to_string(),
        ));
    }
    let seq_len = rest.len() / d_temporal;
    for t in 0..seq_len {
        for c in 0..d_temporal {
            let expect = format!("t{t}_c{c}");
            if rest[t * d_temporal + c] != expect {
                return Err(Error::schema(format!(
                    "expected column '{}', found '{}'",
                    expect,
                    rest[t * d_temporal + c]
                )));
            }
        }
    }
    Ok((d_static, seq_len, d_temporal))
}

fn parse_finite(field: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = field.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("{what} '{field}' is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            msg: format!("{what} '{field}' is not finite"),
        });
    }
    Ok(v)
}

/// Reads a dataset previously written by [`write_csv`]. Line numbers in
/// parse errors are 1-based and count the header line.
pub fn read_csv(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.split('\n');
    let header = lines.next().ok_or_else(|| Error::schema("empty file"))?;
    let (d_static, seq_len, d_temporal) = parse_header(header)?;
    let expected_fields = 5 + d_static + seq_len * d_temporal;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected_fields {
            return Err(Error::Parse {
                line: line_no,
                msg: format!(
                    "expected {expected_fields} fields, found {}",
                    fields.len()
                ),
            });
        }
        let id: u64 = fields[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("id '{}' is not an unsigned integer", fields[0]),
        })?;
        let market = Market::parse(fields[1]).ok_or_else(|| Error::Parse {
            line: line_no,
            msg: format!("unknown market '{}'", fields[1]),
        })?;
        let label = match fields[2] {
            "0" => 0u8,
            "1" => 1u8,
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("label '{other}' must be 0 or 1"),
                })
            }
        };
        let risk_score = parse_finite(fields[3], line_no, "risk_score")?;
        if !(0.0..=1.0).contains(&risk_score) {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("risk_score {risk_score} outside [0, 1]"),
            });
        }
        let systemic = match fields[4] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("systemic '{other}' must be 0 or 1"),
                })
            }
        };
        let mut x_static = Vec::with_capacity(d_static);
        for j in 0..d_static {
            x_static.push(parse_finite(fields[5 + j], line_no, "static feature")?);
        }
        let mut x_seq = Vec::with_capacity(seq_len * d_temporal);
        for j in 0..seq_len * d_temporal {
            x_seq.push(parse_finite(
                fields[5 + d_static + j],
                line_no,
                "temporal feature",
            )?);
        }
        records.push(SampleRecord {
            id,
            market,
            label,
            risk_score,
            systemic,
            x_static: Tensor::new(vec![d_static], x_static)?,
            x_seq: Tensor::new(vec![seq_len, d_temporal], x_seq)?,
        });
    }
    Ok(records)
}

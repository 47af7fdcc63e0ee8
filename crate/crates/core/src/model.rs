//! Risk scoring model: additive feature attention over static indicators,
//! a small tanh recurrence over the temporal channels, and a linear head on
//! the concatenated representations. Gradients are hand-written; the
//! objective value returned by [`backward`] is bit-identical to
//! [`local_objective`] on the same batch.

use crate::error::{Error, Result};
use crate::math::{self, sigmoid};
use crate::params::{Gradient, Layout, ParamVector};
use crate::rng::SeededRng;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Binary,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    /// Learned additive scoring: s_j = u . tanh(W e_j + b), softmax weights.
    Additive,
    /// Uniform weights; the scoring parameters stay unused by the data path.
    MeanPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_static: usize,
    pub d_temporal: usize,
    pub seq_len: usize,
    pub d_embed: usize,
    pub d_hidden: usize,
    pub task: TaskKind,
    pub attention: AttentionKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_static: 16,
            d_temporal: 4,
            seq_len: 12,
            d_embed: 8,
            d_hidden: 16,
            task: TaskKind::Binary,
            attention: AttentionKind::Additive,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_static", self.d_static),
            ("d_temporal", self.d_temporal),
            ("seq_len", self.seq_len),
            ("d_embed", self.d_embed),
            ("d_hidden", self.d_hidden),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("model dimension {name} must be >= 1")));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Arc<Layout> {
        Layout::builder()
            .push("emb", self.d_static, self.d_embed)
            .push("att_w", self.d_embed, self.d_embed)
            .push("att_b", self.d_embed, 1)
            .push("att_u", self.d_embed, 1)
            .push("rnn_wh", self.d_hidden, self.d_hidden)
            .push("rnn_wx", self.d_hidden, self.d_temporal)
            .push("rnn_b", self.d_hidden, 1)
            .push("out_w", self.d_embed + self.d_hidden, 1)
            .push("out_b", 1, 1)
            .build()
    }

    pub fn param_count(&self) -> usize {
        self.layout().total_len()
    }
}

/// One training example as flat feature slices plus its regression or
/// classification target.
#[derive(Debug, Clone, Copy)]
pub struct SampleView<'a> {
    pub x_static: &'a [f64],
    pub x_seq: &'a [f64],
    pub target: f64,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Per-feature embeddings, `d_static * d_embed`, row-major by feature.
    pub embeds: Vec<f64>,
    /// tanh(W e_j + b) per feature, same shape as `embeds`. Unused under
    /// mean pooling.
    pub tanh_scores: Vec<f64>,
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
    pub context: Vec<f64>,
    /// Hidden states h_0..h_T, `(seq_len + 1) * d_hidden`, h_0 = 0.
    pub hidden: Vec<f64>,
    pub z: f64,
    pub prediction: f64,
}

impl ForwardCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        ForwardCache {
            embeds: vec![0.0; cfg.d_static * cfg.d_embed],
            tanh_scores: vec![0.0; cfg.d_static * cfg.d_embed],
            scores: vec![0.0; cfg.d_static],
            weights: vec![0.0; cfg.d_static],
            context: vec![0.0; cfg.d_embed],
            hidden: vec![0.0; (cfg.seq_len + 1) * cfg.d_hidden],
            z: 0.0,
            prediction: 0.0,
        }
    }
}

struct Offsets {
    emb: usize,
    att_w: usize,
    att_b: usize,
    att_u: usize,
    rnn_wh: usize,
    rnn_wx: usize,
    rnn_b: usize,
    out_w: usize,
    out_b: usize,
}

impl Offsets {
    fn resolve(params: &ParamVector, cfg: &ModelConfig) -> Result<Offsets> {
        if params.len() != cfg.param_count() {
            return Err(Error::config(format!(
                "parameter vector length {} does not match model ({} expected)",
                params.len(),
                cfg.param_count()
            )));
        }
        let l = params.layout();
        Ok(Offsets {
            emb: l.entry("emb")?.offset,
            att_w: l.entry("att_w")?.offset,
            att_b: l.entry("att_b")?.offset,
            att_u: l.entry("att_u")?.offset,
            rnn_wh: l.entry("rnn_wh")?.offset,
            rnn_wx: l.entry("rnn_wx")?.offset,
            rnn_b: l.entry("rnn_b")?.offset,
            out_w: l.entry("out_w")?.offset,
            out_b: l.entry("out_b")?.offset,
        })
    }
}

/// Xavier-uniform weights (bound sqrt(6 / (fan_in + fan_out))), zero biases.
/// Vectors count as (len, 1) matrices. Draw order follows the layout.
pub fn init_params(cfg: &ModelConfig, rng: &mut SeededRng) -> Result<ParamVector> {
    cfg.validate()?;
    let layout = cfg.layout();
    let mut data = vec![0.0; layout.total_len()];
    for entry in layout.entries() {
        let bound = match entry.name {
            "att_b" | "rnn_b" | "out_b" => continue,
            // out_w and att_u are stored as (len, 1); their fan is the
            // vector length feeding a single output.
            _ => (6.0 / (entry.rows + entry.cols) as f64).sqrt(),
        };
        for slot in data[entry.offset..entry.offset + entry.len()].iter_mut() {
            *slot = (rng.next_unit_f64() * 2.0 - 1.0) * bound;
        }
    }
    ParamVector::from_vec(layout, data)
}

fn check_inputs(cfg: &ModelConfig, x_static: &[f64], x_seq: &[f64]) -> Result<()> {
    if x_static.len() != cfg.d_static {
        return Err(Error::config(format!(
            "static feature length {} does not match d_static {}",
            x_static.len(),
            cfg.d_static
        )));
    }
    if x_seq.len() != cfg.seq_len * cfg.d_temporal {
        return Err(Error::config(format!(
            "sequence length {} does not match seq_len * d_temporal = {}",
            x_seq.len(),
            cfg.seq_len * cfg.d_temporal
        )));
    }
    Ok(())
}

fn attention_into(
    cache: &mut ForwardCache,
    p: &[f64],
    off: &Offsets,
    cfg: &ModelConfig,
    x_static: &[f64],
) -> Result<()> {
    let ds = cfg.d_static;
    let de = cfg.d_embed;
    for j in 0..ds {
        let xj = x_static[j];
        for c in 0..de {
            cache.embeds[j * de + c] = xj * p[off.emb + j * de + c];
        }
    }
    match cfg.attention {
        AttentionKind::Additive => {
            for j in 0..ds {
                let e_j = j * de;
                for r in 0..de {
                    let mut acc = p[off.att_b + r];
                    let w_row = off.att_w + r * de;
                    for c in 0..de {
                        acc += p[w_row + c] * cache.embeds[e_j + c];
                    }
                    cache.tanh_scores[e_j + r] = acc.tanh();
                }
                let mut s = 0.0;
                for r in 0..de {
                    s += p[off.att_u + r] * cache.tanh_scores[e_j + r];
                }
                cache.scores[j] = s;
            }
            if cache.scores.iter().any(|x| !x.is_finite()) {
                return Err(Error::numeric(
                    "feature_attention",
                    "non-finite attention score".to_string(),
                ));
            }
            math::softmax_into(&mut cache.weights, &cache.scores);
            for c in 0..de {
                let mut acc = 0.0;
                for j in 0..ds {
                    acc += cache.weights[j] * cache.embeds[j * de + c];
                }
                cache.context[c] = acc;
            }
        }
        AttentionKind::MeanPool => {
            let inv = 1.0 / ds as f64;
            cache.scores.fill(0.0);
            cache.weights.fill(inv);
            for c in 0..de {
                let mut acc = 0.0;
                for j in 0..ds {
                    acc += cache.embeds[j * de + c];
                }
                cache.context[c] = acc * inv;
            }
        }
    }
    if cache.context.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric(
            "feature_attention",
            "non-finite context vector".to_string(),
        ));
    }
    Ok(())
}

fn recurrence_into(
    cache: &mut ForwardCache,
    p: &[f64],
    off: &Offsets,
    cfg: &ModelConfig,
    x_seq: &[f64],
) -> Result<()> {
    let dh = cfg.d_hidden;
    let dt = cfg.d_temporal;
    cache.hidden[..dh].fill(0.0);
    for t in 1..=cfg.seq_len {
        let (prev_all, cur) = cache.hidden.split_at_mut(t * dh);
        let prev = &prev_all[(t - 1) * dh..];
        let x_t = &x_seq[(t - 1) * dt..t * dt];
        for r in 0..dh {
            let mut acc = p[off.rnn_b + r];
            let wh_row = off.rnn_wh + r * dh;
            for c in 0..dh {
                acc += p[wh_row + c] * prev[c];
            }
            let wx_row = off.rnn_wx + r * dt;
            for c in 0..dt {
                acc += p[wx_row + c] * x_t[c];
            }
            cur[r] = acc.tanh();
        }
    }
    let h_last = &cache.hidden[cfg.seq_len * dh..];
    if h_last.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric(
            "temporal_encoder",
            "non-finite hidden state".to_string(),
        ));
    }
    Ok(())
}

fn forward_into(
    cache: &mut ForwardCache,
    p: &[f64],
    off: &Offsets,
    cfg: &ModelConfig,
    x_static: &[f64],
    x_seq: &[f64],
) -> Result<()> {
    attention_into(cache, p, off, cfg, x_static)?;
    recurrence_into(cache, p, off, cfg, x_seq)?;
    let de = cfg.d_embed;
    let dh = cfg.d_hidden;
    let mut z = p[off.out_b];
    for c in 0..de {
        z += p[off.out_w + c] * cache.context[c];
    }
    let h_last = &cache.hidden[cfg.seq_len * dh..];
    for c in 0..dh {
        z += p[off.out_w + de + c] * h_last[c];
    }
    if !z.is_finite() {
        return Err(Error::numeric("head", "non-finite logit".to_string()));
    }
    cache.z = z;
    cache.prediction = match cfg.task {
        TaskKind::Binary => sigmoid(z),
        TaskKind::Regression => z,
    };
    Ok(())
}

/// Runs the full model on one sample. Binary predictions are probabilities
/// in (0, 1); regression predictions are raw scores.
pub fn forward(
    params: &ParamVector,
    cfg: &ModelConfig,
    x_static: &[f64],
    x_seq: &[f64],
) -> Result<(f64, ForwardCache)> {
    cfg.validate()?;
    check_inputs(cfg, x_static, x_seq)?;
    let off = Offsets::resolve(params, cfg)?;
    let mut cache = ForwardCache::new(cfg);
    forward_into(&mut cache, params.data(), &off, cfg, x_static, x_seq)?;
    Ok((cache.prediction, cache))
}

/// Attention weights and pooled context for one static feature vector.
/// Weights form a probability simplex.
pub fn feature_attention(
    params: &ParamVector,
    cfg: &ModelConfig,
    x_static: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    cfg.validate()?;
    if x_static.len() != cfg.d_static {
        return Err(Error::config(format!(
            "static feature length {} does not match d_static {}",
            x_static.len(),
            cfg.d_static
        )));
    }
    let off = Offsets::resolve(params, cfg)?;
    let mut cache = ForwardCache::new(cfg);
    attention_into(&mut cache, params.data(), &off, cfg, x_static)?;
    Ok((cache.weights, cache.context))
}

/// Final hidden state h_T of the recurrence, dimension `d_hidden`.
pub fn temporal_encode(
    params: &ParamVector,
    cfg: &ModelConfig,
    x_seq: &[f64],
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if x_seq.len() != cfg.seq_len * cfg.d_temporal {
        return Err(Error::config(format!(
            "sequence length {} does not match seq_len * d_temporal = {}",
            x_seq.len(),
            cfg.seq_len * cfg.d_temporal
        )));
    }
    let off = Offsets::resolve(params, cfg)?;
    let mut cache = ForwardCache::new(cfg);
    recurrence_into(&mut cache, params.data(), &off, cfg, x_seq)?;
    Ok(cache.hidden[cfg.seq_len * cfg.d_hidden..].to_vec())
}

/// Predictions for a batch of samples, reusing one forward cache.
pub fn predict_batch(
    params: &ParamVector,
    cfg: &ModelConfig,
    samples: &[SampleView<'_>],
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let off = Offsets::resolve(params, cfg)?;
    let mut cache = ForwardCache::new(cfg);
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        check_inputs(cfg, s.x_static, s.x_seq)?;
        forward_into(&mut cache, params.data(), &off, cfg, s.x_static, s.x_seq)?;
        out.push(cache.prediction);
    }
    Ok(out)
}

const CE_CLAMP: f64 = 1e-12;

/// Loss for a single prediction. Cross-entropy clamps probabilities to
/// [1e-12, 1 - 1e-12] before taking logs.
pub fn sample_loss(prediction: f64, target: f64, kind: LossKind) -> f64 {
    match kind {
        LossKind::CrossEntropy => {
            let p = prediction.clamp(CE_CLAMP, 1.0 - CE_CLAMP);
            -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
        }
        LossKind::Mse => {
            let d = prediction - target;
            d * d
        }
    }
}

pub fn check_loss_pairing(task: TaskKind, loss: LossKind) -> Result<()> {
    if task == TaskKind::Regression && loss == LossKind::CrossEntropy {
        return Err(Error::config(
            "cross-entropy loss requires the binary task".to_string(),
        ));
    }
    Ok(())
}

/// Regularized local objective: mean sample loss over the batch plus
/// lambda * ||theta||^2.
pub fn local_objective(
    params: &ParamVector,
    cfg: &ModelConfig,
    batch: &[SampleView<'_>],
    lambda: f64,
    loss: LossKind,
) -> Result<f64> {
    cfg.validate()?;
    check_loss_pairing(cfg.task, loss)?;
    if batch.is_empty() {
        return Err(Error::config("objective over an empty batch".to_string()));
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::config(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    let off = Offsets::resolve(params, cfg)?;
    let mut cache = ForwardCache::new(cfg);
    let mut loss_sum = 0.0;
    for s in batch {
        check_inputs(cfg, s.x_static, s.x_seq)?;
        forward_into(&mut cache, params.data(), &off, cfg, s.x_static, s.x_seq)?;
        loss_sum += sample_loss(cache.prediction, s.target, loss);
    }
    Ok(loss_sum / batch.len() as f64 + lambda * params.l2_norm_sq())
}

struct BackwardScratch {
    d_ctx: Vec<f64>,
    d_h: Vec<f64>,
    d_h_prev: Vec<f64>,
    d_g: Vec<f64>,
    d_w: Vec<f64>,
    d_s: Vec<f64>,
    d_a: Vec<f64>,
    d_e: Vec<f64>,
}

impl BackwardScratch {
    fn new(cfg: &ModelConfig) -> Self {
        BackwardScratch {
            d_ctx: vec![0.0; cfg.d_embed],
            d_h: vec![0.0; cfg.d_hidden],
            d_h_prev: vec![0.0; cfg.d_hidden],
            d_g: vec![0.0; cfg.d_hidden],
            d_w: vec![0.0; cfg.d_static],
            d_s: vec![0.0; cfg.d_static],
            d_a: vec![0.0; cfg.d_embed],
            d_e: vec![0.0; cfg.d_embed],
        }
    }
}

fn loss_grad_z(prediction: f64, target: f64, task: TaskKind, loss: LossKind) -> f64 {
    match (task, loss) {
        (TaskKind::Binary, LossKind::CrossEntropy) => prediction - target,
        (TaskKind::Binary, LossKind::Mse) => {
            2.0 * (prediction - target) * prediction * (1.0 - prediction)
        }
        (TaskKind::Regression, LossKind::Mse) => 2.0 * (prediction - target),
        (TaskKind::Regression, LossKind::CrossEntropy) => {
            unreachable!("pairing validated before backward")
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_sample(
    grad: &mut [f64],
    scratch: &mut BackwardScratch,
    cache: &ForwardCache,
    p: &[f64],
    off: &Offsets,
    cfg: &ModelConfig,
    sample: &SampleView<'_>,
    dz: f64,
) {
    let ds = cfg.d_static;
    let de = cfg.d_embed;
    let dh = cfg.d_hidden;
    let dt = cfg.d_temporal;
    let seq_len = cfg.seq_len;

    // Head.
    grad[off.out_b] += dz;
    let h_last = &cache.hidden[seq_len * dh..];
    for c in 0..de {
        grad[off.out_w + c] += dz * cache.context[c];
        scratch.d_ctx[c] = dz * p[off.out_w + c];
    }
    for c in 0..dh {
        grad[off.out_w + de + c] += dz * h_last[c];
        scratch.d_h[c] = dz * p[off.out_w + de + c];
    }

    // Recurrence, back through time.
    for t in (1..=seq_len).rev() {
        let h_t = &cache.hidden[t * dh..(t + 1) * dh];
        let h_prev = &cache.hidden[(t - 1) * dh..t * dh];
        let x_t = &sample.x_seq[(t - 1) * dt..t * dt];
        for ((g, &d), &h) in scratch.d_g.iter_mut().zip(&scratch.d_h).zip(h_t) {
            *g = d * (1.0 - h * h);
        }
        for r in 0..dh {
            let g = scratch.d_g[r];
            grad[off.rnn_b + r] += g;
            let wx_row = off.rnn_wx + r * dt;
            for c in 0..dt {
                grad[wx_row + c] += g * x_t[c];
            }
            let wh_row = off.rnn_wh + r * dh;
            for c in 0..dh {
                grad[wh_row + c] += g * h_prev[c];
            }
        }
        for c in 0..dh {
            let mut acc = 0.0;
            for r in 0..dh {
                acc += p[off.rnn_wh + r * dh + c] * scratch.d_g[r];
            }
            scratch.d_h_prev[c] = acc;
        }
        std::mem::swap(&mut scratch.d_h, &mut scratch.d_h_prev);
    }

    // Attention.
    match cfg.attention {
        AttentionKind::MeanPool => {
            let inv = 1.0 / ds as f64;
            for j in 0..ds {
                let xj = sample.x_static[j];
                for c in 0..de {
                    grad[off.emb + j * de + c] += xj * scratch.d_ctx[c] * inv;
                }
            }
        }
        AttentionKind::Additive => {
            for j in 0..ds {
                let e_j = &cache.embeds[j * de..(j + 1) * de];
                scratch.d_w[j] = scratch
                    .d_ctx
                    .iter()
                    .zip(e_j)
                    .map(|(a, b)| a * b)
                    .sum();
            }
            let mut dot = 0.0;
            for j in 0..ds {
                dot += cache.weights[j] * scratch.d_w[j];
            }
            for j in 0..ds {
                scratch.d_s[j] = cache.weights[j] * (scratch.d_w[j] - dot);
            }
            for j in 0..ds {
                let e_j = &cache.embeds[j * de..(j + 1) * de];
                let t_j = &cache.tanh_scores[j * de..(j + 1) * de];
                let dsj = scratch.d_s[j];
                for c in 0..de {
                    grad[off.att_u + c] += dsj * t_j[c];
                    scratch.d_a[c] = dsj * p[off.att_u + c] * (1.0 - t_j[c] * t_j[c]);
                }
                for r in 0..de {
                    let a = scratch.d_a[r];
                    grad[off.att_b + r] += a;
                    let w_row = off.att_w + r * de;
                    for c in 0..de {
                        grad[w_row + c] += a * e_j[c];
                    }
                }
                for c in 0..de {
                    let mut acc = cache.weights[j] * scratch.d_ctx[c];
                    for r in 0..de {
                        acc += p[off.att_w + r * de + c] * scratch.d_a[r];
                    }
                    scratch.d_e[c] = acc;
                }
                let xj = sample.x_static[j];
                for c in 0..de {
                    grad[off.emb + j * de + c] += xj * scratch.d_e[c];
                }
            }
        }
    }
}

/// Batch gradient of the regularized objective. Returns the objective value
/// (bit-identical to [`local_objective`] on the same inputs) and the
/// gradient, laid out like the parameters.
pub fn backward(
    params: &ParamVector,
    cfg: &ModelConfig,
    batch: &[SampleView<'_>],
    lambda: f64,
    loss: LossKind,
) -> Result<(f64, Gradient)> {
    cfg.validate()?;
    check_loss_pairing(cfg.task, loss)?;
    if batch.is_empty() {
        return Err(Error::config("gradient over an empty batch".to_string()));
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::config(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    let off = Offsets::resolve(params, cfg)?;
    let p = params.data();
    let mut cache = ForwardCache::new(cfg);
    let mut scratch = BackwardScratch::new(cfg);
    let mut grad = vec![0.0; params.len()];
    let mut loss_sum = 0.0;
    for s in batch {
        check_inputs(cfg, s.x_static, s.x_seq)?;
        forward_into(&mut cache, p, &off, cfg, s.x_static, s.x_seq)?;
        loss_sum += sample_loss(cache.prediction, s.target, loss);
        let dz = loss_grad_z(cache.prediction, s.target, cfg.task, loss);
        backward_sample(&mut grad, &mut scratch, &cache, p, &off, cfg, s, dz);
    }
    let n = batch.len() as f64;
    for (g, &w) in grad.iter_mut().zip(p.iter()) {
        *g = *g / n + 2.0 * lambda * w;
    }
    let objective = loss_sum / n + lambda * params.l2_norm_sq();
    let grad = Gradient::from_vec(params.layout().clone(), grad)?;
    Ok((objective, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, stream_id};
    use proptest::prelude::*;

    fn sample_inputs(cfg: &ModelConfig, seed: u64) -> (Vec<f64>, Vec<f64>, f64) {
        let mut rng = SeededRng::new(seed, 77);
        let xs: Vec<f64> = (0..cfg.d_static)
            .map(|_| rng.next_unit_f64() * 2.0 - 1.0)
            .collect();
        let xq: Vec<f64> = (0..cfg.seq_len * cfg.d_temporal)
            .map(|_| rng.next_unit_f64() * 2.0 - 1.0)
            .collect();
        let y = if rng.next_unit_f64() < 0.5 { 0.0 } else { 1.0 };
        (xs, xq, y)
    }

    fn init(cfg: &ModelConfig, seed: u64) -> ParamVector {
        let mut rng = SeededRng::new(seed, stream_id(domain::MODEL_INIT, 0));
        init_params(cfg, &mut rng).unwrap()
    }

    #[test]
    fn default_model_stays_small() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.param_count(), 569);
        assert!(cfg.param_count() < 3000);
    }

    #[test]
    fn init_bounds_follow_fan_sums_and_biases_are_zero() {
        let cfg = ModelConfig {
            d_static: 4,
            d_embed: 4,
            ..ModelConfig::default()
        };
        let params = init(&cfg, 3);
        let bound_44 = (6.0f64 / 8.0).sqrt();
        for &w in params.view("att_w").unwrap() {
            assert!(w.abs() <= bound_44, "{w} exceeds {bound_44}");
        }
        for &w in params.view("emb").unwrap() {
            assert!(w.abs() <= bound_44);
        }
        assert!(params.view("att_b").unwrap().iter().all(|&b| b == 0.0));
        assert!(params.view("rnn_b").unwrap().iter().all(|&b| b == 0.0));
        assert_eq!(params.view("out_b").unwrap(), &[0.0]);
    }

    #[test]
    fn binary_predictions_are_probabilities() {
        let cfg = ModelConfig::default();
        let params = init(&cfg, 11);
        for seed in 0..20 {
            let (xs, xq, _) = sample_inputs(&cfg, seed);
            let (p, _) = forward(&params, &cfg, &xs, &xq).unwrap();
            assert!(p > 0.0 && p < 1.0, "prediction {p} outside (0,1)");
        }
    }

    #[test]
    fn attention_weights_form_a_simplex() {
        let cfg = ModelConfig::default();
        let params = init(&cfg, 4);
        let (xs, _, _) = sample_inputs(&cfg, 9);
        let (w, ctx) = feature_attention(&params, &cfg, &xs).unwrap();
        assert_eq!(w.len(), cfg.d_static);
        assert_eq!(ctx.len(), cfg.d_embed);
        assert!(w.iter().all(|&x| x >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_pool_weights_are_uniform() {
        let cfg = ModelConfig {
            attention: AttentionKind::MeanPool,
            ..ModelConfig::default()
        };
        let params = init(&cfg, 4);
        let (xs, _, _) = sample_inputs(&cfg, 9);
        let (w, _) = feature_attention(&params, &cfg, &xs).unwrap();
        for &x in &w {
            assert_eq!(x, 1.0 / cfg.d_static as f64);
        }
    }

    #[test]
    fn temporal_encoding_is_bounded_by_tanh() {
        let cfg = ModelConfig::default();
        let params = init(&cfg, 5);
        let (_, xq, _) = sample_inputs(&cfg, 2);
        let h = temporal_encode(&params, &cfg, &xq).unwrap();
        assert_eq!(h.len(), cfg.d_hidden);
        assert!(h.iter().all(|&x| x.abs() <= 1.0));
    }

    #[test]
    fn cross_entropy_at_half_is_ln_two() {
        let loss = sample_loss(0.5, 1.0, LossKind::CrossEntropy);
        assert!((loss - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn regression_with_cross_entropy_is_rejected() {
        let cfg = ModelConfig {
            task: TaskKind::Regression,
            ..ModelConfig::default()
        };
        let params = init(&cfg, 1);
        let (xs, xq, _) = sample_inputs(&cfg, 1);
        let batch = [SampleView {
            x_static: &xs,
            x_seq: &xq,
            target: 0.3,
        }];
        assert!(matches!(
            local_objective(&params, &cfg, &batch, 0.0, LossKind::CrossEntropy),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn objective_is_mean_loss_plus_ridge_term() {
        let cfg = ModelConfig::default();
        let params = init(&cfg, 21);
        let inputs: Vec<(Vec<f64>, Vec<f64>, f64)> =
            (0..5).map(|s| sample_inputs(&cfg, s)).collect();
        let batch: Vec<SampleView> = inputs
            .iter()
            .map(|(xs, xq, y)| SampleView {
                x_static: xs,
                x_seq: xq,
                target: *y,
            })
            .collect();
        let lambda = 0.1;
        let obj = local_objective(&params, &cfg, &batch, lambda, LossKind::CrossEntropy).unwrap();
        let mut loss_sum = 0.0;
        for s in &batch {
            let (p, _) = forward(&params, &cfg, s.x_static, s.x_seq).unwrap();
            loss_sum += sample_loss(p, s.target, LossKind::CrossEntropy);
        }
        let expected = loss_sum / batch.len() as f64 + lambda * params.l2_norm_sq();
        assert_eq!(obj, expected);
    }

    #[test]
    fn backward_objective_matches_local_objective_bit_exactly() {
        for (task, loss) in [
            (TaskKind::Binary, LossKind::CrossEntropy),
            (TaskKind::Binary, LossKind::Mse),
            (TaskKind::Regression, LossKind::Mse),
        ] {
            let cfg = ModelConfig {
                task,
                ..ModelConfig::default()
            };
            let params = init(&cfg, 31);
            let inputs: Vec<(Vec<f64>, Vec<f64>, f64)> =
                (0..7).map(|s| sample_inputs(&cfg, 100 + s)).collect();
            let batch: Vec<SampleView> = inputs
                .iter()
                .map(|(xs, xq, y)| SampleView {
                    x_static: xs,
                    x_seq: xq,
                    target: *y,
                })
                .collect();
            let (obj, _) = backward(&params, &cfg, &batch, 0.01, loss).unwrap();
            let direct = local_objective(&params, &cfg, &batch, 0.01, loss).unwrap();
            assert_eq!(obj, direct, "objective mismatch for {task:?}/{loss:?}");
        }
    }

    #[test]
    fn mean_pool_gradient_of_scoring_params_is_pure_regularization() {
        let cfg = ModelConfig {
            attention: AttentionKind::MeanPool,
            ..ModelConfig::default()
        };
        let params = init(&cfg, 8);
        let (xs, xq, y) = sample_inputs(&cfg, 3);
        let batch = [SampleView {
            x_static: &xs,
            x_seq: &xq,
            target: y,
        }];
        let lambda = 0.05;
        let (_, grad) = backward(&params, &cfg, &batch, lambda, LossKind::CrossEntropy).unwrap();
        for name in ["att_w", "att_b", "att_u"] {
            let g = grad.view(name).unwrap();
            let w = params.view(name).unwrap();
            for (gi, wi) in g.iter().zip(w.iter()) {
                assert_eq!(*gi, 2.0 * lambda * wi, "region {name}");
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences_on_a_small_model() {
        let cfg = ModelConfig {
            d_static: 5,
            d_temporal: 2,
            seq_len: 3,
            d_embed: 4,
            d_hidden: 5,
            task: TaskKind::Binary,
            attention: AttentionKind::Additive,
        };
        let mut params = init(&cfg, 17);
        // Shift every coordinate so no bias sits exactly at zero.
        let mut rng = SeededRng::new(99, 1);
        for p in params.data_mut() {
            *p += rng.next_unit_f64() * 0.2 - 0.1;
        }
        let inputs: Vec<(Vec<f64>, Vec<f64>, f64)> =
            (0..4).map(|s| sample_inputs(&cfg, 50 + s)).collect();
        let batch: Vec<SampleView> = inputs
            .iter()
            .map(|(xs, xq, y)| SampleView {
                x_static: xs,
                x_seq: xq,
                target: *y,
            })
            .collect();
        let lambda = 0.001;
        let (_, grad) = backward(&params, &cfg, &batch, lambda, LossKind::CrossEntropy).unwrap();
        let h = 1e-5;
        for i in 0..params.len() {
            let orig = params.data()[i];
            params.data_mut()[i] = orig + h;
            let up = local_objective(&params, &cfg, &batch, lambda, LossKind::CrossEntropy).unwrap();
            params.data_mut()[i] = orig - h;
            let down =
                local_objective(&params, &cfg, &batch, lambda, LossKind::CrossEntropy).unwrap();
            params.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let analytic = grad.data()[i];
            let rel = (analytic - fd).abs() / fd.abs().max(1e-8);
            assert!(
                rel < 1e-4,
                "coordinate {i}: analytic {analytic:.10}, fd {fd:.10}, rel {rel:.3e}"
            );
        }
    }

    #[test]
    fn a_small_gradient_step_does_not_increase_the_objective() {
        let cfg = ModelConfig::default();
        for seed in 0..10 {
            let params = init(&cfg, 200 + seed);
            let inputs: Vec<(Vec<f64>, Vec<f64>, f64)> =
                (0..6).map(|s| sample_inputs(&cfg, 300 + seed * 10 + s)).collect();
            let batch: Vec<SampleView> = inputs
                .iter()
                .map(|(xs, xq, y)| SampleView {
                    x_static: xs,
                    x_seq: xq,
                    target: *y,
                })
                .collect();
            let (before, grad) =
                backward(&params, &cfg, &batch, 0.001, LossKind::CrossEntropy).unwrap();
            let mut stepped = params.clone();
            stepped.axpy(-1e-3, grad.data()).unwrap();
            let mut after =
                local_objective(&stepped, &cfg, &batch, 0.001, LossKind::CrossEntropy).unwrap();
            if after > before + 1e-9 {
                // One halved retry before declaring failure.
                let mut retry = params.clone();
                retry.axpy(-5e-4, grad.data()).unwrap();
                after =
                    local_objective(&retry, &cfg, &batch, 0.001, LossKind::CrossEntropy).unwrap();
            }
            assert!(
                after <= before + 1e-9,
                "seed {seed}: objective rose from {before} to {after}"
            );
        }
    }

    #[test]
    fn forward_rejects_mismatched_inputs() {
        let cfg = ModelConfig::default();
        let params = init(&cfg, 1);
        let xs = vec![0.0; cfg.d_static - 1];
        let xq = vec![0.0; cfg.seq_len * cfg.d_temporal];
        assert!(matches!(
            forward(&params, &cfg, &xs, &xq),
            Err(Error::Config(_))
        ));
        let xs = vec![0.0; cfg.d_static];
        let xq_bad = vec![0.0; cfg.seq_len * cfg.d_temporal - 1];
        assert!(matches!(
            forward(&params, &cfg, &xs, &xq_bad),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn forward_is_finite_and_deterministic(seed in 0u64..5000) {
            let cfg = ModelConfig::default();
            let params = init(&cfg, seed);
            let (xs, xq, _) = sample_inputs(&cfg, seed ^ 0xABCD);
            let (p1, _) = forward(&params, &cfg, &xs, &xq).unwrap();
            let (p2, _) = forward(&params, &cfg, &xs, &xq).unwrap();
            prop_assert!(p1.is_finite());
            prop_assert!(p1 > 0.0 && p1 < 1.0);
            prop_assert_eq!(p1.to_bits(), p2.to_bits());
        }
    }
}

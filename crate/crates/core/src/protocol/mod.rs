//! Federated training protocol: local optimization, the privacy and
//! compression pipeline, sample-count-weighted aggregation, and the round
//! driver.
//!
//! The server is the sole writer of global state. Clients own their shard,
//! parameters, and RNG streams, and communicate only through encoded frames;
//! a round is a full barrier. Every client runs [`client_round_step`] on the
//! broadcast bytes regardless of transport, so in-process and socket
//! federations produce bit-identical histories.
//!
//! Uploads carry parameter deltas rather than raw parameters: clipping and
//! compression act on the change, and since the aggregation weights sum to
//! one, averaging deltas and adding the result to the global vector equals
//! averaging the parameters themselves.

pub mod transport;
pub mod wire;

use crate::compression::{
    self, compress, quantize_payload, CompressionConfig, ErrorFeedbackState, Quantization,
    SparsePayload, SparseValues,
};
use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::metrics::{compute_accuracy, compute_auc, systemic_detection_score};
use crate::model::{
    self, check_loss_pairing, init_params, predict_batch, sample_loss, LossKind, ModelConfig,
    SampleView,
};
use crate::params::ParamVector;
use crate::privacy::{clip_update, perturb, MaskAgreement, MaskedPayload, Masking, PrivacyConfig};
use crate::rng::{domain, stream_id, SeededRng};
use wire::{BroadcastHeader, Frame, UpdateHeader};

/// Validation metric the convergence detector watches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMetric {
    Accuracy,
    Auc,
}

/// Federation schedule and local optimizer settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub clients: usize,
    pub max_rounds: u64,
    pub local_epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// L2 coefficient of each client's local objective.
    pub lambda: f64,
    pub loss: LossKind,
    pub target_metric: TargetMetric,
    pub target_value: f64,
    /// Consecutive rounds at or above target that declare convergence.
    pub patience: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            clients: 5,
            max_rounds: 100,
            local_epochs: 1,
            batch_size: 64,
            learning_rate: 0.05,
            lambda: 1e-4,
            loss: LossKind::CrossEntropy,
            target_metric: TargetMetric::Auc,
            target_value: 0.75,
            patience: 3,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::config("client count must be at least 1"));
        }
        if self.max_rounds == 0 {
            return Err(Error::config("round budget must be at least 1"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("local epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::config(format!(
                "learning rate must be finite and positive, got {}",
                self.learning_rate
            )));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::config(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if !self.target_value.is_finite() {
            return Err(Error::config("target value must be finite"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        Ok(())
    }
}

/// Whether in-process clients run one after another or on the thread pool.
/// Both orders produce bit-identical results; aggregation sorts by client id
/// and every client owns its RNG streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecutionMode {
    Sequential,
    Parallel,
}

/// Complete description of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub model: ModelConfig,
    pub federation: FederationConfig,
    pub privacy: PrivacyConfig,
    pub compression: CompressionConfig,
    pub seed: u64,
    pub mode: ExecutionMode,
}

impl RunSettings {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.federation.validate()?;
        self.privacy.validate()?;
        self.compression.validate()?;
        check_loss_pairing(self.model.task, self.federation.loss)?;
        if matches!(self.privacy.masking, Masking::Pairwise) {
            if !self.compression.is_lossless() {
                return Err(Error::config(
                    "pairwise masking requires lossless compression (ratio 1, quantization off)",
                ));
            }
            if self.federation.max_rounds >= 1 << 24 {
                return Err(Error::config(
                    "pairwise masking supports fewer than 2^24 rounds",
                ));
            }
            if self.federation.clients > 1 << 16 {
                return Err(Error::config(
                    "pairwise masking supports at most 2^16 clients",
                ));
            }
        }
        Ok(())
    }
}

/// One institution: its shard, working parameters, and private RNG streams.
/// The shuffle stream drives batch order; the noise stream drives privacy
/// noise. Both advance monotonically across rounds.
#[derive(Debug)]
pub struct ClientState {
    pub id: u64,
    shard: Vec<SampleRecord>,
    pub params: ParamVector,
    shuffle_rng: SeededRng,
    noise_rng: SeededRng,
    feedback: ErrorFeedbackState,
}

impl ClientState {
    pub fn new(id: u64, shard: Vec<SampleRecord>, global: &ParamVector, seed: u64) -> Result<Self> {
        if shard.is_empty() {
            return Err(Error::config(format!(
                "client {id} received an empty shard"
            )));
        }
        Ok(ClientState {
            id,
            params: global.clone(),
            shuffle_rng: SeededRng::new(seed, stream_id(domain::CLIENT_SHUFFLE, id)),
            noise_rng: SeededRng::new(seed, stream_id(domain::CLIENT_NOISE, id)),
            feedback: ErrorFeedbackState::new(global.len()),
            shard,
        })
    }

    pub fn shard(&self) -> &[SampleRecord] {
        &self.shard
    }

    pub fn shard_len(&self) -> usize {
        self.shard.len()
    }
}

/// Privacy treatment recorded alongside an update.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyMeta {
    pub clipped: bool,
    pub sigma: f64,
    pub masked: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum UpdatePayload {
    Dense(Vec<f64>),
    Sparse(SparsePayload),
    Masked(MaskedPayload),
}

/// One client's contribution to a round: a parameter delta in dense, sparse,
/// or masked form.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub round: u64,
    pub client_id: u64,
    pub n_k: u64,
    pub payload: UpdatePayload,
    pub privacy: PrivacyMeta,
}

impl ClientUpdate {
    /// Dimension of the dense vector this update describes.
    pub fn dim(&self) -> usize {
        match &self.payload {
            UpdatePayload::Dense(v) => v.len(),
            UpdatePayload::Sparse(p) => p.d as usize,
            UpdatePayload::Masked(m) => m.len(),
        }
    }

    /// Exact serialized payload length in bytes.
    pub fn payload_bytes(&self) -> usize {
        match &self.payload {
            UpdatePayload::Dense(v) => v.len() * 8,
            UpdatePayload::Sparse(p) => compression::payload_bytes(p),
            UpdatePayload::Masked(m) => m.len() * 8,
        }
    }
}

fn attach_round_context(client_id: u64, round: u64, e: Error) -> Error {
    match e {
        Error::Numeric { context, detail } => Error::Numeric {
            context: format!("client {client_id}, round {round}, {context}"),
            detail,
        },
        other => other,
    }
}

/// Local optimization: starts from the broadcast parameters, runs the
/// configured epochs of mini-batch gradient descent on the regularized
/// objective, and emits the parameter delta. A batch size covering the whole
/// shard trains in natural order and leaves the shuffle stream untouched.
pub fn local_train(
    client: &mut ClientState,
    global: &ParamVector,
    model_cfg: &ModelConfig,
    fed: &FederationConfig,
    round: u64,
) -> Result<ClientUpdate> {
    client.params = global.clone();
    let views: Vec<SampleView<'_>> = client
        .shard
        .iter()
        .map(|r| r.view(model_cfg.task))
        .collect();
    let n = views.len();
    let full_batch = fed.batch_size >= n;
    let mut order: Vec<usize> = (0..n).collect();
    let mut batch = Vec::with_capacity(fed.batch_size.min(n));
    for _ in 0..fed.local_epochs {
        if full_batch {
            let (_, grad) = model::backward(&client.params, model_cfg, &views, fed.lambda, fed.loss)
                .map_err(|e| attach_round_context(client.id, round, e))?;
            client.params.axpy(-fed.learning_rate, grad.data())?;
        } else {
            client.shuffle_rng.shuffle(&mut order);
            for chunk in order.chunks(fed.batch_size) {
                batch.clear();
                batch.extend(chunk.iter().map(|&i| views[i]));
                let (_, grad) =
                    model::backward(&client.params, model_cfg, &batch, fed.lambda, fed.loss)
                        .map_err(|e| attach_round_context(client.id, round, e))?;
                client.params.axpy(-fed.learning_rate, grad.data())?;
            }
        }
    }
    let delta = client.params.delta_from(global)?;
    Ok(ClientUpdate {
        round,
        client_id: client.id,
        n_k: n as u64,
        payload: UpdatePayload::Dense(delta),
        privacy: PrivacyMeta {
            clipped: false,
            sigma: 0.0,
            masked: false,
        },
    })
}

/// Applies the configured protections to a raw dense update, in pipeline
/// order: clip, then either mask (after noising), send dense (after
/// noising), or sparsify (noising only the kept coordinates, quantizing
/// last so noise is quantized along with the values).
fn apply_protections(
    update: ClientUpdate,
    client: &mut ClientState,
    settings: &RunSettings,
    n_total: u64,
) -> Result<ClientUpdate> {
    let ClientUpdate {
        round,
        client_id,
        n_k,
        payload,
        ..
    } = update;
    let UpdatePayload::Dense(mut delta) = payload else {
        return Err(Error::protocol("protections expect a raw dense update"));
    };
    let privacy = &settings.privacy;
    if let Some(c) = privacy.clip_norm {
        delta = clip_update(&delta, c)?;
    }
    let payload = match privacy.masking {
        Masking::Pairwise => {
            let noised = perturb(&delta, privacy.sigma, &mut client.noise_rng)?;
            let agreement = MaskAgreement::new(settings.seed, round, settings.federation.clients)?;
            let mask = agreement.mask_for(client_id as usize, noised.len())?;
            let weight = n_k as f64 / n_total as f64;
            UpdatePayload::Masked(MaskedPayload::seal(&noised, weight, &mask)?)
        }
        Masking::Off if settings.compression.is_lossless() => {
            UpdatePayload::Dense(perturb(&delta, privacy.sigma, &mut client.noise_rng)?)
        }
        Masking::Off => {
            let select = CompressionConfig {
                ratio: settings.compression.ratio,
                quantize: Quantization::Off,
            };
            let mut sparse = compress(&delta, &select, &mut client.feedback)?;
            let SparseValues::Float(kept) = &sparse.values else {
                return Err(Error::protocol("selection stage must emit float values"));
            };
            sparse.values = SparseValues::Float(perturb(kept, privacy.sigma, &mut client.noise_rng)?);
            if settings.compression.quantize == Quantization::Uniform8 {
                sparse = quantize_payload(sparse)?;
            }
            UpdatePayload::Sparse(sparse)
        }
    };
    Ok(ClientUpdate {
        round,
        client_id,
        n_k,
        payload,
        privacy: PrivacyMeta {
            clipped: privacy.clip_norm.is_some(),
            sigma: privacy.sigma,
            masked: matches!(privacy.masking, Masking::Pairwise),
        },
    })
}

/// Everything one client does in one round, from broadcast bytes to encoded
/// update bytes. Both transports call exactly this, which is what makes
/// their training histories bit-identical.
pub fn client_round_step(
    client: &mut ClientState,
    broadcast_frame: &[u8],
    settings: &RunSettings,
) -> Result<Vec<u8>> {
    let Frame::Broadcast { header, params } = wire::decode(broadcast_frame)? else {
        return Err(Error::protocol("client expected a broadcast frame"));
    };
    let layout = settings.model.layout();
    if header.d as usize != layout.total_len() {
        return Err(Error::protocol(format!(
            "broadcast dimension {} does not match the model's {}",
            header.d,
            layout.total_len()
        )));
    }
    let global = ParamVector::from_vec(layout, params)?;
    let update = local_train(client, &global, &settings.model, &settings.federation, header.round)?;
    let update = apply_protections(update, client, settings, header.n_total)?;
    encode_update(&update)
}

/// Serializes an update into one wire frame.
pub fn encode_update(u: &ClientUpdate) -> Result<Vec<u8>> {
    let header = UpdateHeader {
        round: u.round,
        client_id: u.client_id,
        n_k: u.n_k,
        d: u32::try_from(u.dim())
            .map_err(|_| Error::protocol("update dimension exceeds u32"))?,
        clipped: u.privacy.clipped,
        sigma: u.privacy.sigma,
        masked: u.privacy.masked,
        quantized: matches!(
            &u.payload,
            UpdatePayload::Sparse(p) if matches!(p.values, SparseValues::Quantized { .. })
        ),
    };
    let frame = match &u.payload {
        UpdatePayload::Dense(values) => {
            if u.privacy.masked {
                return Err(Error::protocol("masked metadata on a clear dense payload"));
            }
            Frame::DenseUpdate {
                header,
                values: values.clone(),
            }
        }
        UpdatePayload::Sparse(payload) => {
            if u.privacy.masked {
                return Err(Error::protocol("masked metadata on a sparse payload"));
            }
            Frame::SparseUpdate {
                header,
                payload: payload.clone(),
            }
        }
        UpdatePayload::Masked(payload) => {
            if !u.privacy.masked {
                return Err(Error::protocol("masked payload without masked metadata"));
            }
            Frame::MaskedUpdate {
                header,
                payload: payload.clone(),
            }
        }
    };
    wire::encode(&frame)
}

/// Parses one wire frame back into an update.
pub fn decode_update(bytes: &[u8]) -> Result<ClientUpdate> {
    let (header, payload) = match wire::decode(bytes)? {
        Frame::DenseUpdate { header, values } => (header, UpdatePayload::Dense(values)),
        Frame::SparseUpdate { header, payload } => (header, UpdatePayload::Sparse(payload)),
        Frame::MaskedUpdate { header, payload } => (header, UpdatePayload::Masked(payload)),
        _ => return Err(Error::protocol("frame is not a client update")),
    };
    Ok(ClientUpdate {
        round: header.round,
        client_id: header.client_id,
        n_k: header.n_k,
        payload: UpdatePayload::Dense(Vec::new()),
        privacy: PrivacyMeta {
            clipped: header.clipped,
            sigma: header.sigma,
            masked: header.masked,
        },
    }
    .with_payload(payload))
}

impl ClientUpdate {
    fn with_payload(mut self, payload: UpdatePayload) -> Self {
        self.payload = payload;
        self
    }
}

/// Checks update batch consistency and returns indices sorted ascending by
/// client id.
fn sorted_update_order(updates: &[ClientUpdate]) -> Result<Vec<usize>> {
    if updates.is_empty() {
        return Err(Error::protocol("aggregation over zero updates"));
    }
    let round = updates[0].round;
    if updates.iter().any(|u| u.round != round) {
        return Err(Error::protocol("updates from different rounds"));
    }
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].client_id);
    for pair in order.windows(2) {
        if updates[pair[0]].client_id == updates[pair[1]].client_id {
            return Err(Error::protocol(format!(
                "duplicate update from client {}",
                updates[pair[0]].client_id
            )));
        }
    }
    Ok(order)
}

/// Sample-count-weighted aggregation over clear updates: the new global
/// vector is the old one plus the weighted average delta. Accumulates in
/// ascending client-id order so results do not depend on arrival order.
pub fn fed_avg(updates: &[ClientUpdate], global: &ParamVector) -> Result<ParamVector> {
    let order = sorted_update_order(updates)?;
    let d = global.len();
    let n: u64 = updates.iter().map(|u| u.n_k).sum();
    if n == 0 {
        return Err(Error::protocol("aggregation weights sum to zero"));
    }
    let mut acc = vec![0.0; d];
    for &i in &order {
        let u = &updates[i];
        let delta = match &u.payload {
            UpdatePayload::Dense(v) => v.clone(),
            UpdatePayload::Sparse(p) => compression::decompress(p)?,
            UpdatePayload::Masked(_) => {
                return Err(Error::protocol(
                    "masked updates are combined, not averaged in the clear",
                ));
            }
        };
        if delta.len() != d {
            return Err(Error::protocol(format!(
                "update from client {} has dimension {}, expected {d}",
                u.client_id,
                delta.len()
            )));
        }
        let w = u.n_k as f64 / n as f64;
        for (a, x) in acc.iter_mut().zip(&delta) {
            *a += w * x;
        }
    }
    let mut out = global.clone();
    out.axpy(1.0, &acc)?;
    Ok(out)
}

/// Aggregation over masked updates: the pairwise masks cancel only when
/// every cohort member contributes exactly once, so client ids must be
/// exactly 0..K-1. Weights were applied client-side before sealing.
fn aggregate_masked(updates: &[ClientUpdate], global: &ParamVector) -> Result<ParamVector> {
    let order = sorted_update_order(updates)?;
    for (expect, &i) in order.iter().enumerate() {
        if updates[i].client_id != expect as u64 {
            return Err(Error::protocol(
                "pairwise masks cancel only over the full cohort",
            ));
        }
    }
    let payloads: Vec<MaskedPayload> = order
        .iter()
        .map(|&i| match &updates[i].payload {
            UpdatePayload::Masked(m) => Ok(m.clone()),
            _ => Err(Error::protocol("clear update in a masked aggregation")),
        })
        .collect::<Result<_>>()?;
    let combined = MaskedPayload::combine(&payloads)?;
    if combined.len() != global.len() {
        return Err(Error::protocol(format!(
            "combined update has dimension {}, expected {}",
            combined.len(),
            global.len()
        )));
    }
    let mut out = global.clone();
    out.axpy(1.0, &combined)?;
    Ok(out)
}

/// Sample-count-weighted mean of per-shard mean losses, which equals the
/// pooled mean loss. Regularization is a local training concern and is not
/// included.
pub fn global_loss(
    params: &ParamVector,
    model_cfg: &ModelConfig,
    shards: &[Vec<SampleRecord>],
    loss: LossKind,
) -> Result<f64> {
    if shards.is_empty() {
        return Err(Error::config("global loss over zero shards"));
    }
    if shards.iter().any(Vec::is_empty) {
        return Err(Error::config("global loss over an empty shard"));
    }
    let n: usize = shards.iter().map(Vec::len).sum();
    let mut total = 0.0;
    for shard in shards {
        let views: Vec<SampleView<'_>> = shard.iter().map(|r| r.view(model_cfg.task)).collect();
        let local = model::local_objective(params, model_cfg, &views, 0.0, loss)?;
        total += shard.len() as f64 / n as f64 * local;
    }
    Ok(total)
}

/// Model quality on a held-out sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    /// Mean prediction loss, no regularization term.
    pub loss: f64,
    pub accuracy: f64,
    pub auc: f64,
    /// Ranking score of predictions against systemic-event flags; absent
    /// when the set has no flag diversity.
    pub systemic_auc: Option<f64>,
}

/// Evaluates parameters against records: mean loss, accuracy and ranking
/// quality against the stored labels, and systemic-event detection.
pub fn evaluate(
    params: &ParamVector,
    model_cfg: &ModelConfig,
    loss: LossKind,
    samples: &[SampleRecord],
) -> Result<EvalSummary> {
    if samples.is_empty() {
        return Err(Error::config("evaluation over an empty sample set"));
    }
    let views: Vec<SampleView<'_>> = samples.iter().map(|r| r.view(model_cfg.task)).collect();
    let scores = predict_batch(params, model_cfg, &views)?;
    let mean_loss = views
        .iter()
        .zip(&scores)
        .map(|(v, &s)| sample_loss(s, v.target, loss))
        .sum::<f64>()
        / views.len() as f64;
    let labels: Vec<u8> = samples.iter().map(|r| r.label).collect();
    let accuracy = compute_accuracy(&scores, &labels, 0.5)?;
    let auc = compute_auc(&scores, &labels)?;
    let flags: Vec<bool> = samples.iter().map(|r| r.systemic).collect();
    let systemic_auc = match systemic_detection_score(&scores, &flags) {
        Ok(v) => Some(v),
        Err(Error::Metric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalSummary {
        loss: mean_loss,
        accuracy,
        auc,
        systemic_auc,
    })
}

/// Per-round record of model quality and exact communication volume.
/// `bytes_up` sums update payload bytes; `bytes_down` counts the dense
/// broadcast to each client.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: u64,
    pub global_loss: f64,
    pub accuracy: f64,
    pub auc: f64,
    pub systemic_auc: Option<f64>,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

/// Global parameters plus the count of completed rounds.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub params: ParamVector,
    pub round: u64,
}

/// First round r (1-based) at which the metric has held at or above the
/// target for `patience` consecutive rounds ending at r. Lowering the
/// target never reports a later round.
pub fn convergence_round(metric_by_round: &[f64], target: f64, patience: u64) -> Option<u64> {
    if patience == 0 {
        return None;
    }
    let mut streak: u64 = 0;
    for (i, &m) in metric_by_round.iter().enumerate() {
        if m >= target {
            streak += 1;
            if streak >= patience {
                return Some(i as u64 + 1);
            }
        } else {
            streak = 0;
        }
    }
    None
}

/// Runs one round against an exchanger that turns broadcast bytes into one
/// encoded update frame per client.
fn round_step<F>(
    server: &mut ServerState,
    settings: &RunSettings,
    n_total: u64,
    validation: &[SampleRecord],
    exchange: &mut F,
) -> Result<RoundReport>
where
    F: FnMut(&[u8]) -> Result<Vec<Vec<u8>>>,
{
    let round = server.round + 1;
    let d = server.params.len();
    let k = settings.federation.clients;
    let broadcast = wire::encode(&Frame::Broadcast {
        header: BroadcastHeader {
            round,
            d: d as u32,
            n_total,
        },
        params: server.params.data().to_vec(),
    })?;
    let frames = exchange(&broadcast)?;
    if frames.len() != k {
        return Err(Error::protocol(format!(
            "round {round} produced {} updates for {k} clients",
            frames.len()
        )));
    }
    let updates: Vec<ClientUpdate> = frames
        .iter()
        .map(|f| decode_update(f))
        .collect::<Result<_>>()?;
    for u in &updates {
        if u.round != round {
            return Err(Error::protocol(format!(
                "client {} answered round {round} with round {}",
                u.client_id, u.round
            )));
        }
    }
    let bytes_up: u64 = updates.iter().map(|u| u.payload_bytes() as u64).sum();
    let bytes_down = k as u64 * 8 * d as u64;
    let masked = updates.iter().filter(|u| u.privacy.masked).count();
    server.params = if masked == updates.len() {
        aggregate_masked(&updates, &server.params)?
    } else if masked == 0 {
        fed_avg(&updates, &server.params)?
    } else {
        return Err(Error::protocol(
            "round mixes masked and clear updates",
        ));
    };
    server.round = round;
    let eval = evaluate(&server.params, &settings.model, settings.federation.loss, validation)?;
    Ok(RoundReport {
        round,
        global_loss: eval.loss,
        accuracy: eval.accuracy,
        auc: eval.auc,
        systemic_auc: eval.systemic_auc,
        bytes_up,
        bytes_down,
    })
}

/// One federated round over in-process clients: broadcast, local training
/// under the privacy and compression pipeline, aggregate, evaluate.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    settings: &RunSettings,
    validation: &[SampleRecord],
) -> Result<RoundReport> {
    if clients.len() != settings.federation.clients {
        return Err(Error::config(format!(
            "{} client states for a {}-client federation",
            clients.len(),
            settings.federation.clients
        )));
    }
    let n_total = clients.iter().map(|c| c.shard_len() as u64).sum();
    round_step(server, settings, n_total, validation, &mut |b| {
        exchange_in_process(clients, b, settings)
    })
}

fn exchange_sequential(
    clients: &mut [ClientState],
    broadcast: &[u8],
    settings: &RunSettings,
) -> Result<Vec<Vec<u8>>> {
    clients
        .iter_mut()
        .map(|c| client_round_step(c, broadcast, settings))
        .collect()
}

#[cfg(feature = "parallel")]
fn exchange_parallel(
    clients: &mut [ClientState],
    broadcast: &[u8],
    settings: &RunSettings,
) -> Result<Vec<Vec<u8>>> {
    use rayon::prelude::*;
    clients
        .par_iter_mut()
        .map(|c| client_round_step(c, broadcast, settings))
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn exchange_parallel(
    clients: &mut [ClientState],
    broadcast: &[u8],
    settings: &RunSettings,
) -> Result<Vec<Vec<u8>>> {
    exchange_sequential(clients, broadcast, settings)
}

fn exchange_in_process(
    clients: &mut [ClientState],
    broadcast: &[u8],
    settings: &RunSettings,
) -> Result<Vec<Vec<u8>>> {
    match settings.mode {
        ExecutionMode::Sequential => exchange_sequential(clients, broadcast, settings),
        ExecutionMode::Parallel => exchange_parallel(clients, broadcast, settings),
    }
}

/// Full history of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOutcome {
    pub history: Vec<RoundReport>,
    /// See [`convergence_round`]; training still runs the full budget.
    pub convergence_round: Option<u64>,
    pub final_params: ParamVector,
}

/// Round driver shared by every transport.
pub(crate) fn training_loop<F>(
    settings: &RunSettings,
    n_total: u64,
    validation: &[SampleRecord],
    init: ParamVector,
    mut exchange: F,
) -> Result<TrainingOutcome>
where
    F: FnMut(&[u8]) -> Result<Vec<Vec<u8>>>,
{
    let fed = &settings.federation;
    let mut server = ServerState {
        params: init,
        round: 0,
    };
    let mut history = Vec::with_capacity(fed.max_rounds as usize);
    let mut series = Vec::with_capacity(fed.max_rounds as usize);
    for _ in 0..fed.max_rounds {
        let report = round_step(&mut server, settings, n_total, validation, &mut exchange)?;
        series.push(match fed.target_metric {
            TargetMetric::Accuracy => report.accuracy,
            TargetMetric::Auc => report.auc,
        });
        history.push(report);
    }
    let convergence = convergence_round(&series, fed.target_value, fed.patience);
    Ok(TrainingOutcome {
        history,
        convergence_round: convergence,
        final_params: server.params,
    })
}

fn build_clients(
    shards: Vec<Vec<SampleRecord>>,
    global: &ParamVector,
    settings: &RunSettings,
) -> Result<Vec<ClientState>> {
    if shards.len() != settings.federation.clients {
        return Err(Error::config(format!(
            "{} shards for a {}-client federation",
            shards.len(),
            settings.federation.clients
        )));
    }
    shards
        .into_iter()
        .enumerate()
        .map(|(i, shard)| ClientState::new(i as u64, shard, global, settings.seed))
        .collect()
}

/// Runs a complete federated training job with in-process clients. A
/// single-client federation is the centralized baseline; no separate code
/// path exists for it.
pub fn run_training(
    settings: &RunSettings,
    shards: Vec<Vec<SampleRecord>>,
    validation: &[SampleRecord],
) -> Result<TrainingOutcome> {
    settings.validate()?;
    if validation.is_empty() {
        return Err(Error::config("validation set is empty"));
    }
    let mut rng = SeededRng::new(settings.seed, stream_id(domain::MODEL_INIT, 0));
    let global = init_params(&settings.model, &mut rng)?;
    let mut clients = build_clients(shards, &global, settings)?;
    let n_total = clients.iter().map(|c| c.shard_len() as u64).sum();
    training_loop(settings, n_total, validation, global, |b| {
        exchange_in_process(&mut clients, b, settings)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorConfig};
    use crate::model::TaskKind;
    use proptest::prelude::*;

    fn small_model() -> ModelConfig {
        ModelConfig {
            d_static: 6,
            d_temporal: 2,
            seq_len: 3,
            d_embed: 4,
            d_hidden: 3,
            ..ModelConfig::default()
        }
    }

    fn small_records(n: usize) -> Vec<SampleRecord> {
        let cfg = GeneratorConfig {
            n_samples: n,
            d_static: 6,
            d_temporal: 2,
            seq_len: 3,
            ..GeneratorConfig::default()
        };
        generate(&cfg).unwrap()
    }

    fn settings(model: ModelConfig, fed: FederationConfig) -> RunSettings {
        RunSettings {
            model,
            federation: fed,
            privacy: PrivacyConfig::default(),
            compression: CompressionConfig::default(),
            seed: 11,
            mode: ExecutionMode::Sequential,
        }
    }

    fn init_for(settings: &RunSettings) -> ParamVector {
        let mut rng = SeededRng::new(settings.seed, stream_id(domain::MODEL_INIT, 0));
        init_params(&settings.model, &mut rng).unwrap()
    }

    fn dense_update(client_id: u64, n_k: u64, delta: Vec<f64>) -> ClientUpdate {
        ClientUpdate {
            round: 1,
            client_id,
            n_k,
            payload: UpdatePayload::Dense(delta),
            privacy: PrivacyMeta {
                clipped: false,
                sigma: 0.0,
                masked: false,
            },
        }
    }

    fn scalar_layout() -> ParamVector {
        let layout = crate::params::Layout::builder().push("w", 1, 1).build();
        ParamVector::zeros(layout)
    }

    #[test]
    fn weighted_average_matches_the_hand_computed_value() {
        let global = scalar_layout();
        let updates = vec![dense_update(0, 1, vec![1.0]), dense_update(1, 3, vec![5.0])];
        let out = fed_avg(&updates, &global).unwrap();
        assert_eq!(out.data(), &[4.0]);
    }

    #[test]
    fn identical_updates_with_dyadic_weights_average_to_themselves() {
        let s = settings(small_model(), FederationConfig::default());
        let global = init_for(&s);
        let delta: Vec<f64> = (0..global.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let updates: Vec<ClientUpdate> = (0..4)
            .map(|k| dense_update(k, 16, delta.clone()))
            .collect();
        let out = fed_avg(&updates, &global).unwrap();
        let mut expect = global.clone();
        expect.axpy(1.0, &delta).unwrap();
        assert_eq!(out.data(), expect.data());
    }

    #[test]
    fn aggregation_ignores_arrival_order() {
        let s = settings(small_model(), FederationConfig::default());
        let global = init_for(&s);
        let mut rng = SeededRng::new(5, 0);
        let mut updates: Vec<ClientUpdate> = (0..5)
            .map(|k| {
                let delta: Vec<f64> = (0..global.len())
                    .map(|_| rng.next_unit_f64() - 0.5)
                    .collect();
                dense_update(k, 10 + k, delta)
            })
            .collect();
        let sorted = fed_avg(&updates, &global).unwrap();
        updates.reverse();
        let reversed = fed_avg(&updates, &global).unwrap();
        assert_eq!(sorted.data(), reversed.data());
    }

    #[test]
    fn delta_form_equals_parameter_form_averaging() {
        let s = settings(small_model(), FederationConfig::default());
        let global = init_for(&s);
        let mut rng = SeededRng::new(9, 0);
        let thetas: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                global
                    .data()
                    .iter()
                    .map(|&g| g + rng.next_unit_f64() - 0.5)
                    .collect()
            })
            .collect();
        let counts = [7u64, 19, 4];
        let updates: Vec<ClientUpdate> = thetas
            .iter()
            .enumerate()
            .map(|(k, theta)| {
                let delta: Vec<f64> = theta
                    .iter()
                    .zip(global.data())
                    .map(|(t, g)| t - g)
                    .collect();
                dense_update(k as u64, counts[k], delta)
            })
            .collect();
        let out = fed_avg(&updates, &global).unwrap();
        let n: u64 = counts.iter().sum();
        for i in 0..global.len() {
            let direct: f64 = thetas
                .iter()
                .zip(counts)
                .map(|(t, c)| c as f64 / n as f64 * t[i])
                .sum();
            assert!(
                (out.data()[i] - direct).abs() <= 1e-12,
                "coordinate {i}: {} vs {direct}",
                out.data()[i]
            );
        }
    }

    #[test]
    fn aggregation_rejects_malformed_batches() {
        let global = scalar_layout();
        assert!(matches!(
            fed_avg(&[], &global),
            Err(Error::Protocol(_))
        ));
        let mut mixed_rounds = vec![dense_update(0, 1, vec![1.0]), dense_update(1, 1, vec![1.0])];
        mixed_rounds[1].round = 2;
        assert!(matches!(
            fed_avg(&mixed_rounds, &global),
            Err(Error::Protocol(_))
        ));
        let duplicates = vec![dense_update(0, 1, vec![1.0]), dense_update(0, 1, vec![1.0])];
        assert!(matches!(
            fed_avg(&duplicates, &global),
            Err(Error::Protocol(_))
        ));
        let wrong_dim = vec![dense_update(0, 1, vec![1.0, 2.0])];
        assert!(matches!(
            fed_avg(&wrong_dim, &global),
            Err(Error::Protocol(_))
        ));
        let masked = vec![ClientUpdate {
            payload: UpdatePayload::Masked(
                MaskedPayload::seal(&[1.0], 1.0, &[0]).unwrap(),
            ),
            privacy: PrivacyMeta {
                clipped: false,
                sigma: 0.0,
                masked: true,
            },
            ..dense_update(0, 1, vec![])
        }];
        assert!(matches!(
            fed_avg(&masked, &global),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn tiny_learning_rate_leaves_parameters_in_place() {
        let model = small_model();
        let fed = FederationConfig {
            learning_rate: 1e-12,
            batch_size: 1000,
            ..FederationConfig::default()
        };
        let s = settings(model, fed);
        let global = init_for(&s);
        let mut client = ClientState::new(0, small_records(20), &global, s.seed).unwrap();
        let update = local_train(&mut client, &global, &s.model, &s.federation, 1).unwrap();
        let UpdatePayload::Dense(delta) = &update.payload else {
            panic!("expected dense payload");
        };
        let norm = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
        assert!(norm < 1e-8, "delta norm {norm}");
    }

    #[test]
    fn local_training_is_deterministic() {
        let model = small_model();
        let fed = FederationConfig {
            batch_size: 4,
            local_epochs: 3,
            ..FederationConfig::default()
        };
        let s = settings(model, fed);
        let global = init_for(&s);
        let records = small_records(19);
        let mut a = ClientState::new(2, records.clone(), &global, s.seed).unwrap();
        let mut b = ClientState::new(2, records, &global, s.seed).unwrap();
        let ua = local_train(&mut a, &global, &s.model, &s.federation, 1).unwrap();
        let ub = local_train(&mut b, &global, &s.model, &s.federation, 1).unwrap();
        assert_eq!(ua, ub);
    }

    #[test]
    fn full_batch_training_equals_plain_gradient_descent() {
        let model = small_model();
        let fed = FederationConfig {
            batch_size: usize::MAX,
            local_epochs: 2,
            ..FederationConfig::default()
        };
        let s = settings(model, fed);
        let global = init_for(&s);
        let records = small_records(12);
        let views: Vec<SampleView<'_>> = records.iter().map(|r| r.view(s.model.task)).collect();
        let mut oracle = global.clone();
        for _ in 0..2 {
            let (_, grad) =
                model::backward(&oracle, &s.model, &views, s.federation.lambda, s.federation.loss)
                    .unwrap();
            oracle.axpy(-s.federation.learning_rate, grad.data()).unwrap();
        }
        let mut client = ClientState::new(0, records, &global, s.seed).unwrap();
        local_train(&mut client, &global, &s.model, &s.federation, 1).unwrap();
        assert_eq!(client.params.data(), oracle.data());
    }

    #[test]
    fn pooled_mean_equals_the_weighted_shard_mean() {
        let model = small_model();
        let records = small_records(30);
        let s = settings(model, FederationConfig::default());
        let params = init_for(&s);
        let shards = vec![
            records[..7].to_vec(),
            records[7..19].to_vec(),
            records[19..].to_vec(),
        ];
        let weighted = global_loss(&params, &s.model, &shards, LossKind::CrossEntropy).unwrap();
        let views: Vec<SampleView<'_>> = records.iter().map(|r| r.view(s.model.task)).collect();
        let pooled =
            model::local_objective(&params, &s.model, &views, 0.0, LossKind::CrossEntropy)
                .unwrap();
        assert!((weighted - pooled).abs() <= 1e-12, "{weighted} vs {pooled}");
        assert!(matches!(
            global_loss(&params, &s.model, &[vec![]], LossKind::CrossEntropy),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn protections_leave_updates_alone_when_disabled() {
        let model = small_model();
        let s = settings(model, FederationConfig::default());
        let global = init_for(&s);
        let mut client = ClientState::new(0, small_records(10), &global, s.seed).unwrap();
        let raw = local_train(&mut client, &global, &s.model, &s.federation, 1).unwrap();
        let expect = raw.payload.clone();
        let protected = apply_protections(raw, &mut client, &s, 10).unwrap();
        assert_eq!(protected.payload, expect);
        assert!(!protected.privacy.clipped);
        assert!(!protected.privacy.masked);
    }

    #[test]
    fn masked_aggregation_matches_the_clear_average() {
        let model = small_model();
        let fed = FederationConfig {
            clients: 3,
            ..FederationConfig::default()
        };
        let mut masked_settings = settings(model, fed);
        masked_settings.privacy.masking = Masking::Pairwise;
        let clear_settings = RunSettings {
            privacy: PrivacyConfig::default(),
            ..masked_settings.clone()
        };
        let global = init_for(&masked_settings);
        let records = small_records(30);
        let shard_at = |a: usize, b: usize| records[a..b].to_vec();
        let n_total = 30u64;
        let mut clear_updates = Vec::new();
        let mut masked_updates = Vec::new();
        for (k, (a, b)) in [(0usize, 8usize), (8, 19), (19, 30)].iter().enumerate() {
            let mut c1 = ClientState::new(k as u64, shard_at(*a, *b), &global, 11).unwrap();
            let raw = local_train(&mut c1, &global, &clear_settings.model, &clear_settings.federation, 1).unwrap();
            clear_updates.push(
                apply_protections(raw.clone(), &mut c1, &clear_settings, n_total).unwrap(),
            );
            let mut c2 = ClientState::new(k as u64, shard_at(*a, *b), &global, 11).unwrap();
            let raw2 = local_train(&mut c2, &global, &masked_settings.model, &masked_settings.federation, 1).unwrap();
            masked_updates.push(
                apply_protections(raw2, &mut c2, &masked_settings, n_total).unwrap(),
            );
        }
        let clear = fed_avg(&clear_updates, &global).unwrap();
        let masked = aggregate_masked(&masked_updates, &global).unwrap();
        for (a, b) in clear.data().iter().zip(masked.data()) {
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn masked_aggregation_requires_the_full_cohort() {
        let global = scalar_layout();
        let sealed = |k: u64| ClientUpdate {
            payload: UpdatePayload::Masked(MaskedPayload::seal(&[1.0], 0.5, &[3]).unwrap()),
            privacy: PrivacyMeta {
                clipped: false,
                sigma: 0.0,
                masked: true,
            },
            ..dense_update(k, 1, vec![])
        };
        assert!(matches!(
            aggregate_masked(&[sealed(0), sealed(2)], &global),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn update_byte_counts_equal_the_serialized_payload_length() {
        let model = small_model();
        let d = model.param_count();
        let delta: Vec<f64> = (0..d).map(|i| (i as f64 * 0.13).sin()).collect();
        let sparse_off = CompressionConfig {
            ratio: 4,
            quantize: Quantization::Off,
        };
        let mut fb = ErrorFeedbackState::new(d);
        let candidates = vec![
            dense_update(0, 5, delta.clone()),
            ClientUpdate {
                payload: UpdatePayload::Sparse(compress(&delta, &sparse_off, &mut fb).unwrap()),
                ..dense_update(1, 5, vec![])
            },
            ClientUpdate {
                payload: UpdatePayload::Sparse(
                    quantize_payload(
                        compress(&delta, &sparse_off, &mut ErrorFeedbackState::new(d)).unwrap(),
                    )
                    .unwrap(),
                ),
                ..dense_update(2, 5, vec![])
            },
            ClientUpdate {
                payload: UpdatePayload::Masked(
                    MaskedPayload::seal(&delta, 0.5, &vec![1; d]).unwrap(),
                ),
                privacy: PrivacyMeta {
                    clipped: false,
                    sigma: 0.0,
                    masked: true,
                },
                ..dense_update(3, 5, vec![])
            },
        ];
        for u in candidates {
            let frame = encode_update(&u).unwrap();
            let payload_len = u32::from_le_bytes(
                frame[frame.len() - u.payload_bytes() - 4..frame.len() - u.payload_bytes()]
                    .try_into()
                    .unwrap(),
            );
            assert_eq!(payload_len as usize, u.payload_bytes());
            assert_eq!(decode_update(&frame).unwrap(), u);
        }
    }

    #[test]
    fn convergence_detector_handles_the_boundary_cases() {
        assert_eq!(convergence_round(&[0.1, 0.1, 0.1], 0.0, 3), Some(3));
        assert_eq!(convergence_round(&[0.9; 10], 1.01, 3), None);
        assert_eq!(
            convergence_round(&[0.5, 0.8, 0.8, 0.6, 0.8, 0.8, 0.8], 0.75, 3),
            Some(7)
        );
        assert_eq!(convergence_round(&[0.5, 0.8, 0.7], 0.75, 1), Some(2));
        assert_eq!(convergence_round(&[], 0.5, 1), None);
    }

    #[test]
    fn settings_validation_rejects_inconsistent_combinations() {
        let mut s = settings(small_model(), FederationConfig::default());
        s.privacy.masking = Masking::Pairwise;
        s.compression.ratio = 2;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        s.compression.ratio = 1;
        s.compression.quantize = Quantization::Uniform8;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        s.compression.quantize = Quantization::Off;
        s.validate().unwrap();
        let mut regression = settings(small_model(), FederationConfig::default());
        regression.model.task = TaskKind::Regression;
        assert!(matches!(regression.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn single_client_round_adopts_that_clients_parameters() {
        let model = small_model();
        let fed = FederationConfig {
            clients: 1,
            max_rounds: 1,
            ..FederationConfig::default()
        };
        let s = settings(model, fed);
        let global = init_for(&s);
        let records = small_records(24);
        let mut client = ClientState::new(0, records[..16].to_vec(), &global, s.seed).unwrap();
        let mut server = ServerState {
            params: global.clone(),
            round: 0,
        };
        let report = run_round(
            &mut server,
            std::slice::from_mut(&mut client),
            &s,
            &records[16..],
        )
        .unwrap();
        assert_eq!(report.round, 1);
        assert_eq!(report.bytes_down, 8 * global.len() as u64);
        assert_eq!(report.bytes_up, 8 * global.len() as u64);
        for (a, b) in server.params.data().iter().zip(client.params.data()) {
            assert!((a - b).abs() <= 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn same_seed_reruns_are_bit_identical() {
        let model = small_model();
        let fed = FederationConfig {
            clients: 2,
            max_rounds: 3,
            batch_size: 8,
            ..FederationConfig::default()
        };
        let s = settings(model, fed);
        let records = small_records(60);
        let shards = vec![records[..20].to_vec(), records[20..44].to_vec()];
        let val = records[44..].to_vec();
        let a = run_training(&s, shards.clone(), &val).unwrap();
        let b = run_training(&s, shards, &val).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.final_params.data(), b.final_params.data());
    }

    #[test]
    fn unreachable_target_reports_no_convergence() {
        let model = small_model();
        let fed = FederationConfig {
            clients: 2,
            max_rounds: 2,
            target_value: 1.01,
            ..FederationConfig::default()
        };
        let s = settings(model, fed);
        let records = small_records(40);
        let shards = vec![records[..14].to_vec(), records[14..30].to_vec()];
        let out = run_training(&s, shards, &records[30..]).unwrap();
        assert_eq!(out.convergence_round, None);
        assert_eq!(out.history.len(), 2);
    }

    #[test]
    fn vacuous_target_converges_after_patience_rounds() {
        let model = small_model();
        let fed = FederationConfig {
            clients: 2,
            max_rounds: 4,
            target_value: 0.0,
            patience: 2,
            ..FederationConfig::default()
        };
        let s = settings(model, fed);
        let records = small_records(40);
        let shards = vec![records[..14].to_vec(), records[14..30].to_vec()];
        let out = run_training(&s, shards, &records[30..]).unwrap();
        assert_eq!(out.convergence_round, Some(2));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn lowering_the_target_never_delays_convergence(
            series in proptest::collection::vec(0.0f64..1.0, 1..30),
            t1 in 0.0f64..1.0,
            t2 in 0.0f64..1.0,
            patience in 1u64..5,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let at_lo = convergence_round(&series, lo, patience);
            let at_hi = convergence_round(&series, hi, patience);
            match (at_lo, at_hi) {
                (Some(a), Some(b)) => prop_assert!(a <= b),
                (None, Some(_)) => prop_assert!(false, "lower target failed where higher succeeded"),
                _ => {}
            }
        }

        #[test]
        fn aggregation_weights_sum_to_one(counts in proptest::collection::vec(1u64..5000, 1..12)) {
            let n: u64 = counts.iter().sum();
            let total: f64 = counts.iter().map(|&c| c as f64 / n as f64).sum();
            prop_assert!((total - 1.0).abs() <= 1e-15);
        }
    }
}

//! Two-stage update protection: norm clipping plus Gaussian perturbation,
//! and pairwise additive masking so the server only ever observes the sum
//! of client uploads. Masking works in a fixed-point integer domain where
//! pair masks cancel exactly; it stands in for homomorphic encryption,
//! matching the same observable contract (the aggregator computes only the
//! sum) without the cryptography.

use crate::error::{Error, Result};
use crate::math::l2_norm_sq;
use crate::rng::{domain, stream_id, SeededRng};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Masking {
    Off,
    Pairwise,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyConfig {
    /// Noise standard deviation added to each uploaded coordinate.
    pub sigma: f64,
    /// L2 bound on uploads; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub masking: Masking,
    /// The delta of the (epsilon, delta) guarantee, reporting only.
    pub delta_dp: f64,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        PrivacyConfig {
            sigma: 0.0,
            clip_norm: None,
            masking: Masking::Off,
            delta_dp: 1e-5,
        }
    }
}

impl PrivacyConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(Error::config(format!(
                "sigma must be finite and non-negative, got {}",
                self.sigma
            )));
        }
        if let Some(c) = self.clip_norm {
            if !c.is_finite() || c <= 0.0 {
                return Err(Error::config(format!(
                    "clip norm must be finite and positive, got {c}"
                )));
            }
        }
        if !self.delta_dp.is_finite() || !(0.0 < self.delta_dp && self.delta_dp < 1.0) {
            return Err(Error::config(format!(
                "delta_dp must lie in (0, 1), got {}",
                self.delta_dp
            )));
        }
        Ok(())
    }
}

// Relative slack when testing whether a vector already satisfies the bound;
// makes clipping idempotent despite rescale rounding.
const CLIP_SLACK: f64 = 1e-12;

/// Rescales `delta` onto the L2 ball of radius `c` when it lies outside;
/// vectors already inside come back bit-exact.
pub fn clip_update(delta: &[f64], c: f64) -> Result<Vec<f64>> {
    if !c.is_finite() || c <= 0.0 {
        return Err(Error::config(format!(
            "clip norm must be finite and positive, got {c}"
        )));
    }
    let norm = l2_norm_sq(delta).sqrt();
    if !norm.is_finite() {
        return Err(Error::numeric("clip_update", "non-finite update norm"));
    }
    if norm <= c * (1.0 + CLIP_SLACK) {
        return Ok(delta.to_vec());
    }
    Ok(delta.iter().map(|&x| x * c / norm).collect())
}

/// Adds independent N(0, sigma^2) noise per coordinate. `sigma = 0` returns
/// the input bit-exactly and consumes no randomness.
pub fn perturb(delta: &[f64], sigma: f64, rng: &mut SeededRng) -> Result<Vec<f64>> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::config(format!(
            "sigma must be finite and non-negative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(delta.to_vec());
    }
    let normal = StandardNormal;
    Ok(delta
        .iter()
        .map(|&x| x + sigma * <StandardNormal as Distribution<f64>>::sample(&normal, rng))
        .collect())
}

/// Single-round Gaussian-mechanism accounting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpsilonReport {
    /// epsilon = C * sqrt(2 ln(1.25 / delta)) / sigma for one round.
    Bound(f64),
    /// No finite guarantee: noise disabled or sensitivity unbounded.
    NoGuarantee,
}

pub fn epsilon_report(sigma: f64, clip_norm: Option<f64>, delta_dp: f64) -> Result<EpsilonReport> {
    if !delta_dp.is_finite() || !(0.0 < delta_dp && delta_dp < 1.0) {
        return Err(Error::config(format!(
            "delta_dp must lie in (0, 1), got {delta_dp}"
        )));
    }
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::config(format!(
            "sigma must be finite and non-negative, got {sigma}"
        )));
    }
    let Some(c) = clip_norm else {
        return Ok(EpsilonReport::NoGuarantee);
    };
    if c <= 0.0 || !c.is_finite() {
        return Err(Error::config(format!(
            "clip norm must be finite and positive, got {c}"
        )));
    }
    if sigma == 0.0 {
        return Ok(EpsilonReport::NoGuarantee);
    }
    Ok(EpsilonReport::Bound(
        c * (2.0 * (1.25 / delta_dp).ln()).sqrt() / sigma,
    ))
}

/// Fixed-point lift used by masking: floats are carried as round(x * 2^40).
pub const FIXED_POINT_SCALE: f64 = (1u64 << 40) as f64;

// Sealed words must keep |value| < 2^51 so sums over up to 2^11 clients
// cannot wrap past the i64 range.
const FIXED_POINT_LIMIT: f64 = (1u64 << 51) as f64;

/// Per-round pairwise mask seeds. Client pairs (i, j), i < j, share one
/// derived RNG stream; each client adds masks toward higher ids and
/// subtracts masks toward lower ids, so the sum over all clients cancels
/// to exactly zero.
#[derive(Debug, Clone, Copy)]
pub struct MaskAgreement {
    seed: u64,
    round: u64,
    clients: usize,
}

impl MaskAgreement {
    pub fn new(seed: u64, round: u64, clients: usize) -> Result<Self> {
        if clients == 0 {
            return Err(Error::config("mask agreement needs at least one client"));
        }
        if clients > (1 << 16) {
            return Err(Error::config(format!(
                "client count {clients} exceeds the pair-id space"
            )));
        }
        if round >= 1 << 24 {
            return Err(Error::config(format!(
                "round {round} exceeds the mask stream space"
            )));
        }
        Ok(MaskAgreement {
            seed,
            round,
            clients,
        })
    }

    fn pair_rng(&self, i: usize, j: usize) -> SeededRng {
        debug_assert!(i < j);
        let index = (self.round << 32) | ((i as u64) << 16) | j as u64;
        SeededRng::new(self.seed, stream_id(domain::MASK_PAIR, index))
    }

    /// The net mask client `k` adds to its fixed-point words.
    pub fn mask_for(&self, k: usize, d: usize) -> Result<Vec<i64>> {
        if k >= self.clients {
            return Err(Error::protocol(format!(
                "client {k} outside agreement of {} clients",
                self.clients
            )));
        }
        let mut mask = vec![0i64; d];
        for j in 0..self.clients {
            if j == k {
                continue;
            }
            let mut rng = self.pair_rng(k.min(j), k.max(j));
            for m in mask.iter_mut() {
                // 52-bit PRG values: comfortably inside the wrap-safe range.
                let v = (rng.next_u64() >> 12) as i64;
                *m = if k < j {
                    m.wrapping_add(v)
                } else {
                    m.wrapping_sub(v)
                };
            }
        }
        Ok(mask)
    }
}

/// A client's sealed upload: fixed-point words with the pairwise mask mixed
/// in. No accessor exposes a single payload's unmasked content; only
/// [`MaskedPayload::combine`] over all participants recovers a value, and
/// that value is the weighted sum.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedPayload {
    words: Vec<i64>,
}

impl MaskedPayload {
    /// Seals `weight * delta` under the client's net mask. The weight is
    /// applied client-side so the combined result is already the weighted
    /// aggregate.
    pub fn seal(delta: &[f64], weight: f64, mask: &[i64]) -> Result<MaskedPayload> {
        if delta.len() != mask.len() {
            return Err(Error::protocol(format!(
                "mask length {} does not match update length {}",
                mask.len(),
                delta.len()
            )));
        }
        if !weight.is_finite() || weight < 0.0 {
            return Err(Error::config(format!(
                "aggregation weight must be finite and non-negative, got {weight}"
            )));
        }
        let mut words = Vec::with_capacity(delta.len());
        for (i, (&x, &m)) in delta.iter().zip(mask.iter()).enumerate() {
            let scaled = weight * x * FIXED_POINT_SCALE;
            if !scaled.is_finite() || scaled.abs() >= FIXED_POINT_LIMIT {
                return Err(Error::numeric(
                    "mask_seal",
                    format!("coordinate {i} value {x} exceeds the fixed-point range"),
                ));
            }
            words.push((scaled.round() as i64).wrapping_add(m));
        }
        Ok(MaskedPayload { words })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Little-endian i64 wire form, 8 bytes per coordinate.
    pub fn to_wire_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.words.len() * 8);
        for w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_wire_bytes(bytes: &[u8]) -> Result<MaskedPayload> {
        if !bytes.len().is_multiple_of(8) {
            return Err(Error::framing(format!(
                "masked payload length {} is not a multiple of 8",
                bytes.len()
            )));
        }
        let words = bytes
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(MaskedPayload { words })
    }

    /// Sums sealed payloads from every participant; masks telescope away
    /// and the fixed-point total rescales to the weighted aggregate.
    pub fn combine(payloads: &[MaskedPayload]) -> Result<Vec<f64>> {
        let Some(first) = payloads.first() else {
            return Err(Error::protocol("no masked payloads to combine"));
        };
        let d = first.words.len();
        let mut acc = vec![0i64; d];
        for p in payloads {
            if p.words.len() != d {
                return Err(Error::protocol(format!(
                    "masked payload length {} does not match {d}",
                    p.words.len()
                )));
            }
            for (a, &w) in acc.iter_mut().zip(p.words.iter()) {
                *a = a.wrapping_add(w);
            }
        }
        Ok(acc.iter().map(|&w| w as f64 / FIXED_POINT_SCALE).collect())
    }
}

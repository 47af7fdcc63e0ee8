//! Update compression: magnitude top-k sparsification with per-client error
//! feedback, optional uniform 8-bit value quantization, and exact byte
//! accounting for the wire format.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantization {
    Off,
    Uniform8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompressionConfig {
    /// Keeps ceil(d / ratio) coordinates per update.
    pub ratio: u32,
    pub quantize: Quantization,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        CompressionConfig {
            ratio: 1,
            quantize: Quantization::Off,
        }
    }
}

pub const SUPPORTED_RATIOS: [u32; 5] = [1, 2, 4, 8, 16];

impl CompressionConfig {
    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_RATIOS.contains(&self.ratio) {
            return Err(Error::config(format!(
                "compression ratio {} not in {SUPPORTED_RATIOS:?}",
                self.ratio
            )));
        }
        Ok(())
    }

    pub fn is_lossless(&self) -> bool {
        self.ratio == 1 && self.quantize == Quantization::Off
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SparseValues {
    Float(Vec<f64>),
    Quantized {
        /// Step between adjacent codes: (max - min) / 255; zero when all
        /// kept values coincide.
        scale: f64,
        offset: f64,
        codes: Vec<u8>,
    },
}

impl SparseValues {
    pub fn len(&self) -> usize {
        match self {
            SparseValues::Float(v) => v.len(),
            SparseValues::Quantized { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sparse update: kept coordinates of a length-`d` dense vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePayload {
    pub d: u32,
    /// Strictly increasing, each < d.
    pub indices: Vec<u32>,
    pub values: SparseValues,
}

impl SparsePayload {
    pub fn validate(&self) -> Result<()> {
        if self.indices.len() != self.values.len() {
            return Err(Error::protocol(format!(
                "sparse payload has {} indices but {} values",
                self.indices.len(),
                self.values.len()
            )));
        }
        for pair in self.indices.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::protocol(
                    "sparse indices must be strictly increasing".to_string(),
                ));
            }
        }
        if let Some(&last) = self.indices.last() {
            if last >= self.d {
                return Err(Error::protocol(format!(
                    "sparse index {last} out of range for length {}",
                    self.d
                )));
            }
        }
        if let SparseValues::Quantized { scale, offset, .. } = &self.values {
            if !scale.is_finite() || !offset.is_finite() || *scale < 0.0 {
                return Err(Error::protocol(format!(
                    "invalid quantization parameters scale {scale}, offset {offset}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-client residual accumulating coordinates dropped by sparsification,
/// so they are retried in later rounds instead of lost.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorFeedbackState {
    residual: Vec<f64>,
}

impl ErrorFeedbackState {
    pub fn new(d: usize) -> Self {
        ErrorFeedbackState {
            residual: vec![0.0; d],
        }
    }

    pub fn residual(&self) -> &[f64] {
        &self.residual
    }
}

/// Number of coordinates kept at a given ratio.
pub fn kept_count(d: usize, ratio: u32) -> usize {
    d.div_ceil(ratio as usize)
}

/// Top-k sparsification of `delta + residual` by magnitude (ties keep the
/// lower index), updating the residual with everything not kept. The
/// residual carries unquantized values; quantization error is not fed back.
pub fn compress(
    delta: &[f64],
    cfg: &CompressionConfig,
    state: &mut ErrorFeedbackState,
) -> Result<SparsePayload> {
    cfg.validate()?;
    if delta.is_empty() {
        return Err(Error::config("cannot compress an empty update".to_string()));
    }
    if delta.len() != state.residual.len() {
        return Err(Error::config(format!(
            "update length {} does not match residual length {}",
            delta.len(),
            state.residual.len()
        )));
    }
    if delta.len() > u32::MAX as usize {
        return Err(Error::config("update too long for u32 indexing".to_string()));
    }
    let d = delta.len();
    let mut v: Vec<f64> = delta
        .iter()
        .zip(state.residual.iter())
        .map(|(a, b)| a + b)
        .collect();
    if let Some(bad) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::numeric(
            "compress",
            format!("non-finite value at coordinate {bad}"),
        ));
    }
    let k = kept_count(d, cfg.ratio);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        v[b].abs()
            .partial_cmp(&v[a].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order[..k].to_vec();
    kept.sort_unstable();

    let indices: Vec<u32> = kept.iter().map(|&i| i as u32).collect();
    let kept_values: Vec<f64> = kept.iter().map(|&i| v[i]).collect();
    for &i in &kept {
        v[i] = 0.0;
    }
    state.residual = v;

    let payload = SparsePayload {
        d: d as u32,
        indices,
        values: SparseValues::Float(kept_values),
    };
    match cfg.quantize {
        Quantization::Off => Ok(payload),
        Quantization::Uniform8 => quantize_payload(payload),
    }
}

/// Maps a float-valued payload onto 256 uniform levels spanning its value
/// range. Split out from [`compress`] so noise can be injected between
/// coordinate selection and quantization.
pub fn quantize_payload(p: SparsePayload) -> Result<SparsePayload> {
    let SparseValues::Float(values) = p.values else {
        return Err(Error::config(
            "payload is already quantized".to_string(),
        ));
    };
    if values.is_empty() {
        return Ok(SparsePayload {
            d: p.d,
            indices: p.indices,
            values: SparseValues::Quantized {
                scale: 0.0,
                offset: 0.0,
                codes: vec![],
            },
        });
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = (max - min) / 255.0;
    let codes: Vec<u8> = values
        .iter()
        .map(|&x| {
            if scale == 0.0 {
                0
            } else {
                ((x - min) / scale).round().clamp(0.0, 255.0) as u8
            }
        })
        .collect();
    Ok(SparsePayload {
        d: p.d,
        indices: p.indices,
        values: SparseValues::Quantized {
            scale,
            offset: min,
            codes,
        },
    })
}

/// Expands a sparse payload to a dense vector, zeros off the support.
pub fn decompress(p: &SparsePayload) -> Result<Vec<f64>> {
    p.validate()?;
    let mut out = vec![0.0; p.d as usize];
    match &p.values {
        SparseValues::Float(vals) => {
            for (&i, &x) in p.indices.iter().zip(vals.iter()) {
                out[i as usize] = x;
            }
        }
        SparseValues::Quantized {
            scale,
            offset,
            codes,
        } => {
            for (&i, &c) in p.indices.iter().zip(codes.iter()) {
                out[i as usize] = offset + f64::from(c) * scale;
            }
        }
    }
    Ok(out)
}

/// Exact serialized payload length under the wire format: a u32 entry
/// count, optional scale/offset pair, then (index, value) entries.
pub fn payload_bytes(p: &SparsePayload) -> usize {
    match &p.values {
        SparseValues::Float(vals) => 4 + vals.len() * (4 + 8),
        SparseValues::Quantized { codes, .. } => 4 + 16 + codes.len() * (4 + 1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn compress_fresh(delta: &[f64], ratio: u32, quantize: Quantization) -> SparsePayload {
        let cfg = CompressionConfig { ratio, quantize };
        let mut state = ErrorFeedbackState::new(delta.len());
        compress(delta, &cfg, &mut state).unwrap()
    }

    #[test]
    fn magnitude_ranking_keeps_the_largest_coordinates() {
        let p = compress_fresh(&[0.1, -5.0, 0.2, 3.0], 2, Quantization::Off);
        assert_eq!(p.indices, vec![1, 3]);
        assert_eq!(p.values, SparseValues::Float(vec![-5.0, 3.0]));
    }

    #[test]
    fn ties_keep_the_lower_index() {
        let p = compress_fresh(&[2.0, -2.0], 2, Quantization::Off);
        assert_eq!(p.indices, vec![0]);
        assert_eq!(p.values, SparseValues::Float(vec![2.0]));
    }

    #[test]
    fn lossless_configuration_roundtrips_bit_exactly() {
        let mut rng = SeededRng::new(3, 0);
        let delta: Vec<f64> = (0..97).map(|_| rng.next_unit_f64() - 0.5).collect();
        let cfg = CompressionConfig::default();
        assert!(cfg.is_lossless());
        let mut state = ErrorFeedbackState::new(delta.len());
        let p = compress(&delta, &cfg, &mut state).unwrap();
        assert_eq!(decompress(&p).unwrap(), delta);
        assert!(state.residual().iter().all(|&r| r == 0.0));
    }

    #[test]
    fn error_feedback_conserves_mass() {
        let mut rng = SeededRng::new(4, 0);
        for ratio in SUPPORTED_RATIOS {
            let delta: Vec<f64> = (0..53).map(|_| rng.next_unit_f64() * 2.0 - 1.0).collect();
            let mut state = ErrorFeedbackState::new(delta.len());
            // Preload a nonzero residual from an earlier round.
            let first: Vec<f64> = (0..53).map(|_| rng.next_unit_f64() - 0.5).collect();
            let cfg = CompressionConfig {
                ratio,
                quantize: Quantization::Off,
            };
            compress(&first, &cfg, &mut state).unwrap();
            let old_residual = state.residual().to_vec();
            let p = compress(&delta, &cfg, &mut state).unwrap();
            let kept = decompress(&p).unwrap();
            for i in 0..delta.len() {
                let lhs = kept[i] + state.residual()[i];
                let rhs = delta[i] + old_residual[i];
                assert!(
                    (lhs - rhs).abs() <= 1e-12,
                    "ratio {ratio}, coordinate {i}: {lhs} vs {rhs}"
                );
            }
        }
    }

    #[test]
    fn dropped_coordinates_are_retried_via_the_residual() {
        let cfg = CompressionConfig {
            ratio: 2,
            quantize: Quantization::Off,
        };
        let mut state = ErrorFeedbackState::new(2);
        let delta = [1.0, 0.4];
        let mut sent_small = false;
        for _ in 0..5 {
            let p = compress(&delta, &cfg, &mut state).unwrap();
            if p.indices == [1] {
                sent_small = true;
                break;
            }
        }
        assert!(sent_small, "residual never promoted the small coordinate");
    }

    #[test]
    fn entry_count_matches_the_ratio() {
        let mut rng = SeededRng::new(5, 0);
        for d in [1usize, 2, 15, 16, 17, 100] {
            let delta: Vec<f64> = (0..d).map(|_| rng.next_unit_f64()).collect();
            for ratio in SUPPORTED_RATIOS {
                let p = compress_fresh(&delta, ratio, Quantization::Off);
                let expect = d.div_ceil(ratio as usize);
                assert_eq!(p.indices.len(), expect.min(d), "d={d}, r={ratio}");
            }
        }
    }

    #[test]
    fn quantized_roundtrip_stays_within_half_a_step() {
        let mut rng = SeededRng::new(6, 0);
        for _ in 0..50 {
            let delta: Vec<f64> = (0..64).map(|_| rng.next_unit_f64() * 4.0 - 2.0).collect();
            let p = compress_fresh(&delta, 4, Quantization::Uniform8);
            let back = decompress(&p).unwrap();
            let SparseValues::Quantized { scale, .. } = &p.values else {
                panic!("expected quantized values");
            };
            for &i in &p.indices {
                let err = (back[i as usize] - delta[i as usize]).abs();
                assert!(
                    err <= scale / 2.0 + 1e-12,
                    "coordinate {i}: error {err} exceeds step/2 {}",
                    scale / 2.0
                );
            }
        }
    }

    #[test]
    fn staged_quantization_matches_the_inline_path() {
        let mut rng = SeededRng::new(7, 0);
        let delta: Vec<f64> = (0..80).map(|_| rng.next_unit_f64() * 2.0 - 1.0).collect();
        for ratio in SUPPORTED_RATIOS {
            let inline = compress_fresh(&delta, ratio, Quantization::Uniform8);
            let staged =
                quantize_payload(compress_fresh(&delta, ratio, Quantization::Off)).unwrap();
            assert_eq!(inline, staged, "ratio {ratio}");
        }
    }

    #[test]
    fn quantizing_twice_is_rejected() {
        let p = compress_fresh(&[1.0, 2.0], 1, Quantization::Uniform8);
        assert!(matches!(quantize_payload(p), Err(Error::Config(_))));
    }

    #[test]
    fn constant_kept_values_quantize_exactly() {
        let p = compress_fresh(&[3.5, 3.5, 3.5, 3.5], 2, Quantization::Uniform8);
        let back = decompress(&p).unwrap();
        assert_eq!(back[0], 3.5);
        assert_eq!(back[1], 3.5);
    }

    #[test]
    fn byte_accounting_matches_the_size_formulas() {
        let delta: Vec<f64> = (0..1000).map(|i| i as f64 / 999.0 - 0.5).collect();
        let p = compress_fresh(&delta, 8, Quantization::Off);
        assert_eq!(payload_bytes(&p), 1504);
        let q = compress_fresh(&delta, 8, Quantization::Uniform8);
        assert_eq!(payload_bytes(&q), 4 + 16 + 125 * 5);
    }

    #[test]
    fn bytes_shrink_as_the_ratio_grows() {
        let delta: Vec<f64> = (0..569).map(|i| (i as f64).sin()).collect();
        let mut last = usize::MAX;
        for ratio in SUPPORTED_RATIOS {
            let p = compress_fresh(&delta, ratio, Quantization::Off);
            let b = payload_bytes(&p);
            assert!(b < last, "ratio {ratio}: {b} not below {last}");
            last = b;
        }
    }

    #[test]
    fn empty_payload_decompresses_to_zeros() {
        let p = SparsePayload {
            d: 5,
            indices: vec![],
            values: SparseValues::Float(vec![]),
        };
        assert_eq!(decompress(&p).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn out_of_range_index_is_a_protocol_error() {
        let p = SparsePayload {
            d: 3,
            indices: vec![3],
            values: SparseValues::Float(vec![1.0]),
        };
        assert!(matches!(decompress(&p), Err(Error::Protocol(_))));
        let unsorted = SparsePayload {
            d: 5,
            indices: vec![2, 1],
            values: SparseValues::Float(vec![1.0, 2.0]),
        };
        assert!(matches!(decompress(&unsorted), Err(Error::Protocol(_))));
    }

    #[test]
    fn unsupported_ratio_is_rejected() {
        let cfg = CompressionConfig {
            ratio: 3,
            quantize: Quantization::Off,
        };
        let mut state = ErrorFeedbackState::new(4);
        assert!(matches!(
            compress(&[1.0, 2.0, 3.0, 4.0], &cfg, &mut state),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn positions_are_preserved_exactly(seed in 0u64..10_000) {
            let mut rng = SeededRng::new(seed, 9);
            let d = 8 + (seed as usize % 120);
            let delta: Vec<f64> = (0..d).map(|_| rng.next_unit_f64() * 2.0 - 1.0).collect();
            let p = compress_fresh(&delta, 4, Quantization::Off);
            let back = decompress(&p).unwrap();
            let SparseValues::Float(vals) = &p.values else { unreachable!() };
            for (&i, &v) in p.indices.iter().zip(vals.iter()) {
                prop_assert_eq!(back[i as usize], v);
                prop_assert_eq!(delta[i as usize], v);
            }
            for (i, &b) in back.iter().enumerate() {
                if !p.indices.contains(&(i as u32)) {
                    prop_assert_eq!(b, 0.0);
                }
            }
        }
    }
}

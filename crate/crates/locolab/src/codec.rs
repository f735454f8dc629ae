//! Wire-format compressors for outer-gradient fragments.
//!
//! The headline format is `E3M0`: a 4-bit float with 1 sign bit and 3
//! exponent bits (no mantissa), scaled per fragment by the maximum absolute
//! value. Alternatives are top-k magnitude selection, random dropping with
//! survivor rescaling, and the uncompressed 32-bit identity baseline.
//! Accumulation after decode always happens in full precision.
//!
//! # E3M0 encoding (normative)
//!
//! * `scale` is the max-abs of the encoded slice, stored as an `f32`.
//! * Code `0b0000` is exact zero; `(sign=1, e=0)` also decodes to `+0` but
//!   encoders never emit it.
//! * A nonzero code `(s, e)` with `e in 1..=7` decodes to
//!   `(-1)^s * 2^(e-7) * scale`, i.e. the grid spans `scale * 2^-6 ..= scale`.
//! * Encoding rounds `log2(|x|/scale)` to the nearest grid exponent; ratios
//!   below `2^-6.5` underflow to the zero code. Ties round toward the larger
//!   magnitude. Deterministic, no stochastic rounding.
//!
//! # Wire layout of a [`QuantBlock`]
//!
//! 4-byte little-endian `f32` scale, 4-byte little-endian `u32` count, then
//! `ceil(count/2)` code bytes with the even index in the low nibble. Byte
//! accounting everywhere in the crate uses these exact sizes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const SIGN_BIT: u8 = 0x8;
const EXP_MASK: u8 = 0x7;
/// Grid exponents run from -6 (code e=1) to 0 (code e=7).
const EXP_LO: i32 = -6;

/// Scale plus packed 4-bit codes: the wire representation of one fragment.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantBlock {
    pub scale: f32,
    pub count: u32,
    /// Packed nibbles, low nibble = even index.
    pub codes: Vec<u8>,
}

impl QuantBlock {
    /// Exact wire size in bytes: scale + count header + packed codes.
    pub fn wire_size(count: usize) -> u64 {
        8 + (count as u64).div_ceil(2)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::wire_size(self.count as usize) as usize);
        out.extend_from_slice(&self.scale.to_le_bytes());
        out.extend_from_slice(&self.count.to_le_bytes());
        out.extend_from_slice(&self.codes);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<QuantBlock> {
        if bytes.len() < 8 {
            return Err(Error::Codec(format!(
                "quant block needs at least 8 header bytes, got {}",
                bytes.len()
            )));
        }
        let scale = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let want = Self::wire_size(count as usize) as usize;
        if bytes.len() != want {
            return Err(Error::Codec(format!(
                "quant block of {count} values must be {want} bytes, got {}",
                bytes.len()
            )));
        }
        let codes = bytes[8..].to_vec();
        if count % 2 == 1 {
            if let Some(last) = codes.last() {
                if last >> 4 != 0 {
                    return Err(Error::Codec(
                        "odd-count quant block has a nonzero trailing nibble".into(),
                    ));
                }
            }
        }
        Ok(QuantBlock {
            scale,
            count,
            codes,
        })
    }
}

fn encode_one(x: f64, scale: f64) -> u8 {
    if x == 0.0 || scale == 0.0 {
        return 0;
    }
    let ratio = x.abs() / scale;
    // Walk the half-octave boundaries 2^(k-1/2) from the top of the grid.
    // Comparing against exact-power-of-two-scaled constants avoids any libm
    // log2 wobble and keeps ties (>= boundary) on the larger magnitude.
    let mut exp = 0i32;
    while exp >= EXP_LO {
        let boundary = std::f64::consts::FRAC_1_SQRT_2 * f64::powi(2.0, exp);
        if ratio >= boundary {
            break;
        }
        exp -= 1;
    }
    if exp < EXP_LO {
        return 0; // underflow to exact zero
    }
    let e = (exp + 7) as u8;
    if x < 0.0 {
        SIGN_BIT | e
    } else {
        e
    }
}

fn decode_one(code: u8, scale: f64) -> f64 {
    let e = code & EXP_MASK;
    if e == 0 {
        return 0.0; // both (s, e=0) codes are zero
    }
    let mag = f64::powi(2.0, e as i32 - 7) * scale;
    if code & SIGN_BIT != 0 {
        -mag
    } else {
        mag
    }
}

/// Encode a slice of values into an E3M0 block.
pub fn encode_e3m0(values: &[f64]) -> Result<QuantBlock> {
    if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Codec(format!(
            "cannot encode non-finite value at index {bad}"
        )));
    }
    let max_abs = values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let scale = max_abs as f32;
    let scale64 = scale as f64;
    let mut codes = vec![0u8; values.len().div_ceil(2)];
    for (i, &v) in values.iter().enumerate() {
        let code = encode_one(v, scale64);
        if i % 2 == 0 {
            codes[i / 2] |= code;
        } else {
            codes[i / 2] |= code << 4;
        }
    }
    Ok(QuantBlock {
        scale,
        count: values.len() as u32,
        codes,
    })
}

/// Decode an E3M0 block back into full-precision values.
pub fn decode_e3m0(block: &QuantBlock) -> Result<Vec<f64>> {
    let n = block.count as usize;
    if block.codes.len() != n.div_ceil(2) {
        return Err(Error::Codec(format!(
            "quant block of {n} values carries {} code bytes, expected {}",
            block.codes.len(),
            n.div_ceil(2)
        )));
    }
    let scale = block.scale as f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let byte = block.codes[i / 2];
        let code = if i % 2 == 0 { byte & 0xF } else { byte >> 4 };
        out.push(decode_one(code, scale));
    }
    Ok(out)
}

/// Sparse output of top-k selection: `(index, value)` pairs sorted by index.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseBlock {
    pub count: u32,
    pub entries: Vec<(u32, f64)>,
}

impl SparseBlock {
    /// Wire size: count header plus a 4-byte index and 4-byte value per entry.
    pub fn wire_size(kept: usize) -> u64 {
        4 + 8 * kept as u64
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.count as usize];
        for &(i, v) in &self.entries {
            out[i as usize] = v;
        }
        out
    }
}

/// Keep the `ceil(keep_fraction * n)` largest-magnitude entries (ties broken
/// by lower index), zeroing the rest.
pub fn topk_compress(values: &[f64], keep_fraction: f64) -> Result<SparseBlock> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::config(format!(
            "keep_fraction must lie in (0, 1], got {keep_fraction}"
        )));
    }
    let n = values.len();
    let k = ((keep_fraction * n as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .abs()
            .partial_cmp(&values[a].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut entries: Vec<(u32, f64)> = order[..k]
        .iter()
        .map(|&i| (i as u32, values[i]))
        .collect();
    entries.sort_by_key(|&(i, _)| i);
    Ok(SparseBlock {
        count: n as u32,
        entries,
    })
}

/// Zero each entry independently with probability `drop_prob` and rescale the
/// survivors by `1 / (1 - drop_prob)`, keeping the expectation unchanged.
pub fn random_drop_compress(values: &[f64], drop_prob: f64, seed: u64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&drop_prob) {
        return Err(Error::config(format!(
            "drop_prob must lie in [0, 1), got {drop_prob}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep_scale = 1.0 / (1.0 - drop_prob);
    Ok(values
        .iter()
        .map(|&v| {
            let u: f64 = rng.random();
            if u < drop_prob {
                0.0
            } else {
                v * keep_scale
            }
        })
        .collect())
}

/// Codec selection for outer-gradient transport.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Codec {
    /// Uncompressed 32-bit baseline; values pass through unchanged.
    Fp32,
    /// 4-bit E3M0 floats with a per-fragment scale.
    E3m0,
    TopK { keep_fraction: f64 },
    RandomDrop { drop_prob: f64 },
}

impl Default for Codec {
    fn default() -> Self {
        Codec::Fp32
    }
}

impl Codec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Codec::TopK { keep_fraction } if !(keep_fraction > 0.0 && keep_fraction <= 1.0) => {
                Err(Error::config(format!(
                    "top_k keep_fraction must lie in (0, 1], got {keep_fraction}"
                )))
            }
            Codec::RandomDrop { drop_prob } if !(0.0..1.0).contains(&drop_prob) => {
                Err(Error::config(format!(
                    "random_drop drop_prob must lie in [0, 1), got {drop_prob}"
                )))
            }
            _ => Ok(()),
        }
    }

    /// Wire bytes one replica spends sending a fragment of `n` values.
    pub fn wire_size(&self, n: usize) -> u64 {
        match *self {
            Codec::Fp32 => 4 * n as u64,
            Codec::E3m0 => QuantBlock::wire_size(n),
            Codec::TopK { keep_fraction } => {
                let k = ((keep_fraction * n as f64).ceil() as usize).min(n);
                SparseBlock::wire_size(k)
            }
            // Dropped entries still travel as (zeroed) dense values.
            Codec::RandomDrop { .. } => 4 * n as u64,
        }
    }

    /// Encode-then-decode one replica's delta as it would arrive on the wire.
    /// `seed` keys the random-drop mask and is ignored by the other codecs.
    pub fn transport(&self, values: &[f64], seed: u64) -> Result<Vec<f64>> {
        match *self {
            Codec::Fp32 => Ok(values.to_vec()),
            Codec::E3m0 => decode_e3m0(&encode_e3m0(values)?),
            Codec::TopK { keep_fraction } => Ok(topk_compress(values, keep_fraction)?.to_dense()),
            Codec::RandomDrop { drop_prob } => random_drop_compress(values, drop_prob, seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_vector_roundtrip() {
        let block = encode_e3m0(&[0.0; 5]).unwrap();
        assert_eq!(block.scale, 0.0);
        assert!(block.codes.iter().all(|&b| b == 0));
        assert_eq!(decode_e3m0(&block).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn powers_of_two_are_exact() {
        let values = [1.0, -0.5, 0.25];
        let block = encode_e3m0(&values).unwrap();
        assert_eq!(block.scale, 1.0);
        assert_eq!(decode_e3m0(&block).unwrap(), values.to_vec());
    }

    #[test]
    fn nearest_grid_point_in_log2() {
        // 0.7 at scale 1.0: log2(0.7) ~ -0.515 rounds to -1, decoding as 0.5.
        let block = encode_e3m0(&[1.0, 0.7]).unwrap();
        assert_eq!(decode_e3m0(&block).unwrap()[1], 0.5);
    }

    #[test]
    fn signed_top_code_decodes_to_scale() {
        let block = QuantBlock {
            scale: 2.0,
            count: 1,
            codes: vec![SIGN_BIT | 7],
        };
        assert_eq!(decode_e3m0(&block).unwrap(), vec![-2.0]);
    }

    #[test]
    fn underflow_goes_to_zero() {
        // Ratio below 2^-6.5 encodes as the zero code.
        let tiny = f64::powi(2.0, -7);
        let block = encode_e3m0(&[1.0, tiny * 0.9]).unwrap();
        assert_eq!(decode_e3m0(&block).unwrap()[1], 0.0);
        // At 2^-6 the value sits on the grid and survives.
        let block = encode_e3m0(&[1.0, f64::powi(2.0, -6)]).unwrap();
        assert_eq!(decode_e3m0(&block).unwrap()[1], f64::powi(2.0, -6));
    }

    #[test]
    fn non_finite_input_reports_index() {
        let err = encode_e3m0(&[0.0, f64::INFINITY]).unwrap_err();
        assert!(err.to_string().contains("index 1"), "{err}");
    }

    #[test]
    fn wire_layout_is_exact() {
        let values = [1.0, -0.5, 0.25];
        let block = encode_e3m0(&values).unwrap();
        let bytes = block.to_bytes();
        assert_eq!(bytes.len() as u64, QuantBlock::wire_size(3));
        assert_eq!(bytes[0..4], 1.0f32.to_le_bytes());
        assert_eq!(bytes[4..8], 3u32.to_le_bytes());
        // codes: 1.0 -> e=7, -0.5 -> sign|6, 0.25 -> e=5
        assert_eq!(bytes[8], 7 | ((SIGN_BIT | 6) << 4));
        assert_eq!(bytes[9], 5);
        let back = QuantBlock::from_bytes(&bytes).unwrap();
        assert_eq!(back, block);
    }

    #[test]
    fn malformed_wire_is_rejected() {
        let block = encode_e3m0(&[1.0, 0.5, 0.25]).unwrap();
        let mut bytes = block.to_bytes();
        bytes.push(0);
        assert!(QuantBlock::from_bytes(&bytes).is_err());
        let mut bad_nibble = block.to_bytes();
        *bad_nibble.last_mut().unwrap() |= 0xF0;
        assert!(QuantBlock::from_bytes(&bad_nibble).is_err());
    }

    #[test]
    fn topk_examples() {
        let full = topk_compress(&[3.0, -1.0, 2.0], 1.0).unwrap();
        assert_eq!(full.to_dense(), vec![3.0, -1.0, 2.0]);
        let third = topk_compress(&[3.0, -1.0, 2.0], 1.0 / 3.0).unwrap();
        assert_eq!(third.to_dense(), vec![3.0, 0.0, 0.0]);
        // Magnitude tie: lower index wins.
        let tie = topk_compress(&[-2.0, 2.0, 1.0], 1.0 / 3.0).unwrap();
        assert_eq!(tie.to_dense(), vec![-2.0, 0.0, 0.0]);
    }

    #[test]
    fn topk_rejects_out_of_range() {
        assert!(topk_compress(&[1.0], 0.0).is_err());
        assert!(topk_compress(&[1.0], 1.5).is_err());
    }

    #[test]
    fn random_drop_is_unbiased() {
        // Monte-Carlo over 10^4 seeds: the mean of the dropped-and-rescaled
        // value must sit within 3 sigma of the input.
        let v = 2.0;
        let p = 0.5;
        let n = 10_000u64;
        let mut sum = 0.0;
        for seed in 0..n {
            sum += random_drop_compress(&[v], p, seed).unwrap()[0];
        }
        let mean = sum / n as f64;
        // Per-sample std is |v| * sqrt(p / (1 - p)).
        let sigma = v * (p / (1.0 - p)).sqrt() / (n as f64).sqrt();
        assert!(
            (mean - v).abs() <= 3.0 * sigma,
            "mean {mean} vs {v} (sigma {sigma})"
        );
    }

    #[test]
    fn random_drop_rescales_survivors() {
        let out = random_drop_compress(&[1.0, 2.0, 3.0, 4.0], 0.5, 99).unwrap();
        for v in out {
            assert!(v == 0.0 || v == 2.0 || v == 4.0 || v == 6.0 || v == 8.0);
        }
        assert!(random_drop_compress(&[1.0], 1.0, 0).is_err());
    }

    #[test]
    fn e3m0_relative_error_bound() {
        // Any in-range value decodes within sqrt(2)-1 relative error.
        let bound = std::f64::consts::SQRT_2 - 1.0;
        let mut x = 1.0 / 64.0;
        while x <= 1.0 {
            let block = encode_e3m0(&[1.0, x]).unwrap();
            let dec = decode_e3m0(&block).unwrap()[1];
            assert!(
                (dec - x).abs() <= bound * x * (1.0 + 1e-12),
                "x={x} dec={dec}"
            );
            x *= 1.01;
        }
    }

    proptest! {
        // All 15 valid codes round-trip exactly under random scales.
        #[test]
        fn grid_roundtrip_exact(scale_exp in -20i32..20, frac in 1u32..1u32<<23) {
            let scale = f32::from_bits(((scale_exp + 127) as u32) << 23 | frac);
            prop_assume!(scale.is_finite() && scale > 0.0);
            let mut values = vec![0.0f64];
            for e in 1..=7u8 {
                for s in [0u8, SIGN_BIT] {
                    values.push(decode_one(s | e, scale as f64));
                }
            }
            let block = encode_e3m0(&values).unwrap();
            prop_assert_eq!(block.scale, scale);
            let back = decode_e3m0(&block).unwrap();
            prop_assert_eq!(back, values);
        }

        // Sign and weak magnitude ordering survive encoding.
        #[test]
        fn encode_is_monotone(values in proptest::collection::vec(-1e6f64..1e6, 2..40)) {
            let block = encode_e3m0(&values).unwrap();
            let dec = decode_e3m0(&block).unwrap();
            for (orig, d) in values.iter().zip(dec.iter()) {
                prop_assert!(d.abs() <= orig.abs().max(block.scale as f64));
                if *orig != 0.0 && *d != 0.0 {
                    prop_assert_eq!(orig.signum(), d.signum());
                }
            }
            let mut idx: Vec<usize> = (0..values.len()).collect();
            idx.sort_by(|&a, &b| values[a].abs().partial_cmp(&values[b].abs()).unwrap());
            for w in idx.windows(2) {
                prop_assert!(dec[w[0]].abs() <= dec[w[1]].abs() * (1.0 + 1e-12));
            }
        }

        // Decode of encode of decode is decode (idempotence on the grid).
        #[test]
        fn decode_is_idempotent(values in proptest::collection::vec(-100.0f64..100.0, 1..30)) {
            let first = decode_e3m0(&encode_e3m0(&values).unwrap()).unwrap();
            let second = decode_e3m0(&encode_e3m0(&first).unwrap()).unwrap();
            prop_assert_eq!(first, second);
        }
    }
}

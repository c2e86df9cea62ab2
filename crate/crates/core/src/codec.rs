//! Bit-group to noise-interval codec.
//!
//! A message is split into groups of `k` bits. Group value `m` owns the
//! bin `[m / 2^(k-1) - 1, (m + 1) / 2^(k-1) - 1)` of `(-1, 1)`; the encoder
//! draws uniformly from that bin shrunk by `delta` on both sides, so any
//! perturbation smaller than `delta` still decodes to `m`. The decoder uses
//! the full bins, which makes it total on `[-1, 1]`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Largest supported group size. The interval table has `2^k` rows.
pub const MAX_GROUP_BITS: u32 = 16;

/// Group size, interval gap and latent dimension.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCodecParams", into = "RawCodecParams")]
pub struct CodecParams {
    k: u32,
    delta: f64,
    latent_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct RawCodecParams {
    k: u32,
    delta: f64,
    latent_dim: usize,
}

impl TryFrom<RawCodecParams> for CodecParams {
    type Error = Error;

    fn try_from(raw: RawCodecParams) -> Result<Self> {
        CodecParams::new(raw.k, raw.delta, raw.latent_dim)
    }
}

impl From<CodecParams> for RawCodecParams {
    fn from(p: CodecParams) -> Self {
        RawCodecParams {
            k: p.k,
            delta: p.delta,
            latent_dim: p.latent_dim,
        }
    }
}

impl CodecParams {
    pub fn new(k: u32, delta: f64, latent_dim: usize) -> Result<Self> {
        if !(1..=MAX_GROUP_BITS).contains(&k) {
            return Err(Error::Parameter(format!(
                "group size k = {k} must be in 1..={MAX_GROUP_BITS}"
            )));
        }
        if latent_dim == 0 {
            return Err(Error::Parameter("latent_dim must be at least 1".into()));
        }
        let half_bin = 0.5f64.powi(k as i32);
        if !(delta > 0.0 && delta < half_bin) {
            return Err(Error::Parameter(format!(
                "delta = {delta} must lie in (0, 2^-{k}) = (0, {half_bin})"
            )));
        }
        Ok(Self { k, delta, latent_dim })
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// Number of groups (`2^k`).
    pub fn groups(&self) -> u32 {
        1 << self.k
    }

    /// Full bin width `2^(1-k)`.
    pub fn bin_width(&self) -> f64 {
        2.0 / f64::from(self.groups())
    }

    /// Width of every encode interval, `2^(1-k) - 2·delta`.
    pub fn interval_width(&self) -> f64 {
        self.bin_width() - 2.0 * self.delta
    }

    pub fn capacity_bits(&self) -> usize {
        self.k as usize * self.latent_dim
    }

    pub fn with_k(&self, k: u32) -> Result<Self> {
        Self::new(k, self.delta, self.latent_dim)
    }

    pub fn with_delta(&self, delta: f64) -> Result<Self> {
        Self::new(self.k, delta, self.latent_dim)
    }
}

/// `k · latent_dim`.
pub fn capacity_bits(params: &CodecParams) -> usize {
    params.capacity_bits()
}

/// Ordered sequence of bits.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct BitString(Vec<bool>);

impl BitString {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    pub fn from_bits(bits: impl IntoIterator<Item = bool>) -> Self {
        Self(bits.into_iter().collect())
    }

    /// Expands bytes most-significant bit first.
    pub fn from_bytes(bytes: &[u8]) -> Self {
        Self(
            bytes
                .iter()
                .flat_map(|&b| (0..8).rev().map(move |i| (b >> i) & 1 == 1))
                .collect(),
        )
    }

    /// Parses a hexadecimal string (optional `0x` prefix), 4 bits per digit.
    pub fn from_hex(hex: &str) -> Result<Self> {
        let hex = hex.trim();
        let hex = hex.strip_prefix("0x").or_else(|| hex.strip_prefix("0X")).unwrap_or(hex);
        let mut bits = Vec::with_capacity(hex.len() * 4);
        for c in hex.chars() {
            let v = c
                .to_digit(16)
                .ok_or_else(|| Error::Domain(format!("`{c}` is not a hexadecimal digit")))?;
            bits.extend((0..4).rev().map(|i| (v >> i) & 1 == 1));
        }
        Ok(Self(bits))
    }

    /// Packs into bytes MSB first; a partial final byte is zero-filled.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.0
            .chunks(8)
            .map(|c| c.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | (u8::from(b) << (7 - i))))
            .collect()
    }

    /// Hex rendering of the zero-filled nibbles.
    pub fn to_hex(&self) -> String {
        self.0
            .chunks(4)
            .map(|c| {
                let v = c.iter().enumerate().fold(0u32, |acc, (i, &b)| acc | (u32::from(b) << (3 - i)));
                char::from_digit(v, 16).expect("nibble")
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn truncated(&self, len: usize) -> Self {
        Self(self.0.iter().copied().take(len).collect())
    }

    /// Zero-pads at the tail up to `len` bits.
    pub fn padded(&self, len: usize) -> Self {
        let mut v = self.0.clone();
        if v.len() < len {
            v.resize(len, false);
        }
        Self(v)
    }

    pub fn push(&mut self, bit: bool) {
        self.0.push(bit);
    }

    pub fn complement(&self) -> Self {
        Self(self.0.iter().map(|b| !b).collect())
    }
}

impl fmt::Display for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for BitString {
    type Err = Error;

    /// Parses a string of `0`/`1` symbols.
    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Domain(format!("`{other}` is not a bit"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }
}

/// Noise vector with every component strictly inside `(-1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseVector(Vec<f64>);

impl NoiseVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(v.abs() < 1.0)) {
            return Err(Error::Domain(format!("noise value {v} outside (-1, 1)")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&v| v as f32).collect()
    }
}

/// Encode interval of one group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub group: u32,
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    /// Open-interval membership.
    pub fn contains(&self, r: f64) -> bool {
        self.lo < r && r < self.hi
    }
}

pub fn interval_for_group(m: u32, params: &CodecParams) -> Result<Interval> {
    if m >= params.groups() {
        return Err(Error::Domain(format!(
            "group {m} out of range 0..{} for k = {}",
            params.groups(),
            params.k
        )));
    }
    let scale = f64::from(1u32 << (params.k - 1));
    let lo = f64::from(m) / scale - 1.0 + params.delta;
    let hi = f64::from(m + 1) / scale - 1.0 - params.delta;
    if lo >= hi {
        return Err(Error::Parameter(format!(
            "degenerate interval for group {m}: delta {} too large",
            params.delta
        )));
    }
    Ok(Interval { group: m, lo, hi })
}

pub fn interval_table(params: &CodecParams) -> Result<Vec<Interval>> {
    (0..params.groups()).map(|m| interval_for_group(m, params)).collect()
}

/// Maps `bits` (zero-padded to capacity) to a noise vector.
pub fn encode<R: Rng + ?Sized>(bits: &BitString, params: &CodecParams, rng: &mut R) -> Result<NoiseVector> {
    let capacity = params.capacity_bits();
    if bits.len() > capacity {
        return Err(Error::Capacity {
            bits: bits.len(),
            capacity,
        });
    }
    let table = interval_table(params)?;
    let padded = bits.padded(capacity);
    let values = padded
        .bits()
        .chunks(params.k as usize)
        .map(|group| {
            let m = group.iter().fold(0usize, |acc, &b| (acc << 1) | usize::from(b));
            let iv = table[m];
            loop {
                let r = iv.lo + (iv.hi - iv.lo) * rng.random::<f64>();
                if iv.contains(r) {
                    break r;
                }
            }
        })
        .collect();
    NoiseVector::new(values)
}

/// Group index of a single value under the full-bin decode rule.
pub fn group_of(r: f64, params: &CodecParams) -> Result<u32> {
    if !(-1.0..=1.0).contains(&r) {
        return Err(Error::Domain(format!("noise value {r} outside [-1, 1]")));
    }
    let scale = f64::from(1u32 << (params.k - 1));
    let m = ((r + 1.0) * scale).floor();
    Ok((m.max(0.0) as u32).min(params.groups() - 1))
}

/// Maps `latent_dim` noise values back to `k · latent_dim` bits.
pub fn decode(noise: &[f64], params: &CodecParams) -> Result<BitString> {
    if noise.len() != params.latent_dim {
        return Err(Error::Shape(format!(
            "noise has {} components, codec expects {}",
            noise.len(),
            params.latent_dim
        )));
    }
    let mut out = BitString::new();
    for &r in noise {
        let m = group_of(r, params)?;
        for i in (0..params.k).rev() {
            out.push((m >> i) & 1 == 1);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn p(k: u32, delta: f64, l: usize) -> CodecParams {
        CodecParams::new(k, delta, l).unwrap()
    }

    #[test]
    fn table1_first_and_last_rows() {
        let params = p(3, 0.001, 100);
        let first = interval_for_group(0, &params).unwrap();
        assert!((first.lo + 0.999).abs() < 1e-12 && (first.hi + 0.751).abs() < 1e-12);
        let last = interval_for_group(7, &params).unwrap();
        assert!((last.lo - 0.751).abs() < 1e-12 && (last.hi - 0.999).abs() < 1e-12);
    }

    #[test]
    fn single_bit_interval() {
        let iv = interval_for_group(0, &p(1, 0.01, 1)).unwrap();
        assert!((iv.lo + 0.99).abs() < 1e-12 && (iv.hi + 0.01).abs() < 1e-12);
    }

    #[test]
    fn group_out_of_range_is_domain_error() {
        assert!(matches!(interval_for_group(8, &p(3, 0.001, 1)), Err(Error::Domain(_))));
    }

    #[test]
    fn delta_too_large_is_rejected() {
        assert!(matches!(CodecParams::new(3, 0.125, 10), Err(Error::Parameter(_))));
        assert!(matches!(CodecParams::new(1, 0.0, 10), Err(Error::Parameter(_))));
        assert!(matches!(CodecParams::new(0, 0.01, 10), Err(Error::Parameter(_))));
        assert!(matches!(CodecParams::new(2, 0.01, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn two_bit_table_by_hand() {
        let t = interval_table(&p(2, 0.01, 1)).unwrap();
        let expect = [(-0.99, -0.51), (-0.49, -0.01), (0.01, 0.49), (0.51, 0.99)];
        for (iv, (lo, hi)) in t.iter().zip(expect) {
            assert!((iv.lo - lo).abs() < 1e-12 && (iv.hi - hi).abs() < 1e-12, "{iv:?}");
        }
    }

    #[test]
    fn one_bit_table() {
        let t = interval_table(&p(1, 0.001, 1)).unwrap();
        assert_eq!(t.len(), 2);
        assert!((t[0].lo + 0.999).abs() < 1e-12 && (t[0].hi + 0.001).abs() < 1e-12);
        assert!((t[1].lo - 0.001).abs() < 1e-12 && (t[1].hi - 0.999).abs() < 1e-12);
    }

    #[test]
    fn capacity() {
        assert_eq!(p(3, 0.001, 100).capacity_bits(), 300);
        assert_eq!(capacity_bits(&p(1, 0.1, 1)), 1);
        assert_eq!(p(5, 0.01, 100).capacity_bits(), 500);
    }

    #[test]
    fn empty_message_encodes_lowest_group() {
        let params = p(3, 0.001, 2);
        let noise = encode(&BitString::new(), &params, &mut seed::rng(1)).unwrap();
        assert_eq!(noise.len(), 2);
        assert!(noise.values().iter().all(|&r| -0.999 < r && r < -0.751));
    }

    #[test]
    fn single_bit_message() {
        let params = p(1, 0.01, 1);
        let noise = encode(&"1".parse().unwrap(), &params, &mut seed::rng(3)).unwrap();
        assert!(0.01 < noise.values()[0] && noise.values()[0] < 0.99);
    }

    #[test]
    fn over_capacity_is_rejected() {
        let params = p(3, 0.001, 100);
        let bits = BitString::from_bits(std::iter::repeat_n(true, 301));
        match encode(&bits, &params, &mut seed::rng(0)) {
            Err(Error::Capacity { bits: 301, capacity: 300 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn decode_examples() {
        let params = p(3, 0.001, 1);
        assert_eq!(decode(&[0.3], &params).unwrap().to_string(), "101");
        assert_eq!(decode(&[-0.999 + 1e-6], &params).unwrap().to_string(), "000");
        assert_eq!(decode(&[1.0], &params).unwrap().to_string(), "111");
        assert_eq!(decode(&[-1.0], &params).unwrap().to_string(), "000");
        assert!(matches!(decode(&[1.5], &params), Err(Error::Domain(_))));
        assert!(matches!(decode(&[0.1, 0.2], &params), Err(Error::Shape(_))));
    }

    #[test]
    fn gap_values_decode_to_the_enclosing_bin() {
        let params = p(3, 0.001, 1);
        // -0.75 is the boundary between 000 and 001; the gap around it splits
        assert_eq!(decode(&[-0.7505], &params).unwrap().to_string(), "000");
        assert_eq!(decode(&[-0.75], &params).unwrap().to_string(), "001");
        assert_eq!(decode(&[-0.7495], &params).unwrap().to_string(), "001");
    }

    #[test]
    fn hex_and_bytes() {
        let b = BitString::from_hex("0xA5").unwrap();
        assert_eq!(b.to_string(), "10100101");
        assert_eq!(b.to_bytes(), vec![0xA5]);
        assert_eq!(BitString::from_bytes(&[0x0f]).to_string(), "00001111");
        assert_eq!(b.to_hex(), "a5");
        assert!(BitString::from_hex("xyz").is_err());
        assert!("0120".parse::<BitString>().is_err());
    }

    #[test]
    fn noise_vector_rejects_closed_endpoints() {
        assert!(NoiseVector::new(vec![0.0, 1.0]).is_err());
        assert!(NoiseVector::new(vec![-1.0]).is_err());
        assert!(NoiseVector::new(vec![f64::NAN]).is_err());
        assert!(NoiseVector::new(vec![0.999_999]).is_ok());
    }

    #[test]
    fn codec_params_serde_validates() {
        let ok: CodecParams = toml::from_str("k = 3\ndelta = 0.01\nlatent_dim = 100").unwrap();
        assert_eq!(ok, p(3, 0.01, 100));
        assert!(toml::from_str::<CodecParams>("k = 3\ndelta = 0.2\nlatent_dim = 100").is_err());
    }
}

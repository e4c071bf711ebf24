//! Finite scalar quantization of low-rank speech latents into token indices.
//!
//! Each of the `D` latent dimensions is squashed with a scaled `tanh` into a
//! bounded interval, rounded (half up) to one of `L` evenly spaced level
//! centers, and the resulting digit vector is read as a radix-`L` number with
//! digit 0 least significant. With the defaults `D = 8`, `L = 3` there are
//! `3^8 = 6561` speech tokens, produced at 25 per second.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Speech tokens per second of audio.
pub const TOKEN_RATE_HZ: u32 = 25;

/// Number of distinct speech tokens under the default configuration.
pub const SPEECH_VOCAB: u32 = 6561;

// The squash bound is widened slightly past the outermost centers so that
// every center has a finite preimage.
const BOUND_SLACK: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FsqError {
    #[error("FSQ needs D >= 1 and L >= 2 (got D = {dims}, L = {levels})")]
    BadConfig { dims: usize, levels: u32 },
    #[error("codebook size L^D overflows")]
    Overflow,
    #[error("expected {expected} dimensions, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("digit {digit} at position {position} is not below L = {levels}")]
    DigitOutOfRange { position: usize, digit: u32, levels: u32 },
    #[error("token index {index} is not below {size}")]
    IndexOutOfRange { index: u32, size: u32 },
    #[error("latent component {0} is not finite")]
    NonFinite(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsqConfig {
    dims: usize,
    levels: u32,
    size: u32,
}

impl FsqConfig {
    pub fn new(dims: usize, levels: u32) -> Result<Self, FsqError> {
        // keeps the widened bound under half a level step
        if dims == 0 || !(2..=256).contains(&levels) {
            return Err(FsqError::BadConfig { dims, levels });
        }
        let size = u32::try_from(dims).ok().and_then(|d| levels.checked_pow(d)).ok_or(FsqError::Overflow)?;
        Ok(Self { dims, levels, size })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    /// `L^D`
    pub fn codebook_size(&self) -> u32 {
        self.size
    }

    fn half_width(&self) -> f64 {
        (self.levels - 1) as f64 / 2.0
    }

    fn squash_bound(&self) -> f64 {
        self.half_width() * (1.0 + BOUND_SLACK)
    }
}

impl Default for FsqConfig {
    /// `D = 8`, `L = 3`.
    fn default() -> Self {
        Self::new(8, 3).expect("default FSQ config is valid")
    }
}

/// Per-dimension level ids, each in `[0, L)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FsqCode(pub Vec<u32>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenIndex(pub u32);

pub fn encode(latent: &[f64], config: &FsqConfig) -> Result<FsqCode, FsqError> {
    if latent.len() != config.dims {
        return Err(FsqError::Dimension { expected: config.dims, got: latent.len() });
    }
    let half = config.half_width();
    let bound = config.squash_bound();
    let max_digit = (config.levels - 1) as f64;
    latent
        .iter()
        .map(|&z| {
            if !z.is_finite() {
                return Err(FsqError::NonFinite(z));
            }
            // shift so level 0 sits at 0, then round half up
            let shifted = bound * z.tanh() + half;
            Ok((shifted + 0.5).floor().clamp(0.0, max_digit) as u32)
        })
        .collect::<Result<Vec<_>, _>>()
        .map(FsqCode)
}

/// A latent whose encoding is exactly `code`: the preimage of each level
/// center under the squash. The middle level of an odd `L` maps to zero.
pub fn dequantize(code: &FsqCode, config: &FsqConfig) -> Result<Vec<f64>, FsqError> {
    check_code(code, config)?;
    let half = config.half_width();
    let bound = config.squash_bound();
    Ok(code.0.iter().map(|&digit| ((digit as f64 - half) / bound).atanh()).collect())
}

fn check_code(code: &FsqCode, config: &FsqConfig) -> Result<(), FsqError> {
    if code.0.len() != config.dims {
        return Err(FsqError::Dimension { expected: config.dims, got: code.0.len() });
    }
    if let Some((position, &digit)) = code.0.iter().enumerate().find(|(_, &d)| d >= config.levels) {
        return Err(FsqError::DigitOutOfRange { position, digit, levels: config.levels });
    }
    Ok(())
}

pub fn code_to_index(code: &FsqCode, config: &FsqConfig) -> Result<TokenIndex, FsqError> {
    check_code(code, config)?;
    let index = code.0.iter().rev().fold(0u32, |acc, &d| acc * config.levels + d);
    Ok(TokenIndex(index))
}

pub fn index_to_code(index: TokenIndex, config: &FsqConfig) -> Result<FsqCode, FsqError> {
    if index.0 >= config.size {
        return Err(FsqError::IndexOutOfRange { index: index.0, size: config.size });
    }
    let mut rest = index.0;
    let digits = (0..config.dims)
        .map(|_| {
            let d = rest % config.levels;
            rest /= config.levels;
            d
        })
        .collect();
    Ok(FsqCode(digits))
}

/// Encodes a sequence of latent frames into a token stream.
pub fn tokenize(latents: &[Vec<f64>], config: &FsqConfig) -> Result<Vec<TokenIndex>, FsqError> {
    latents.iter().map(|z| encode(z, config).and_then(|c| code_to_index(&c, config))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_vocab() {
        let cfg = FsqConfig::default();
        assert_eq!(cfg.codebook_size(), SPEECH_VOCAB);
        assert_eq!((cfg.dims(), cfg.levels()), (8, 3));
    }

    #[test]
    fn bad_configs() {
        assert!(FsqConfig::new(0, 3).is_err());
        assert!(FsqConfig::new(8, 1).is_err());
        assert_eq!(FsqConfig::new(64, 3), Err(FsqError::Overflow));
    }

    #[test]
    fn encode_symmetry_and_saturation() {
        let cfg = FsqConfig::default();
        assert_eq!(encode(&[0.0; 8], &cfg).unwrap().0, vec![1; 8]);
        assert_eq!(encode(&[10.0; 8], &cfg).unwrap().0, vec![2; 8]);
        assert_eq!(encode(&[-10.0; 8], &cfg).unwrap().0, vec![0; 8]);
        assert!(encode(&[0.0; 7], &cfg).is_err());
        assert!(encode(&[f64::NAN; 8], &cfg).is_err());
    }

    #[test]
    fn index_examples() {
        let cfg = FsqConfig::default();
        assert_eq!(code_to_index(&FsqCode(vec![0; 8]), &cfg).unwrap(), TokenIndex(0));
        assert_eq!(code_to_index(&FsqCode(vec![2; 8]), &cfg).unwrap(), TokenIndex(6560));
        assert_eq!(index_to_code(TokenIndex(5), &cfg).unwrap().0, vec![2, 1, 0, 0, 0, 0, 0, 0]);
        assert!(index_to_code(TokenIndex(6561), &cfg).is_err());
        assert!(code_to_index(&FsqCode(vec![3, 0, 0, 0, 0, 0, 0, 0]), &cfg).is_err());
    }

    #[test]
    fn dequantize_centers() {
        let cfg = FsqConfig::default();
        assert_eq!(dequantize(&FsqCode(vec![1; 8]), &cfg).unwrap(), vec![0.0; 8]);
        let hi = dequantize(&FsqCode(vec![2; 8]), &cfg).unwrap();
        let lo = dequantize(&FsqCode(vec![0; 8]), &cfg).unwrap();
        assert!(hi.iter().all(|x| x.is_finite() && *x > 0.0));
        assert!(hi.iter().zip(&lo).all(|(h, l)| (h + l).abs() < 1e-12));
        assert_eq!(encode(&hi, &cfg).unwrap().0, vec![2; 8]);
    }

    #[test]
    fn exhaustive_round_trip() {
        let cfg = FsqConfig::default();
        for i in 0..cfg.codebook_size() {
            let code = index_to_code(TokenIndex(i), &cfg).unwrap();
            assert_eq!(code_to_index(&code, &cfg).unwrap(), TokenIndex(i));
            assert_eq!(encode(&dequantize(&code, &cfg).unwrap(), &cfg).unwrap(), code);
        }
    }

    #[test]
    fn other_level_counts_round_trip() {
        for (d, l) in [(3, 2), (2, 4), (2, 7), (1, 256)] {
            let cfg = FsqConfig::new(d, l).unwrap();
            for i in 0..cfg.codebook_size() {
                let code = index_to_code(TokenIndex(i), &cfg).unwrap();
                assert_eq!(encode(&dequantize(&code, &cfg).unwrap(), &cfg).unwrap(), code, "D={d} L={l}");
            }
        }
    }

    proptest! {
        #[test]
        fn idempotent_and_in_range(latent in proptest::collection::vec(-50.0f64..50.0, 8)) {
            let cfg = FsqConfig::default();
            let code = encode(&latent, &cfg).unwrap();
            prop_assert!(code.0.iter().all(|&d| d < 3));
            let again = encode(&dequantize(&code, &cfg).unwrap(), &cfg).unwrap();
            prop_assert_eq!(again, code);
        }
    }
}

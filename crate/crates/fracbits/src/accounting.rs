//! Storage accounting shared by the bitwidth search and the accelerator cost
//! model. Both sides call the same functions so their byte counts can never
//! drift apart.
//!
//! Per weight tensor ("site"): ceil(weights * bits / 8) bytes of packed codes,
//! plus one full-precision scaler per output channel, plus 32-bit biases.

use serde::{Deserialize, Serialize};

/// Weight of the size term and its byte-accounting knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeLossConfig {
    /// Target storage in bytes.
    pub s_target: f64,
    /// Relative weight of the size loss in the total objective.
    pub beta: f64,
    /// Bytes to store one per-channel scaler (full-precision float).
    pub scaler_bytes_per_channel: u64,
    /// Count 32-bit biases toward the footprint.
    pub include_bias: bool,
}

impl SizeLossConfig {
    pub fn new(s_target: f64, beta: f64) -> Self {
        SizeLossConfig {
            s_target,
            beta,
            scaler_bytes_per_channel: 4,
            include_bias: true,
        }
    }
}

impl Default for SizeLossConfig {
    fn default() -> Self {
        SizeLossConfig::new(0.0, 0.1)
    }
}

/// One weight tensor's contribution to the footprint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeTerm {
    pub weight_count: usize,
    pub channel_count: usize,
    pub bias_count: usize,
}

impl SizeTerm {
    pub fn new(weight_count: usize, channel_count: usize, bias_count: usize) -> Self {
        SizeTerm {
            weight_count,
            channel_count,
            bias_count,
        }
    }

    fn overhead_bytes(&self, cfg: &SizeLossConfig) -> u64 {
        self.scaler_bytes(cfg) + self.bias_bytes(cfg)
    }

    /// Packed weight bytes at an integer bitwidth, rounded up.
    pub fn weight_bytes(&self, bits: u8) -> u64 {
        (self.weight_count as u64 * bits as u64).div_ceil(8)
    }

    pub fn scaler_bytes(&self, cfg: &SizeLossConfig) -> u64 {
        self.channel_count as u64 * cfg.scaler_bytes_per_channel
    }

    pub fn bias_bytes(&self, cfg: &SizeLossConfig) -> u64 {
        if cfg.include_bias {
            self.bias_count as u64 * 4
        } else {
            0
        }
    }

    /// Exact byte count at an integer bitwidth (sub-byte packing rounded up).
    pub fn frozen_bytes(&self, bits: u8, cfg: &SizeLossConfig) -> u64 {
        self.weight_bytes(bits) + self.overhead_bytes(cfg)
    }

    /// Differentiable byte count at a fractional bitwidth: weights * n / 8.
    pub fn fractional_bytes(&self, n_bits: f64, cfg: &SizeLossConfig) -> f64 {
        self.weight_count as f64 * n_bits / 8.0 + self.overhead_bytes(cfg) as f64
    }

    /// Unquantized deployment size: 32-bit weights, no scalers.
    pub fn float_bytes(&self, cfg: &SizeLossConfig) -> u64 {
        let mut b = self.weight_count as u64 * 4;
        if cfg.include_bias {
            b += self.bias_count as u64 * 4;
        }
        b
    }
}

pub fn frozen_footprint_bytes(terms: &[SizeTerm], bits: &[u8], cfg: &SizeLossConfig) -> u64 {
    debug_assert_eq!(terms.len(), bits.len());
    terms
        .iter()
        .zip(bits)
        .map(|(t, &b)| t.frozen_bytes(b, cfg))
        .sum()
}

pub fn fractional_footprint_bytes(terms: &[SizeTerm], n_bits: &[f64], cfg: &SizeLossConfig) -> f64 {
    debug_assert_eq!(terms.len(), n_bits.len());
    terms
        .iter()
        .zip(n_bits)
        .map(|(t, &n)| t.fractional_bytes(n, cfg))
        .sum()
}

pub fn float_footprint_bytes(terms: &[SizeTerm], cfg: &SizeLossConfig) -> u64 {
    terms.iter().map(|t| t.float_bytes(cfg)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_rounds_subbyte_up() {
        let cfg = SizeLossConfig::new(0.0, 0.1);
        let t = SizeTerm::new(9, 2, 0);
        // 9 weights * 3 bits = 27 bits -> 4 bytes, + 2 scalers * 4.
        assert_eq!(t.frozen_bytes(3, &cfg), 4 + 8);
    }

    #[test]
    fn bias_flag() {
        let mut cfg = SizeLossConfig::new(0.0, 0.1);
        let t = SizeTerm::new(8, 1, 3);
        assert_eq!(t.frozen_bytes(8, &cfg), 8 + 4 + 12);
        cfg.include_bias = false;
        assert_eq!(t.frozen_bytes(8, &cfg), 8 + 4);
    }

    #[test]
    fn byte_aligned_frozen_equals_fractional() {
        let cfg = SizeLossConfig::new(0.0, 0.1);
        let t = SizeTerm::new(1000, 8, 0);
        for bits in 2u8..=8 {
            assert_eq!(
                t.frozen_bytes(bits, &cfg) as f64,
                t.fractional_bytes(bits as f64, &cfg)
            );
        }
    }
}

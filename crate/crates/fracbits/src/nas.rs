//! Differentiable bitwidth search primitives: fractional-bitwidth
//! fake-quantization by interpolating the two neighboring integer quantizers,
//! the byte-budget size loss with its subgradient, the combined objective,
//! and the round-and-freeze step that pins bitwidths for fine-tuning.

use serde::{Deserialize, Serialize};

use crate::accounting::{fractional_footprint_bytes, SizeLossConfig, SizeTerm};
use crate::error::{Error, Result};
use crate::quant::{fake_quant, QuantSpec, MAX_WEIGHT_BITS, MIN_WEIGHT_BITS};
use crate::tensor::Tensor;

/// Search state of one layer's bitwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBitwidthState {
    /// Continuous bitwidth, clamped to [2, 8] after every optimizer step.
    pub n_frac: f64,
    /// Set once rounding happens; afterwards `n_frac` is never read again.
    pub n_frozen: Option<u8>,
    /// Accumulated gradient for the current step.
    pub grad_n: f64,
}

impl LayerBitwidthState {
    pub fn new(n_frac: f64) -> Self {
        LayerBitwidthState {
            n_frac: n_frac.clamp(MIN_WEIGHT_BITS as f64, MAX_WEIGHT_BITS as f64),
            n_frozen: None,
            grad_n: 0.0,
        }
    }

    pub fn clamp(&mut self) {
        self.n_frac = self
            .n_frac
            .clamp(MIN_WEIGHT_BITS as f64, MAX_WEIGHT_BITS as f64);
    }

    /// Integer bracket [lo, hi] around the current fractional bitwidth, with
    /// hi = lo + 1 except at the top of the range where both pin to 8 only
    /// when n is exactly integral on entry to interp (handled there).
    pub fn bracket(&self) -> (u8, u8) {
        let lo = (self.n_frac.floor() as u8).clamp(MIN_WEIGHT_BITS, MAX_WEIGHT_BITS - 1);
        (lo, lo + 1)
    }
}

fn check_bracket(n_frac: f64, floor_spec: &QuantSpec, ceil_spec: &QuantSpec) -> Result<()> {
    if !(MIN_WEIGHT_BITS as f64..=MAX_WEIGHT_BITS as f64).contains(&n_frac) {
        return Err(Error::BitwidthRange {
            bits: n_frac.round() as u8,
            min: MIN_WEIGHT_BITS,
            max: MAX_WEIGHT_BITS,
        });
    }
    let lo = floor_spec.bitwidth as f64;
    let hi = ceil_spec.bitwidth as f64;
    let ok = if n_frac.fract() == 0.0 {
        // Integral n: accept either the degenerate (n, n) pair or the
        // enclosing unit bracket used during search.
        (lo == n_frac && hi == n_frac) || (lo <= n_frac && hi >= n_frac && hi - lo == 1.0)
    } else {
        lo == n_frac.floor() && hi == n_frac.ceil()
    };
    if ok {
        Ok(())
    } else {
        Err(Error::BracketMismatch {
            floor_bits: floor_spec.bitwidth,
            ceil_bits: ceil_spec.bitwidth,
            n_frac,
        })
    }
}

/// Fractional fake-quantization: (ceil(n)-n) * f_floor(x) + (n-floor(n)) *
/// f_ceil(x). At an integral n this collapses bit-exactly to the single
/// integer quantizer.
pub fn interp_fake_quant(
    x: &Tensor,
    n_frac: f64,
    floor_spec: &QuantSpec,
    ceil_spec: &QuantSpec,
) -> Result<Tensor> {
    check_bracket(n_frac, floor_spec, ceil_spec)?;
    if n_frac.fract() == 0.0 {
        let spec = if floor_spec.bitwidth as f64 == n_frac {
            floor_spec
        } else {
            ceil_spec
        };
        return Ok(fake_quant(x, spec));
    }
    let w_hi = n_frac - n_frac.floor();
    let w_lo = 1.0 - w_hi;
    let lo = fake_quant(x, floor_spec);
    let hi = fake_quant(x, ceil_spec);
    let mut out = lo;
    for (o, &h) in out.data_mut().iter_mut().zip(hi.data()) {
        *o = w_lo * *o + w_hi * h;
    }
    Ok(out)
}

/// d(interp_fake_quant)/dn contracted with the upstream gradient:
/// sum(upstream * (f_ceil(x) - f_floor(x))). Constant within a bracket.
pub fn bitwidth_grad(
    upstream: &[f64],
    x: &Tensor,
    floor_spec: &QuantSpec,
    ceil_spec: &QuantSpec,
) -> f64 {
    debug_assert_eq!(upstream.len(), x.len());
    let lo = fake_quant(x, floor_spec);
    let hi = fake_quant(x, ceil_spec);
    upstream
        .iter()
        .zip(lo.data().iter().zip(hi.data()))
        .map(|(&u, (&l, &h))| u * (h - l))
        .sum()
}

/// Byte-budget loss: |footprint(n) - S_target| with the footprint linear in
/// every fractional bitwidth.
pub fn size_loss(terms: &[SizeTerm], n_bits: &[f64], cfg: &SizeLossConfig) -> f64 {
    (fractional_footprint_bytes(terms, n_bits, cfg) - cfg.s_target).abs()
}

/// Size loss plus its subgradient for each layer's bitwidth. At the kink
/// (footprint exactly on target) the subgradient is zero.
pub fn size_loss_with_grads(
    terms: &[SizeTerm],
    n_bits: &[f64],
    cfg: &SizeLossConfig,
) -> (f64, Vec<f64>) {
    let deviation = fractional_footprint_bytes(terms, n_bits, cfg) - cfg.s_target;
    let sign = if deviation > 0.0 {
        1.0
    } else if deviation < 0.0 {
        -1.0
    } else {
        0.0
    };
    let grads = terms
        .iter()
        .map(|t| sign * t.weight_count as f64 / 8.0)
        .collect();
    (deviation.abs(), grads)
}

/// Combined objective: accuracy loss plus beta-weighted size loss.
pub fn total_loss(acc_loss: f64, size_loss: f64, beta: f64) -> f64 {
    acc_loss + beta * size_loss
}

/// Round-half-up each fractional bitwidth and clamp to [2, 8]. Marks the
/// states frozen.
pub fn round_and_freeze(states: &mut [LayerBitwidthState]) -> Vec<u8> {
    states
        .iter_mut()
        .map(|st| {
            let b = ((st.n_frac + 0.5).floor() as i64)
                .clamp(MIN_WEIGHT_BITS as i64, MAX_WEIGHT_BITS as i64) as u8;
            st.n_frozen = Some(b);
            b
        })
        .collect()
}

/// Freeze while steering the integer footprint toward the byte target:
/// start from round-half-up, then greedily flip individual layers to the
/// other side of their fraction while that shrinks |footprint - S_target|.
/// Each frozen bitwidth still lands on floor(n) or ceil(n).
pub fn freeze_to_target(
    states: &mut [LayerBitwidthState],
    terms: &[SizeTerm],
    cfg: &SizeLossConfig,
) -> Vec<u8> {
    debug_assert_eq!(states.len(), terms.len());
    let mut bits = round_and_freeze(states);
    loop {
        let current = crate::accounting::frozen_footprint_bytes(terms, &bits, cfg) as f64;
        let residual = (current - cfg.s_target).abs();
        let mut best: Option<(usize, u8, f64)> = None;
        for (i, st) in states.iter().enumerate() {
            let frac = st.n_frac;
            for candidate in [frac.floor() as u8, frac.ceil() as u8] {
                let candidate = candidate.clamp(MIN_WEIGHT_BITS, MAX_WEIGHT_BITS);
                if candidate == bits[i] {
                    continue;
                }
                let mut trial = bits.clone();
                trial[i] = candidate;
                let fp = crate::accounting::frozen_footprint_bytes(terms, &trial, cfg) as f64;
                let r = (fp - cfg.s_target).abs();
                if r < residual && best.map_or(true, |(_, _, br)| r < br) {
                    best = Some((i, candidate, r));
                }
            }
        }
        match best {
            Some((i, b, _)) => bits[i] = b,
            None => break,
        }
    }
    for (st, &b) in states.iter_mut().zip(&bits) {
        st.n_frozen = Some(b);
    }
    bits
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::calibrate_scale;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(seed: u64, len: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[len], (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    fn calibrated(x: &Tensor, bits: u8) -> QuantSpec {
        QuantSpec {
            bitwidth: bits,
            scale: calibrate_scale(x, bits, None).unwrap(),
        }
    }

    #[test]
    fn integral_n_collapses_to_fake_quant() {
        let x = random_tensor(1, 256);
        for bits in MIN_WEIGHT_BITS..=MAX_WEIGHT_BITS {
            let spec = calibrated(&x, bits);
            let out = interp_fake_quant(&x, bits as f64, &spec, &spec).unwrap();
            let want = fake_quant(&x, &spec);
            assert_eq!(out.data(), want.data(), "bits={bits}");
        }
    }

    #[test]
    fn fractional_blend_matches_separate_quantizers() {
        let x = random_tensor(2, 128);
        let f4 = calibrated(&x, 4);
        let f5 = calibrated(&x, 5);
        let out = interp_fake_quant(&x, 4.3, &f4, &f5).unwrap();
        let q4 = fake_quant(&x, &f4);
        let q5 = fake_quant(&x, &f5);
        for ((&o, &a), &b) in out.data().iter().zip(q4.data()).zip(q5.data()) {
            assert!((o - (0.7 * a + 0.3 * b)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_is_fixed_point_for_any_n() {
        let x = Tensor::zeros(&[16]);
        let f3 = QuantSpec::per_tensor(3, 0.2);
        let f4 = QuantSpec::per_tensor(4, 0.11);
        for n in [3.0, 3.25, 3.5, 3.99] {
            let out = interp_fake_quant(&x, n, &f3, &f4).unwrap();
            assert!(out.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn non_bracketing_specs_rejected() {
        let x = random_tensor(3, 8);
        let f3 = calibrated(&x, 3);
        let f5 = calibrated(&x, 5);
        assert!(matches!(
            interp_fake_quant(&x, 4.2, &f3, &f5),
            Err(Error::BracketMismatch { .. })
        ));
    }

    #[test]
    fn bracket_linearity_three_point_collinearity() {
        let x = random_tensor(4, 64);
        let f5 = calibrated(&x, 5);
        let f6 = calibrated(&x, 6);
        let (n1, n2, n3) = (5.1, 5.4, 5.9);
        let y1 = interp_fake_quant(&x, n1, &f5, &f6).unwrap();
        let y2 = interp_fake_quant(&x, n2, &f5, &f6).unwrap();
        let y3 = interp_fake_quant(&x, n3, &f5, &f6).unwrap();
        let t = (n2 - n1) / (n3 - n1);
        for ((&a, &b), &c) in y1.data().iter().zip(y2.data()).zip(y3.data()) {
            assert!((b - (a + t * (c - a))).abs() < 1e-12);
        }
    }

    #[test]
    fn bitwidth_grad_zero_when_grids_agree() {
        // Values already on the coarser grid quantize identically either way.
        let f3 = QuantSpec::per_tensor(3, 1.0);
        let f4 = QuantSpec::per_tensor(4, 1.0);
        let x = Tensor::from_vec(&[5], vec![-3.0, -1.0, 0.0, 2.0, 3.0]).unwrap();
        let g = bitwidth_grad(&[1.0; 5], &x, &f3, &f4);
        assert_eq!(g, 0.0);
    }

    #[test]
    fn bitwidth_grad_matches_central_difference() {
        let x = random_tensor(5, 200);
        let f4 = calibrated(&x, 4);
        let f5 = calibrated(&x, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let upstream: Vec<f64> = (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = 4.37;
        let eps = 1e-4;
        let plus = interp_fake_quant(&x, n + eps, &f4, &f5).unwrap();
        let minus = interp_fake_quant(&x, n - eps, &f4, &f5).unwrap();
        let fd: f64 = upstream
            .iter()
            .zip(plus.data().iter().zip(minus.data()))
            .map(|(&u, (&p, &m))| u * (p - m) / (2.0 * eps))
            .sum();
        let analytic = bitwidth_grad(&upstream, &x, &f4, &f5);
        let rel = (analytic - fd).abs() / fd.abs().max(1e-12);
        assert!(rel < 1e-8, "analytic {analytic} vs fd {fd}");
    }

    #[test]
    fn bitwidth_grad_linear_in_upstream() {
        let x = random_tensor(7, 50);
        let f2 = calibrated(&x, 2);
        let f3 = calibrated(&x, 3);
        let upstream: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let scaled: Vec<f64> = upstream.iter().map(|u| 3.5 * u).collect();
        let g1 = bitwidth_grad(&upstream, &x, &f2, &f3);
        let g2 = bitwidth_grad(&scaled, &x, &f2, &f3);
        assert!((g2 - 3.5 * g1).abs() < 1e-9 * g1.abs().max(1.0));
    }

    #[test]
    fn size_loss_hand_case() {
        // 1000 weights at 4 bits => 500 B, 8 channels * 4 B = 32 B; target 1000.
        let terms = [SizeTerm::new(1000, 8, 0)];
        let cfg = SizeLossConfig::new(1000.0, 0.1);
        assert_eq!(size_loss(&terms, &[4.0], &cfg), 468.0);
    }

    #[test]
    fn size_loss_zero_at_target() {
        let terms = [SizeTerm::new(800, 4, 0)];
        let cfg = SizeLossConfig::new(800.0 * 6.0 / 8.0 + 16.0, 0.1);
        assert_eq!(size_loss(&terms, &[6.0], &cfg), 0.0);
        let (_, grads) = size_loss_with_grads(&terms, &[6.0], &cfg);
        assert_eq!(grads, vec![0.0]);
    }

    #[test]
    fn size_loss_grad_matches_finite_difference() {
        let terms = [SizeTerm::new(500, 4, 4), SizeTerm::new(1200, 16, 0)];
        let cfg = SizeLossConfig::new(900.0, 0.1);
        let n = [5.3, 4.1];
        let (_, grads) = size_loss_with_grads(&terms, &n, &cfg);
        let eps = 1e-6;
        for i in 0..2 {
            let mut hi = n;
            hi[i] += eps;
            let mut lo = n;
            lo[i] -= eps;
            let fd = (size_loss(&terms, &hi, &cfg) - size_loss(&terms, &lo, &cfg)) / (2.0 * eps);
            assert!((grads[i] - fd).abs() < 1e-4, "layer {i}: {} vs {fd}", grads[i]);
        }
    }

    #[test]
    fn total_loss_cases() {
        assert_eq!(total_loss(1.0, 250.0, 0.0), 1.0);
        assert_eq!(total_loss(1.0, 250.0, 0.1), 26.0);
        assert_eq!(total_loss(0.42, 0.0, 0.1), 0.42);
    }

    #[test]
    fn round_and_freeze_rule() {
        let mut states = vec![
            LayerBitwidthState::new(4.3),
            LayerBitwidthState::new(4.5),
            LayerBitwidthState::new(8.0),
        ];
        let bits = round_and_freeze(&mut states);
        assert_eq!(bits, vec![4, 5, 8]);
        assert!(states.iter().all(|s| s.n_frozen.is_some()));
    }

    #[test]
    fn rounding_changes_footprint_by_at_most_half_bit_per_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let terms: Vec<SizeTerm> = (0..6)
            .map(|_| SizeTerm::new(rng.gen_range(50..3000), rng.gen_range(4..32), 0))
            .collect();
        let cfg = SizeLossConfig::new(0.0, 0.1);
        let mut states: Vec<LayerBitwidthState> = (0..6)
            .map(|_| LayerBitwidthState::new(rng.gen_range(2.0..8.0)))
            .collect();
        let frac: Vec<f64> = states.iter().map(|s| s.n_frac).collect();
        let before = fractional_footprint_bytes(&terms, &frac, &cfg);
        let bits = round_and_freeze(&mut states);
        let after = crate::accounting::frozen_footprint_bytes(&terms, &bits, &cfg) as f64;
        let bound: f64 = terms.iter().map(|t| t.weight_count as f64 / 16.0).sum::<f64>()
            + terms.len() as f64; // ceil() adds at most one byte per layer
        assert!((after - before).abs() <= bound);
    }

    #[test]
    fn freeze_to_target_reduces_residual() {
        let terms = [
            SizeTerm::new(72, 8, 0),
            SizeTerm::new(1728, 24, 0),
            SizeTerm::new(288, 12, 12),
            SizeTerm::new(120, 10, 10),
        ];
        let cfg = SizeLossConfig::new(900.0, 0.1);
        let fracs = [7.4, 3.6, 4.4, 6.5];
        let mut blind: Vec<LayerBitwidthState> =
            fracs.iter().map(|&n| LayerBitwidthState::new(n)).collect();
        let mut steered = blind.clone();
        let blind_bits = round_and_freeze(&mut blind);
        let steered_bits = freeze_to_target(&mut steered, &terms, &cfg);
        let r_blind = (crate::accounting::frozen_footprint_bytes(&terms, &blind_bits, &cfg) as f64
            - cfg.s_target)
            .abs();
        let r_steered =
            (crate::accounting::frozen_footprint_bytes(&terms, &steered_bits, &cfg) as f64
                - cfg.s_target)
                .abs();
        assert!(r_steered <= r_blind);
        // Every steered bitwidth stays on the floor or ceiling of its fraction.
        for (&b, &n) in steered_bits.iter().zip(&fracs) {
            assert!(b as f64 == n.floor() || b as f64 == n.ceil());
        }
    }
}

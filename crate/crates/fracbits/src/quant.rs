//! Symmetric integer fake-quantization with straight-through gradients.
//!
//! Weights use per-output-channel scales, activations a single per-tensor
//! scale. The grid is signed symmetric with the most negative code excluded:
//! codes live in [-(2^(n-1)-1), 2^(n-1)-1]. Rounding is half-away-from-zero
//! everywhere so codes are reproducible bit-for-bit across platforms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{IntTensor, Tensor};

pub const MIN_WEIGHT_BITS: u8 = 2;
pub const MAX_WEIGHT_BITS: u8 = 8;
pub const ACTIVATION_BITS: u8 = 8;

/// Largest code magnitude on an n-bit symmetric grid: 2^(n-1) - 1.
pub fn qmax(bits: u8) -> i32 {
    (1i32 << (bits - 1)) - 1
}

/// Rounding rule used for every quantization in the crate. `f64::round`
/// is round-half-away-from-zero, which is exactly the rule we want.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Scale layout: one scale for the whole tensor, or one per slice along an axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ScaleLayout {
    PerTensor(f64),
    PerChannel { axis: usize, scales: Vec<f64> },
}

impl ScaleLayout {
    pub fn scales(&self) -> &[f64] {
        match self {
            ScaleLayout::PerTensor(s) => std::slice::from_ref(s),
            ScaleLayout::PerChannel { scales, .. } => scales,
        }
    }
}

/// A concrete quantizer: bitwidth plus calibrated scale(s).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bitwidth: u8,
    pub scale: ScaleLayout,
}

impl QuantSpec {
    pub fn per_tensor(bitwidth: u8, scale: f64) -> Self {
        QuantSpec {
            bitwidth,
            scale: ScaleLayout::PerTensor(scale),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bitwidth < MIN_WEIGHT_BITS || self.bitwidth > MAX_WEIGHT_BITS {
            return Err(Error::BitwidthRange {
                bits: self.bitwidth,
                min: MIN_WEIGHT_BITS,
                max: MAX_WEIGHT_BITS,
            });
        }
        for &s in self.scale.scales() {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::InvalidConfig {
                    field: "QuantSpec.scale".into(),
                    detail: format!("scale must be positive and finite, got {s}"),
                });
            }
        }
        Ok(())
    }

    /// Scale applied to the flat element at `index` of a tensor with `shape`.
    #[inline]
    pub fn scale_at(&self, shape: &[usize], index: usize) -> f64 {
        match &self.scale {
            ScaleLayout::PerTensor(s) => *s,
            ScaleLayout::PerChannel { axis, scales } => {
                let stride: usize = shape[axis + 1..].iter().product();
                scales[(index / stride) % shape[*axis]]
            }
        }
    }
}

/// Max-abs calibration: scale = max|x| / (2^(n-1)-1) per slice, or 1 for an
/// all-zero slice so its codes collapse to 0.
pub fn calibrate_scale(
    values: &Tensor,
    bitwidth: u8,
    per_channel_axis: Option<usize>,
) -> Result<ScaleLayout> {
    if values.is_empty() {
        return Err(Error::EmptyTensor {
            op: "calibrate_scale",
        });
    }
    if bitwidth < MIN_WEIGHT_BITS || bitwidth > MAX_WEIGHT_BITS {
        return Err(Error::BitwidthRange {
            bits: bitwidth,
            min: MIN_WEIGHT_BITS,
            max: MAX_WEIGHT_BITS,
        });
    }
    let q = qmax(bitwidth) as f64;
    match per_channel_axis {
        None => {
            let m = values.max_abs();
            Ok(ScaleLayout::PerTensor(if m > 0.0 { m / q } else { 1.0 }))
        }
        Some(axis) => {
            let shape = values.shape();
            if axis >= shape.len() {
                return Err(Error::ShapeMismatch {
                    op: "calibrate_scale",
                    axis: "channel",
                    detail: format!("axis {axis} out of bounds for shape {shape:?}"),
                });
            }
            let stride: usize = shape[axis + 1..].iter().product();
            let channels = shape[axis];
            let mut maxes = vec![0.0f64; channels];
            for (i, &x) in values.data().iter().enumerate() {
                let c = (i / stride) % channels;
                maxes[c] = maxes[c].max(x.abs());
            }
            let scales = maxes
                .into_iter()
                .map(|m| if m > 0.0 { m / q } else { 1.0 })
                .collect();
            Ok(ScaleLayout::PerChannel { axis, scales })
        }
    }
}

#[inline]
fn code_of(x: f64, scale: f64, q: i32) -> i32 {
    let r = round_half_away(x / scale);
    (r.max(-(q as f64)).min(q as f64)) as i32
}

/// Quantize-dequantize: scale * clamp(round(x/scale), -qmax, qmax).
/// Output values sit exactly on the n-bit grid.
pub fn fake_quant(x: &Tensor, spec: &QuantSpec) -> Tensor {
    let q = qmax(spec.bitwidth);
    let shape = x.shape();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let s = spec.scale_at(shape, i);
        *v = code_of(*v, s, q) as f64 * s;
    }
    out.clear_grad();
    out
}

/// Integer codes only (no dequantization). `fake_quant(x) == codes * scale`
/// holds exactly because both take the same rounding path.
pub fn quantize_to_codes(x: &Tensor, spec: &QuantSpec) -> IntTensor {
    let q = qmax(spec.bitwidth);
    let shape = x.shape();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| code_of(v, spec.scale_at(shape, i), q))
        .collect();
    IntTensor::from_vec(shape, data).expect("same shape as input")
}

/// Map codes back to real values: code * scale.
pub fn dequantize(codes: &IntTensor, spec: &QuantSpec) -> Tensor {
    let shape = codes.shape();
    let data = codes
        .data()
        .iter()
        .enumerate()
        .map(|(i, &c)| c as f64 * spec.scale_at(shape, i))
        .collect();
    Tensor::from_vec(shape, data).expect("same shape as input")
}

/// Clipped straight-through estimator: the upstream gradient passes through
/// wherever rounding did not clamp, and is zeroed where it did.
pub fn ste_grad(upstream: &[f64], x: &Tensor, spec: &QuantSpec) -> Vec<f64> {
    debug_assert_eq!(upstream.len(), x.len());
    let q = qmax(spec.bitwidth) as f64;
    let shape = x.shape();
    x.data()
        .iter()
        .enumerate()
        .zip(upstream)
        .map(|((i, &v), &u)| {
            let s = spec.scale_at(shape, i);
            if round_half_away(v / s).abs() <= q {
                u
            } else {
                0.0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn calibrate_max_abs_one_three_bits() {
        // max|x| = 1, n = 3 -> qmax = 3 -> scale = 1/3
        let t = Tensor::from_vec(&[4], vec![-1.0, 0.25, 0.5, 0.75]).unwrap();
        let layout = calibrate_scale(&t, 3, None).unwrap();
        assert_eq!(layout, ScaleLayout::PerTensor(1.0 / 3.0));
    }

    #[test]
    fn calibrate_all_zero_channel_scale_one() {
        let t = Tensor::from_vec(&[2, 3], vec![0.0, 0.0, 0.0, 1.0, -2.0, 0.5]).unwrap();
        let layout = calibrate_scale(&t, 4, Some(0)).unwrap();
        match &layout {
            ScaleLayout::PerChannel { scales, .. } => {
                assert_eq!(scales[0], 1.0);
                assert_eq!(scales[1], 2.0 / 7.0);
            }
            _ => panic!("expected per-channel"),
        }
        let spec = QuantSpec {
            bitwidth: 4,
            scale: layout,
        };
        let codes = quantize_to_codes(&t, &spec);
        assert_eq!(&codes.data()[..3], &[0, 0, 0]);
    }

    #[test]
    fn calibrate_per_channel_hits_full_range() {
        // Every nonzero slice must contain a code of magnitude exactly qmax.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for bits in MIN_WEIGHT_BITS..=MAX_WEIGHT_BITS {
            let data: Vec<f64> = (0..60).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let t = Tensor::from_vec(&[5, 4, 3], data).unwrap();
            let spec = QuantSpec {
                bitwidth: bits,
                scale: calibrate_scale(&t, bits, Some(0)).unwrap(),
            };
            let codes = quantize_to_codes(&t, &spec);
            for c in 0..5 {
                let max_code = codes.data()[c * 12..(c + 1) * 12]
                    .iter()
                    .map(|v| v.abs())
                    .max()
                    .unwrap();
                assert!(max_code == qmax(bits) || max_code == 0);
            }
        }
    }

    #[test]
    fn calibrate_empty_errors() {
        let t = Tensor::zeros(&[0]);
        assert!(matches!(
            calibrate_scale(&t, 4, None),
            Err(Error::EmptyTensor { .. })
        ));
    }

    #[test]
    fn fake_quant_zero_fixed_point() {
        for bits in MIN_WEIGHT_BITS..=MAX_WEIGHT_BITS {
            for &scale in &[0.01, 1.0, 7.3] {
                let spec = QuantSpec::per_tensor(bits, scale);
                let out = fake_quant(&Tensor::zeros(&[3]), &spec);
                assert!(out.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn two_bit_codomain() {
        let spec = QuantSpec::per_tensor(2, 1.0);
        let xs = Tensor::from_vec(&[7], vec![-9.0, -1.2, -0.4, 0.0, 0.5, 1.4, 20.0]).unwrap();
        let out = fake_quant(&xs, &spec);
        for &v in out.data() {
            assert!(v == -1.0 || v == 0.0 || v == 1.0, "got {v}");
        }
    }

    #[test]
    fn quantization_error_bound() {
        // |fq(x) - x| <= scale/2 whenever |x| <= scale*(qmax + 1/2).
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let bits = rng.gen_range(MIN_WEIGHT_BITS..=MAX_WEIGHT_BITS);
            let scale = 10f64.powf(rng.gen_range(-3.0..1.0));
            let spec = QuantSpec::per_tensor(bits, scale);
            let x = rng.gen_range(-2.0..2.0);
            let t = Tensor::from_vec(&[1], vec![x]).unwrap();
            let y = fake_quant(&t, &spec).data()[0];
            if x.abs() <= scale * (qmax(bits) as f64 + 0.5) {
                assert!(
                    (y - x).abs() <= scale / 2.0 + 1e-15,
                    "bits={bits} scale={scale} x={x} y={y}"
                );
            }
        }
    }

    #[test]
    fn ste_passthrough_and_clip() {
        let spec = QuantSpec::per_tensor(3, 0.5); // range +-1.5
        let x = Tensor::from_vec(&[3], vec![0.4, -1.2, 50.0]).unwrap();
        let g = ste_grad(&[1.0, 2.0, 3.0], &x, &spec);
        assert_eq!(g, vec![1.0, 2.0, 0.0]);
    }

    #[test]
    fn codes_times_scale_is_fake_quant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..128).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let t = Tensor::from_vec(&[8, 16], data).unwrap();
        for bits in MIN_WEIGHT_BITS..=MAX_WEIGHT_BITS {
            let spec = QuantSpec {
                bitwidth: bits,
                scale: calibrate_scale(&t, bits, Some(0)).unwrap(),
            };
            let fq = fake_quant(&t, &spec);
            let codes = quantize_to_codes(&t, &spec);
            let deq = dequantize(&codes, &spec);
            assert_eq!(fq.data(), deq.data(), "bits={bits}");
        }
    }

    #[test]
    fn codes_on_grid_roundtrip() {
        let spec = QuantSpec::per_tensor(5, 0.25);
        let t = Tensor::from_vec(&[5], vec![-15.0 * 0.25, -0.25, 0.0, 0.5, 15.0 * 0.25]).unwrap();
        let codes = quantize_to_codes(&t, &spec);
        assert_eq!(codes.data(), &[-15, -1, 0, 2, 15]);
        let recoded = quantize_to_codes(&dequantize(&codes, &spec), &spec);
        assert_eq!(recoded.data(), codes.data());
    }
}

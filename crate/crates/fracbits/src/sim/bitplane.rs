//! Bit-plane storage of sub-byte integer weights.
//!
//! Signed codes are offset into unsigned space (code + 2^(n-1)) before the
//! planes are cut, so every plane contributes a non-negative partial sum and
//! the accumulator subtracts the weighted offset exactly once. Round-trips
//! are exact for every code in the symmetric n-bit range.

use crate::error::{Error, Result};
use crate::quant::qmax;
use crate::tensor::IntTensor;

/// One bit per weight, packed into 64-bit words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitPlane {
    words: Vec<u64>,
    len: usize,
}

impl BitPlane {
    pub fn zeros(len: usize) -> Self {
        BitPlane {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize) {
        debug_assert!(i < self.len);
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }
}

/// Weights of one layer decomposed into `bits` planes.
#[derive(Debug, Clone, PartialEq)]
pub struct BitPlanePackedWeights {
    pub bits: u8,
    pub shape: [usize; 4], // [O, C, kH, kW]
    pub scales: Vec<f64>,  // per output channel
    planes: Vec<BitPlane>,
}

impl BitPlanePackedWeights {
    pub fn plane(&self, b: usize) -> &BitPlane {
        &self.planes[b]
    }

    pub fn weight_count(&self) -> usize {
        self.shape.iter().product()
    }

    /// Exact storage used by the packed representation.
    pub fn storage_bits(&self) -> u64 {
        self.bits as u64 * self.weight_count() as u64
    }

    /// Offset added to each signed code before plane extraction: 2^(n-1).
    pub fn offset(&self) -> i32 {
        1 << (self.bits - 1)
    }

    /// Reconstruct the signed codes: sum_b 2^b * plane_b - offset.
    pub fn unpack(&self) -> IntTensor {
        let n = self.weight_count();
        let mut data = vec![-self.offset(); n];
        for (b, plane) in self.planes.iter().enumerate() {
            let w = 1i32 << b;
            for (i, v) in data.iter_mut().enumerate() {
                if plane.get(i) {
                    *v += w;
                }
            }
        }
        IntTensor::from_vec(&self.shape, data).expect("shape matches count")
    }
}

/// Decompose signed codes into bit planes. Codes must fit the symmetric
/// n-bit range; dense weights are packed as [G, F, 1, 1].
pub fn pack_bitplanes(
    codes: &IntTensor,
    bits: u8,
    scales: Vec<f64>,
    context: &str,
) -> Result<BitPlanePackedWeights> {
    if codes.shape().len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "pack_bitplanes",
            axis: "rank",
            detail: format!("expected [O,C,kH,kW], got {:?}", codes.shape()),
        });
    }
    let q = qmax(bits);
    let offset = 1i32 << (bits - 1);
    let n = codes.len();
    let mut planes: Vec<BitPlane> = (0..bits as usize).map(|_| BitPlane::zeros(n)).collect();
    for (i, &code) in codes.data().iter().enumerate() {
        if code < -q || code > q {
            return Err(Error::CodeOutOfRange {
                code,
                bits,
                context: context.to_string(),
            });
        }
        let ocode = (code + offset) as u32;
        for (b, plane) in planes.iter_mut().enumerate() {
            if (ocode >> b) & 1 == 1 {
                plane.set(i);
            }
        }
    }
    let shape = [
        codes.shape()[0],
        codes.shape()[1],
        codes.shape()[2],
        codes.shape()[3],
    ];
    Ok(BitPlanePackedWeights {
        bits,
        shape,
        scales,
        planes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_codes_set_only_the_offset_plane() {
        // offset(0) = 2^(n-1): exactly the top plane is all ones.
        for bits in 2u8..=8 {
            let codes = IntTensor::zeros(&[2, 1, 3, 3]);
            let packed = pack_bitplanes(&codes, bits, vec![1.0, 1.0], "t").unwrap();
            for b in 0..bits as usize {
                let ones = packed.plane(b).count_ones();
                if b == bits as usize - 1 {
                    assert_eq!(ones, 18, "bits={bits} plane {b}");
                } else {
                    assert_eq!(ones, 0, "bits={bits} plane {b}");
                }
            }
            assert!(packed.unpack().data().iter().all(|&c| c == 0));
        }
    }

    #[test]
    fn minus_three_at_three_bits() {
        // code -3, offset 4 -> 1 -> planes LSB..MSB = [1, 0, 0].
        let codes = IntTensor::from_vec(&[1, 1, 1, 1], vec![-3]).unwrap();
        let packed = pack_bitplanes(&codes, 3, vec![1.0], "t").unwrap();
        assert!(packed.plane(0).get(0));
        assert!(!packed.plane(1).get(0));
        assert!(!packed.plane(2).get(0));
        assert_eq!(packed.unpack().data(), &[-3]);
    }

    #[test]
    fn random_roundtrip_all_bitwidths() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut checked = 0usize;
        while checked < 100_000 {
            let bits = rng.gen_range(2u8..=8);
            let q = qmax(bits);
            let o = rng.gen_range(1..5);
            let c = rng.gen_range(1..5);
            let n = o * c * 9;
            let data: Vec<i32> = (0..n).map(|_| rng.gen_range(-q..=q)).collect();
            let codes = IntTensor::from_vec(&[o, c, 3, 3], data).unwrap();
            let packed = pack_bitplanes(&codes, bits, vec![1.0; o], "t").unwrap();
            assert_eq!(packed.unpack().data(), codes.data());
            assert_eq!(packed.storage_bits(), bits as u64 * n as u64);
            checked += n;
        }
    }

    #[test]
    fn out_of_range_code_rejected() {
        let codes = IntTensor::from_vec(&[1, 1, 1, 1], vec![4]).unwrap();
        let err = pack_bitplanes(&codes, 3, vec![1.0], "conv9").unwrap_err();
        assert!(matches!(err, Error::CodeOutOfRange { code: 4, bits: 3, .. }));
        assert!(err.to_string().contains("conv9"));
    }
}

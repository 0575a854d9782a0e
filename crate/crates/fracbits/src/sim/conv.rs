//! Exact integer convolution, two ways: a direct nested-loop reference and
//! the bit-serial formulation that processes one weight plane per pass. The
//! two must agree bit-for-bit; any divergence is a functional bug.

use crate::error::{Error, Result};
use crate::ops::conv::{conv2d_out_shape, ConvParams};
use crate::quant::qmax;
use crate::tensor::IntTensor;

use super::bitplane::BitPlanePackedWeights;

fn check_activations(acts: &IntTensor, activation_bits: u8, layer: &str) -> Result<()> {
    let q = qmax(activation_bits);
    for &a in acts.data() {
        if a < -q || a > q {
            return Err(Error::CodeOutOfRange {
                code: a,
                bits: activation_bits,
                context: format!("{layer} activations"),
            });
        }
    }
    Ok(())
}

fn finish(acc: Vec<i64>, shape: &[usize], layer: &str) -> Result<IntTensor> {
    let mut out = Vec::with_capacity(acc.len());
    for (i, v) in acc.into_iter().enumerate() {
        let narrowed = i32::try_from(v).map_err(|_| Error::AccumulatorOverflow {
            layer: layer.to_string(),
            index: i,
        })?;
        out.push(narrowed);
    }
    IntTensor::from_vec(shape, out)
}

/// Reference integer convolution over signed codes, 32-bit accumulators
/// (checked).
pub fn direct_int_conv(
    weights: &IntTensor,
    acts: &IntTensor,
    params: ConvParams,
    activation_bits: u8,
    layer: &str,
) -> Result<IntTensor> {
    check_activations(acts, activation_bits, layer)?;
    let out_shape = conv2d_out_shape(acts.shape(), weights.shape(), params)?;
    let [nb, co, ho, wo] = out_shape;
    let (ci, kh, kw) = (weights.shape()[1], weights.shape()[2], weights.shape()[3]);
    let (hi, wi) = (acts.shape()[2], acts.shape()[3]);
    let mut acc = vec![0i64; nb * co * ho * wo];
    for n in 0..nb {
        for o in 0..co {
            for c in 0..ci {
                let w_base = (o * ci + c) * kh * kw;
                for i in 0..kh {
                    for oh in 0..ho {
                        let ih = (oh * params.stride + i * params.dilation) as isize
                            - params.padding as isize;
                        if ih < 0 || ih as usize >= hi {
                            continue;
                        }
                        let x_row = ((n * ci + c) * hi + ih as usize) * wi;
                        let y_row = ((n * co + o) * ho + oh) * wo;
                        for j in 0..kw {
                            let wv = weights.data()[w_base + i * kw + j] as i64;
                            if wv == 0 {
                                continue;
                            }
                            for ow in 0..wo {
                                let iw = (ow * params.stride + j * params.dilation) as isize
                                    - params.padding as isize;
                                if iw < 0 || iw as usize >= wi {
                                    continue;
                                }
                                acc[y_row + ow] += wv * acts.data()[x_row + iw as usize] as i64;
                            }
                        }
                    }
                }
            }
        }
    }
    finish(acc, &out_shape, layer)
}

/// Bit-serial convolution: accumulate one weight plane per pass, weighting
/// plane b by 2^b, then subtract the offset correction (2^(n-1) times the
/// plain window sum of the activations) once per output.
pub fn bit_serial_conv(
    packed: &BitPlanePackedWeights,
    acts: &IntTensor,
    params: ConvParams,
    activation_bits: u8,
    layer: &str,
) -> Result<IntTensor> {
    check_activations(acts, activation_bits, layer)?;
    let w_shape = [
        packed.shape[0],
        packed.shape[1],
        packed.shape[2],
        packed.shape[3],
    ];
    let out_shape = conv2d_out_shape(acts.shape(), &w_shape, params)?;
    let [nb, co, ho, wo] = out_shape;
    let (ci, kh, kw) = (w_shape[1], w_shape[2], w_shape[3]);
    let (hi, wi) = (acts.shape()[2], acts.shape()[3]);

    // Window sums: the all-ones kernel applied once per output position;
    // identical for every output channel.
    let mut window = vec![0i64; nb * ho * wo];
    for n in 0..nb {
        for c in 0..ci {
            for i in 0..kh {
                for oh in 0..ho {
                    let ih = (oh * params.stride + i * params.dilation) as isize
                        - params.padding as isize;
                    if ih < 0 || ih as usize >= hi {
                        continue;
                    }
                    let x_row = ((n * ci + c) * hi + ih as usize) * wi;
                    let y_row = (n * ho + oh) * wo;
                    for j in 0..kw {
                        for ow in 0..wo {
                            let iw = (ow * params.stride + j * params.dilation) as isize
                                - params.padding as isize;
                            if iw < 0 || iw as usize >= wi {
                                continue;
                            }
                            window[y_row + ow] += acts.data()[x_row + iw as usize] as i64;
                        }
                    }
                }
            }
        }
    }

    let mut acc = vec![0i64; nb * co * ho * wo];
    for (b, _) in (0..packed.bits).enumerate() {
        let plane = packed.plane(b);
        let weight = 1i64 << b;
        for n in 0..nb {
            for o in 0..co {
                for c in 0..ci {
                    let w_base = (o * ci + c) * kh * kw;
                    for i in 0..kh {
                        for oh in 0..ho {
                            let ih = (oh * params.stride + i * params.dilation) as isize
                                - params.padding as isize;
                            if ih < 0 || ih as usize >= hi {
                                continue;
                            }
                            let x_row = ((n * ci + c) * hi + ih as usize) * wi;
                            let y_row = ((n * co + o) * ho + oh) * wo;
                            for j in 0..kw {
                                if !plane.get(w_base + i * kw + j) {
                                    continue;
                                }
                                for ow in 0..wo {
                                    let iw = (ow * params.stride + j * params.dilation) as isize
                                        - params.padding as isize;
                                    if iw < 0 || iw as usize >= wi {
                                        continue;
                                    }
                                    acc[y_row + ow] +=
                                        weight * acts.data()[x_row + iw as usize] as i64;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let offset = packed.offset() as i64;
    for n in 0..nb {
        for o in 0..co {
            for p in 0..ho * wo {
                acc[(n * co + o) * ho * wo + p] -= offset * window[n * ho * wo + p];
            }
        }
    }
    finish(acc, &out_shape, layer)
}

/// Integer matrix product of activation codes [N,F] with dense weight codes
/// [F,G]; the dense layer seen as a 1x1 convolution.
pub fn direct_int_matmul(
    acts: &IntTensor,
    weights: &IntTensor,
    activation_bits: u8,
    layer: &str,
) -> Result<IntTensor> {
    check_activations(acts, activation_bits, layer)?;
    if acts.shape().len() != 2 || weights.shape().len() != 2 || acts.shape()[1] != weights.shape()[0]
    {
        return Err(Error::ShapeMismatch {
            op: "direct_int_matmul",
            axis: "features",
            detail: format!("{:?} x {:?}", acts.shape(), weights.shape()),
        });
    }
    let (n, f, g) = (acts.shape()[0], weights.shape()[0], weights.shape()[1]);
    let mut acc = vec![0i64; n * g];
    for row in 0..n {
        for k in 0..f {
            let a = acts.data()[row * f + k] as i64;
            if a == 0 {
                continue;
            }
            for col in 0..g {
                acc[row * g + col] += a * weights.data()[k * g + col] as i64;
            }
        }
    }
    finish(acc, &[n, g], layer)
}

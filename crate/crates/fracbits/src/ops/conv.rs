//! 2-D cross-correlation with stride, dilation and zero padding.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvParams {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn unit() -> Self {
        ConvParams {
            stride: 1,
            dilation: 1,
            padding: 1,
        }
    }

    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

pub fn conv2d_out_shape(
    input: &[usize],
    weight: &[usize],
    params: ConvParams,
) -> Result<[usize; 4]> {
    if input.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            axis: "input rank",
            detail: format!("expected [N,C,H,W], got {input:?}"),
        });
    }
    if weight.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            axis: "weight rank",
            detail: format!("expected [O,C,kH,kW], got {weight:?}"),
        });
    }
    let (kh, kw) = (weight[2], weight[3]);
    if kh != kw || !(kh == 1 || kh == 3) {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            axis: "kernel",
            detail: format!("only square 1x1 or 3x3 kernels are supported, got {kh}x{kw}"),
        });
    }
    if params.dilation < 1 || params.stride < 1 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            axis: "params",
            detail: format!("stride and dilation must be >= 1, got {params:?}"),
        });
    }
    if input[1] != weight[1] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            axis: "input channels",
            detail: format!("input has {} channels, weight expects {}", input[1], weight[1]),
        });
    }
    let h_out = params.out_extent(input[2], kh).ok_or(Error::ShapeMismatch {
        op: "conv2d",
        axis: "height",
        detail: format!("input height {} too small for kernel {kh} with {params:?}", input[2]),
    })?;
    let w_out = params.out_extent(input[3], kw).ok_or(Error::ShapeMismatch {
        op: "conv2d",
        axis: "width",
        detail: format!("input width {} too small for kernel {kw} with {params:?}", input[3]),
    })?;
    Ok([input[0], weight[0], h_out, w_out])
}

/// Forward cross-correlation: out[n,o,y,x] = sum_{c,i,j} w[o,c,i,j] *
/// in[n, c, y*s - p + i*d, x*s - p + j*d], out-of-range taps read zero.
pub fn conv2d(input: &Tensor, weight: &Tensor, params: ConvParams) -> Result<Tensor> {
    let out_shape = conv2d_out_shape(input.shape(), weight.shape(), params)?;
    let [n_batch, c_out, h_out, w_out] = out_shape;
    let (c_in, kh, kw) = (weight.shape()[1], weight.shape()[2], weight.shape()[3]);
    let (h_in, w_in) = (input.shape()[2], input.shape()[3]);
    let mut out = Tensor::zeros(&out_shape);

    let x = input.data();
    let w = weight.data();
    let y = out.data_mut();
    let (s, d, p) = (params.stride, params.dilation, params.padding);

    for n in 0..n_batch {
        for o in 0..c_out {
            for c in 0..c_in {
                let w_base = ((o * c_in) + c) * kh * kw;
                for i in 0..kh {
                    for oh in 0..h_out {
                        let ih = (oh * s + i * d) as isize - p as isize;
                        if ih < 0 || ih as usize >= h_in {
                            continue;
                        }
                        let x_row = ((n * c_in + c) * h_in + ih as usize) * w_in;
                        let y_row = ((n * c_out + o) * h_out + oh) * w_out;
                        for j in 0..kw {
                            let wv = w[w_base + i * kw + j];
                            if wv == 0.0 {
                                continue;
                            }
                            for ow in 0..w_out {
                                let iw = (ow * s + j * d) as isize - p as isize;
                                if iw < 0 || iw as usize >= w_in {
                                    continue;
                                }
                                y[y_row + ow] += wv * x[x_row + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass: returns (grad_input, grad_weight).
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    params: ConvParams,
    grad_out: &[f64],
) -> Result<(Tensor, Tensor)> {
    let out_shape = conv2d_out_shape(input.shape(), weight.shape(), params)?;
    let [n_batch, c_out, h_out, w_out] = out_shape;
    let (c_in, kh, kw) = (weight.shape()[1], weight.shape()[2], weight.shape()[3]);
    let (h_in, w_in) = (input.shape()[2], input.shape()[3]);
    let mut gx = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weight.shape());

    let x = input.data();
    let w = weight.data();
    let gxd = gx.data_mut();
    let gwd = gw.data_mut();
    let (s, d, p) = (params.stride, params.dilation, params.padding);

    for n in 0..n_batch {
        for o in 0..c_out {
            for c in 0..c_in {
                let w_base = ((o * c_in) + c) * kh * kw;
                for i in 0..kh {
                    for oh in 0..h_out {
                        let ih = (oh * s + i * d) as isize - p as isize;
                        if ih < 0 || ih as usize >= h_in {
                            continue;
                        }
                        let x_row = ((n * c_in + c) * h_in + ih as usize) * w_in;
                        let g_row = ((n * c_out + o) * h_out + oh) * w_out;
                        for j in 0..kw {
                            let wv = w[w_base + i * kw + j];
                            let mut wacc = 0.0;
                            for ow in 0..w_out {
                                let iw = (ow * s + j * d) as isize - p as isize;
                                if iw < 0 || iw as usize >= w_in {
                                    continue;
                                }
                                let g = grad_out[g_row + ow];
                                gxd[x_row + iw as usize] += wv * g;
                                wacc += x[x_row + iw as usize] * g;
                            }
                            gwd[w_base + i * kw + j] += wacc;
                        }
                    }
                }
            }
        }
    }
    Ok((gx, gw))
}

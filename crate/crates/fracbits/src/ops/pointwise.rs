//! Elementwise activations and mean-pooling reshapes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Subgradient at 0 is 0.
pub fn relu_backward(x: &Tensor, grad_out: &[f64]) -> Tensor {
    let mut gx = Tensor::zeros(x.shape());
    for ((g, &xv), &u) in gx.data_mut().iter_mut().zip(x.data()).zip(grad_out) {
        *g = if xv > 0.0 { u } else { 0.0 };
    }
    gx
}

/// [N,C,H,W] -> [N,C], mean over the spatial extent.
pub fn spatial_mean_pool(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "spatial_mean_pool",
            axis: "rank",
            detail: format!("expected [N,C,H,W], got {s:?}"),
        });
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = Tensor::zeros(&[n, c]);
    for i in 0..n * c {
        let slice = &x.data()[i * hw..(i + 1) * hw];
        out.data_mut()[i] = slice.iter().sum::<f64>() / hw as f64;
    }
    Ok(out)
}

pub fn spatial_mean_pool_backward(x_shape: &[usize], grad_out: &[f64]) -> Tensor {
    let (n, c, hw) = (x_shape[0], x_shape[1], x_shape[2] * x_shape[3]);
    let mut gx = Tensor::zeros(x_shape);
    for i in 0..n * c {
        let g = grad_out[i] / hw as f64;
        for v in &mut gx.data_mut()[i * hw..(i + 1) * hw] {
            *v = g;
        }
    }
    gx
}

/// [N,T,H] -> [N,H], mean over time.
pub fn time_mean_pool(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "time_mean_pool",
            axis: "rank",
            detail: format!("expected [N,T,H], got {s:?}"),
        });
    }
    let (n, t, h) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros(&[n, h]);
    for b in 0..n {
        for step in 0..t {
            let row = &x.data()[(b * t + step) * h..(b * t + step + 1) * h];
            for (o, &v) in out.data_mut()[b * h..(b + 1) * h].iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    for v in out.data_mut() {
        *v /= t as f64;
    }
    Ok(out)
}

pub fn time_mean_pool_backward(x_shape: &[usize], grad_out: &[f64]) -> Tensor {
    let (n, t, h) = (x_shape[0], x_shape[1], x_shape[2]);
    let mut gx = Tensor::zeros(x_shape);
    for b in 0..n {
        for step in 0..t {
            for (g, &u) in gx.data_mut()[(b * t + step) * h..(b * t + step + 1) * h]
                .iter_mut()
                .zip(&grad_out[b * h..(b + 1) * h])
            {
                *g = u / t as f64;
            }
        }
    }
    gx
}

/// [N,C,T,F] -> [N,T,C]: averages over frequency and exposes the channel
/// vector per timestep as the recurrent input sequence.
pub fn freq_mean_to_seq(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "freq_mean_to_seq",
            axis: "rank",
            detail: format!("expected [N,C,T,F], got {s:?}"),
        });
    }
    let (n, c, t, f) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(&[n, t, c]);
    for b in 0..n {
        for ch in 0..c {
            for step in 0..t {
                let row = &x.data()[((b * c + ch) * t + step) * f..((b * c + ch) * t + step + 1) * f];
                out.data_mut()[(b * t + step) * c + ch] = row.iter().sum::<f64>() / f as f64;
            }
        }
    }
    Ok(out)
}

pub fn freq_mean_to_seq_backward(x_shape: &[usize], grad_out: &[f64]) -> Tensor {
    let (n, c, t, f) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let mut gx = Tensor::zeros(x_shape);
    for b in 0..n {
        for ch in 0..c {
            for step in 0..t {
                let g = grad_out[(b * t + step) * c + ch] / f as f64;
                let base = ((b * c + ch) * t + step) * f;
                for v in &mut gx.data_mut()[base..base + f] {
                    *v = g;
                }
            }
        }
    }
    gx
}

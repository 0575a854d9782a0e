//! Single-layer vanilla (tanh) recurrent cell, unrolled over time as one
//! fused op: h_t = tanh(x_t . w_in + h_{t-1} . w_rec + b), h_0 = 0.
//!
//! The output holds every hidden state [N,T,H]; backward runs truncated-free
//! BPTT over the stored states (tanh' recovers from h alone).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn recurrent_out_shape(
    input: &[usize],
    w_in: &[usize],
    w_rec: &[usize],
    bias: &[usize],
) -> Result<[usize; 3]> {
    if input.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "recurrent",
            axis: "input rank",
            detail: format!("expected [N,T,F], got {input:?}"),
        });
    }
    let (f, h) = (input[2], w_in.get(1).copied().unwrap_or(0));
    if w_in.len() != 2 || w_in[0] != f {
        return Err(Error::ShapeMismatch {
            op: "recurrent",
            axis: "input projection",
            detail: format!("w_in {w_in:?} must be [{f}, H]"),
        });
    }
    if w_rec != [h, h] {
        return Err(Error::ShapeMismatch {
            op: "recurrent",
            axis: "recurrent weights",
            detail: format!("w_rec {w_rec:?} must be [{h}, {h}]"),
        });
    }
    if bias != [h] {
        return Err(Error::ShapeMismatch {
            op: "recurrent",
            axis: "bias",
            detail: format!("bias {bias:?} must be [{h}]"),
        });
    }
    Ok([input[0], input[1], h])
}

pub fn recurrent(
    input: &Tensor,
    w_in: &Tensor,
    w_rec: &Tensor,
    bias: &Tensor,
) -> Result<Tensor> {
    let [n, t, h] =
        recurrent_out_shape(input.shape(), w_in.shape(), w_rec.shape(), bias.shape())?;
    let f = input.shape()[2];
    let mut out = Tensor::zeros(&[n, t, h]);
    let mut pre = vec![0.0f64; h];
    for b in 0..n {
        for step in 0..t {
            pre.copy_from_slice(bias.data());
            let x_row = &input.data()[(b * t + step) * f..(b * t + step + 1) * f];
            for (k, &xv) in x_row.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (p, &wv) in pre.iter_mut().zip(&w_in.data()[k * h..(k + 1) * h]) {
                    *p += xv * wv;
                }
            }
            if step > 0 {
                let h_prev =
                    out.data()[(b * t + step - 1) * h..(b * t + step) * h].to_vec();
                for (k, &hv) in h_prev.iter().enumerate() {
                    for (p, &wv) in pre.iter_mut().zip(&w_rec.data()[k * h..(k + 1) * h]) {
                        *p += hv * wv;
                    }
                }
            }
            for (o, &p) in out.data_mut()[(b * t + step) * h..(b * t + step + 1) * h]
                .iter_mut()
                .zip(pre.iter())
            {
                *o = p.tanh();
            }
        }
    }
    Ok(out)
}

/// Returns (grad_input, grad_w_in, grad_w_rec, grad_bias).
pub fn recurrent_backward(
    input: &Tensor,
    w_in: &Tensor,
    w_rec: &Tensor,
    output: &Tensor,
    grad_out: &[f64],
) -> (Tensor, Tensor, Tensor, Tensor) {
    let (n, t, f) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let h = w_in.shape()[1];
    let mut gx = Tensor::zeros(input.shape());
    let mut g_win = Tensor::zeros(w_in.shape());
    let mut g_wrec = Tensor::zeros(w_rec.shape());
    let mut g_b = Tensor::zeros(&[h]);

    let mut dh_next = vec![0.0f64; h]; // gradient flowing from step t+1 into h_t
    let mut da = vec![0.0f64; h];
    for b in 0..n {
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        for step in (0..t).rev() {
            let h_row = &output.data()[(b * t + step) * h..(b * t + step + 1) * h];
            for i in 0..h {
                let dh = grad_out[(b * t + step) * h + i] + dh_next[i];
                da[i] = dh * (1.0 - h_row[i] * h_row[i]);
            }
            for (gb, &d) in g_b.data_mut().iter_mut().zip(&da) {
                *gb += d;
            }
            let x_row = &input.data()[(b * t + step) * f..(b * t + step + 1) * f];
            for k in 0..f {
                let w_row = &w_in.data()[k * h..(k + 1) * h];
                let mut acc = 0.0;
                for (wv, &d) in w_row.iter().zip(&da) {
                    acc += wv * d;
                }
                gx.data_mut()[(b * t + step) * f + k] = acc;
                let gw_row = &mut g_win.data_mut()[k * h..(k + 1) * h];
                for (g, &d) in gw_row.iter_mut().zip(&da) {
                    *g += x_row[k] * d;
                }
            }
            if step > 0 {
                let h_prev = &output.data()[(b * t + step - 1) * h..(b * t + step) * h];
                for k in 0..h {
                    let w_row = &w_rec.data()[k * h..(k + 1) * h];
                    let mut acc = 0.0;
                    for (wv, &d) in w_row.iter().zip(&da) {
                        acc += wv * d;
                    }
                    dh_next[k] = acc;
                    let gw_row = &mut g_wrec.data_mut()[k * h..(k + 1) * h];
                    for (g, &d) in gw_row.iter_mut().zip(&da) {
                        *g += h_prev[k] * d;
                    }
                }
            }
        }
    }
    (gx, g_win, g_wrec, g_b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_matches_hand_formula() {
        // One timestep: h = tanh(x . w_in + b).
        let x = Tensor::from_vec(&[1, 1, 2], vec![0.5, -1.0]).unwrap();
        let w_in = Tensor::from_vec(&[2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let w_rec = Tensor::zeros(&[2, 2]);
        let b = Tensor::from_vec(&[2], vec![0.05, -0.05]).unwrap();
        let y = recurrent(&x, &w_in, &w_rec, &b).unwrap();
        let a0: f64 = 0.5 * 0.1 - 1.0 * 0.3 + 0.05;
        let a1: f64 = 0.5 * 0.2 - 1.0 * 0.4 - 0.05;
        assert!((y.data()[0] - a0.tanh()).abs() < 1e-15);
        assert!((y.data()[1] - a1.tanh()).abs() < 1e-15);
    }

    #[test]
    fn two_steps_feed_hidden_state() {
        let x = Tensor::from_vec(&[1, 2, 1], vec![1.0, 0.0]).unwrap();
        let w_in = Tensor::from_vec(&[1, 1], vec![0.7]).unwrap();
        let w_rec = Tensor::from_vec(&[1, 1], vec![0.5]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = recurrent(&x, &w_in, &w_rec, &b).unwrap();
        let h0 = 0.7f64.tanh();
        let h1 = (0.5 * h0).tanh();
        assert!((y.data()[0] - h0).abs() < 1e-15);
        assert!((y.data()[1] - h1).abs() < 1e-15);
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::zeros(&[1, 2, 3]);
        let w_in = Tensor::zeros(&[3, 4]);
        let w_rec = Tensor::zeros(&[5, 5]);
        let b = Tensor::zeros(&[4]);
        assert!(recurrent(&x, &w_in, &w_rec, &b).is_err());
    }
}

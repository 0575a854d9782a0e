//! Affine map (dense layer): out = x . w + b.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn dense_out_shape(input: &[usize], weight: &[usize], bias: &[usize]) -> Result<[usize; 2]> {
    if input.len() != 2 || weight.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "dense",
            axis: "rank",
            detail: format!("expected input [N,F] and weight [F,G], got {input:?} and {weight:?}"),
        });
    }
    if input[1] != weight[0] {
        return Err(Error::ShapeMismatch {
            op: "dense",
            axis: "features",
            detail: format!("input features {} != weight rows {}", input[1], weight[0]),
        });
    }
    if bias.len() != 1 || bias[0] != weight[1] {
        return Err(Error::ShapeMismatch {
            op: "dense",
            axis: "bias",
            detail: format!("bias {bias:?} must be [{}]", weight[1]),
        });
    }
    Ok([input[0], weight[1]])
}

pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [n, g] = dense_out_shape(input.shape(), weight.shape(), bias.shape())?;
    let f = weight.shape()[0];
    let mut out = Tensor::zeros(&[n, g]);
    let y = out.data_mut();
    for row in 0..n {
        let y_row = &mut y[row * g..(row + 1) * g];
        y_row.copy_from_slice(bias.data());
        for k in 0..f {
            let xv = input.data()[row * f + k];
            if xv == 0.0 {
                continue;
            }
            let w_row = &weight.data()[k * g..(k + 1) * g];
            for (yo, wv) in y_row.iter_mut().zip(w_row) {
                *yo += xv * wv;
            }
        }
    }
    Ok(out)
}

/// Returns (grad_input, grad_weight, grad_bias).
pub fn dense_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &[f64],
) -> (Tensor, Tensor, Tensor) {
    let (n, f, g) = (input.shape()[0], weight.shape()[0], weight.shape()[1]);
    let mut gx = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[g]);
    for row in 0..n {
        let go = &grad_out[row * g..(row + 1) * g];
        for (bi, &gv) in gb.data_mut().iter_mut().zip(go) {
            *bi += gv;
        }
        for k in 0..f {
            let w_row = &weight.data()[k * g..(k + 1) * g];
            let mut acc = 0.0;
            for (wv, &gv) in w_row.iter().zip(go) {
                acc += wv * gv;
            }
            gx.data_mut()[row * f + k] = acc;
            let xv = input.data()[row * f + k];
            let gw_row = &mut gw.data_mut()[k * g..(k + 1) * g];
            for (gwv, &gv) in gw_row.iter_mut().zip(go) {
                *gwv += xv * gv;
            }
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weight_zero_bias() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut w = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let b = Tensor::zeros(&[3]);
        let y = dense(&x, &w, &b).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zero_weight_broadcasts_bias() {
        let x = Tensor::filled(&[3, 4], 2.0);
        let w = Tensor::zeros(&[4, 2]);
        let b = Tensor::from_vec(&[2], vec![0.5, -1.5]).unwrap();
        let y = dense(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[0.5, -1.5, 0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_vec(&[3, 5], (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let w = Tensor::from_vec(&[5, 2], (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let b = Tensor::from_vec(&[2], vec![0.3, -0.7]).unwrap();
        let y = dense(&x, &w, &b).unwrap();
        for n in 0..3 {
            for g in 0..2 {
                let mut acc = b.data()[g];
                for k in 0..5 {
                    acc += x.data()[n * 5 + k] * w.data()[k * 2 + g];
                }
                assert!((y.data()[n * 2 + g] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inner_dim_mismatch() {
        let x = Tensor::zeros(&[2, 3]);
        let w = Tensor::zeros(&[4, 2]);
        let b = Tensor::zeros(&[2]);
        let err = dense(&x, &w, &b).unwrap_err();
        assert!(err.to_string().contains("features"));
    }
}

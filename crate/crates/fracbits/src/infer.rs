//! Integer-path inference over a frozen network: activations are quantized
//! to 8-bit codes at every MAC-layer input, convolutions and matrix products
//! run in exact integer arithmetic, and accumulators are rescaled by the
//! activation and per-channel weight scales.
//!
//! This is the deployment view of a checkpoint. Each integer layer can be
//! executed through the plain reference convolution and through the
//! bit-serial plane decomposition; the two must match bit-for-bit. The
//! recurrent hidden state stays at accumulator precision in both the trainer
//! and here, so only the input projection runs on the integer path.

use crate::error::{Error, Result};
use crate::model::{LayerKind, ModelSpec, SiteInfo, SiteRole};
use crate::ops;
use crate::ops::conv::ConvParams;
use crate::quant::{quantize_to_codes, QuantSpec, ScaleLayout, ACTIVATION_BITS};
use crate::search::NetState;
use crate::sim::{bit_serial_conv, direct_int_conv, direct_int_matmul, pack_bitplanes};
use crate::tensor::{IntTensor, Tensor};

/// Captured integer input of one MAC site during a forward pass.
#[derive(Debug, Clone)]
pub struct SiteCapture {
    pub site_index: usize,
    pub input_codes: IntTensor,
}

pub struct QuantizedNet {
    spec: ModelSpec,
    sites: Vec<SiteInfo>,
    site_codes: Vec<IntTensor>,
    site_scales: Vec<Vec<f64>>, // per output channel
    site_bits: Vec<u8>,
    site_bias: Vec<Option<Vec<f64>>>,
    act_scales: Vec<f64>,
}

impl QuantizedNet {
    /// Build from a trained state. Requires frozen integer bitwidths with
    /// calibrated weight and activation scales.
    pub fn from_state(spec: &ModelSpec, state: &NetState) -> Result<QuantizedNet> {
        let sites = spec.sites();
        let mut site_codes = Vec::with_capacity(sites.len());
        let mut site_scales = Vec::with_capacity(sites.len());
        let mut site_bits = Vec::with_capacity(sites.len());
        let mut site_bias = Vec::with_capacity(sites.len());
        for (info, st) in sites.iter().zip(&state.sites) {
            let layout = st.scale.clone().ok_or_else(|| Error::InvalidConfig {
                field: format!("checkpoint.sites[{}].scale", info.name),
                detail: "no calibrated weight scales; run a quantized mode first".into(),
            })?;
            let spec_q = QuantSpec {
                bitwidth: st.bits,
                scale: layout.clone(),
            };
            spec_q.validate()?;
            site_codes.push(quantize_to_codes(&st.weights, &spec_q));
            site_scales.push(match layout {
                ScaleLayout::PerTensor(s) => vec![s; info.out_channels],
                ScaleLayout::PerChannel { scales, .. } => scales,
            });
            site_bits.push(st.bits);
            site_bias.push(st.bias.as_ref().map(|b| b.data().to_vec()));
        }
        for (i, &s) in state.act_scales.iter().enumerate() {
            if !(s > 0.0) {
                return Err(Error::InvalidConfig {
                    field: format!("checkpoint.act_scales[{i}]"),
                    detail: "activation scale uncalibrated".into(),
                });
            }
        }
        Ok(QuantizedNet {
            spec: spec.clone(),
            sites,
            site_codes,
            site_scales,
            site_bits,
            site_bias,
            act_scales: state.act_scales.clone(),
        })
    }

    pub fn site_bits(&self) -> &[u8] {
        &self.site_bits
    }

    pub fn site_codes(&self, i: usize) -> &IntTensor {
        &self.site_codes[i]
    }

    fn quantize_act(&self, x: &Tensor, act_idx: usize) -> IntTensor {
        let spec = QuantSpec::per_tensor(ACTIVATION_BITS, self.act_scales[act_idx]);
        quantize_to_codes(x, &spec)
    }

    /// Forward pass in code space; optionally captures every MAC input for
    /// later bit-serial verification.
    pub fn forward_captured(
        &self,
        batch: &Tensor,
        mut captures: Option<&mut Vec<SiteCapture>>,
    ) -> Result<Tensor> {
        let mut cur = batch.clone();
        let mut site_idx = 0usize;
        let mut act_idx = 0usize;
        for layer in &self.spec.layers {
            match &layer.kind {
                LayerKind::Conv {
                    stride,
                    dilation,
                    padding,
                    relu,
                    ..
                } => {
                    let codes = self.quantize_act(&cur, act_idx);
                    if let Some(c) = captures.as_deref_mut() {
                        c.push(SiteCapture {
                            site_index: site_idx,
                            input_codes: codes.clone(),
                        });
                    }
                    let params = ConvParams {
                        stride: *stride,
                        dilation: *dilation,
                        padding: *padding,
                    };
                    let accum = direct_int_conv(
                        &self.site_codes[site_idx],
                        &codes,
                        params,
                        ACTIVATION_BITS,
                        &layer.name,
                    )?;
                    let s_act = self.act_scales[act_idx];
                    cur = rescale_conv(&accum, s_act, &self.site_scales[site_idx]);
                    if *relu {
                        cur = ops::relu(&cur);
                    }
                    site_idx += 1;
                    act_idx += 1;
                }
                LayerKind::Recurrent { feat, hidden } => {
                    let seq = ops::freq_mean_to_seq(&cur)?;
                    let codes = self.quantize_act(&seq, act_idx);
                    if let Some(c) = captures.as_deref_mut() {
                        c.push(SiteCapture {
                            site_index: site_idx,
                            input_codes: codes.clone(),
                        });
                    }
                    cur = self.recurrent_int(
                        &codes,
                        seq.shape(),
                        *feat,
                        *hidden,
                        site_idx,
                        act_idx,
                        &layer.name,
                    )?;
                    site_idx += 2;
                    act_idx += 1;
                }
                LayerKind::TimePool => cur = ops::time_mean_pool(&cur)?,
                LayerKind::SpatialPool => cur = ops::spatial_mean_pool(&cur)?,
                LayerKind::Dense { f_in, f_out } => {
                    let codes = self.quantize_act(&cur, act_idx);
                    if let Some(c) = captures.as_deref_mut() {
                        c.push(SiteCapture {
                            site_index: site_idx,
                            input_codes: codes.clone(),
                        });
                    }
                    let accum = direct_int_matmul(
                        &codes,
                        &self.site_codes[site_idx],
                        ACTIVATION_BITS,
                        &layer.name,
                    )?;
                    let s_act = self.act_scales[act_idx];
                    let bias = self.site_bias[site_idx].as_deref().unwrap_or(&[]);
                    let mut out = Tensor::zeros(&[cur.shape()[0], *f_out]);
                    let _ = f_in;
                    for row in 0..out.shape()[0] {
                        for gcol in 0..*f_out {
                            let v = accum.data()[row * f_out + gcol] as f64
                                * s_act
                                * self.site_scales[site_idx][gcol]
                                + bias.get(gcol).copied().unwrap_or(0.0);
                            out.data_mut()[row * f_out + gcol] = v;
                        }
                    }
                    cur = out;
                    site_idx += 1;
                    act_idx += 1;
                }
            }
        }
        Ok(cur)
    }

    /// Recurrent layer: the input projection runs in integer code space; the
    /// hidden state and the hidden-to-hidden product stay in floats, using
    /// the fake-quantized weight values (codes * scale), exactly as trained.
    #[allow(clippy::too_many_arguments)]
    fn recurrent_int(
        &self,
        seq_codes: &IntTensor,
        seq_shape: &[usize],
        feat: usize,
        hidden: usize,
        site_idx: usize,
        act_idx: usize,
        layer: &str,
    ) -> Result<Tensor> {
        let (n, t) = (seq_shape[0], seq_shape[1]);
        let flat = IntTensor::from_vec(&[n * t, feat], seq_codes.data().to_vec())?;
        let accum = direct_int_matmul(&flat, &self.site_codes[site_idx], ACTIVATION_BITS, layer)?;
        let s_act = self.act_scales[act_idx];
        let s_in = &self.site_scales[site_idx];
        let bias = self.site_bias[site_idx].as_deref().unwrap_or(&[]);

        // Dequantized hidden-to-hidden weights.
        let rec_codes = &self.site_codes[site_idx + 1];
        let s_rec = &self.site_scales[site_idx + 1];
        let mut w_rec = vec![0.0f64; hidden * hidden];
        for k in 0..hidden {
            for h in 0..hidden {
                w_rec[k * hidden + h] = rec_codes.data()[k * hidden + h] as f64 * s_rec[h];
            }
        }

        let mut out = Tensor::zeros(&[n, t, hidden]);
        let mut h_prev = vec![0.0f64; hidden];
        for b in 0..n {
            h_prev.iter_mut().for_each(|v| *v = 0.0);
            for step in 0..t {
                let row = (b * t + step) * hidden;
                let mut pre = vec![0.0f64; hidden];
                for h in 0..hidden {
                    pre[h] = accum.data()[row + h] as f64 * s_act * s_in[h]
                        + bias.get(h).copied().unwrap_or(0.0);
                }
                for k in 0..hidden {
                    let hv = h_prev[k];
                    if hv == 0.0 {
                        continue;
                    }
                    for h in 0..hidden {
                        pre[h] += hv * w_rec[k * hidden + h];
                    }
                }
                for h in 0..hidden {
                    let v = pre[h].tanh();
                    out.data_mut()[row + h] = v;
                    h_prev[h] = v;
                }
            }
        }
        Ok(out)
    }

    /// Run every captured MAC input through both integer routes (reference
    /// and bit-serial) and demand bit-exact agreement.
    pub fn verify_bit_serial(&self, batch: &Tensor) -> Result<()> {
        let mut captures = Vec::new();
        self.forward_captured(batch, Some(&mut captures))?;
        for cap in &captures {
            let i = cap.site_index;
            let info = &self.sites[i];
            match info.role {
                SiteRole::ConvWeight => {
                    let LayerKind::Conv {
                        stride,
                        dilation,
                        padding,
                        ..
                    } = self.spec.layers[info.layer_index].kind
                    else {
                        unreachable!()
                    };
                    let params = ConvParams {
                        stride,
                        dilation,
                        padding,
                    };
                    let packed = pack_bitplanes(
                        &self.site_codes[i],
                        self.site_bits[i],
                        self.site_scales[i].clone(),
                        &info.name,
                    )?;
                    let direct = direct_int_conv(
                        &self.site_codes[i],
                        &cap.input_codes,
                        params,
                        ACTIVATION_BITS,
                        &info.name,
                    )?;
                    let serial = bit_serial_conv(
                        &packed,
                        &cap.input_codes,
                        params,
                        ACTIVATION_BITS,
                        &info.name,
                    )?;
                    compare_exact(&direct, &serial, &info.name)?;
                }
                SiteRole::RnnInput | SiteRole::DenseWeight => {
                    // Dense maps onto the accelerator as a 1x1 conv with the
                    // weight matrix transposed to [G, F, 1, 1].
                    let (f, gdim) = (info.weight_shape[0], info.weight_shape[1]);
                    let rows = cap.input_codes.len() / f;
                    let flat =
                        IntTensor::from_vec(&[rows, f], cap.input_codes.data().to_vec())?;
                    let direct =
                        direct_int_matmul(&flat, &self.site_codes[i], ACTIVATION_BITS, &info.name)?;
                    let mut transposed = vec![0i32; f * gdim];
                    for r in 0..f {
                        for c in 0..gdim {
                            transposed[c * f + r] = self.site_codes[i].data()[r * gdim + c];
                        }
                    }
                    let w = IntTensor::from_vec(&[gdim, f, 1, 1], transposed)?;
                    let packed = pack_bitplanes(
                        &w,
                        self.site_bits[i],
                        self.site_scales[i].clone(),
                        &info.name,
                    )?;
                    let acts = IntTensor::from_vec(&[rows, f, 1, 1], flat.data().to_vec())?;
                    let serial = bit_serial_conv(
                        &packed,
                        &acts,
                        ConvParams {
                            stride: 1,
                            dilation: 1,
                            padding: 0,
                        },
                        ACTIVATION_BITS,
                        &info.name,
                    )?;
                    compare_exact(&direct, &serial, &info.name)?;
                }
                SiteRole::RnnRecurrent => {}
            }
        }
        Ok(())
    }
}

fn rescale_conv(accum: &IntTensor, s_act: f64, s_w: &[f64]) -> Tensor {
    let [n, o, h, w] = [
        accum.shape()[0],
        accum.shape()[1],
        accum.shape()[2],
        accum.shape()[3],
    ];
    let mut out = Tensor::zeros(&[n, o, h, w]);
    for b in 0..n {
        for oc in 0..o {
            let scale = s_act * s_w[oc];
            let base = (b * o + oc) * h * w;
            for p in 0..h * w {
                out.data_mut()[base + p] = accum.data()[base + p] as f64 * scale;
            }
        }
    }
    out
}

fn compare_exact(direct: &IntTensor, serial: &IntTensor, layer: &str) -> Result<()> {
    for (i, (&d, &s)) in direct.data().iter().zip(serial.data()).enumerate() {
        if d != s {
            return Err(Error::SimulatorMismatch {
                layer: layer.to_string(),
                index: i,
                bit_serial: s as i64,
                reference: d as i64,
            });
        }
    }
    Ok(())
}

impl crate::eval::Classifier for QuantizedNet {
    fn logits(&mut self, batch: &Tensor) -> Result<Tensor> {
        self.forward_captured(batch, None)
    }
}

impl crate::eval::Embedder for QuantizedNet {
    fn embed(&mut self, batch: &Tensor) -> Result<Tensor> {
        self.forward_captured(batch, None)
    }
}

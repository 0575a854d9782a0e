//! Declarative network specs consumed by both the trainer and the cost
//! model, plus the two scaled-down reference networks: a dilated-conv
//! recurrent classifier and a convolutional embedding encoder for episodic
//! few-shot training.

use serde::{Deserialize, Serialize};

use crate::accounting::SizeTerm;
use crate::error::{Error, Result};
use crate::ops::conv::ConvParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
        relu: bool,
    },
    /// Vanilla tanh recurrent layer over time. Consumes [N,C,T,F] by
    /// averaging the frequency axis into a per-timestep feature vector
    /// (feat == C), then runs h_t = tanh(x_t W_in + h_{t-1} W_rec + b).
    Recurrent { feat: usize, hidden: usize },
    /// [N,T,H] -> [N,H]
    TimePool,
    /// [N,C,H,W] -> [N,C]
    SpatialPool,
    Dense { f_in: usize, f_out: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub searchable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// Input shape [C, T, F] (batch prepended at run time).
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

/// Which weight tensor a quantization site refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SiteRole {
    ConvWeight,
    RnnInput,
    RnnRecurrent,
    DenseWeight,
}

/// One quantizable weight tensor with its accounting metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteInfo {
    pub name: String,
    pub layer_index: usize,
    pub role: SiteRole,
    pub weight_shape: Vec<usize>,
    /// Axis of the per-output-channel scales.
    pub channel_axis: usize,
    pub out_channels: usize,
    pub bias_count: usize,
    pub searchable: bool,
}

impl SiteInfo {
    pub fn weight_count(&self) -> usize {
        self.weight_shape.iter().product()
    }

    pub fn size_term(&self) -> SizeTerm {
        SizeTerm::new(self.weight_count(), self.out_channels, self.bias_count)
    }
}

impl ModelSpec {
    /// Output shape of every layer for a batch of one, checking that
    /// consecutive layers compose. Index i is the output of layer i.
    pub fn plan(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape: Vec<usize> = vec![
            1,
            self.input_shape[0],
            self.input_shape[1],
            self.input_shape[2],
        ];
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match &layer.kind {
                LayerKind::Conv {
                    c_in,
                    c_out,
                    kernel,
                    stride,
                    dilation,
                    padding,
                    ..
                } => {
                    let params = ConvParams {
                        stride: *stride,
                        dilation: *dilation,
                        padding: *padding,
                    };
                    let w = [*c_out, *c_in, *kernel, *kernel];
                    let s = crate::ops::conv::conv2d_out_shape(&shape, &w, params).map_err(
                        |e| Error::InvalidConfig {
                            field: format!("model.layers[{i}] ({})", layer.name),
                            detail: e.to_string(),
                        },
                    )?;
                    s.to_vec()
                }
                LayerKind::Recurrent { feat, hidden } => {
                    if shape.len() != 4 || shape[1] != *feat {
                        return Err(Error::InvalidConfig {
                            field: format!("model.layers[{i}] ({})", layer.name),
                            detail: format!(
                                "recurrent expects [N,{feat},T,F] input, got {shape:?}"
                            ),
                        });
                    }
                    vec![shape[0], shape[2], *hidden]
                }
                LayerKind::TimePool => {
                    if shape.len() != 3 {
                        return Err(Error::InvalidConfig {
                            field: format!("model.layers[{i}] ({})", layer.name),
                            detail: format!("time pool expects [N,T,H], got {shape:?}"),
                        });
                    }
                    vec![shape[0], shape[2]]
                }
                LayerKind::SpatialPool => {
                    if shape.len() != 4 {
                        return Err(Error::InvalidConfig {
                            field: format!("model.layers[{i}] ({})", layer.name),
                            detail: format!("spatial pool expects [N,C,H,W], got {shape:?}"),
                        });
                    }
                    vec![shape[0], shape[1]]
                }
                LayerKind::Dense { f_in, f_out } => {
                    if shape.len() != 2 || shape[1] != *f_in {
                        return Err(Error::InvalidConfig {
                            field: format!("model.layers[{i}] ({})", layer.name),
                            detail: format!("dense expects [N,{f_in}] input, got {shape:?}"),
                        });
                    }
                    vec![shape[0], *f_out]
                }
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    /// All weight tensors in layer order. Recurrent layers hold two sites;
    /// the hidden-to-hidden weights are never search variables.
    pub fn sites(&self) -> Vec<SiteInfo> {
        let mut sites = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match &layer.kind {
                LayerKind::Conv {
                    c_in, c_out, kernel, ..
                } => sites.push(SiteInfo {
                    name: layer.name.clone(),
                    layer_index: i,
                    role: SiteRole::ConvWeight,
                    weight_shape: vec![*c_out, *c_in, *kernel, *kernel],
                    channel_axis: 0,
                    out_channels: *c_out,
                    bias_count: 0,
                    searchable: layer.searchable,
                }),
                LayerKind::Recurrent { feat, hidden } => {
                    sites.push(SiteInfo {
                        name: format!("{}_in", layer.name),
                        layer_index: i,
                        role: SiteRole::RnnInput,
                        weight_shape: vec![*feat, *hidden],
                        channel_axis: 1,
                        out_channels: *hidden,
                        bias_count: *hidden,
                        searchable: layer.searchable,
                    });
                    sites.push(SiteInfo {
                        name: format!("{}_rec", layer.name),
                        layer_index: i,
                        role: SiteRole::RnnRecurrent,
                        weight_shape: vec![*hidden, *hidden],
                        channel_axis: 1,
                        out_channels: *hidden,
                        bias_count: 0,
                        searchable: false,
                    });
                }
                LayerKind::Dense { f_in, f_out } => sites.push(SiteInfo {
                    name: layer.name.clone(),
                    layer_index: i,
                    role: SiteRole::DenseWeight,
                    weight_shape: vec![*f_in, *f_out],
                    channel_axis: 1,
                    out_channels: *f_out,
                    bias_count: *f_out,
                    searchable: layer.searchable,
                }),
                LayerKind::TimePool | LayerKind::SpatialPool => {}
            }
        }
        sites
    }

    pub fn size_terms(&self) -> Vec<SizeTerm> {
        self.sites().iter().map(|s| s.size_term()).collect()
    }

    /// Activation quantization points: one per MAC-layer input, named after
    /// the consuming layer. The final layer's output stays at accumulator
    /// precision.
    pub fn act_points(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| {
                matches!(
                    l.kind,
                    LayerKind::Conv { .. } | LayerKind::Recurrent { .. } | LayerKind::Dense { .. }
                )
            })
            .map(|l| format!("{}.act_in", l.name))
            .collect()
    }

    pub fn total_weights(&self) -> usize {
        self.sites().iter().map(|s| s.weight_count()).sum()
    }
}

fn scaled(base: usize, width_scale: f64) -> usize {
    ((base as f64 * width_scale).round() as usize).max(1)
}

/// Dilated-conv recurrent classifier: two dilated 3x3 convs, a tanh
/// recurrent layer over time, mean pooling over time, and a linear head.
/// Searchable: both convs, the recurrent input projection, and the head.
pub fn build_dcrnn_analogue(width_scale: f64, num_classes: usize) -> Result<ModelSpec> {
    if width_scale <= 0.0 || !width_scale.is_finite() {
        return Err(Error::InvalidConfig {
            field: "width_scale".into(),
            detail: format!("must be positive, got {width_scale}"),
        });
    }
    if num_classes < 2 {
        return Err(Error::InvalidConfig {
            field: "num_classes".into(),
            detail: format!("need at least 2 classes, got {num_classes}"),
        });
    }
    let c1 = scaled(16, width_scale);
    let c2 = scaled(64, width_scale);
    let hidden = 16;
    let spec = ModelSpec {
        name: "dcrnn".into(),
        input_shape: [1, 32, 16],
        layers: vec![
            LayerSpec {
                name: "conv1".into(),
                kind: LayerKind::Conv {
                    c_in: 1,
                    c_out: c1,
                    kernel: 3,
                    stride: 2,
                    dilation: 1,
                    padding: 1,
                    relu: true,
                },
                searchable: true,
            },
            LayerSpec {
                name: "conv2".into(),
                kind: LayerKind::Conv {
                    c_in: c1,
                    c_out: c2,
                    kernel: 3,
                    stride: 1,
                    dilation: 2,
                    padding: 2,
                    relu: true,
                },
                searchable: true,
            },
            LayerSpec {
                name: "rnn".into(),
                kind: LayerKind::Recurrent {
                    feat: c2,
                    hidden,
                },
                searchable: true,
            },
            LayerSpec {
                name: "pool".into(),
                kind: LayerKind::TimePool,
                searchable: false,
            },
            LayerSpec {
                name: "fc".into(),
                kind: LayerKind::Dense {
                    f_in: hidden,
                    f_out: num_classes,
                },
                searchable: true,
            },
        ],
    };
    spec.plan()?;
    Ok(spec)
}

/// Convolutional embedding encoder: four 3x3 stride-2 conv blocks, global
/// average pooling, and a linear projection to the embedding. No classifier
/// head; episodes compare embeddings by distance.
pub fn build_protonet_analogue(embed_dim: usize) -> Result<ModelSpec> {
    if embed_dim < 4 {
        return Err(Error::InvalidConfig {
            field: "embed_dim".into(),
            detail: format!("need at least 4 dims, got {embed_dim}"),
        });
    }
    let channels = [8usize, 16, 24, 32];
    let mut layers = Vec::new();
    let mut c_in = 1;
    for (i, &c_out) in channels.iter().enumerate() {
        layers.push(LayerSpec {
            name: format!("conv{}", i + 1),
            kind: LayerKind::Conv {
                c_in,
                c_out,
                kernel: 3,
                stride: 2,
                dilation: 1,
                padding: 1,
                relu: true,
            },
            searchable: true,
        });
        c_in = c_out;
    }
    layers.push(LayerSpec {
        name: "pool".into(),
        kind: LayerKind::SpatialPool,
        searchable: false,
    });
    layers.push(LayerSpec {
        name: "embed".into(),
        kind: LayerKind::Dense {
            f_in: c_in,
            f_out: embed_dim,
        },
        searchable: true,
    });
    let spec = ModelSpec {
        name: "protonet".into(),
        input_shape: [1, 32, 16],
        layers,
    };
    spec.plan()?;
    Ok(spec)
}

/// He-normal initialization of every site, biases zero. Deterministic in the
/// seed.
pub fn init_site_tensors(spec: &ModelSpec, seed: u64) -> Vec<(Tensor, Option<Tensor>)> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    spec.sites()
        .iter()
        .map(|site| {
            let fan_in: usize = match site.role {
                SiteRole::ConvWeight => site.weight_shape[1..].iter().product(),
                _ => site.weight_shape[0],
            };
            // Recurrent weights start well inside the stable regime
            // (spectral radius ~0.5) so tanh doesn't saturate early.
            let std = match site.role {
                SiteRole::RnnRecurrent => 0.5 / (fan_in as f64).sqrt(),
                _ => (2.0 / fan_in as f64).sqrt(),
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            let data: Vec<f64> = (0..site.weight_count())
                .map(|_| normal.sample(&mut rng))
                .collect();
            let w = Tensor::from_vec(&site.weight_shape, data).expect("shape matches count");
            let b = if site.bias_count > 0 {
                Some(Tensor::zeros(&[site.bias_count]))
            } else {
                None
            };
            (w, b)
        })
        .collect()
}

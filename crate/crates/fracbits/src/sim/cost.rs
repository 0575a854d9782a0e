//! Cycle, latency, energy and memory accounting for the bit-serial unit.
//!
//! Cycle model: in 3x3 mode one cycle retires a 3x3 spatial tile of one
//! output channel over a 16-channel input slice for a single weight bit
//! (1296 8-bit MACs). An n-bit layer repeats the pass n times; 1x1 and dense
//! layers use the same tiling at a ninth of the MAC budget. Activation
//! traffic and DMA are out of model: costs here are pure compute.

use serde::{Deserialize, Serialize};

use crate::accounting::SizeLossConfig;
use crate::error::{Error, Result};
use crate::model::{LayerKind, ModelSpec, SiteRole};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccelConfig {
    /// MACs retired per cycle per weight bit in 3x3 mode.
    pub macs_per_cycle_per_bit: u64,
    pub clock_hz: f64,
    /// Input channels consumed per tile.
    pub cin_tile: usize,
    /// Spatial output tile (3x3 outputs from a 5x5 input patch).
    pub spatial_tile: (usize, usize),
    /// Calibration constant; only ratios are ever asserted.
    pub energy_per_cycle_j: f64,
    pub activation_bits: u8,
}

impl Default for AccelConfig {
    fn default() -> Self {
        AccelConfig {
            macs_per_cycle_per_bit: 1296,
            clock_hz: 370e6,
            cin_tile: 16,
            spatial_tile: (3, 3),
            energy_per_cycle_j: 0.2e-9,
            activation_bits: 8,
        }
    }
}

impl AccelConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.macs_per_cycle_per_bit > 0
            && self.clock_hz > 0.0
            && self.cin_tile > 0
            && self.spatial_tile.0 > 0
            && self.spatial_tile.1 > 0
            && self.energy_per_cycle_j > 0.0
            && self.activation_bits == 8;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig {
                field: "accel".into(),
                detail: format!("{self:?}"),
            })
        }
    }

    /// Conv mode (3x3 or 1x1): one output channel, one cin tile, one spatial
    /// tile per cycle per bit.
    pub fn conv_cycles(
        &self,
        c_in: usize,
        c_out: usize,
        h_out: usize,
        w_out: usize,
        bits: u8,
    ) -> u64 {
        bits as u64
            * c_in.div_ceil(self.cin_tile) as u64
            * c_out as u64
            * h_out.div_ceil(self.spatial_tile.0) as u64
            * w_out.div_ceil(self.spatial_tile.1) as u64
    }

    /// Dense (as 1x1 conv with a single output position).
    pub fn dense_cycles(&self, f_in: usize, g_out: usize, bits: u8) -> u64 {
        self.conv_cycles(f_in, g_out, 1, 1, bits)
    }
}

/// Cycles for one layer at a uniform bitwidth. Recurrent layers cost their
/// two matrix products per timestep; pools carry no MAC work and are
/// rejected.
pub fn layer_cycles(
    spec: &ModelSpec,
    layer_index: usize,
    bits: u8,
    cfg: &AccelConfig,
) -> Result<u64> {
    let plan = spec.plan()?;
    let layer = &spec.layers[layer_index];
    match &layer.kind {
        LayerKind::Conv { c_in, c_out, .. } => {
            let out = &plan[layer_index];
            Ok(cfg.conv_cycles(*c_in, *c_out, out[2], out[3], bits))
        }
        LayerKind::Dense { f_in, f_out } => Ok(cfg.dense_cycles(*f_in, *f_out, bits)),
        LayerKind::Recurrent { feat, hidden } => {
            let t = plan[layer_index][1] as u64;
            Ok(t * (cfg.dense_cycles(*feat, *hidden, bits)
                + cfg.dense_cycles(*hidden, *hidden, bits)))
        }
        LayerKind::TimePool | LayerKind::SpatialPool => Err(Error::UnsupportedLayer {
            op: "layer_cycles",
            layer: layer.name.clone(),
            kind: "pool",
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub layer: String,
    pub bits: u8,
    pub weight_bytes: u64,
    pub scaler_bytes: u64,
    pub bias_bytes: u64,
    pub memory_bytes: u64,
    pub cycles: u64,
    pub latency_us: f64,
    pub energy_uj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub total_memory_bytes: u64,
    pub total_cycles: u64,
    pub latency_s: f64,
    pub energy_j: f64,
}

impl CostReport {
    /// CSV with one row per weight site plus a totals row.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("layer,bits,weight_bytes,scaler_bytes,cycles,latency_us,energy_uj\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{:.4},{:.6}\n",
                r.layer, r.bits, r.weight_bytes, r.scaler_bytes, r.cycles, r.latency_us, r.energy_uj
            ));
        }
        out.push_str(&format!(
            "total,,{},{},{},{:.4},{:.6}\n",
            self.rows.iter().map(|r| r.weight_bytes).sum::<u64>(),
            self.rows.iter().map(|r| r.scaler_bytes).sum::<u64>(),
            self.total_cycles,
            self.latency_s * 1e6,
            self.energy_j * 1e6,
        ));
        out
    }
}

/// Assign one bitwidth to every weight site (including the recurrent
/// hidden-to-hidden weights).
pub fn uniform_bits(spec: &ModelSpec, bits: u8) -> Vec<u8> {
    vec![bits; spec.sites().len()]
}

/// Full cost report for a model under a per-site bit assignment. Memory uses
/// the same accounting as the size loss; cycles follow the bit-serial model
/// with recurrent layers decomposed into their two matrix products.
pub fn model_cost(
    spec: &ModelSpec,
    bits: &[u8],
    cfg: &AccelConfig,
    size_cfg: &SizeLossConfig,
) -> Result<CostReport> {
    cfg.validate()?;
    let sites = spec.sites();
    if bits.len() != sites.len() {
        return Err(Error::InvalidConfig {
            field: "bits".into(),
            detail: format!("{} bit assignments for {} sites", bits.len(), sites.len()),
        });
    }
    let plan = spec.plan()?;
    let mut rows = Vec::with_capacity(sites.len());
    for (site, &b) in sites.iter().zip(bits) {
        if !(2..=8).contains(&b) {
            return Err(Error::BitwidthRange {
                bits: b,
                min: 2,
                max: 8,
            });
        }
        let cycles = match site.role {
            SiteRole::ConvWeight => {
                let out = &plan[site.layer_index];
                let c_in = site.weight_shape[1];
                cfg.conv_cycles(c_in, site.out_channels, out[2], out[3], b)
            }
            SiteRole::RnnInput => {
                let t = plan[site.layer_index][1] as u64;
                t * cfg.dense_cycles(site.weight_shape[0], site.out_channels, b)
            }
            SiteRole::RnnRecurrent => {
                let t = plan[site.layer_index][1] as u64;
                t * cfg.dense_cycles(site.weight_shape[0], site.out_channels, b)
            }
            SiteRole::DenseWeight => {
                cfg.dense_cycles(site.weight_shape[0], site.out_channels, b)
            }
        };
        let term = site.size_term();
        let weight_bytes = term.weight_bytes(b);
        let scaler_bytes = term.scaler_bytes(size_cfg);
        let bias_bytes = term.bias_bytes(size_cfg);
        rows.push(CostRow {
            layer: site.name.clone(),
            bits: b,
            weight_bytes,
            scaler_bytes,
            bias_bytes,
            memory_bytes: weight_bytes + scaler_bytes + bias_bytes,
            cycles,
            latency_us: cycles as f64 / cfg.clock_hz * 1e6,
            energy_uj: cycles as f64 * cfg.energy_per_cycle_j * 1e6,
        });
    }
    let total_memory_bytes = rows.iter().map(|r| r.memory_bytes).sum();
    let total_cycles = rows.iter().map(|r| r.cycles).sum();
    Ok(CostReport {
        rows,
        total_memory_bytes,
        total_cycles,
        latency_s: total_cycles as f64 / cfg.clock_hz,
        energy_j: total_cycles as f64 * cfg.energy_per_cycle_j,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accounting::frozen_footprint_bytes;
    use crate::model::{build_dcrnn_analogue, LayerSpec};

    fn conv_only_spec() -> ModelSpec {
        ModelSpec {
            name: "convnet".into(),
            input_shape: [1, 12, 12],
            layers: vec![
                LayerSpec {
                    name: "c1".into(),
                    kind: LayerKind::Conv {
                        c_in: 1,
                        c_out: 8,
                        kernel: 3,
                        stride: 1,
                        dilation: 1,
                        padding: 1,
                        relu: true,
                    },
                    searchable: true,
                },
                LayerSpec {
                    name: "c2".into(),
                    kind: LayerKind::Conv {
                        c_in: 8,
                        c_out: 4,
                        kernel: 3,
                        stride: 2,
                        dilation: 1,
                        padding: 1,
                        relu: true,
                    },
                    searchable: true,
                },
            ],
        }
    }

    #[test]
    fn canonical_block_is_one_cycle() {
        // 3x3 conv, 16 input channels, one output channel, 3x3 outputs,
        // 1 bit: the canonical 1296-MAC cycle.
        let cfg = AccelConfig::default();
        assert_eq!(cfg.conv_cycles(16, 1, 3, 3, 1), 1);
        assert_eq!(
            cfg.macs_per_cycle_per_bit,
            (cfg.spatial_tile.0 * cfg.spatial_tile.1 * cfg.cin_tile * 9) as u64
        );
    }

    #[test]
    fn three_bit_block_is_three_cycles() {
        let cfg = AccelConfig::default();
        assert_eq!(cfg.conv_cycles(16, 1, 3, 3, 3), 3);
    }

    #[test]
    fn hand_computed_case() {
        // C_in=16, C_out=8, H_out=W_out=6, n=4 -> 4 * 1 * 8 * 2 * 2 = 128.
        let cfg = AccelConfig::default();
        assert_eq!(cfg.conv_cycles(16, 8, 6, 6, 4), 128);
    }

    #[test]
    fn cycles_scale_linearly_in_bits() {
        let spec = build_dcrnn_analogue(1.0, 10).unwrap();
        for i in [0usize, 1, 2, 4] {
            let base = layer_cycles(&spec, i, 1, &AccelConfig::default()).unwrap();
            for n in 2u8..=8 {
                assert_eq!(
                    layer_cycles(&spec, i, n, &AccelConfig::default()).unwrap(),
                    n as u64 * base
                );
            }
        }
    }

    #[test]
    fn pool_layers_are_rejected() {
        let spec = build_dcrnn_analogue(1.0, 10).unwrap();
        assert!(matches!(
            layer_cycles(&spec, 3, 4, &AccelConfig::default()),
            Err(Error::UnsupportedLayer { .. })
        ));
    }

    #[test]
    fn eight_bit_total_is_twice_four_bit() {
        let spec = conv_only_spec();
        let cfg = AccelConfig::default();
        let size_cfg = SizeLossConfig::new(0.0, 0.1);
        let c8 = model_cost(&spec, &uniform_bits(&spec, 8), &cfg, &size_cfg).unwrap();
        let c4 = model_cost(&spec, &uniform_bits(&spec, 4), &cfg, &size_cfg).unwrap();
        assert_eq!(c8.total_cycles, 2 * c4.total_cycles);
        // Same holds with the recurrent model when every site scales.
        let dcrnn = build_dcrnn_analogue(1.0, 10).unwrap();
        let d8 = model_cost(&dcrnn, &uniform_bits(&dcrnn, 8), &cfg, &size_cfg).unwrap();
        let d4 = model_cost(&dcrnn, &uniform_bits(&dcrnn, 4), &cfg, &size_cfg).unwrap();
        assert_eq!(d8.total_cycles, 2 * d4.total_cycles);
    }

    #[test]
    fn memory_matches_shared_accounting() {
        let spec = build_dcrnn_analogue(1.0, 10).unwrap();
        let size_cfg = SizeLossConfig::new(0.0, 0.1);
        let bits = vec![7u8, 3, 4, 8, 6];
        let report = model_cost(&spec, &bits, &AccelConfig::default(), &size_cfg).unwrap();
        assert_eq!(
            report.total_memory_bytes,
            frozen_footprint_bytes(&spec.size_terms(), &bits, &size_cfg)
        );
    }

    #[test]
    fn totals_are_sums_of_rows() {
        let spec = build_dcrnn_analogue(1.0, 10).unwrap();
        let size_cfg = SizeLossConfig::new(0.0, 0.1);
        let bits = vec![8u8, 5, 3, 8, 2];
        let report = model_cost(&spec, &bits, &AccelConfig::default(), &size_cfg).unwrap();
        let cyc: u64 = report.rows.iter().map(|r| r.cycles).sum();
        let mem: u64 = report.rows.iter().map(|r| r.memory_bytes).sum();
        assert_eq!(report.total_cycles, cyc);
        assert_eq!(report.total_memory_bytes, mem);
        // Per-site cycles also match the layer-level op where sites map 1:1.
        let conv1 = layer_cycles(&spec, 0, 8, &AccelConfig::default()).unwrap();
        assert_eq!(report.rows[0].cycles, conv1);
    }
}

//! Training pipeline: float pretraining, then either fixed-bitwidth QAT or
//! the differentiable bitwidth search, followed by round-and-freeze
//! fine-tuning. One code path serves both quantized modes — the QAT baseline
//! is simply the search with every bitwidth pinned.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::accounting::{
    float_footprint_bytes, fractional_footprint_bytes, frozen_footprint_bytes, SizeLossConfig,
};
use crate::data::Dataset;
use crate::episode::{sample_episode, EpisodeConfig};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_fewshot, evaluate_generic, Classifier, Embedder, EvalSummary, FewshotEvalConfig,
    GenericEvalConfig,
};
use crate::graph::{ActObserver, Graph, NodeId};
use crate::model::{init_site_tensors, LayerKind, ModelSpec, SiteInfo};
use crate::nas::{freeze_to_target, size_loss_with_grads, total_loss, LayerBitwidthState};
use crate::optim::{Adam, SgdMomentum};
use crate::ops::conv::ConvParams;
use crate::quant::{calibrate_scale, QuantSpec, ScaleLayout};
use crate::seeds::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuantMode {
    Float,
    Fixed { bits: u8 },
    FracBits { s_target_bytes: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskSetup {
    Generic {
        eval: GenericEvalConfig,
    },
    FewShot {
        train_episode: EpisodeConfig,
        episodes_per_epoch: usize,
        eval: FewshotEvalConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: QuantMode,
    pub beta: f64,
    pub lr_weights: f64,
    pub lr_bits: f64,
    pub momentum: f64,
    pub epochs_float: usize,
    pub epochs_search: usize,
    pub epochs_finetune: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluation rounds used for the per-epoch history entries.
    pub history_eval_rounds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: QuantMode::Float,
            beta: 0.1,
            lr_weights: 0.05,
            lr_bits: 0.02,
            momentum: 0.9,
            epochs_float: 18,
            epochs_search: 10,
            epochs_finetune: 10,
            batch_size: 16,
            seed: 0,
            history_eval_rounds: 10,
        }
    }
}

/// Deployable state of a trained network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SiteState {
    pub name: String,
    pub weights: Tensor,
    pub bias: Option<Tensor>,
    pub bits: u8,
    pub scale: Option<ScaleLayout>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetState {
    pub sites: Vec<SiteState>,
    /// Per activation point (see `ModelSpec::act_points`), 0 = uncalibrated.
    pub act_scales: Vec<f64>,
}

impl NetState {
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        let tensors = init_site_tensors(spec, seed);
        let sites = spec
            .sites()
            .iter()
            .zip(tensors)
            .map(|(info, (weights, bias))| SiteState {
                name: info.name.clone(),
                weights,
                bias,
                bits: 8,
                scale: None,
            })
            .collect();
        NetState {
            sites,
            act_scales: vec![0.0; spec.act_points().len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryPoint {
    pub phase: String,
    pub epoch: usize,
    pub footprint_bytes: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub epoch_seconds: f64,
}

/// The serializable outcome of a run: the per-layer bitwidth map, final
/// accuracy, storage footprint, and the training trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchResult {
    pub bitwidths: BTreeMap<String, u8>,
    pub accuracy: f64,
    pub accuracy_std: f64,
    pub footprint_bytes: u64,
    pub history: Vec<HistoryPoint>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub result: SearchResult,
    pub state: NetState,
    pub spec: ModelSpec,
}

/// Which quantization nodes the graph carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Float,
    /// Interpolated quantizers with trainable bitwidths.
    Search,
    /// Integer fake-quant at pinned bitwidths.
    Frozen,
}

enum Head {
    Logits,
    Embedding { shape: crate::ops::EpisodeShape },
}

/// A built graph plus handles to everything the trainer touches.
pub struct Network {
    pub graph: Graph,
    input: NodeId,
    output: NodeId,
    loss: NodeId,
    weight_params: Vec<NodeId>,
    bias_params: Vec<Option<NodeId>>,
    n_params: Vec<Option<NodeId>>,
    quant_nodes: Vec<Option<NodeId>>,
    act_nodes: Vec<NodeId>,
}

impl Network {
    pub fn output_value(&self) -> &Tensor {
        self.graph.value(self.output)
    }

    fn run_to_output(&mut self, batch: &Tensor) -> Result<Tensor> {
        let was_observing = self.graph.observing;
        self.graph.observing = false;
        self.graph.set_value(self.input, batch);
        let r = self.graph.forward_to(self.output);
        self.graph.observing = was_observing;
        r?;
        Ok(self.graph.value(self.output).clone())
    }
}

impl Classifier for Network {
    fn logits(&mut self, batch: &Tensor) -> Result<Tensor> {
        self.run_to_output(batch)
    }
}

impl Embedder for Network {
    fn embed(&mut self, batch: &Tensor) -> Result<Tensor> {
        self.run_to_output(batch)
    }
}

fn quant_spec_for(
    weights: &Tensor,
    bits: u8,
    channel_axis: usize,
) -> Result<QuantSpec> {
    Ok(QuantSpec {
        bitwidth: bits,
        scale: calibrate_scale(weights, bits, Some(channel_axis))?,
    })
}

struct Builder<'a> {
    spec: &'a ModelSpec,
    state: &'a NetState,
    phase: Phase,
    /// Fixed-bitwidth QAT: searchable sites get plain integer quantizers
    /// instead of interpolated ones with trainable bitwidths.
    pinned: bool,
    bit_states: &'a [LayerBitwidthState],
}

impl<'a> Builder<'a> {
    /// Assemble the graph for one phase. Activation quantizers appear in
    /// front of every MAC layer outside float mode; weight quantizers depend
    /// on the phase and on whether the site is a search variable.
    fn build(&self, head: Head, batch_hint: usize) -> Result<Network> {
        let sites = self.spec.sites();
        let mut g = Graph::new();
        let [c, t, f] = self.spec.input_shape;
        let input = g.input(Tensor::zeros(&[batch_hint, c, t, f]));

        let mut weight_params = Vec::with_capacity(sites.len());
        let mut bias_params = Vec::with_capacity(sites.len());
        let mut n_params: Vec<Option<NodeId>> = vec![None; sites.len()];
        let mut quant_nodes: Vec<Option<NodeId>> = vec![None; sites.len()];
        let mut act_nodes = Vec::new();

        for st in &self.state.sites {
            let w = g.param(st.weights.clone());
            weight_params.push(w);
            bias_params.push(st.bias.as_ref().map(|b| g.param(b.clone())));
        }

        let mut cur = input;
        let mut site_idx = 0usize;
        let mut act_idx = 0usize;
        let mut quantize_input = |g: &mut Graph, cur: NodeId, act_idx: &mut usize| -> Result<NodeId> {
            if self.phase == Phase::Float {
                return Ok(cur);
            }
            let observer = if self.state.act_scales[*act_idx] > 0.0 {
                ActObserver::from_scale(self.state.act_scales[*act_idx])
            } else {
                ActObserver::new()
            };
            let q = g.act_quant(cur, observer)?;
            act_nodes.push(q);
            *act_idx += 1;
            Ok(q)
        };

        for layer in &self.spec.layers {
            match &layer.kind {
                LayerKind::Conv {
                    stride,
                    dilation,
                    padding,
                    relu,
                    ..
                } => {
                    cur = quantize_input(&mut g, cur, &mut act_idx)?;
                    let wq = self.weight_node(
                        &mut g,
                        &sites[site_idx],
                        weight_params[site_idx],
                        site_idx,
                        &mut n_params,
                        &mut quant_nodes,
                    )?;
                    cur = g.conv2d(
                        cur,
                        wq,
                        ConvParams {
                            stride: *stride,
                            dilation: *dilation,
                            padding: *padding,
                        },
                    )?;
                    if *relu {
                        cur = g.relu(cur)?;
                    }
                    site_idx += 1;
                }
                LayerKind::Recurrent { .. } => {
                    cur = g.freq_mean_to_seq(cur)?;
                    cur = quantize_input(&mut g, cur, &mut act_idx)?;
                    let w_in = self.weight_node(
                        &mut g,
                        &sites[site_idx],
                        weight_params[site_idx],
                        site_idx,
                        &mut n_params,
                        &mut quant_nodes,
                    )?;
                    let w_rec = self.weight_node(
                        &mut g,
                        &sites[site_idx + 1],
                        weight_params[site_idx + 1],
                        site_idx + 1,
                        &mut n_params,
                        &mut quant_nodes,
                    )?;
                    let b = bias_params[site_idx].expect("recurrent input site carries the bias");
                    cur = g.recurrent(cur, w_in, w_rec, b)?;
                    site_idx += 2;
                }
                LayerKind::TimePool => cur = g.time_mean_pool(cur)?,
                LayerKind::SpatialPool => cur = g.spatial_mean_pool(cur)?,
                LayerKind::Dense { .. } => {
                    cur = quantize_input(&mut g, cur, &mut act_idx)?;
                    let wq = self.weight_node(
                        &mut g,
                        &sites[site_idx],
                        weight_params[site_idx],
                        site_idx,
                        &mut n_params,
                        &mut quant_nodes,
                    )?;
                    let b = bias_params[site_idx].expect("dense carries a bias");
                    cur = g.dense(cur, wq, b)?;
                    site_idx += 1;
                }
            }
        }

        let output = cur;
        let loss = match head {
            Head::Logits => {
                let dummy = vec![0usize; batch_hint.max(1)];
                g.softmax_cross_entropy(output, dummy)?
            }
            Head::Embedding { shape } => g.prototypical_loss(output, shape)?,
        };

        Ok(Network {
            graph: g,
            input,
            output,
            loss,
            weight_params,
            bias_params,
            n_params,
            quant_nodes,
            act_nodes,
        })
    }

    fn weight_node(
        &self,
        g: &mut Graph,
        site: &SiteInfo,
        w: NodeId,
        site_idx: usize,
        n_params: &mut [Option<NodeId>],
        quant_nodes: &mut [Option<NodeId>],
    ) -> Result<NodeId> {
        match self.phase {
            Phase::Float => Ok(w),
            Phase::Frozen => {
                let st = &self.state.sites[site_idx];
                let spec = QuantSpec {
                    bitwidth: st.bits,
                    scale: st
                        .scale
                        .clone()
                        .expect("frozen phase requires calibrated scales"),
                };
                let q = g.fake_quant(w, spec)?;
                quant_nodes[site_idx] = Some(q);
                Ok(q)
            }
            Phase::Search => {
                if site.searchable && !self.pinned {
                    let bs = &self.bit_states[site_idx];
                    let (lo, hi) = bs.bracket();
                    let weights = &self.state.sites[site_idx].weights;
                    let floor = quant_spec_for(weights, lo, site.channel_axis)?;
                    let ceil = quant_spec_for(weights, hi, site.channel_axis)?;
                    let n = g.param(Tensor::scalar(bs.n_frac));
                    n_params[site_idx] = Some(n);
                    let q = g.interp_fake_quant(w, n, floor, ceil)?;
                    quant_nodes[site_idx] = Some(q);
                    Ok(q)
                } else {
                    let st = &self.state.sites[site_idx];
                    let spec = quant_spec_for(&st.weights, st.bits, site.channel_axis)?;
                    let q = g.fake_quant(w, spec)?;
                    quant_nodes[site_idx] = Some(q);
                    Ok(q)
                }
            }
        }
    }
}

/// Optimizer state lives for one phase: momentum and Adam moments carry
/// across epochs but never across a graph rebuild.
struct PhaseOptimizers {
    sgd: SgdMomentum,
    adam: Adam,
}

impl PhaseOptimizers {
    fn new(cfg: &TrainConfig) -> Self {
        PhaseOptimizers {
            sgd: SgdMomentum::new(cfg.lr_weights, cfg.momentum),
            adam: Adam::new(cfg.lr_bits),
        }
    }
}

pub struct Pipeline<'d> {
    pub spec: ModelSpec,
    pub dataset: &'d Dataset,
    pub task: TaskSetup,
    pub cfg: TrainConfig,
}

impl<'d> Pipeline<'d> {
    pub fn new(spec: ModelSpec, dataset: &'d Dataset, task: TaskSetup, cfg: TrainConfig) -> Self {
        Pipeline {
            spec,
            dataset,
            task,
            cfg,
        }
    }

    fn size_cfg(&self) -> SizeLossConfig {
        match self.cfg.mode {
            QuantMode::FracBits { s_target_bytes } => {
                SizeLossConfig::new(s_target_bytes as f64, self.cfg.beta)
            }
            _ => SizeLossConfig::new(0.0, self.cfg.beta),
        }
    }

    /// Byte footprint of the whole model at the cheapest searchable setting.
    pub fn min_feasible_bytes(&self) -> u64 {
        let sites = self.spec.sites();
        let bits: Vec<u8> = sites.iter().map(|s| if s.searchable { 2 } else { 8 }).collect();
        frozen_footprint_bytes(&self.spec.size_terms(), &bits, &self.size_cfg())
    }

    pub fn eight_bit_bytes(&self) -> u64 {
        let bits = vec![8u8; self.spec.sites().len()];
        frozen_footprint_bytes(&self.spec.size_terms(), &bits, &self.size_cfg())
    }

    /// Run the full pipeline for the configured mode.
    pub fn run(&self) -> Result<RunOutcome> {
        if let QuantMode::Fixed { bits } = self.cfg.mode {
            if !(2..=8).contains(&bits) {
                return Err(Error::BitwidthRange {
                    bits,
                    min: 2,
                    max: 8,
                });
            }
        }
        if let QuantMode::FracBits { s_target_bytes } = self.cfg.mode {
            let min = self.min_feasible_bytes();
            if s_target_bytes < min {
                return Err(Error::InfeasibleTarget {
                    s_target: s_target_bytes,
                    min_bytes: min,
                });
            }
        }

        let mut state = NetState::init(&self.spec, derive_seed(self.cfg.seed, "init", 0));
        let sites = self.spec.sites();
        let mut history = Vec::new();

        // Per-site bitwidth states. Non-searchable sites and the fixed-QAT
        // baseline pin n to an integer, which freezes to itself.
        let init_bits = |searchable: bool| -> f64 {
            match self.cfg.mode {
                QuantMode::Fixed { bits } if searchable => bits as f64,
                _ => 8.0,
            }
        };
        let mut bit_states: Vec<LayerBitwidthState> = sites
            .iter()
            .map(|s| LayerBitwidthState::new(init_bits(s.searchable)))
            .collect();

        // Float pretraining.
        let mut net = Builder {
            spec: &self.spec,
            state: &state,
            phase: Phase::Float,
            pinned: false,
            bit_states: &bit_states,
        }
        .build(self.head(), self.batch_hint())?;
        let mut opt = PhaseOptimizers::new(&self.cfg);
        for epoch in 0..self.cfg.epochs_float {
            let stats = self.train_epoch(
                &mut net,
                "float",
                epoch,
                self.cfg.epochs_float,
                None,
                &mut bit_states,
                &mut opt,
            )?;
            self.extract_state(&net, &mut state, &bit_states);
            history.push(self.history_point(
                "float",
                epoch,
                float_footprint_bytes(&self.spec.size_terms(), &self.size_cfg()) as f64,
                stats,
                &mut net,
            )?);
        }
        self.extract_state(&net, &mut state, &bit_states);

        if matches!(self.cfg.mode, QuantMode::Float) {
            let summary = self.final_eval(&mut net)?;
            let footprint = float_footprint_bytes(&self.spec.size_terms(), &self.size_cfg());
            return Ok(RunOutcome {
                result: SearchResult {
                    bitwidths: BTreeMap::new(),
                    accuracy: summary.mean,
                    accuracy_std: summary.std,
                    footprint_bytes: footprint,
                    history,
                },
                state,
                spec: self.spec.clone(),
            });
        }

        // Quantized phase 1: joint search (or pinned QAT).
        for (i, st) in state.sites.iter_mut().enumerate() {
            st.bits = bit_states[i].n_frac.round() as u8;
        }
        let mut net = Builder {
            spec: &self.spec,
            state: &state,
            phase: Phase::Search,
            pinned: matches!(self.cfg.mode, QuantMode::Fixed { .. }),
            bit_states: &bit_states,
        }
        .build(self.head(), self.batch_hint())?;
        let size_cfg = self.size_cfg();
        let searching = matches!(self.cfg.mode, QuantMode::FracBits { .. });
        let mut opt = PhaseOptimizers::new(&self.cfg);
        for epoch in 0..self.cfg.epochs_search {
            if epoch == 0 {
                // Drop any stale running maxima before observation starts.
                for &a in &net.act_nodes {
                    net.graph.act_observer_mut(a).running_max = 0.0;
                }
            }
            let stats = self.train_epoch(
                &mut net,
                "search",
                epoch,
                self.cfg.epochs_search,
                searching.then_some(&size_cfg),
                &mut bit_states,
                &mut opt,
            )?;
            self.extract_state(&net, &mut state, &bit_states);
            let frac: Vec<f64> = bit_states.iter().map(|b| b.n_frac).collect();
            history.push(self.history_point(
                "search",
                epoch,
                fractional_footprint_bytes(&self.spec.size_terms(), &frac, &size_cfg),
                stats,
                &mut net,
            )?);
        }
        self.extract_state(&net, &mut state, &bit_states);

        // Round and freeze, steering the integer footprint to the target,
        // then recalibrate weight scales once at the frozen bitwidths.
        let frozen_bits = freeze_to_target(&mut bit_states, &self.spec.size_terms(), &size_cfg);
        for ((st, info), &bits) in state.sites.iter_mut().zip(&sites).zip(&frozen_bits) {
            st.bits = bits;
            st.scale = Some(calibrate_scale(&st.weights, bits, Some(info.channel_axis))?);
        }

        // Phase 2: fine-tune weights only at integer bitwidths.
        let mut net = Builder {
            spec: &self.spec,
            state: &state,
            phase: Phase::Frozen,
            pinned: false,
            bit_states: &bit_states,
        }
        .build(self.head(), self.batch_hint())?;
        let mut opt = PhaseOptimizers::new(&self.cfg);
        for epoch in 0..self.cfg.epochs_finetune {
            if epoch == 0 || epoch + 1 == self.cfg.epochs_finetune {
                // Fresh observation at phase entry, then once more for the
                // final epoch, which doubles as the calibration epoch: the
                // deployed scales reflect the last epoch's running max alone.
                for &a in &net.act_nodes {
                    net.graph.act_observer_mut(a).running_max = 0.0;
                }
            }
            let stats = self.train_epoch(
                &mut net,
                "finetune",
                epoch,
                self.cfg.epochs_finetune,
                None,
                &mut bit_states,
                &mut opt,
            )?;
            self.extract_state(&net, &mut state, &bit_states);
            let footprint =
                frozen_footprint_bytes(&self.spec.size_terms(), &frozen_bits, &size_cfg);
            history.push(self.history_point(
                "finetune",
                epoch,
                footprint as f64,
                stats,
                &mut net,
            )?);
        }
        self.extract_state(&net, &mut state, &bit_states);

        let summary = self.final_eval(&mut net)?;
        let footprint = frozen_footprint_bytes(&self.spec.size_terms(), &frozen_bits, &size_cfg);
        let bitwidths: BTreeMap<String, u8> = sites
            .iter()
            .zip(&frozen_bits)
            .map(|(s, &b)| (s.name.clone(), b))
            .collect();
        Ok(RunOutcome {
            result: SearchResult {
                bitwidths,
                accuracy: summary.mean,
                accuracy_std: summary.std,
                footprint_bytes: footprint,
                history,
            },
            state,
            spec: self.spec.clone(),
        })
    }

    fn head(&self) -> Head {
        match &self.task {
            TaskSetup::Generic { .. } => Head::Logits,
            TaskSetup::FewShot { train_episode, .. } => Head::Embedding {
                shape: train_episode.shape(),
            },
        }
    }

    fn batch_hint(&self) -> usize {
        match &self.task {
            TaskSetup::Generic { .. } => self.cfg.batch_size,
            TaskSetup::FewShot { train_episode, .. } => {
                train_episode.n_way * (train_episode.k_shot + train_episode.n_query)
            }
        }
    }

    /// One epoch over the training split. Returns (mean loss, wall seconds).
    /// The weight learning rate follows a cosine decay across the phase; the
    /// bitwidth learning rate stays constant so layers keep their mobility.
    fn train_epoch(
        &self,
        net: &mut Network,
        phase: &'static str,
        epoch: usize,
        phase_epochs: usize,
        size_cfg: Option<&SizeLossConfig>,
        bit_states: &mut [LayerBitwidthState],
        opt: &mut PhaseOptimizers,
    ) -> Result<(f64, f64)> {
        let start = Instant::now();
        let sites = self.spec.sites();
        let cosine = 0.5
            * (1.0
                + (std::f64::consts::PI * epoch as f64 / phase_epochs.max(1) as f64).cos());
        opt.sgd.lr = self.cfg.lr_weights * (0.05 + 0.95 * cosine);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.cfg.seed,
            phase,
            epoch as u64,
        ));
        net.graph.observing = true;

        let weight_ids: Vec<NodeId> = net
            .weight_params
            .iter()
            .copied()
            .chain(net.bias_params.iter().flatten().copied())
            .collect();
        let n_ids: Vec<NodeId> = net.n_params.iter().flatten().copied().collect();

        let mut total_loss_sum = 0.0;
        let mut batches = 0usize;

        let batch_plan: Vec<(Tensor, Vec<usize>)> = match &self.task {
            TaskSetup::Generic { .. } => {
                let mut idx = self.dataset.train_idx.clone();
                idx.shuffle(&mut rng);
                idx.chunks_exact(self.cfg.batch_size)
                    .map(|chunk| self.dataset.batch(chunk))
                    .collect()
            }
            TaskSetup::FewShot {
                train_episode,
                episodes_per_epoch,
                ..
            } => {
                let pool = self.dataset.train_by_class();
                let mut plan = Vec::with_capacity(*episodes_per_epoch);
                for _ in 0..*episodes_per_epoch {
                    let ep = sample_episode(&pool, train_episode, &mut rng)?;
                    let (batch, _) = self.dataset.batch(&ep.row_indices());
                    plan.push((batch, Vec::new()));
                }
                plan
            }
        };

        for (batch, labels) in batch_plan {
            net.graph.set_value(net.input, &batch);
            if let TaskSetup::Generic { .. } = self.task {
                net.graph.set_labels(net.loss, labels);
            }
            net.graph.forward()?;
            let acc_loss = net.graph.value(net.loss).scalar_value();
            net.graph.backward(net.loss)?;

            let step_loss = if let Some(size_cfg) = size_cfg {
                let frac: Vec<f64> = bit_states.iter().map(|b| b.n_frac).collect();
                let (l_size, g_size) =
                    size_loss_with_grads(&self.spec.size_terms(), &frac, size_cfg);
                for (i, n_id) in net.n_params.iter().enumerate() {
                    if let Some(n_id) = n_id {
                        net.graph.value_mut(*n_id).grad_or_init()[0] +=
                            size_cfg.beta * g_size[i];
                    }
                }
                total_loss(acc_loss, l_size, size_cfg.beta)
            } else {
                acc_loss
            };

            if !step_loss.is_finite() {
                let layer = sites
                    .iter()
                    .zip(&net.weight_params)
                    .find(|(_, &w)| {
                        net.graph
                            .grad(w)
                            .map_or(false, |g| g.iter().any(|v| !v.is_finite()))
                    })
                    .map(|(s, _)| s.name.clone());
                return Err(Error::NonFiniteLoss {
                    phase,
                    epoch,
                    layer,
                });
            }

            opt.sgd.step(&mut net.graph, &weight_ids);
            if !n_ids.is_empty() {
                opt.adam.step(&mut net.graph, &n_ids);
                self.sync_bit_states(net, bit_states, &sites)?;
            }
            total_loss_sum += step_loss;
            batches += 1;
        }
        net.graph.observing = false;
        Ok((
            total_loss_sum / batches.max(1) as f64,
            start.elapsed().as_secs_f64(),
        ))
    }

    /// Clamp the bitwidth variables, and when one crosses an integer bracket
    /// recalibrate its floor/ceil quantizers from the current weights.
    fn sync_bit_states(
        &self,
        net: &mut Network,
        bit_states: &mut [LayerBitwidthState],
        sites: &[SiteInfo],
    ) -> Result<()> {
        for (i, n_id) in net.n_params.iter().enumerate() {
            let Some(n_id) = n_id else { continue };
            let old_bracket = bit_states[i].bracket();
            let clamped = net.graph.value(*n_id).scalar_value().clamp(2.0, 8.0);
            net.graph.value_mut(*n_id).data_mut()[0] = clamped;
            bit_states[i].n_frac = clamped;
            let new_bracket = bit_states[i].bracket();
            if new_bracket != old_bracket {
                let weights = net.graph.value(net.weight_params[i]).clone();
                let floor = quant_spec_for(&weights, new_bracket.0, sites[i].channel_axis)?;
                let ceil = quant_spec_for(&weights, new_bracket.1, sites[i].channel_axis)?;
                net.graph
                    .set_interp_specs(net.quant_nodes[i].expect("searchable site"), floor, ceil);
            }
        }
        Ok(())
    }

    /// Copy weights, biases, and activation scales out of the graph.
    fn extract_state(
        &self,
        net: &Network,
        state: &mut NetState,
        bit_states: &[LayerBitwidthState],
    ) {
        for (i, st) in state.sites.iter_mut().enumerate() {
            st.weights = net.graph.value(net.weight_params[i]).clone();
            st.weights.clear_grad();
            if let Some(b) = net.bias_params[i] {
                let mut bias = net.graph.value(b).clone();
                bias.clear_grad();
                st.bias = Some(bias);
            }
            if let Some(frozen) = bit_states[i].n_frozen {
                st.bits = frozen;
            }
        }
        for (i, &a) in net.act_nodes.iter().enumerate() {
            state.act_scales[i] = net.graph.act_observer(a).scale();
        }
    }

    fn history_point(
        &self,
        phase: &str,
        epoch: usize,
        footprint: f64,
        (train_loss, epoch_seconds): (f64, f64),
        net: &mut Network,
    ) -> Result<HistoryPoint> {
        let seed = derive_seed(self.cfg.seed, "history-eval", epoch as u64);
        let val_accuracy = match &self.task {
            TaskSetup::Generic { eval } => {
                let cfg = GenericEvalConfig {
                    rounds: self.cfg.history_eval_rounds,
                    samples_per_round: eval.samples_per_round,
                };
                evaluate_generic(net, self.dataset, &cfg, seed)?.mean
            }
            TaskSetup::FewShot { eval, .. } => {
                let cfg = FewshotEvalConfig {
                    rounds: self.cfg.history_eval_rounds,
                    episode: eval.episode,
                };
                evaluate_fewshot(net, self.dataset, &cfg, seed)?.mean
            }
        };
        Ok(HistoryPoint {
            phase: phase.to_string(),
            epoch,
            footprint_bytes: footprint,
            train_loss,
            val_accuracy,
            epoch_seconds,
        })
    }

    fn final_eval(&self, net: &mut Network) -> Result<EvalSummary> {
        let seed = derive_seed(self.cfg.seed, "final-eval", 0);
        match &self.task {
            TaskSetup::Generic { eval } => evaluate_generic(net, self.dataset, eval, seed),
            TaskSetup::FewShot { eval, .. } => evaluate_fewshot(net, self.dataset, eval, seed),
        }
    }
}

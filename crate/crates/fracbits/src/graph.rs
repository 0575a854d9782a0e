//! Reverse-mode autodiff over a static graph.
//!
//! Nodes are appended in topological order; `forward` re-executes the whole
//! tape (leaf values may be swapped between passes, e.g. a new batch), and
//! `backward` walks it once in reverse, accumulating gradients into each
//! tensor's grad buffer. Everything is single-threaded and deterministic.

use crate::error::{Error, Result};
use crate::nas;
use crate::ops::{self, ConvParams, EpisodeShape};
use crate::quant::{self, QuantSpec, ACTIVATION_BITS};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Running-max activation observer; scale degenerates to 1 until data flows.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ActObserver {
    pub running_max: f64,
}

impl ActObserver {
    pub fn new() -> Self {
        ActObserver { running_max: 0.0 }
    }

    /// Reconstruct an observer from a stored scale.
    pub fn from_scale(scale: f64) -> Self {
        ActObserver {
            running_max: scale * quant::qmax(ACTIVATION_BITS) as f64,
        }
    }

    pub fn scale(&self) -> f64 {
        if self.running_max > 0.0 {
            self.running_max / quant::qmax(ACTIVATION_BITS) as f64
        } else {
            1.0
        }
    }

    pub fn spec(&self) -> QuantSpec {
        QuantSpec::per_tensor(ACTIVATION_BITS, self.scale())
    }
}

impl Default for ActObserver {
    fn default() -> Self {
        ActObserver::new()
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Conv2d(ConvParams),
    Dense,
    Relu,
    SpatialMeanPool,
    TimeMeanPool,
    FreqMeanToSeq,
    Recurrent,
    SoftmaxCrossEntropy {
        labels: Vec<usize>,
    },
    PrototypicalLoss {
        shape: EpisodeShape,
        last_accuracy: f64,
    },
    /// Integer fake-quantization of a weight tensor.
    FakeQuant {
        spec: QuantSpec,
    },
    /// Per-tensor 8-bit activation quantization with a running-max observer.
    ActQuant {
        observer: ActObserver,
    },
    /// Fractional fake-quantization; inputs are [x, n] with n a scalar leaf.
    InterpFakeQuant {
        floor: QuantSpec,
        ceil: QuantSpec,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    trainable: Vec<NodeId>,
    /// When set, forward passes update activation observers (training mode).
    pub observing: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn trainable(&self) -> &[NodeId] {
        &self.trainable
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn value_mut(&mut self, id: NodeId) -> &mut Tensor {
        &mut self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    /// Replace a leaf's value (new batch, restored checkpoint, ...).
    pub fn set_value(&mut self, id: NodeId, value: &Tensor) {
        debug_assert!(matches!(self.nodes[id.0].op, Op::Leaf));
        self.nodes[id.0].value.assign(value);
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        id
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, Vec::new(), value, false)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, Vec::new(), value, true);
        self.trainable.push(id);
        id
    }

    fn wire(&mut self, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i.0].needs_grad);
        let id = self.push(op, inputs, Tensor::scalar(0.0), needs_grad);
        match self.exec_node(id.0) {
            Ok(()) => Ok(id),
            Err(e) => {
                self.nodes.pop();
                Err(e)
            }
        }
    }

    fn exec_node(&mut self, i: usize) -> Result<()> {
        let observing = self.observing;
        let (before, rest) = self.nodes.split_at_mut(i);
        let node = &mut rest[0];
        let refs: Vec<&Tensor> = node.inputs.iter().map(|&id| &before[id.0].value).collect();
        node.value = exec(&mut node.op, &refs, observing)?;
        Ok(())
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, params: ConvParams) -> Result<NodeId> {
        self.wire(Op::Conv2d(params), vec![x, w])
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.wire(Op::Dense, vec![x, w, b])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.wire(Op::Relu, vec![x])
    }

    pub fn spatial_mean_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.wire(Op::SpatialMeanPool, vec![x])
    }

    pub fn time_mean_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.wire(Op::TimeMeanPool, vec![x])
    }

    pub fn freq_mean_to_seq(&mut self, x: NodeId) -> Result<NodeId> {
        self.wire(Op::FreqMeanToSeq, vec![x])
    }

    pub fn recurrent(
        &mut self,
        x: NodeId,
        w_in: NodeId,
        w_rec: NodeId,
        b: NodeId,
    ) -> Result<NodeId> {
        self.wire(Op::Recurrent, vec![x, w_in, w_rec, b])
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        self.wire(Op::SoftmaxCrossEntropy { labels }, vec![logits])
    }

    pub fn prototypical_loss(&mut self, embeddings: NodeId, shape: EpisodeShape) -> Result<NodeId> {
        self.wire(
            Op::PrototypicalLoss {
                shape,
                last_accuracy: 0.0,
            },
            vec![embeddings],
        )
    }

    pub fn fake_quant(&mut self, x: NodeId, spec: QuantSpec) -> Result<NodeId> {
        spec.validate()?;
        self.wire(Op::FakeQuant { spec }, vec![x])
    }

    pub fn act_quant(&mut self, x: NodeId, observer: ActObserver) -> Result<NodeId> {
        self.wire(Op::ActQuant { observer }, vec![x])
    }

    pub fn interp_fake_quant(
        &mut self,
        x: NodeId,
        n: NodeId,
        floor: QuantSpec,
        ceil: QuantSpec,
    ) -> Result<NodeId> {
        floor.validate()?;
        ceil.validate()?;
        self.wire(Op::InterpFakeQuant { floor, ceil }, vec![x, n])
    }

    pub fn set_labels(&mut self, id: NodeId, labels: Vec<usize>) {
        match &mut self.nodes[id.0].op {
            Op::SoftmaxCrossEntropy { labels: l } => *l = labels,
            other => panic!("set_labels on non-loss op {other:?}"),
        }
    }

    pub fn set_fake_quant_spec(&mut self, id: NodeId, spec: QuantSpec) {
        match &mut self.nodes[id.0].op {
            Op::FakeQuant { spec: s } => *s = spec,
            other => panic!("set_fake_quant_spec on {other:?}"),
        }
    }

    pub fn set_interp_specs(&mut self, id: NodeId, floor: QuantSpec, ceil: QuantSpec) {
        match &mut self.nodes[id.0].op {
            Op::InterpFakeQuant { floor: f, ceil: c } => {
                *f = floor;
                *c = ceil;
            }
            other => panic!("set_interp_specs on {other:?}"),
        }
    }

    pub fn act_observer(&self, id: NodeId) -> &ActObserver {
        match &self.nodes[id.0].op {
            Op::ActQuant { observer } => observer,
            other => panic!("act_observer on {other:?}"),
        }
    }

    pub fn act_observer_mut(&mut self, id: NodeId) -> &mut ActObserver {
        match &mut self.nodes[id.0].op {
            Op::ActQuant { observer } => observer,
            other => panic!("act_observer_mut on {other:?}"),
        }
    }

    pub fn proto_accuracy(&self, id: NodeId) -> f64 {
        match &self.nodes[id.0].op {
            Op::PrototypicalLoss { last_accuracy, .. } => *last_accuracy,
            other => panic!("proto_accuracy on {other:?}"),
        }
    }

    /// Re-execute every non-leaf node in topological order.
    pub fn forward(&mut self) -> Result<()> {
        self.forward_to(NodeId(self.nodes.len().saturating_sub(1)))
    }

    /// Re-execute nodes up to and including `limit`; later nodes (e.g. a
    /// loss head with stale labels) are left untouched.
    pub fn forward_to(&mut self, limit: NodeId) -> Result<()> {
        for i in 0..=limit.0.min(self.nodes.len().saturating_sub(1)) {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            self.exec_node(i)?;
        }
        Ok(())
    }

    /// Reverse pass from a single-element loss. Visits each node exactly once
    /// in reverse topological order and populates the grad of every node on a
    /// path from a trainable leaf to the loss.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        self.nodes[loss.0].value.grad_or_init()[0] = 1.0;

        for i in (0..=loss.0).rev() {
            let skip = matches!(self.nodes[i].op, Op::Leaf)
                || self.nodes[i].value.grad().is_none()
                || !self.nodes[i].needs_grad;
            if skip {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let refs: Vec<&Tensor> = node.inputs.iter().map(|&id| &before[id.0].value).collect();
            let upstream = node.value.grad().expect("checked above");
            let grads = backprop(&node.op, &refs, &node.value, upstream)?;
            debug_assert_eq!(grads.len(), node.inputs.len());
            for (input, grad) in node.inputs.clone().iter().zip(grads) {
                let Some(grad) = grad else { continue };
                if !before[input.0].needs_grad {
                    continue;
                }
                let buf = before[input.0].value.grad_or_init();
                for (b, &g) in buf.iter_mut().zip(grad.data()) {
                    *b += g;
                }
            }
        }
        Ok(())
    }
}

fn exec(op: &mut Op, inputs: &[&Tensor], observing: bool) -> Result<Tensor> {
    match op {
        Op::Leaf => unreachable!("leaves are never executed"),
        Op::Conv2d(params) => ops::conv2d(inputs[0], inputs[1], *params),
        Op::Dense => ops::dense(inputs[0], inputs[1], inputs[2]),
        Op::Relu => Ok(ops::relu(inputs[0])),
        Op::SpatialMeanPool => ops::spatial_mean_pool(inputs[0]),
        Op::TimeMeanPool => ops::time_mean_pool(inputs[0]),
        Op::FreqMeanToSeq => ops::freq_mean_to_seq(inputs[0]),
        Op::Recurrent => ops::recurrent(inputs[0], inputs[1], inputs[2], inputs[3]),
        Op::SoftmaxCrossEntropy { labels } => ops::softmax_cross_entropy(inputs[0], labels),
        Op::PrototypicalLoss {
            shape,
            last_accuracy,
        } => {
            let (loss, acc) = ops::prototypical_loss(inputs[0], *shape)?;
            *last_accuracy = acc;
            Ok(loss)
        }
        Op::FakeQuant { spec } => Ok(quant::fake_quant(inputs[0], spec)),
        Op::ActQuant { observer } => {
            if observing {
                observer.running_max = observer.running_max.max(inputs[0].max_abs());
            }
            Ok(quant::fake_quant(inputs[0], &observer.spec()))
        }
        Op::InterpFakeQuant { floor, ceil } => {
            let n = inputs[1].scalar_value();
            interp_in_bracket(inputs[0], n, floor, ceil)
        }
    }
}

/// Interpolated fake-quant used inside the graph: blend weights come from the
/// spec bitwidths so an integral n at the edge of its bracket takes the
/// correct one-sided limit (n = 8.0 in bracket (7, 8) yields f_8 exactly).
fn interp_in_bracket(x: &Tensor, n: f64, floor: &QuantSpec, ceil: &QuantSpec) -> Result<Tensor> {
    if floor.bitwidth == ceil.bitwidth {
        return nas::interp_fake_quant(x, n, floor, ceil);
    }
    let lo = floor.bitwidth as f64;
    let hi = ceil.bitwidth as f64;
    if !(lo..=hi).contains(&n) || hi - lo != 1.0 {
        return Err(Error::BracketMismatch {
            floor_bits: floor.bitwidth,
            ceil_bits: ceil.bitwidth,
            n_frac: n,
        });
    }
    let w_hi = n - lo;
    let w_lo = hi - n;
    let lo_q = quant::fake_quant(x, floor);
    let hi_q = quant::fake_quant(x, ceil);
    let mut out = lo_q;
    for (o, &h) in out.data_mut().iter_mut().zip(hi_q.data()) {
        *o = w_lo * *o + w_hi * h;
    }
    Ok(out)
}

fn backprop(
    op: &Op,
    inputs: &[&Tensor],
    output: &Tensor,
    upstream: &[f64],
) -> Result<Vec<Option<Tensor>>> {
    match op {
        Op::Leaf => unreachable!(),
        Op::Conv2d(params) => {
            let (gx, gw) = ops::conv2d_backward(inputs[0], inputs[1], *params, upstream)?;
            Ok(vec![Some(gx), Some(gw)])
        }
        Op::Dense => {
            let (gx, gw, gb) = ops::dense_backward(inputs[0], inputs[1], upstream);
            Ok(vec![Some(gx), Some(gw), Some(gb)])
        }
        Op::Relu => Ok(vec![Some(ops::relu_backward(inputs[0], upstream))]),
        Op::SpatialMeanPool => Ok(vec![Some(ops::spatial_mean_pool_backward(
            inputs[0].shape(),
            upstream,
        ))]),
        Op::TimeMeanPool => Ok(vec![Some(ops::time_mean_pool_backward(
            inputs[0].shape(),
            upstream,
        ))]),
        Op::FreqMeanToSeq => Ok(vec![Some(ops::freq_mean_to_seq_backward(
            inputs[0].shape(),
            upstream,
        ))]),
        Op::Recurrent => {
            let (gx, gwi, gwr, gb) =
                ops::recurrent_backward(inputs[0], inputs[1], inputs[2], output, upstream);
            Ok(vec![Some(gx), Some(gwi), Some(gwr), Some(gb)])
        }
        Op::SoftmaxCrossEntropy { labels } => {
            let gx = ops::softmax_cross_entropy_backward(inputs[0], labels, upstream[0])?;
            Ok(vec![Some(gx)])
        }
        Op::PrototypicalLoss { shape, .. } => {
            let gx = ops::prototypical_loss_backward(inputs[0], *shape, upstream[0])?;
            Ok(vec![Some(gx)])
        }
        Op::FakeQuant { spec } => {
            let g = quant::ste_grad(upstream, inputs[0], spec);
            Ok(vec![Some(Tensor::from_vec(inputs[0].shape(), g)?)])
        }
        Op::ActQuant { observer } => {
            let g = quant::ste_grad(upstream, inputs[0], &observer.spec());
            Ok(vec![Some(Tensor::from_vec(inputs[0].shape(), g)?)])
        }
        Op::InterpFakeQuant { floor, ceil } => {
            let n = inputs[1].scalar_value();
            let (w_lo, w_hi) = if floor.bitwidth == ceil.bitwidth {
                (1.0, 0.0)
            } else {
                (ceil.bitwidth as f64 - n, n - floor.bitwidth as f64)
            };
            let g_lo = quant::ste_grad(upstream, inputs[0], floor);
            let g_hi = quant::ste_grad(upstream, inputs[0], ceil);
            let gx: Vec<f64> = g_lo
                .iter()
                .zip(&g_hi)
                .map(|(&a, &b)| w_lo * a + w_hi * b)
                .collect();
            let gn = nas::bitwidth_grad(upstream, inputs[0], floor, ceil);
            Ok(vec![
                Some(Tensor::from_vec(inputs[0].shape(), gx)?),
                Some(Tensor::scalar(gn)),
            ])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::calibrate_scale;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grad_of_sum_is_ones() {
        // sum(w) expressed as ones . w; d/dw = 1.
        let mut g = Graph::new();
        let ones = g.input(Tensor::from_vec(&[1, 4], vec![1.0; 4]).unwrap());
        let w = g.param(Tensor::from_vec(&[4, 1], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let b = g.input(Tensor::zeros(&[1]));
        let y = g.dense(ones, w, b).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_square_sum_is_two_w() {
        // sum(w ∘ w) via conv2d(w, w) with no padding: the same node feeds
        // both slots, so backward accumulates x-grad + w-grad = 2w.
        let mut g = Graph::new();
        let vals: Vec<f64> = vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.5, 0.25, 1.0, -2.0];
        let w = g.param(Tensor::from_vec(&[1, 1, 3, 3], vals.clone()).unwrap());
        let y = g
            .conv2d(
                w,
                w,
                ConvParams {
                    stride: 1,
                    dilation: 1,
                    padding: 0,
                },
            )
            .unwrap();
        let want_sum: f64 = vals.iter().map(|v| v * v).sum();
        assert!((g.value(y).data()[0] - want_sum).abs() < 1e-12);
        g.backward(y).unwrap();
        for (gv, v) in g.grad(w).unwrap().iter().zip(&vals) {
            assert!((gv - 2.0 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 2]));
        let w = g.param(Tensor::zeros(&[2, 2]));
        let b = g.input(Tensor::zeros(&[2]));
        let y = g.dense(x, w, b).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut g = Graph::new();
            let x = g.input(
                Tensor::from_vec(
                    &[2, 1, 4, 4],
                    (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
                .unwrap(),
            );
            let w = g.param(
                Tensor::from_vec(
                    &[3, 1, 3, 3],
                    (0..27).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
                .unwrap(),
            );
            let c = g.conv2d(x, w, ConvParams::unit()).unwrap();
            let r = g.relu(c).unwrap();
            let p = g.spatial_mean_pool(r).unwrap();
            let wd = g.param(
                Tensor::from_vec(&[3, 2], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .unwrap(),
            );
            let b = g.param(Tensor::zeros(&[2]));
            let logits = g.dense(p, wd, b).unwrap();
            let loss = g.softmax_cross_entropy(logits, vec![0, 1]).unwrap();
            g.forward().unwrap();
            g.backward(loss).unwrap();
            (
                g.grad(w).unwrap().to_vec(),
                g.grad(wd).unwrap().to_vec(),
                g.value(loss).scalar_value(),
            )
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn act_quant_observes_only_in_training_mode() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[2], vec![0.5, -2.0]).unwrap());
        let q = g.act_quant(x, ActObserver::new()).unwrap();
        assert_eq!(g.act_observer(q).running_max, 0.0);
        g.observing = true;
        g.forward().unwrap();
        assert_eq!(g.act_observer(q).running_max, 2.0);
        g.observing = false;
        g.set_value(x, &Tensor::from_vec(&[2], vec![5.0, 0.0]).unwrap());
        g.forward().unwrap();
        assert_eq!(g.act_observer(q).running_max, 2.0); // unchanged in eval
    }

    #[test]
    fn interp_node_routes_gradients_to_x_and_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = Tensor::from_vec(&[8, 1], data).unwrap();
        let floor = QuantSpec {
            bitwidth: 4,
            scale: calibrate_scale(&t, 4, None).unwrap(),
        };
        let ceil = QuantSpec {
            bitwidth: 5,
            scale: calibrate_scale(&t, 5, None).unwrap(),
        };
        let mut g = Graph::new();
        let w = g.param(t);
        let n = g.param(Tensor::scalar(4.3));
        let q = g.interp_fake_quant(w, n, floor, ceil).unwrap();
        let ones = g.input(Tensor::from_vec(&[1, 8], vec![1.0; 8]).unwrap());
        let b = g.input(Tensor::zeros(&[1]));
        // y = ones . q(w): scalar; dy/dn = sum(f_ceil - f_floor).
        let qt = {
            // dense wants [N,F] x [F,G]; q is [8,1] which is already [F,G].
            g.dense(ones, q, b).unwrap()
        };
        g.forward().unwrap();
        g.backward(qt).unwrap();
        assert!(g.grad(w).is_some());
        let gn = g.grad(n).unwrap()[0];
        assert!(gn.is_finite());
        // All-ones upstream means gn should equal sum(f5(w) - f4(w)).
        let x = g.value(w);
        let want: f64 = {
            let f4 = quant::fake_quant(x, &g_spec(&g, q, true));
            let f5 = quant::fake_quant(x, &g_spec(&g, q, false));
            f5.data().iter().zip(f4.data()).map(|(a, b)| a - b).sum()
        };
        assert!((gn - want).abs() < 1e-12);
    }

    fn g_spec(g: &Graph, id: NodeId, floor: bool) -> QuantSpec {
        match &g.nodes[id.0].op {
            Op::InterpFakeQuant { floor: f, ceil: c } => {
                if floor {
                    f.clone()
                } else {
                    c.clone()
                }
            }
            _ => panic!(),
        }
    }
}

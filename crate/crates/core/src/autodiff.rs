//! Reverse-mode differentiation over the training graph.
//!
//! The graph is recorded eagerly on a [`Tape`]: every operation runs
//! immediately and stores its output, so recording doubles as the
//! forward pass. The op vocabulary is exactly what training needs —
//! convolution layers (referencing shared [`Params`]), bilinear
//! warping, the two-way quality softmax, feature blending, and a
//! detection loss whose local gradient is computed up front.
//!
//! `backward` walks the nodes once in reverse creation order (creation
//! order is a topological order, since inputs must exist before use),
//! accumulating parameter gradients into a [`ParamGrads`] mirror of
//! the trainable values. A tape can only run backward once; graphs are
//! cheap to rebuild and single-use tapes keep saved activations alive
//! exactly as long as needed.
//!
//! Everything is single-threaded and order-stable, so gradients are
//! bit-for-bit reproducible.

use crate::error::{Error, Result};
use crate::fusion::{adaptive_weights, adaptive_weights_backward, fuse, fuse_backward};
use crate::nets::{apply_nonlin, NetId, Nonlin, Params};
use crate::tensor::{axpy, conv2d_backward, Tensor};
use crate::warp::{bilinear_warp, bilinear_warp_backward};

/// Handle to a node on a [`Tape`].
pub type NodeId = usize;

enum Op {
    /// Constant leaf (an image or precomputed field); no gradient.
    Input,
    /// One convolution layer of `params`, including its nonlinearity.
    Conv { net: NetId, index: usize, input: NodeId },
    /// Bilinear warp + rescale of `feature` along `flow`.
    Warp { feature: NodeId, flow: NodeId, scale: NodeId },
    /// Two-way softmax of quality logits; the node value is the weight
    /// of the *new* candidate.
    PairSoftmax { q_old: NodeId, q_new: NodeId },
    /// Convex blend of two feature maps by a weight map.
    Fuse { f_old: NodeId, f_new: NodeId, w: NodeId },
    /// Scalar loss; `grad` holds `d loss / d grid`, computed at
    /// recording time by the loss function.
    Loss { grid: NodeId, grad: Tensor },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradient of the loss with respect to one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub net: NetId,
    pub index: usize,
    /// Same layout as the layer's kernel bank.
    pub weights: Vec<f64>,
    /// Always sized like the bias; zero for fixed biases.
    pub bias: Vec<f64>,
}

/// Gradients for every layer, in the canonical `Params::layers` order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    layers: Vec<LayerGrads>,
}

impl ParamGrads {
    pub fn zeros(params: &Params) -> Self {
        let layers = params
            .layers()
            .map(|(net, index, layer)| LayerGrads {
                net,
                index,
                weights: vec![0.0; layer.bank.weights().len()],
                bias: vec![0.0; layer.bias.len()],
            })
            .collect();
        ParamGrads { layers }
    }

    pub fn layers(&self) -> &[LayerGrads] {
        &self.layers
    }

    fn layer_mut(&mut self, net: NetId, index: usize) -> &mut LayerGrads {
        self.layers
            .iter_mut()
            .find(|l| l.net == net && l.index == index)
            .expect("gradient mirror matches the parameter set")
    }

    pub fn layer(&self, net: NetId, index: usize) -> &LayerGrads {
        self.layers
            .iter()
            .find(|l| l.net == net && l.index == index)
            .expect("gradient mirror matches the parameter set")
    }

    /// Adds another gradient set elementwise (for mini-batches).
    pub fn accumulate(&mut self, other: &ParamGrads) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Shape {
                op: "accumulate",
                detail: "gradient sets come from different models".into(),
            });
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.weights.len() != b.weights.len() || a.bias.len() != b.bias.len() {
                return Err(Error::Shape {
                    op: "accumulate",
                    detail: "gradient sets come from different models".into(),
                });
            }
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            for v in &mut l.weights {
                *v *= factor;
            }
            for v in &mut l.bias {
                *v *= factor;
            }
        }
    }

    /// Scales only the gradients of one network. Lets the optimiser
    /// run a different effective learning rate for a small head whose
    /// gradients are orders of magnitude below the backbone's.
    pub fn scale_net(&mut self, net: NetId, factor: f64) {
        for l in &mut self.layers {
            if l.net != net {
                continue;
            }
            for v in &mut l.weights {
                *v *= factor;
            }
            for v in &mut l.bias {
                *v *= factor;
            }
        }
    }

    /// Euclidean norm over all entries; handy for logging and for
    /// verifying that gradients actually flow.
    pub fn l2_norm(&self) -> f64 {
        let mut sum = 0.0;
        for l in &self.layers {
            for v in &l.weights {
                sum += v * v;
            }
            for v in &l.bias {
                sum += v * v;
            }
        }
        sum.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite()))
    }
}

/// Eager tape over a fixed parameter set.
pub struct Tape<'p> {
    params: &'p Params,
    nodes: Vec<Node>,
    consumed: bool,
    min_relu_margin: f64,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p Params) -> Self {
        Tape { params, nodes: Vec::new(), consumed: false, min_relu_margin: f64::INFINITY }
    }

    /// Smallest |pre-activation| seen at any relu so far. Finite-difference
    /// checks use this to detect graphs sitting too close to a relu kink,
    /// where one-sided derivatives make the comparison meaningless.
    pub fn min_relu_margin(&self) -> f64 {
        self.min_relu_margin
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(Error::Config(format!("node {id} does not exist on this tape")));
        }
        Ok(())
    }

    /// Records a constant leaf.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value)
    }

    /// Value computed at a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Applies layer `index` of network `net`.
    pub fn conv_layer(&mut self, net: NetId, index: usize, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let layer = self.params.layer(net, index);
        let pre = layer.forward_pre(&self.nodes[input].value)?;
        if layer.nonlin == Nonlin::Relu {
            for &v in pre.data() {
                let margin = v.abs();
                if margin < self.min_relu_margin {
                    self.min_relu_margin = margin;
                }
            }
        }
        let value = apply_nonlin(&pre, layer.nonlin);
        Ok(self.push(Op::Conv { net, index, input }, value))
    }

    /// Applies a whole network stack.
    pub fn stack(&mut self, net: NetId, input: NodeId) -> Result<NodeId> {
        let mut id = input;
        for index in 0..self.params.net_len(net) {
            id = self.conv_layer(net, index, id)?;
        }
        Ok(id)
    }

    pub fn warp(&mut self, feature: NodeId, flow: NodeId, scale: NodeId) -> Result<NodeId> {
        for id in [feature, flow, scale] {
            self.check(id)?;
        }
        let value = bilinear_warp(
            &self.nodes[feature].value,
            &self.nodes[flow].value,
            &self.nodes[scale].value,
        )?;
        Ok(self.push(Op::Warp { feature, flow, scale }, value))
    }

    pub fn pair_softmax(&mut self, q_old: NodeId, q_new: NodeId) -> Result<NodeId> {
        self.check(q_old)?;
        self.check(q_new)?;
        let value = adaptive_weights(&self.nodes[q_old].value, &self.nodes[q_new].value)?;
        Ok(self.push(Op::PairSoftmax { q_old, q_new }, value))
    }

    pub fn fuse(&mut self, f_old: NodeId, f_new: NodeId, w: NodeId) -> Result<NodeId> {
        for id in [f_old, f_new, w] {
            self.check(id)?;
        }
        let value =
            fuse(&self.nodes[f_old].value, &self.nodes[f_new].value, &self.nodes[w].value)?;
        Ok(self.push(Op::Fuse { f_old, f_new, w }, value))
    }

    /// Records a scalar loss node. The caller supplies the loss value
    /// and its gradient with respect to the grid node's value (loss
    /// functions return both; see the training module).
    pub fn loss(&mut self, grid: NodeId, loss: f64, grad: Tensor) -> Result<NodeId> {
        self.check(grid)?;
        if grad.shape() != self.nodes[grid].value.shape() {
            return Err(Error::Shape {
                op: "loss",
                detail: format!(
                    "loss gradient {:?} does not match grid {:?}",
                    grad.shape(),
                    self.nodes[grid].value.shape()
                ),
            });
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite { stage: "loss".into() });
        }
        let value = Tensor::from_vec(1, 1, 1, vec![loss])?;
        Ok(self.push(Op::Loss { grid, grad }, value))
    }

    /// Runs reverse-mode accumulation from `root` (a loss node) back
    /// to the parameters. Consumes the tape's backward capability:
    /// calling it a second time is an error.
    pub fn backward(&mut self, root: NodeId) -> Result<ParamGrads> {
        self.check(root)?;
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        if !matches!(self.nodes[root].op, Op::Loss { .. }) {
            return Err(Error::Config("backward must start from a loss node".into()));
        }

        let mut grads = ParamGrads::zeros(self.params);
        let mut node_grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        node_grads[root] = Some(Tensor::constant(1, 1, 1, 1.0));

        // Reverse creation order is a reverse topological order.
        for id in (0..=root).rev() {
            let upstream = match node_grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Input => {}
                Op::Conv { net, index, input } => {
                    let layer = self.params.layer(*net, *index);
                    // Undo the nonlinearity using the stored output:
                    // relu keeps gradient exactly where output > 0.
                    let d_pre = match layer.nonlin {
                        Nonlin::Linear => upstream,
                        Nonlin::Relu => {
                            let out = &self.nodes[id].value;
                            let data = upstream
                                .data()
                                .iter()
                                .zip(out.data())
                                .map(|(&u, &o)| if o > 0.0 { u } else { 0.0 })
                                .collect();
                            Tensor::from_vec(out.channels(), out.height(), out.width(), data)?
                        }
                    };
                    let conv_grads =
                        conv2d_backward(&self.nodes[*input].value, &layer.bank, &d_pre)?;
                    let slot = grads.layer_mut(*net, *index);
                    for (a, b) in slot.weights.iter_mut().zip(&conv_grads.weights) {
                        *a += b;
                    }
                    if layer.train_bias {
                        for (a, b) in slot.bias.iter_mut().zip(&conv_grads.bias) {
                            *a += b;
                        }
                    }
                    accumulate_into(&mut node_grads[*input], conv_grads.input)?;
                }
                Op::Warp { feature, flow, scale } => {
                    let w = bilinear_warp_backward(
                        &self.nodes[*feature].value,
                        &self.nodes[*flow].value,
                        &self.nodes[*scale].value,
                        &upstream,
                    )?;
                    accumulate_into(&mut node_grads[*feature], w.feature)?;
                    accumulate_into(&mut node_grads[*flow], w.flow)?;
                    accumulate_into(&mut node_grads[*scale], w.scale)?;
                }
                Op::PairSoftmax { q_old, q_new } => {
                    let (d_old, d_new) =
                        adaptive_weights_backward(&self.nodes[id].value, &upstream)?;
                    accumulate_into(&mut node_grads[*q_old], d_old)?;
                    accumulate_into(&mut node_grads[*q_new], d_new)?;
                }
                Op::Fuse { f_old, f_new, w } => {
                    let (d_old, d_new, d_w) = fuse_backward(
                        &self.nodes[*f_old].value,
                        &self.nodes[*f_new].value,
                        &self.nodes[*w].value,
                        &upstream,
                    )?;
                    accumulate_into(&mut node_grads[*f_old], d_old)?;
                    accumulate_into(&mut node_grads[*f_new], d_new)?;
                    accumulate_into(&mut node_grads[*w], d_w)?;
                }
                Op::Loss { grid, grad } => {
                    // The upstream of a loss node is a scalar factor.
                    let factor = upstream.at(0, 0, 0);
                    let seeded = grad.map(|v| v * factor);
                    accumulate_into(&mut node_grads[*grid], seeded)?;
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate_into(slot: &mut Option<Tensor>, grad: Tensor) -> Result<()> {
    match slot {
        None => *slot = Some(grad),
        Some(existing) => *existing = axpy(1.0, &grad, existing)?,
    }
    Ok(())
}

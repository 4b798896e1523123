//! Operation tape for reverse-mode differentiation.

use super::ops::{self, BnContext};
use super::params::{ParamId, ParamStore};
use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
pub(crate) enum Rule {
    Leaf {
        param: Option<ParamId>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        ctx: BnContext,
    },
    Relu {
        x: Var,
    },
    Upsample2x {
        x: Var,
    },
    ChannelSoftmax {
        x: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    SliceChannels {
        x: Var,
        from: usize,
        to: usize,
    },
    Hadamard {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Sum {
        x: Var,
    },
    MaskedMse {
        pred: Var,
        target: Var,
        mask: Var,
    },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub value: Tensor,
    pub requires_grad: bool,
    pub rule: Rule,
}

/// Records a forward computation; owns every intermediate value.
///
/// A tape is confined to a single training step and a single thread. Nodes
/// are appended in topological order by construction, so the backward pass is
/// one reverse scan that visits each node once.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Number of recorded operations (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor, requires_grad: bool, rule: Rule) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            rule,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a value that does not participate in differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Rule::Leaf { param: None })
    }

    /// Record an input that should receive a gradient (not tied to a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, Rule::Leaf { param: None })
    }

    /// Record a parameter leaf; `backward` will accumulate into its store slot.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(
            store.value(id).clone(),
            true,
            Rule::Leaf { param: Some(id) },
        )
    }

    /// Record a parameter's current value without gradient flow back to it.
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.value(id).clone())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copy a value off the tape (no gradient connection).
    pub fn detach(&self, v: Var) -> Tensor {
        self.nodes[v.0].value.clone()
    }

    /// Gradient computed for `v` by the most recent `backward` call.
    ///
    /// Retained for leaves; interior node gradients are dropped as the
    /// reverse sweep consumes them.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn accumulate(&mut self, v: Var, contribution: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(buf) => {
                for (dst, src) in buf.iter_mut().zip(contribution) {
                    *dst += src;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    fn grad_buf(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.data().len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    /// Reverse sweep from a scalar loss. Accumulates into every parameter
    /// reachable from `loss`; unreachable parameter gradients are untouched.
    /// Calling `backward` again accumulates on top unless the store's
    /// gradients are cleared in between.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let loss_shape = self.shape(loss);
        if !loss_shape.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: loss_shape.dims(),
            });
        }
        self.grads.clear();
        self.grads.resize(self.nodes.len(), None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(()); // loss does not depend on anything differentiable
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let is_leaf = matches!(self.nodes[idx].rule, Rule::Leaf { .. });
            // Leaves keep their gradient (inspectable via `grad`); interior
            // gradients are consumed by the sweep.
            let gout = if is_leaf {
                match &self.grads[idx] {
                    Some(g) => g.clone(),
                    None => continue,
                }
            } else {
                match self.grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            self.backprop_node(idx, &gout, store);
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, gout: &[f64], store: &mut ParamStore) {
        // Rules hold only Copy metadata or contexts we can reference, so the
        // dispatch reads node data immutably and writes gradient buffers.
        match &self.nodes[idx].rule {
            Rule::Leaf { param } => {
                if let Some(id) = *param {
                    store.accumulate_grad(id, gout);
                }
            }
            &Rule::Conv2d { x, w, b, stride, pad } => {
                let (gx, gw, gb) = {
                    let xs = self.nodes[x.0].value.shape();
                    let ws = self.nodes[w.0].value.shape();
                    ops::conv2d_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        gout,
                        Shape::new(xs.n, ws.n, self.nodes[idx].value.shape().h, self.nodes[idx].value.shape().w),
                        stride,
                        pad,
                        self.nodes[x.0].requires_grad,
                        self.nodes[w.0].requires_grad,
                        self.nodes[b.0].requires_grad,
                    )
                };
                if let Some(gx) = gx {
                    self.accumulate(x, &gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(w, &gw);
                }
                if let Some(gb) = gb {
                    self.accumulate(b, &gb);
                }
            }
            Rule::BatchNorm { x, gamma, beta, ctx } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (gx, gg, gb) = {
                    let gamma_t = &self.nodes[gamma.0].value;
                    ops::batch_norm_backward(
                        self.nodes[x.0].value.shape(),
                        gamma_t,
                        ctx,
                        gout,
                        self.nodes[x.0].requires_grad,
                    )
                };
                if let Some(gx) = gx {
                    self.accumulate(x, &gx);
                }
                self.accumulate(gamma, &gg);
                self.accumulate(beta, &gb);
            }
            &Rule::Relu { x } => {
                let gx = ops::relu_backward(&self.nodes[x.0].value, gout);
                self.accumulate(x, &gx);
            }
            &Rule::Upsample2x { x } => {
                let gx = ops::upsample2x_backward(self.nodes[x.0].value.shape(), gout);
                self.accumulate(x, &gx);
            }
            &Rule::ChannelSoftmax { x } => {
                let gx = ops::channel_softmax_backward(&self.nodes[idx].value, gout);
                self.accumulate(x, &gx);
            }
            &Rule::ConcatChannels { a, b } => {
                let (ga, gb) = ops::concat_channels_backward(
                    self.nodes[a.0].value.shape(),
                    self.nodes[b.0].value.shape(),
                    gout,
                );
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
            &Rule::SliceChannels { x, from, to } => {
                let xs = self.nodes[x.0].value.shape();
                if let Some(buf) = self.grad_buf(x) {
                    ops::slice_channels_backward_into(xs, from, to, gout, buf);
                }
            }
            &Rule::Hadamard { a, b } => {
                let (ga, gb) = ops::hadamard_backward(
                    &self.nodes[a.0].value,
                    &self.nodes[b.0].value,
                    gout,
                    self.nodes[a.0].requires_grad,
                    self.nodes[b.0].requires_grad,
                );
                if let Some(ga) = ga {
                    self.accumulate(a, &ga);
                }
                if let Some(gb) = gb {
                    self.accumulate(b, &gb);
                }
            }
            &Rule::Add { a, b } => {
                self.accumulate(a, gout);
                self.accumulate(b, gout);
            }
            &Rule::Scale { x, factor } => {
                let gx: Vec<f64> = gout.iter().map(|g| g * factor).collect();
                self.accumulate(x, &gx);
            }
            &Rule::Sum { x } => {
                let g = gout[0];
                let len = self.nodes[x.0].value.data().len();
                self.accumulate(x, &vec![g; len]);
            }
            &Rule::MaskedMse { pred, target, mask } => {
                let gp = ops::masked_mse_backward(
                    &self.nodes[pred.0].value,
                    &self.nodes[target.0].value,
                    &self.nodes[mask.0].value,
                    gout[0],
                );
                self.accumulate(pred, &gp);
            }
        }
    }
}

//! Eager computation graph with reverse-mode replay.

use std::fmt;

use super::ops;
use super::{DType, Tensor};
use crate::error::{Error, Result};

/// Handle to a value inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// A differentiable primitive. Forward runs eagerly when the op is applied;
/// backward receives the upstream gradient and returns one gradient buffer
/// per input (`None` where `needs[i]` is false or the input is discrete).
pub trait Op: fmt::Debug {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;

    /// Multiply-accumulate count attributed to this application. Only dense
    /// linear-algebra ops (matmul, convolutions, scans) report nonzero costs;
    /// elementwise glue counts as zero.
    fn macs(&self, _inputs: &[&Tensor], _output: &Tensor) -> u64 {
        0
    }
}

struct Node {
    op: Option<Box<dyn Op>>,
    inputs: Vec<Var>,
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Topologically ordered record of primitive applications. Nodes are append
/// only, so every node's inputs precede it and one reverse sweep visits each
/// node exactly once.
pub struct Graph {
    nodes: Vec<Node>,
    macs: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            macs: 0,
        }
    }

    /// Insert a leaf value. Gradient participation follows
    /// `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad;
        self.nodes.push(Node {
            op: None,
            inputs: Vec::new(),
            value: tensor,
            grad: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Insert a leaf that never receives gradients.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn apply(&mut self, op: Box<dyn Op>, inputs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = op.forward(&vals)?;
        self.macs += op.macs(&vals, &value);
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op: Some(op),
            inputs: inputs.to_vec(),
            value,
            grad: None,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Total multiply-accumulates recorded since construction.
    pub fn mac_count(&self) -> u64 {
        self.macs
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate into any grads
    /// already present, so repeated calls add up unless [`Graph::zero_grads`]
    /// is called in between.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let loss_len = self.nodes[loss.0].value.len();
        accumulate(&mut self.nodes[loss.0].grad, &[1.0], loss_len);
        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].op.is_none()
                || self.nodes[i].grad.is_none()
                || !self.nodes[i].requires_grad
            {
                continue;
            }
            let (left, right) = self.nodes.split_at_mut(i);
            let node = &right[0];
            let grads_in = {
                let vals: Vec<&Tensor> = node.inputs.iter().map(|v| &left[v.0].value).collect();
                let needs: Vec<bool> = node.inputs.iter().map(|v| left[v.0].requires_grad).collect();
                node.op.as_ref().unwrap().backward(
                    &vals,
                    &node.value,
                    node.grad.as_ref().unwrap(),
                    &needs,
                )
            };
            debug_assert_eq!(grads_in.len(), node.inputs.len());
            for (k, g) in grads_in.into_iter().enumerate() {
                if let Some(g) = g {
                    let idx = node.inputs[k].0;
                    if left[idx].requires_grad {
                        let len = left[idx].value.len();
                        accumulate(&mut left[idx].grad, &g, len);
                    }
                }
            }
        }
        Ok(())
    }

    // ---- convenience constructors for the built-in primitives ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Box::new(ops::MatMul), &[a, b])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        self.apply(Box::new(ops::Conv2d { stride, pad, groups }), &[x, w])
    }

    pub fn conv1d_depthwise(&mut self, x: Var, w: Var) -> Result<Var> {
        self.apply(Box::new(ops::Conv1dDepthwise), &[x, w])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.apply(Box::new(ops::Unary(ops::UnaryKind::Silu)), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Box::new(ops::Unary(ops::UnaryKind::Exp)), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Box::new(ops::Unary(ops::UnaryKind::Log)), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.apply(Box::new(ops::Unary(ops::UnaryKind::Softplus)), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Box::new(ops::Binary(ops::BinaryKind::Add)), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Box::new(ops::Binary(ops::BinaryKind::Sub)), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Box::new(ops::Binary(ops::BinaryKind::Mul)), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Box::new(ops::Scale(c)), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Box::new(ops::Softmax { axis }), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.apply(Box::new(ops::LayerNorm { eps }), &[x, gamma, beta])
    }

    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.apply(Box::new(ops::ChannelNorm { eps }), &[x, gamma, beta])
    }

    /// Block average with kernel and stride `s`; dims must divide exactly.
    pub fn pool_avg(&mut self, x: Var, s: usize) -> Result<Var> {
        self.apply(Box::new(ops::PoolAvg { s, allow_partial: false }), &[x])
    }

    /// Block average with ceil semantics: trailing windows shrink instead of
    /// erroring. Coincides with [`Graph::pool_avg`] when dims divide.
    pub fn pool_avg_ceil(&mut self, x: Var, s: usize) -> Result<Var> {
        self.apply(Box::new(ops::PoolAvg { s, allow_partial: true }), &[x])
    }

    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.apply(Box::new(ops::UpsampleBilinear { out_h, out_w }), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Box::new(ops::SumAll), &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.apply(Box::new(ops::GlobalAvgPool), &[x])
    }

    pub fn add_bias2d(&mut self, x: Var, b: Var) -> Result<Var> {
        self.apply(Box::new(ops::AddBias2d), &[x, b])
    }

    pub fn add_bias_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.apply(Box::new(ops::AddBiasRow), &[x, b])
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        self.apply(Box::new(ops::Transpose2d), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(Box::new(ops::Reshape { shape }), &[x])
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        self.apply(Box::new(ops::ConcatChannels), xs)
    }

    pub fn cumsum(&mut self, x: Var) -> Result<Var> {
        self.apply(Box::new(ops::Cumsum), &[x])
    }

    pub fn bin_compose(&mut self, probs: Var, centers: Var) -> Result<Var> {
        self.apply(Box::new(ops::BinCompose), &[probs, centers])
    }

    pub fn clamp_min(&mut self, x: Var, min: f64) -> Result<Var> {
        self.apply(Box::new(ops::ClampMin { min }), &[x])
    }

    /// sqrt(max(x, 0)) with the gradient denominator floored at `eps` so a
    /// zero argument yields value 0 and a finite (zero) gradient.
    pub fn sqrt_guard(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.apply(Box::new(ops::SqrtGuard { eps }), &[x])
    }

    /// Elementwise natural log where `mask` is set, 0 elsewhere. Unmasked
    /// entries never touch `ln`, so invalid pixels cannot poison the result.
    pub fn log_masked(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        self.apply(Box::new(ops::LogMasked { mask }), &[x])
    }
}

pub(crate) fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64], len: usize) {
    debug_assert_eq!(g.len(), len);
    match slot {
        Some(buf) => {
            for (a, b) in buf.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => {
            *slot = Some(g.to_vec());
        }
    }
}

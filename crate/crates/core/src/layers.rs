//! Layer building blocks and the forward session.
//!
//! A [`Session`] binds a [`ParamSet`] into a fresh [`Graph`] for one forward
//! pass. Conv and linear applications route through the session so a single
//! dispatch point covers float execution, calibration recording, and the
//! quantized integer path.

use crate::error::Result;
use crate::params::{ParamId, ParamKind, ParamSet};
use crate::quant::{CalibRecorder, QuantConv2dOp, QuantLinearOp, QuantModel};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;

/// How a session executes conv/linear layers.
pub enum ExecMode<'q> {
    /// Leaves carry gradients; used by training and gradient checks.
    Train,
    /// Plain float forward, no gradients.
    Infer,
    /// Float forward that records activation ranges at layer boundaries.
    Calibrate,
    /// Integer path for layers present in the quantized model, float
    /// elsewhere.
    Quantized(&'q QuantModel),
}

pub struct Session<'m, 'q> {
    pub graph: Graph,
    mode: ExecMode<'q>,
    pub recorder: CalibRecorder,
    vars: Vec<Var>,
    dtype: crate::tensor::DType,
    params: std::marker::PhantomData<&'m ParamSet>,
}

impl<'m, 'q> Session<'m, 'q> {
    pub fn new(params: &'m ParamSet, mode: ExecMode<'q>) -> Self {
        Self::from_graph(params, mode, Graph::new())
    }

    /// Bind parameters into an existing graph (used when composing layer
    /// forwards with externally created leaves, e.g. gradient checks).
    pub fn from_graph(params: &'m ParamSet, mode: ExecMode<'q>, mut graph: Graph) -> Self {
        let train = matches!(mode, ExecMode::Train);
        let vars = params
            .entries()
            .iter()
            .map(|e| {
                let mut t = e.tensor.clone();
                t.requires_grad = train;
                graph.leaf(t)
            })
            .collect();
        Session {
            graph,
            mode,
            recorder: CalibRecorder::default(),
            vars,
            dtype: params.dtype(),
            params: std::marker::PhantomData,
        }
    }

    pub fn into_graph(self) -> Graph {
        self.graph
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Insert a non-parameter input. Only the dtype tag is coerced so the
    /// session type-checks; values are data, not weights, and stay exact.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        if t.dtype() == crate::tensor::DType::I8 {
            return Err(crate::error::Error::Param("i8 inputs are not dense tensors".into()));
        }
        let t = t.with_dtype_tag(self.dtype);
        Ok(self.graph.constant(t))
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.input(t)
    }

    fn conv2d_float(
        &mut self,
        w: ParamId,
        b: Option<ParamId>,
        x: Var,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let wv = self.var(w);
        let y = self.graph.conv2d(x, wv, stride, pad, groups)?;
        match b {
            Some(b) => {
                let bv = self.var(b);
                self.graph.add_bias2d(y, bv)
            }
            None => Ok(y),
        }
    }

    /// Conv layer dispatch: integer path when the layer is quantized,
    /// otherwise float (optionally recording calibration ranges).
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        name: &str,
        w: ParamId,
        b: Option<ParamId>,
        x: Var,
        stride: usize,
        pad: usize,
        groups: usize,
        act_quant: bool,
    ) -> Result<Var> {
        match &self.mode {
            ExecMode::Quantized(qm) => {
                if let Some(layer) = qm.layers.get(name) {
                    return self.graph.apply(
                        Box::new(QuantConv2dOp {
                            layer: layer.clone(),
                            stride,
                            pad,
                            groups,
                        }),
                        &[x],
                    );
                }
                self.conv2d_float(w, b, x, stride, pad, groups)
            }
            ExecMode::Calibrate if act_quant => {
                let x_data = self.graph.value(x).data().to_vec();
                let y = self.conv2d_float(w, b, x, stride, pad, groups)?;
                self.recorder.observe(&format!("aq.in.{name}"), &x_data);
                self.recorder
                    .observe(&format!("aq.out.{name}"), self.graph.value(y).data());
                Ok(y)
            }
            _ => self.conv2d_float(w, b, x, stride, pad, groups),
        }
    }

    fn linear_float(&mut self, w: ParamId, b: ParamId, x: Var) -> Result<Var> {
        let wv = self.var(w);
        let bv = self.var(b);
        let y = self.graph.matmul(x, wv)?;
        self.graph.add_bias_row(y, bv)
    }

    /// Linear layer dispatch over `L x D_in` token rows.
    pub fn linear(&mut self, name: &str, w: ParamId, b: ParamId, x: Var) -> Result<Var> {
        match &self.mode {
            ExecMode::Quantized(qm) => {
                if let Some(layer) = qm.layers.get(name) {
                    return self
                        .graph
                        .apply(Box::new(QuantLinearOp { layer: layer.clone() }), &[x]);
                }
                self.linear_float(w, b, x)
            }
            ExecMode::Calibrate => {
                let x_data = self.graph.value(x).data().to_vec();
                let y = self.linear_float(w, b, x)?;
                self.recorder.observe(&format!("aq.in.{name}"), &x_data);
                self.recorder
                    .observe(&format!("aq.out.{name}"), self.graph.value(y).data());
                Ok(y)
            }
            _ => self.linear_float(w, b, x),
        }
    }
}

fn kaiming_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// 2-D convolution layer; bias omitted when a normalization layer follows.
///
/// Norm-followed convs also skip activation quantization at inference: the
/// normalization re-centers per example, so an i8 activation grid's noise is
/// amplified by 1/sigma and wrecks small maps. Their weights still serialize
/// as i8; only execution stays float.
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub name: String,
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub act_quant: bool,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Self {
        Self::build(ps, rng, name, c_in, c_out, k, stride, pad, groups, true)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new_no_bias(
        ps: &mut ParamSet,
        rng: &mut Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Self {
        Self::build(ps, rng, name, c_in, c_out, k, stride, pad, groups, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        ps: &mut ParamSet,
        rng: &mut Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let fan_in = (c_in / groups) * k * k;
        let w = ps.add(
            format!("{name}.w"),
            kaiming_uniform(vec![c_out, c_in / groups, k, k], fan_in, rng),
            ParamKind::ConvWeight,
        );
        let b = bias
            .then(|| ps.add(format!("{name}.b"), Tensor::zeros(vec![c_out]), ParamKind::Bias));
        Conv2dLayer {
            name: name.to_string(),
            w,
            b,
            stride,
            pad,
            groups,
            c_in,
            c_out,
            k,
            act_quant: bias,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        s.conv2d(
            &self.name,
            self.w,
            self.b,
            x,
            self.stride,
            self.pad,
            self.groups,
            self.act_quant,
        )
    }

    pub fn weight_params(&self) -> usize {
        self.c_out * (self.c_in / self.groups) * self.k * self.k
            + if self.b.is_some() { self.c_out } else { 0 }
    }

    /// MACs for one application at the given output spatial size.
    pub fn macs(&self, out_h: usize, out_w: usize) -> u64 {
        (self.c_out * (self.c_in / self.groups) * self.k * self.k * out_h * out_w) as u64
    }
}

/// Dense layer over token rows; weight stored `D_in x D_out`.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub name: String,
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearLayer {
    pub fn new(ps: &mut ParamSet, rng: &mut Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            kaiming_uniform(vec![d_in, d_out], d_in, rng),
            ParamKind::LinearWeight,
        );
        let b = ps.add(format!("{name}.b"), Tensor::zeros(vec![d_out]), ParamKind::Bias);
        LinearLayer {
            name: name.to_string(),
            w,
            b,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        s.linear(&self.name, self.w, self.b, x)
    }

    pub fn weight_params(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }

    pub fn macs(&self, rows: usize) -> u64 {
        (rows * self.d_in * self.d_out) as u64
    }
}

/// Per-channel spatial normalization with affine parameters.
#[derive(Debug, Clone)]
pub struct ChannelNormLayer {
    pub g: ParamId,
    pub b: ParamId,
}

impl ChannelNormLayer {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize) -> Self {
        let g = ps.add(
            format!("{name}.g"),
            Tensor::full(vec![channels], 1.0),
            ParamKind::Norm,
        );
        let b = ps.add(format!("{name}.b"), Tensor::zeros(vec![channels]), ParamKind::Norm);
        ChannelNormLayer { g, b }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (g, b) = (s.var(self.g), s.var(self.b));
        s.graph.channel_norm(x, g, b, NORM_EPS)
    }
}

/// Token layer norm with affine parameters.
#[derive(Debug, Clone)]
pub struct LayerNormLayer {
    pub g: ParamId,
    pub b: ParamId,
}

impl LayerNormLayer {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        let g = ps.add(format!("{name}.g"), Tensor::full(vec![dim], 1.0), ParamKind::Norm);
        let b = ps.add(format!("{name}.b"), Tensor::zeros(vec![dim]), ParamKind::Norm);
        LayerNormLayer { g, b }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (g, b) = (s.var(self.g), s.var(self.b));
        s.graph.layer_norm(x, g, b, NORM_EPS)
    }
}

/// Three dense layers with SiLU between them, applied to a `1 x D` row.
#[derive(Debug, Clone)]
pub struct MlpHead {
    pub layers: Vec<LinearLayer>,
}

impl MlpHead {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut Rng,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
    ) -> Self {
        let layers = vec![
            LinearLayer::new(ps, rng, &format!("{name}.l0"), d_in, hidden),
            LinearLayer::new(ps, rng, &format!("{name}.l1"), hidden, hidden),
            LinearLayer::new(ps, rng, &format!("{name}.l2"), hidden, d_out),
        ];
        MlpHead { layers }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(s, h)?;
            if i + 1 < self.layers.len() {
                h = s.graph.silu(h)?;
            }
        }
        Ok(h)
    }

    pub fn weight_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight_params()).sum()
    }

    pub fn macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs(1)).sum()
    }
}

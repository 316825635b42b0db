//! Built-in differentiable primitives.

use super::graph::Op;
use super::{same_dtype, Tensor};
use crate::error::{Error, Result};

fn out_tensor(shape: Vec<usize>, data: Vec<f64>, dtype: super::DType) -> Tensor {
    Tensor::from_vec(shape, data)
        .expect("op produced inconsistent shape")
        .with_dtype_tag(dtype)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------- MatMul

#[derive(Debug)]
pub struct MatMul;

impl Op for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (a, b) = (inputs[0], inputs[1]);
        let dtype = same_dtype(a, b)?;
        if a.rank() != 2 || b.rank() != 2 {
            return Err(Error::Shape(format!(
                "matmul requires rank-2 tensors, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (m, k) = (a.dim(0), a.dim(1));
        let (k2, n) = (b.dim(0), b.dim(1));
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims differ: {}x{} vs {}x{}",
                m, k, k2, n
            )));
        }
        let (ad, bd) = (a.data(), b.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Ok(out_tensor(vec![m, n], out, dtype))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k) = (a.dim(0), a.dim(1));
        let n = b.dim(1);
        let da = needs[0].then(|| {
            // dA = g . B^T
            let mut da = vec![0.0; m * k];
            for i in 0..m {
                for j in 0..n {
                    let gv = grad[i * n + j];
                    if gv == 0.0 {
                        continue;
                    }
                    for p in 0..k {
                        da[i * k + p] += gv * b.data()[p * n + j];
                    }
                }
            }
            da
        });
        let db = needs[1].then(|| {
            // dB = A^T . g
            let mut db = vec![0.0; k * n];
            for i in 0..m {
                for p in 0..k {
                    let av = a.data()[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let grow = &grad[i * n..(i + 1) * n];
                    let drow = &mut db[p * n..(p + 1) * n];
                    for (d, gv) in drow.iter_mut().zip(grow) {
                        *d += av * gv;
                    }
                }
            }
            db
        });
        vec![da, db]
    }

    fn macs(&self, inputs: &[&Tensor], _output: &Tensor) -> u64 {
        let (m, k) = (inputs[0].dim(0), inputs[0].dim(1));
        let n = inputs[1].dim(1);
        (m * k * n) as u64
    }
}

// ---------------------------------------------------------------- Conv2d

/// Cross-correlation over a `C_in x H x W` map with a
/// `C_out x C_in/groups x k x k` kernel.
#[derive(Debug)]
pub struct Conv2d {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2d {
    fn geometry(&self, x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
        if x.rank() != 3 || w.rank() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects CxHxW input and OxIxKxK kernel, got {:?} and {:?}",
                x.shape(),
                w.shape()
            )));
        }
        let (ci, h, win) = (x.dim(0), x.dim(1), x.dim(2));
        let (co, cig, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        if kh != kw || kh < 1 {
            return Err(Error::Param(format!("conv2d kernel must be square and >= 1, got {kh}x{kw}")));
        }
        if self.groups == 0 || ci % self.groups != 0 || co % self.groups != 0 {
            return Err(Error::Shape(format!(
                "conv2d groups {} must divide C_in {} and C_out {}",
                self.groups, ci, co
            )));
        }
        if cig != ci / self.groups {
            return Err(Error::Shape(format!(
                "conv2d kernel expects {} input channels per group, input has {}",
                cig,
                ci / self.groups
            )));
        }
        if self.stride == 0 {
            return Err(Error::Param("conv2d stride must be >= 1".into()));
        }
        // Floor convention: H' = floor((H + 2 pad - k) / stride) + 1. A
        // window must fit at least once or the output size is not a positive
        // integer.
        let k = kh;
        let span_h = h + 2 * self.pad;
        let span_w = win + 2 * self.pad;
        if span_h < k || span_w < k {
            return Err(Error::Shape(format!(
                "conv2d output size not integral for input {}x{}, k={}, stride={}, pad={}",
                h, win, k, self.stride, self.pad
            )));
        }
        let ho = (span_h - k) / self.stride + 1;
        let wo = (span_w - k) / self.stride + 1;
        Ok((ci, h, win, co, k, ho, wo))
    }
}

impl Op for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, w) = (inputs[0], inputs[1]);
        let dtype = same_dtype(x, w)?;
        let (ci, h, win, co, k, ho, wo) = self.geometry(x, w)?;
        let cig = ci / self.groups;
        let cog = co / self.groups;
        let xd = x.data();
        let wd = w.data();
        let mut out = vec![0.0; co * ho * wo];
        for oc in 0..co {
            let g = oc / cog;
            for icg in 0..cig {
                let ic = g * cig + icg;
                let xplane = &xd[ic * h * win..(ic + 1) * h * win];
                let wbase = ((oc * cig) + icg) * k * k;
                for kh in 0..k {
                    for kwi in 0..k {
                        let wv = wd[wbase + kh * k + kwi];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = (oy * self.stride + kh) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xplane[iy as usize * win..(iy as usize + 1) * win];
                            let orow = &mut out[(oc * ho + oy) * wo..(oc * ho + oy + 1) * wo];
                            for (ox, o) in orow.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kwi) as isize - self.pad as isize;
                                if ix >= 0 && ix < win as isize {
                                    *o += wv * xrow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out_tensor(vec![co, ho, wo], out, dtype))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (ci, h, win, co, k, ho, wo) = self.geometry(x, w).expect("validated in forward");
        let cig = ci / self.groups;
        let cog = co / self.groups;
        let xd = x.data();
        let wd = w.data();
        let mut dx = needs[0].then(|| vec![0.0; xd.len()]);
        let mut dw = needs[1].then(|| vec![0.0; wd.len()]);
        for oc in 0..co {
            let g = oc / cog;
            for icg in 0..cig {
                let ic = g * cig + icg;
                let wbase = ((oc * cig) + icg) * k * k;
                for kh in 0..k {
                    for kwi in 0..k {
                        let wv = wd[wbase + kh * k + kwi];
                        let mut wg = 0.0;
                        for oy in 0..ho {
                            let iy = (oy * self.stride + kh) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let grow = &grad[(oc * ho + oy) * wo..(oc * ho + oy + 1) * wo];
                            let rowbase = (ic * h + iy as usize) * win;
                            for (ox, gv) in grow.iter().enumerate() {
                                if *gv == 0.0 {
                                    continue;
                                }
                                let ix = (ox * self.stride + kwi) as isize - self.pad as isize;
                                if ix < 0 || ix >= win as isize {
                                    continue;
                                }
                                let xi = rowbase + ix as usize;
                                if let Some(dx) = dx.as_mut() {
                                    dx[xi] += wv * gv;
                                }
                                wg += xd[xi] * gv;
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[wbase + kh * k + kwi] += wg;
                        }
                    }
                }
            }
        }
        vec![dx, dw]
    }

    fn macs(&self, inputs: &[&Tensor], output: &Tensor) -> u64 {
        let w = inputs[1];
        let per_out = w.dim(1) * w.dim(2) * w.dim(3);
        (output.len() * per_out) as u64
    }
}

// ------------------------------------------------------- Conv1dDepthwise

/// Causal per-channel 1-D convolution along the token axis. Input `L x D`,
/// kernel `D x k`; the sequence is left-padded with k-1 zeros so position t
/// sees only positions <= t and the length is preserved.
#[derive(Debug)]
pub struct Conv1dDepthwise;

impl Op for Conv1dDepthwise {
    fn name(&self) -> &'static str {
        "conv1d_depthwise"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, w) = (inputs[0], inputs[1]);
        let dtype = same_dtype(x, w)?;
        if x.rank() != 2 || w.rank() != 2 {
            return Err(Error::Shape(format!(
                "conv1d_depthwise expects LxD tokens and Dxk kernel, got {:?} and {:?}",
                x.shape(),
                w.shape()
            )));
        }
        let (l, d) = (x.dim(0), x.dim(1));
        let (dw, k) = (w.dim(0), w.dim(1));
        if dw != d {
            return Err(Error::Shape(format!(
                "conv1d_depthwise channel mismatch: tokens have {d}, kernel has {dw}"
            )));
        }
        if k < 1 {
            return Err(Error::Param("conv1d_depthwise kernel must have k >= 1".into()));
        }
        let xd = x.data();
        let wd = w.data();
        let mut out = vec![0.0; l * d];
        for t in 0..l {
            for c in 0..d {
                let mut acc = 0.0;
                for j in 0..k {
                    let src = t as isize + j as isize - (k as isize - 1);
                    if src >= 0 {
                        acc += wd[c * k + j] * xd[src as usize * d + c];
                    }
                }
                out[t * d + c] = acc;
            }
        }
        Ok(out_tensor(vec![l, d], out, dtype))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (l, d) = (x.dim(0), x.dim(1));
        let k = w.dim(1);
        let mut dx = needs[0].then(|| vec![0.0; l * d]);
        let mut dw = needs[1].then(|| vec![0.0; d * k]);
        for t in 0..l {
            for c in 0..d {
                let gv = grad[t * d + c];
                if gv == 0.0 {
                    continue;
                }
                for j in 0..k {
                    let src = t as isize + j as isize - (k as isize - 1);
                    if src >= 0 {
                        let si = src as usize * d + c;
                        if let Some(dx) = dx.as_mut() {
                            dx[si] += w.data()[c * k + j] * gv;
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[c * k + j] += x.data()[si] * gv;
                        }
                    }
                }
            }
        }
        vec![dx, dw]
    }

    fn macs(&self, inputs: &[&Tensor], _output: &Tensor) -> u64 {
        let (l, d) = (inputs[0].dim(0), inputs[0].dim(1));
        (l * d * inputs[1].dim(1)) as u64
    }
}

// ------------------------------------------------------------ elementwise

#[derive(Debug, Clone, Copy)]
pub enum UnaryKind {
    Silu,
    Exp,
    Log,
    Softplus,
}

#[derive(Debug)]
pub struct Unary(pub UnaryKind);

impl Op for Unary {
    fn name(&self) -> &'static str {
        match self.0 {
            UnaryKind::Silu => "silu",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Softplus => "softplus",
        }
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let mut out = Vec::with_capacity(x.len());
        for &v in x.data() {
            out.push(match self.0 {
                UnaryKind::Silu => v * sigmoid(v),
                UnaryKind::Exp => v.exp(),
                UnaryKind::Log => {
                    if v <= 0.0 {
                        return Err(Error::Domain(format!("log of non-positive value {v}")));
                    }
                    v.ln()
                }
                UnaryKind::Softplus => {
                    if v > 30.0 {
                        v
                    } else {
                        v.exp().ln_1p()
                    }
                }
            });
        }
        Ok(out_tensor(x.shape().to_vec(), out, x.dtype()))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let x = inputs[0].data();
        let y = output.data();
        let dx = grad
            .iter()
            .enumerate()
            .map(|(i, g)| {
                g * match self.0 {
                    UnaryKind::Silu => {
                        let s = sigmoid(x[i]);
                        s * (1.0 + x[i] * (1.0 - s))
                    }
                    UnaryKind::Exp => y[i],
                    UnaryKind::Log => 1.0 / x[i],
                    UnaryKind::Softplus => sigmoid(x[i]),
                }
            })
            .collect();
        vec![Some(dx)]
    }
}

#[derive(Debug, Clone, Copy)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Elementwise binary op. Shapes must match exactly; the only broadcast is
/// a single-element tensor against any shape.
#[derive(Debug)]
pub struct Binary(pub BinaryKind);

fn scalar_broadcast(a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if a.len() == 1 {
        Ok(b.shape().to_vec())
    } else if b.len() == 1 {
        Ok(a.shape().to_vec())
    } else {
        Err(Error::Shape(format!(
            "elementwise shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

impl Op for Binary {
    fn name(&self) -> &'static str {
        match self.0 {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (a, b) = (inputs[0], inputs[1]);
        let dtype = same_dtype(a, b)?;
        let shape = scalar_broadcast(a, b)?;
        let n: usize = shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let av = ad[if ad.len() == 1 { 0 } else { i }];
            let bv = bd[if bd.len() == 1 { 0 } else { i }];
            out.push(match self.0 {
                BinaryKind::Add => av + bv,
                BinaryKind::Sub => av - bv,
                BinaryKind::Mul => av * bv,
            });
        }
        Ok(out_tensor(shape, out, dtype))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let reduce = |full: Vec<f64>, len: usize| -> Vec<f64> {
            if len == full.len() {
                full
            } else {
                vec![full.iter().sum()]
            }
        };
        let da = needs[0].then(|| {
            let full: Vec<f64> = match self.0 {
                BinaryKind::Add | BinaryKind::Sub => grad.to_vec(),
                BinaryKind::Mul => grad
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * b.data()[if b.len() == 1 { 0 } else { i }])
                    .collect(),
            };
            reduce(full, a.len())
        });
        let db = needs[1].then(|| {
            let full: Vec<f64> = match self.0 {
                BinaryKind::Add => grad.to_vec(),
                BinaryKind::Sub => grad.iter().map(|g| -g).collect(),
                BinaryKind::Mul => grad
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * a.data()[if a.len() == 1 { 0 } else { i }])
                    .collect(),
            };
            reduce(full, b.len())
        });
        vec![da, db]
    }
}

/// Multiply by a compile-time constant scalar.
#[derive(Debug)]
pub struct Scale(pub f64);

impl Op for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let out = x.data().iter().map(|v| v * self.0).collect();
        Ok(out_tensor(x.shape().to_vec(), out, x.dtype()))
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        vec![needs[0].then(|| grad.iter().map(|g| g * self.0).collect())]
    }
}

// ---------------------------------------------------------------- Softmax

#[derive(Debug)]
pub struct Softmax {
    pub axis: usize,
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Op for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if self.axis >= x.rank() {
            return Err(Error::Param(format!(
                "softmax axis {} out of range for rank {}",
                self.axis,
                x.rank()
            )));
        }
        let (outer, n, inner) = axis_split(x.shape(), self.axis);
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * n + a) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for a in 0..n {
                    mx = mx.max(xd[at(a)]);
                }
                let mut denom = 0.0;
                for a in 0..n {
                    let e = (xd[at(a)] - mx).exp();
                    out[at(a)] = e;
                    denom += e;
                }
                for a in 0..n {
                    out[at(a)] /= denom;
                }
            }
        }
        Ok(out_tensor(x.shape().to_vec(), out, x.dtype()))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let (outer, n, inner) = axis_split(inputs[0].shape(), self.axis);
        let y = output.data();
        let mut dx = vec![0.0; y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * n + a) * inner + i;
                let mut dot = 0.0;
                for a in 0..n {
                    dot += grad[at(a)] * y[at(a)];
                }
                for a in 0..n {
                    dx[at(a)] = y[at(a)] * (grad[at(a)] - dot);
                }
            }
        }
        vec![Some(dx)]
    }
}

// ------------------------------------------------------------------ norms

/// Per-token normalization of `L x D` rows followed by an affine map with
/// `gamma, beta: [D]`.
#[derive(Debug)]
pub struct LayerNorm {
    pub eps: f64,
}

impl Op for LayerNorm {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
        let dtype = same_dtype(x, gamma)?;
        same_dtype(gamma, beta)?;
        if x.rank() != 2 {
            return Err(Error::Shape(format!("layer_norm expects LxD, got {:?}", x.shape())));
        }
        let (l, d) = (x.dim(0), x.dim(1));
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::Shape(format!(
                "layer_norm affine params must be [{d}], got {:?} and {:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        if self.eps <= 0.0 {
            return Err(Error::Param("layer_norm eps must be positive".into()));
        }
        let xd = x.data();
        let mut out = vec![0.0; l * d];
        for t in 0..l {
            let row = &xd[t * d..(t + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + self.eps).sqrt();
            for j in 0..d {
                out[t * d + j] = (row[j] - mean) * inv * gamma.data()[j] + beta.data()[j];
            }
        }
        Ok(out_tensor(vec![l, d], out, dtype))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (l, d) = (x.dim(0), x.dim(1));
        let xd = x.data();
        let gd = gamma.data();
        let mut dx = needs[0].then(|| vec![0.0; l * d]);
        let mut dgamma = needs[1].then(|| vec![0.0; d]);
        let mut dbeta = needs[2].then(|| vec![0.0; d]);
        let df = d as f64;
        let mut xhat = vec![0.0; d];
        let mut dxhat = vec![0.0; d];
        for t in 0..l {
            let row = &xd[t * d..(t + 1) * d];
            let grow = &grad[t * d..(t + 1) * d];
            let mean = row.iter().sum::<f64>() / df;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / df;
            let inv = 1.0 / (var + self.eps).sqrt();
            for j in 0..d {
                xhat[j] = (row[j] - mean) * inv;
                dxhat[j] = grow[j] * gd[j];
            }
            if let Some(dgamma) = dgamma.as_mut() {
                for j in 0..d {
                    dgamma[j] += grow[j] * xhat[j];
                }
            }
            if let Some(dbeta) = dbeta.as_mut() {
                for j in 0..d {
                    dbeta[j] += grow[j];
                }
            }
            if let Some(dx) = dx.as_mut() {
                let sum_dxhat: f64 = dxhat.iter().sum();
                let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    dx[t * d + j] =
                        inv / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                }
            }
        }
        vec![dx, dgamma, dbeta]
    }
}

/// Per-channel normalization of a `C x H x W` map over its spatial extent,
/// batch independent, followed by a per-channel affine map.
#[derive(Debug)]
pub struct ChannelNorm {
    pub eps: f64,
}

impl Op for ChannelNorm {
    fn name(&self) -> &'static str {
        "channel_norm"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
        let dtype = same_dtype(x, gamma)?;
        same_dtype(gamma, beta)?;
        if x.rank() != 3 {
            return Err(Error::Shape(format!("channel_norm expects CxHxW, got {:?}", x.shape())));
        }
        let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::Shape(format!(
                "channel_norm affine params must be [{c}], got {:?} and {:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let s = h * w;
        let sf = s as f64;
        let xd = x.data();
        let mut out = vec![0.0; c * s];
        for ch in 0..c {
            let block = &xd[ch * s..(ch + 1) * s];
            let mean = block.iter().sum::<f64>() / sf;
            let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / sf;
            let inv = 1.0 / (var + self.eps).sqrt();
            let (g, b) = (gamma.data()[ch], beta.data()[ch]);
            for (o, v) in out[ch * s..(ch + 1) * s].iter_mut().zip(block) {
                *o = (v - mean) * inv * g + b;
            }
        }
        Ok(out_tensor(vec![c, h, w], out, dtype))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
        let s = h * w;
        let sf = s as f64;
        let xd = x.data();
        let mut dx = needs[0].then(|| vec![0.0; c * s]);
        let mut dgamma = needs[1].then(|| vec![0.0; c]);
        let mut dbeta = needs[2].then(|| vec![0.0; c]);
        let mut xhat = vec![0.0; s];
        for ch in 0..c {
            let block = &xd[ch * s..(ch + 1) * s];
            let gblock = &grad[ch * s..(ch + 1) * s];
            let mean = block.iter().sum::<f64>() / sf;
            let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / sf;
            let inv = 1.0 / (var + self.eps).sqrt();
            for j in 0..s {
                xhat[j] = (block[j] - mean) * inv;
            }
            if let Some(dgamma) = dgamma.as_mut() {
                dgamma[ch] += gblock.iter().zip(&xhat).map(|(g, xh)| g * xh).sum::<f64>();
            }
            if let Some(dbeta) = dbeta.as_mut() {
                dbeta[ch] += gblock.iter().sum::<f64>();
            }
            if let Some(dx) = dx.as_mut() {
                let gm = gamma.data()[ch];
                let sum_dxhat: f64 = gblock.iter().map(|g| g * gm).sum();
                let sum_dxhat_xhat: f64 =
                    gblock.iter().zip(&xhat).map(|(g, xh)| g * gm * xh).sum();
                for j in 0..s {
                    let dxhat = gblock[j] * gm;
                    dx[ch * s + j] =
                        inv / sf * (sf * dxhat - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                }
            }
        }
        vec![dx, dgamma, dbeta]
    }
}

// ---------------------------------------------------------------- pooling

/// Block average over `s x s` windows with stride `s`. With `allow_partial`
/// the trailing windows are clipped to the map and averaged over their true
/// size; otherwise indivisible dims are a shape error.
#[derive(Debug)]
pub struct PoolAvg {
    pub s: usize,
    pub allow_partial: bool,
}

impl PoolAvg {
    fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.s == 0 {
            return Err(Error::Param("pool_avg kernel must be >= 1".into()));
        }
        if !self.allow_partial && (h % self.s != 0 || w % self.s != 0) {
            return Err(Error::Shape(format!(
                "pool_avg kernel {} does not divide {}x{}",
                self.s, h, w
            )));
        }
        Ok((h.div_ceil(self.s), w.div_ceil(self.s)))
    }
}

impl Op for PoolAvg {
    fn name(&self) -> &'static str {
        "pool_avg"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if x.rank() != 3 {
            return Err(Error::Shape(format!("pool_avg expects CxHxW, got {:?}", x.shape())));
        }
        let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
        let (ho, wo) = self.out_dims(h, w)?;
        let xd = x.data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                let y0 = oy * self.s;
                let y1 = (y0 + self.s).min(h);
                for ox in 0..wo {
                    let x0 = ox * self.s;
                    let x1 = (x0 + self.s).min(w);
                    let mut acc = 0.0;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            acc += xd[(ch * h + yy) * w + xx];
                        }
                    }
                    out[(ch * ho + oy) * wo + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        Ok(out_tensor(vec![c, ho, wo], out, x.dtype()))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let x = inputs[0];
        let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
        let (ho, wo) = (output.dim(1), output.dim(2));
        let mut dx = vec![0.0; x.len()];
        for ch in 0..c {
            for oy in 0..ho {
                let y0 = oy * self.s;
                let y1 = (y0 + self.s).min(h);
                for ox in 0..wo {
                    let x0 = ox * self.s;
                    let x1 = (x0 + self.s).min(w);
                    let share = grad[(ch * ho + oy) * wo + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            dx[(ch * h + yy) * w + xx] += share;
                        }
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Bilinear resize of a `C x H x W` map, align-corners false.
#[derive(Debug)]
pub struct UpsampleBilinear {
    pub out_h: usize,
    pub out_w: usize,
}

fn bilinear_taps(dst: usize, out_len: usize, src_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / out_len as f64;
    let pos = (dst as f64 + 0.5) * scale - 0.5;
    let pos = pos.clamp(0.0, (src_len - 1) as f64);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, pos - i0 as f64)
}

impl Op for UpsampleBilinear {
    fn name(&self) -> &'static str {
        "upsample_bilinear"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if x.rank() != 3 {
            return Err(Error::Shape(format!(
                "upsample_bilinear expects CxHxW, got {:?}",
                x.shape()
            )));
        }
        if self.out_h == 0 || self.out_w == 0 {
            return Err(Error::Param("upsample output dims must be >= 1".into()));
        }
        let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
        let xd = x.data();
        let mut out = vec![0.0; c * self.out_h * self.out_w];
        for oy in 0..self.out_h {
            let (y0, y1, fy) = bilinear_taps(oy, self.out_h, h);
            for ox in 0..self.out_w {
                let (x0, x1, fx) = bilinear_taps(ox, self.out_w, w);
                for ch in 0..c {
                    let p = ch * h * w;
                    let v = xd[p + y0 * w + x0] * (1.0 - fy) * (1.0 - fx)
                        + xd[p + y0 * w + x1] * (1.0 - fy) * fx
                        + xd[p + y1 * w + x0] * fy * (1.0 - fx)
                        + xd[p + y1 * w + x1] * fy * fx;
                    out[(ch * self.out_h + oy) * self.out_w + ox] = v;
                }
            }
        }
        Ok(out_tensor(vec![c, self.out_h, self.out_w], out, x.dtype()))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let x = inputs[0];
        let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
        let mut dx = vec![0.0; x.len()];
        for oy in 0..self.out_h {
            let (y0, y1, fy) = bilinear_taps(oy, self.out_h, h);
            for ox in 0..self.out_w {
                let (x0, x1, fx) = bilinear_taps(ox, self.out_w, w);
                for ch in 0..c {
                    let g = grad[(ch * self.out_h + oy) * self.out_w + ox];
                    if g == 0.0 {
                        continue;
                    }
                    let p = ch * h * w;
                    dx[p + y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                    dx[p + y0 * w + x1] += g * (1.0 - fy) * fx;
                    dx[p + y1 * w + x0] += g * fy * (1.0 - fx);
                    dx[p + y1 * w + x1] += g * fy * fx;
                }
            }
        }
        vec![Some(dx)]
    }
}

// -------------------------------------------------------------- reductions

#[derive(Debug)]
pub struct SumAll;

impl Op for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        Ok(out_tensor(vec![1], vec![x.data().iter().sum()], x.dtype()))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        vec![needs[0].then(|| vec![grad[0]; inputs[0].len()])]
    }
}

/// Spatial mean of a `C x H x W` map, producing a length-C vector.
#[derive(Debug)]
pub struct GlobalAvgPool;

impl Op for GlobalAvgPool {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if x.rank() != 3 {
            return Err(Error::Shape(format!(
                "global_avg_pool expects CxHxW, got {:?}",
                x.shape()
            )));
        }
        let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
        let s = (h * w) as f64;
        let out = (0..c)
            .map(|ch| x.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / s)
            .collect();
        Ok(out_tensor(vec![c], out, x.dtype()))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let x = inputs[0];
        let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
        let s = (h * w) as f64;
        let mut dx = vec![0.0; x.len()];
        for ch in 0..c {
            let share = grad[ch] / s;
            for v in &mut dx[ch * h * w..(ch + 1) * h * w] {
                *v = share;
            }
        }
        vec![Some(dx)]
    }
}

// ------------------------------------------------------------- bias + glue

/// `C x H x W` plus a per-channel bias `[C]`.
#[derive(Debug)]
pub struct AddBias2d;

impl Op for AddBias2d {
    fn name(&self) -> &'static str {
        "add_bias2d"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, b) = (inputs[0], inputs[1]);
        let dtype = same_dtype(x, b)?;
        if x.rank() != 3 || b.shape() != [x.dim(0)] {
            return Err(Error::Shape(format!(
                "add_bias2d expects CxHxW plus [C], got {:?} and {:?}",
                x.shape(),
                b.shape()
            )));
        }
        let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
        let s = h * w;
        let mut out = x.data().to_vec();
        for ch in 0..c {
            let bv = b.data()[ch];
            for v in &mut out[ch * s..(ch + 1) * s] {
                *v += bv;
            }
        }
        Ok(out_tensor(vec![c, h, w], out, dtype))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0];
        let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
        let s = h * w;
        let dx = needs[0].then(|| grad.to_vec());
        let db = needs[1].then(|| {
            (0..c)
                .map(|ch| grad[ch * s..(ch + 1) * s].iter().sum())
                .collect()
        });
        vec![dx, db]
    }
}

/// `L x D` plus a per-column bias `[D]`.
#[derive(Debug)]
pub struct AddBiasRow;

impl Op for AddBiasRow {
    fn name(&self) -> &'static str {
        "add_bias_row"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, b) = (inputs[0], inputs[1]);
        let dtype = same_dtype(x, b)?;
        if x.rank() != 2 || b.shape() != [x.dim(1)] {
            return Err(Error::Shape(format!(
                "add_bias_row expects LxD plus [D], got {:?} and {:?}",
                x.shape(),
                b.shape()
            )));
        }
        let (l, d) = (x.dim(0), x.dim(1));
        let mut out = x.data().to_vec();
        for t in 0..l {
            for j in 0..d {
                out[t * d + j] += b.data()[j];
            }
        }
        Ok(out_tensor(vec![l, d], out, dtype))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (l, d) = (inputs[0].dim(0), inputs[0].dim(1));
        let dx = needs[0].then(|| grad.to_vec());
        let db = needs[1].then(|| {
            let mut db = vec![0.0; d];
            for t in 0..l {
                for j in 0..d {
                    db[j] += grad[t * d + j];
                }
            }
            db
        });
        vec![dx, db]
    }
}

#[derive(Debug)]
pub struct Transpose2d;

impl Op for Transpose2d {
    fn name(&self) -> &'static str {
        "transpose2d"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if x.rank() != 2 {
            return Err(Error::Shape(format!("transpose2d expects rank 2, got {:?}", x.shape())));
        }
        let (m, n) = (x.dim(0), x.dim(1));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x.data()[i * n + j];
            }
        }
        Ok(out_tensor(vec![n, m], out, x.dtype()))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let (m, n) = (inputs[0].dim(0), inputs[0].dim(1));
        let mut dx = vec![0.0; m * n];
        for j in 0..n {
            for i in 0..m {
                dx[i * n + j] = grad[j * m + i];
            }
        }
        vec![Some(dx)]
    }
}

#[derive(Debug)]
pub struct Reshape {
    pub shape: Vec<usize>,
}

impl Op for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let numel: usize = self.shape.iter().product();
        if numel != x.len() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                x.shape(),
                self.shape
            )));
        }
        Ok(out_tensor(self.shape.clone(), x.data().to_vec(), x.dtype()))
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        vec![needs[0].then(|| grad.to_vec())]
    }
}

/// Concatenate rank-3 maps along the channel axis.
#[derive(Debug)]
pub struct ConcatChannels;

impl Op for ConcatChannels {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        if inputs.is_empty() {
            return Err(Error::Param("concat of zero tensors".into()));
        }
        let (h, w) = (inputs[0].dim(1), inputs[0].dim(2));
        let dtype = inputs[0].dtype();
        let mut c_total = 0;
        for t in inputs {
            if t.rank() != 3 || t.dim(1) != h || t.dim(2) != w {
                return Err(Error::Shape(format!(
                    "concat_channels spatial mismatch: expected _x{h}x{w}, got {:?}",
                    t.shape()
                )));
            }
            same_dtype(inputs[0], t)?;
            c_total += t.dim(0);
        }
        let mut out = Vec::with_capacity(c_total * h * w);
        for t in inputs {
            out.extend_from_slice(t.data());
        }
        Ok(out_tensor(vec![c_total, h, w], out, dtype))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let mut offset = 0;
        let mut grads = Vec::with_capacity(inputs.len());
        for (t, need) in inputs.iter().zip(needs) {
            let len = t.len();
            grads.push(need.then(|| grad[offset..offset + len].to_vec()));
            offset += len;
        }
        grads
    }
}

/// Inclusive prefix sum over a vector.
#[derive(Debug)]
pub struct Cumsum;

impl Op for Cumsum {
    fn name(&self) -> &'static str {
        "cumsum"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if x.rank() != 1 {
            return Err(Error::Shape(format!("cumsum expects rank 1, got {:?}", x.shape())));
        }
        let mut acc = 0.0;
        let out = x
            .data()
            .iter()
            .map(|v| {
                acc += v;
                acc
            })
            .collect();
        Ok(out_tensor(x.shape().to_vec(), out, x.dtype()))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let n = inputs[0].len();
        let mut dx = vec![0.0; n];
        let mut acc = 0.0;
        for i in (0..n).rev() {
            acc += grad[i];
            dx[i] = acc;
        }
        vec![Some(dx)]
    }
}

/// Per-pixel weighted sum of bin probabilities against bin centers:
/// `probs: n x h x w`, `centers: [n]` -> `h x w`.
#[derive(Debug)]
pub struct BinCompose;

impl Op for BinCompose {
    fn name(&self) -> &'static str {
        "bin_compose"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (p, c) = (inputs[0], inputs[1]);
        let dtype = same_dtype(p, c)?;
        if p.rank() != 3 || c.rank() != 1 || c.dim(0) != p.dim(0) {
            return Err(Error::Shape(format!(
                "bin_compose expects n x h x w probs and [n] centers, got {:?} and {:?}",
                p.shape(),
                c.shape()
            )));
        }
        let (n, h, w) = (p.dim(0), p.dim(1), p.dim(2));
        let s = h * w;
        let mut out = vec![0.0; s];
        for bin in 0..n {
            let cv = c.data()[bin];
            for (o, pv) in out.iter_mut().zip(&p.data()[bin * s..(bin + 1) * s]) {
                *o += cv * pv;
            }
        }
        Ok(out_tensor(vec![h, w], out, dtype))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (p, c) = (inputs[0], inputs[1]);
        let (n, h, w) = (p.dim(0), p.dim(1), p.dim(2));
        let s = h * w;
        let dp = needs[0].then(|| {
            let mut dp = vec![0.0; n * s];
            for bin in 0..n {
                let cv = c.data()[bin];
                for (d, g) in dp[bin * s..(bin + 1) * s].iter_mut().zip(grad) {
                    *d = cv * g;
                }
            }
            dp
        });
        let dc = needs[1].then(|| {
            (0..n)
                .map(|bin| {
                    p.data()[bin * s..(bin + 1) * s]
                        .iter()
                        .zip(grad)
                        .map(|(pv, g)| pv * g)
                        .sum()
                })
                .collect()
        });
        vec![dp, dc]
    }

    fn macs(&self, inputs: &[&Tensor], _output: &Tensor) -> u64 {
        inputs[0].len() as u64
    }
}

#[derive(Debug)]
pub struct ClampMin {
    pub min: f64,
}

impl Op for ClampMin {
    fn name(&self) -> &'static str {
        "clamp_min"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        // f64::max would swallow NaN; divergence must stay visible.
        let out = x
            .data()
            .iter()
            .map(|v| if v.is_nan() { *v } else { v.max(self.min) })
            .collect();
        Ok(out_tensor(x.shape().to_vec(), out, x.dtype()))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        vec![needs[0].then(|| {
            inputs[0]
                .data()
                .iter()
                .zip(grad)
                .map(|(x, g)| if *x > self.min { *g } else { 0.0 })
                .collect()
        })]
    }
}

/// sqrt(max(x, 0)). The gradient denominator is floored at `eps`, which keeps
/// the value exact at 0 while bounding the backward pass.
#[derive(Debug)]
pub struct SqrtGuard {
    pub eps: f64,
}

impl Op for SqrtGuard {
    fn name(&self) -> &'static str {
        "sqrt_guard"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let out = x
            .data()
            .iter()
            .map(|v| if v.is_nan() { *v } else { v.max(0.0).sqrt() })
            .collect();
        Ok(out_tensor(x.shape().to_vec(), out, x.dtype()))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        vec![needs[0].then(|| {
            inputs[0]
                .data()
                .iter()
                .zip(grad)
                .map(|(x, g)| g * 0.5 / x.max(self.eps).sqrt())
                .collect()
        })]
    }
}

/// Natural log where the mask is set, exactly 0 elsewhere. Masked-off entries
/// are never evaluated, so they may hold any value.
#[derive(Debug)]
pub struct LogMasked {
    pub mask: Vec<bool>,
}

impl Op for LogMasked {
    fn name(&self) -> &'static str {
        "log_masked"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if self.mask.len() != x.len() {
            return Err(Error::Shape(format!(
                "log_masked mask length {} vs tensor {}",
                self.mask.len(),
                x.len()
            )));
        }
        let mut out = vec![0.0; x.len()];
        for (i, (&v, &m)) in x.data().iter().zip(&self.mask).enumerate() {
            if m {
                if v <= 0.0 {
                    return Err(Error::Domain(format!(
                        "log of non-positive value {v} at masked index {i}"
                    )));
                }
                out[i] = v.ln();
            }
        }
        Ok(out_tensor(x.shape().to_vec(), out, x.dtype()))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        vec![needs[0].then(|| {
            inputs[0]
                .data()
                .iter()
                .zip(grad)
                .zip(&self.mask)
                .map(|((x, g), m)| if *m { g / x } else { 0.0 })
                .collect()
        })]
    }
}

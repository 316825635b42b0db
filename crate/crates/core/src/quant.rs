//! Post-training static INT8 quantization.
//!
//! Per-tensor affine quantization: activations use an asymmetric scheme with
//! a calibrated zero point, weights a symmetric one (zero point 0). The
//! integer execution path accumulates `(x_q - zp_x) * w_q` in i32 and applies
//! a single f64 rescale per layer, so quantized inference is bit-identical
//! across runs.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Op, Tensor};

/// Largest reduction depth for which the i32 accumulator provably cannot
/// overflow: 255 * 127 * 2^15 < 2^31.
pub const MAX_ACCUM_DEPTH: usize = 1 << 15;

/// Scale and zero point of one tensor or activation boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
}

impl QuantParams {
    pub fn new(scale: f64, zero_point: i32) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::Param(format!("quant scale must be positive, got {scale}")));
        }
        if !(-128..=127).contains(&zero_point) {
            return Err(Error::Param(format!(
                "zero point {zero_point} outside i8 range"
            )));
        }
        Ok(QuantParams { scale, zero_point })
    }

    /// Asymmetric parameters from an observed [min, max] activation range.
    /// The range is extended to contain zero first: otherwise the zero point
    /// would clamp at the i8 boundary and the grid could not cover the range
    /// at all. A degenerate range falls back to the scale floor.
    pub fn from_range(min: f64, max: f64) -> Result<Self> {
        if min > max {
            return Err(Error::Param(format!("invalid range [{min}, {max}]")));
        }
        let min = min.min(0.0);
        let max = max.max(0.0);
        let scale = ((max - min) / 255.0).max(1e-8);
        let zp = (-128.0 - min / scale).round();
        Ok(QuantParams {
            scale,
            zero_point: zp.clamp(-128.0, 127.0) as i32,
        })
    }

    /// Symmetric parameters for a weight tensor: zero point 0.
    pub fn symmetric(max_abs: f64) -> Result<Self> {
        Ok(QuantParams {
            scale: (max_abs / 127.0).max(1e-8),
            zero_point: 0,
        })
    }

    pub fn quantize_value(&self, x: f64) -> i8 {
        let q = (x / self.scale).round() + self.zero_point as f64;
        q.clamp(-128.0, 127.0) as i8
    }

    pub fn dequantize_value(&self, q: i8) -> f64 {
        (q as i32 - self.zero_point) as f64 * self.scale
    }
}

/// i8 payload plus its per-tensor quantization parameters.
#[derive(Debug, Clone)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i8>,
    pub qp: QuantParams,
}

impl QuantizedTensor {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Clamp-and-round a float tensor onto the i8 grid of `qp`.
pub fn quantize_tensor(x: &Tensor, qp: QuantParams) -> QuantizedTensor {
    QuantizedTensor {
        shape: x.shape().to_vec(),
        data: x.data().iter().map(|&v| qp.quantize_value(v)).collect(),
        qp,
    }
}

/// Map an i8 tensor back to floats.
pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let data = q.data.iter().map(|&v| q.qp.dequantize_value(v)).collect();
    Tensor::from_vec(q.shape.clone(), data).expect("shape preserved")
}

/// Symmetric weight quantization: scale from the max absolute value.
pub fn quantize_weight(w: &Tensor) -> QuantizedTensor {
    let max_abs = w.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    quantize_tensor(w, QuantParams::symmetric(max_abs).expect("positive scale"))
}

/// Integer-path linear layer: `x_q [M x K] . w_q [K x N]` with i32
/// accumulation, one f64 rescale by `s_x * s_w / s_out`, bias added in the
/// rescaled domain, result clamped to the output i8 grid.
pub fn quantized_linear(
    x_q: &QuantizedTensor,
    w_q: &QuantizedTensor,
    bias: &[f64],
    out_qp: QuantParams,
) -> Result<QuantizedTensor> {
    if x_q.shape.len() != 2 || w_q.shape.len() != 2 || x_q.shape[1] != w_q.shape[0] {
        return Err(Error::Shape(format!(
            "quantized_linear shapes {:?} x {:?}",
            x_q.shape, w_q.shape
        )));
    }
    let (m, k) = (x_q.shape[0], x_q.shape[1]);
    let n = w_q.shape[1];
    if k > MAX_ACCUM_DEPTH {
        return Err(Error::Contract(format!(
            "reduction depth {k} exceeds the i32 accumulation bound {MAX_ACCUM_DEPTH}"
        )));
    }
    if bias.len() != n {
        return Err(Error::Shape(format!("bias has {} entries, expected {n}", bias.len())));
    }
    let rescale = x_q.qp.scale * w_q.qp.scale;
    let zp_x = x_q.qp.zero_point;
    let zp_w = w_q.qp.zero_point;
    let mut out = vec![0i8; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc: i32 = 0;
            for p in 0..k {
                let xv = x_q.data[i * k + p] as i32 - zp_x;
                let wv = w_q.data[p * n + j] as i32 - zp_w;
                acc += xv * wv;
            }
            let v = acc as f64 * rescale + bias[j];
            out[i * n + j] = out_qp.quantize_value(v);
        }
    }
    Ok(QuantizedTensor {
        shape: vec![m, n],
        data: out,
        qp: out_qp,
    })
}

/// Integer-path 2-D convolution over an i8 activation map, same geometry
/// conventions as the float op.
#[allow(clippy::too_many_arguments)]
pub fn quantized_conv2d(
    x_q: &QuantizedTensor,
    w_q: &QuantizedTensor,
    bias: &[f64],
    out_qp: QuantParams,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<QuantizedTensor> {
    if x_q.shape.len() != 3 || w_q.shape.len() != 4 {
        return Err(Error::Shape("quantized_conv2d expects CxHxW and OxIxKxK".into()));
    }
    let (ci, h, w) = (x_q.shape[0], x_q.shape[1], x_q.shape[2]);
    let (co, cig, kk) = (w_q.shape[0], w_q.shape[1], w_q.shape[2]);
    if cig * kk * kk > MAX_ACCUM_DEPTH {
        return Err(Error::Contract(format!(
            "reduction depth {} exceeds the i32 accumulation bound",
            cig * kk * kk
        )));
    }
    if bias.len() != co {
        return Err(Error::Shape("quantized_conv2d bias length".into()));
    }
    let span_h = h + 2 * pad;
    let span_w = w + 2 * pad;
    if ci % groups != 0 || cig != ci / groups || span_h < kk || span_w < kk || stride == 0 {
        return Err(Error::Shape("quantized_conv2d geometry".into()));
    }
    let ho = (span_h - kk) / stride + 1;
    let wo = (span_w - kk) / stride + 1;
    let cog = co / groups;
    let zp_x = x_q.qp.zero_point;
    let rescale = x_q.qp.scale * w_q.qp.scale;
    let mut out = vec![0i8; co * ho * wo];
    for oc in 0..co {
        let g = oc / cog;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc: i32 = 0;
                for icg in 0..cig {
                    let ic = g * cig + icg;
                    for ky in 0..kk {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kk {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xv =
                                x_q.data[(ic * h + iy as usize) * w + ix as usize] as i32 - zp_x;
                            let wv = w_q.data[((oc * cig + icg) * kk + ky) * kk + kx] as i32;
                            acc += xv * wv;
                        }
                    }
                }
                // Zero-padded positions contribute (0 - zp_x) * w in the real
                // affine scheme; fold the correction in with the kernel sums.
                let v = acc as f64 * rescale + bias[oc];
                out[(oc * ho + oy) * wo + ox] = out_qp.quantize_value(v);
            }
        }
    }
    Ok(QuantizedTensor {
        shape: vec![co, ho, wo],
        data: out,
        qp: out_qp,
    })
}

// --------------------------------------------------------- calibration

/// Observed activation ranges keyed by boundary name
/// (`aq.in.<layer>` / `aq.out.<layer>`).
#[derive(Debug, Default, Clone)]
pub struct CalibRecorder {
    pub ranges: BTreeMap<String, (f64, f64)>,
}

impl CalibRecorder {
    pub fn observe(&mut self, key: &str, data: &[f64]) {
        let entry = self
            .ranges
            .entry(key.to_string())
            .or_insert((f64::INFINITY, f64::NEG_INFINITY));
        for &v in data {
            entry.0 = entry.0.min(v);
            entry.1 = entry.1.max(v);
        }
    }

    pub fn qparams(&self) -> Result<BTreeMap<String, QuantParams>> {
        let mut out = BTreeMap::new();
        for (k, (min, max)) in &self.ranges {
            out.insert(k.clone(), QuantParams::from_range(*min, *max)?);
        }
        Ok(out)
    }
}

/// One quantized conv/linear layer: i8 weights plus the calibrated input and
/// output activation grids.
#[derive(Debug)]
pub struct QuantLayer {
    pub weight: QuantizedTensor,
    pub bias: Vec<f64>,
    pub qp_in: QuantParams,
    pub qp_out: QuantParams,
}

/// All quantized layers of a model, keyed by layer name.
#[derive(Debug, Default)]
pub struct QuantModel {
    pub layers: BTreeMap<String, Rc<QuantLayer>>,
}

// ------------------------------------------------- graph ops (inference)

/// Integer-path conv2d as a graph op. Forward only; quantized inference
/// never participates in backward.
#[derive(Debug)]
pub struct QuantConv2dOp {
    pub layer: Rc<QuantLayer>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Op for QuantConv2dOp {
    fn name(&self) -> &'static str {
        "quant_conv2d"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x_q = quantize_tensor(inputs[0], self.layer.qp_in);
        let out = quantized_conv2d(
            &x_q,
            &self.layer.weight,
            &self.layer.bias,
            self.layer.qp_out,
            self.stride,
            self.pad,
            self.groups,
        )?;
        Ok(dequantize(&out).with_dtype_tag(inputs[0].dtype()))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        _grad: &[f64],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        vec![None; inputs.len()]
    }

    fn macs(&self, _inputs: &[&Tensor], output: &Tensor) -> u64 {
        let per_out = self.layer.weight.shape[1] * self.layer.weight.shape[2] * self.layer.weight.shape[3];
        (output.len() * per_out) as u64
    }
}

/// Integer-path linear as a graph op.
#[derive(Debug)]
pub struct QuantLinearOp {
    pub layer: Rc<QuantLayer>,
}

impl Op for QuantLinearOp {
    fn name(&self) -> &'static str {
        "quant_linear"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x_q = quantize_tensor(inputs[0], self.layer.qp_in);
        let out = quantized_linear(&x_q, &self.layer.weight, &self.layer.bias, self.layer.qp_out)?;
        Ok(dequantize(&out).with_dtype_tag(inputs[0].dtype()))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        _grad: &[f64],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        vec![None; inputs.len()]
    }

    fn macs(&self, inputs: &[&Tensor], _output: &Tensor) -> u64 {
        let (m, k) = (inputs[0].shape()[0], inputs[0].shape()[1]);
        (m * k * self.layer.weight.shape[1]) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn range_zero_to_ten() {
        let qp = QuantParams::from_range(0.0, 10.0).unwrap();
        assert!((qp.scale - 10.0 / 255.0).abs() < 1e-12);
        assert_eq!(qp.zero_point, -128);
    }

    #[test]
    fn symmetric_range_centers_zero_point() {
        for a in [0.5, 1.0, 3.7, 42.0] {
            let qp = QuantParams::from_range(-a, a).unwrap();
            assert!(qp.zero_point.abs() <= 1, "zp = {}", qp.zero_point);
        }
    }

    #[test]
    fn constant_activation_hits_scale_floor() {
        // A constant-zero boundary is the only degenerate case once ranges
        // are zero-extended.
        let qp = QuantParams::from_range(0.0, 0.0).unwrap();
        assert_eq!(qp.scale, 1e-8);
        // A nonzero constant still yields a usable grid through zero.
        let qp = QuantParams::from_range(3.0, 3.0).unwrap();
        assert!((qp.scale - 3.0 / 255.0).abs() < 1e-12);
        let q = qp.quantize_value(3.0);
        assert!((qp.dequantize_value(q) - 3.0).abs() <= qp.scale / 2.0);
    }

    #[test]
    fn spec_quantize_example() {
        // scale = 10/255, zp = -128, x = 5.0 -> q = round(127.5) - 128 = 0.
        let qp = QuantParams::from_range(0.0, 10.0).unwrap();
        let q = qp.quantize_value(5.0);
        assert_eq!(q, 0);
        let deq = qp.dequantize_value(q);
        assert!((deq - 5.0196).abs() < 1e-3, "deq = {deq}");
    }

    #[test]
    fn zero_with_zero_point_zero() {
        let qp = QuantParams::new(0.1, 0).unwrap();
        assert_eq!(qp.quantize_value(0.0), 0);
        assert_eq!(qp.dequantize_value(0), 0.0);
    }

    #[test]
    fn round_trip_error_within_half_scale() {
        let qp = QuantParams::from_range(-4.0, 6.0).unwrap();
        let mut rng = Rng::new(9);
        for _ in 0..10_000 {
            let x = rng.range(-4.0, 6.0);
            let err = (qp.dequantize_value(qp.quantize_value(x)) - x).abs();
            assert!(err <= qp.scale / 2.0 + 1e-9, "x={x} err={err}");
        }
    }

    #[test]
    fn quantize_dequantize_idempotent() {
        let qp = QuantParams::from_range(-1.0, 3.0).unwrap();
        for q in i8::MIN..=i8::MAX {
            let x = qp.dequantize_value(q);
            assert_eq!(qp.quantize_value(x), q);
        }
    }

    #[test]
    fn quantized_linear_zero_weights_yield_bias() {
        let x_q = QuantizedTensor {
            shape: vec![1, 4],
            data: vec![3, -7, 11, 25],
            qp: QuantParams::new(0.05, -3).unwrap(),
        };
        let w_q = QuantizedTensor {
            shape: vec![4, 2],
            data: vec![0; 8],
            qp: QuantParams::new(0.02, 0).unwrap(),
        };
        let out_qp = QuantParams::from_range(-1.0, 1.0).unwrap();
        let out = quantized_linear(&x_q, &w_q, &[0.25, -0.5], out_qp).unwrap();
        assert_eq!(out.data[0], out_qp.quantize_value(0.25));
        assert_eq!(out.data[1], out_qp.quantize_value(-0.5));
    }

    #[test]
    fn quantized_linear_one_by_one() {
        // x = 2.0, w = 3.0 with exact scales: result within one output step
        // of 6.0.
        let qp_x = QuantParams::new(2.0 / 127.0, 0).unwrap();
        let qp_w = QuantParams::new(3.0 / 127.0, 0).unwrap();
        let x_q = QuantizedTensor { shape: vec![1, 1], data: vec![127], qp: qp_x };
        let w_q = QuantizedTensor { shape: vec![1, 1], data: vec![127], qp: qp_w };
        let out_qp = QuantParams::from_range(0.0, 8.0).unwrap();
        let out = quantized_linear(&x_q, &w_q, &[0.0], out_qp).unwrap();
        let v = out_qp.dequantize_value(out.data[0]);
        assert!((v - 6.0).abs() <= out_qp.scale, "v = {v}");
    }

    #[test]
    fn quantized_linear_matches_float_oracle() {
        let mut rng = Rng::new(77);
        for _ in 0..100 {
            let (m, k, n) = (2 + rng.below(3), 1 + rng.below(16), 2 + rng.below(5));
            let x = Tensor::uniform(vec![m, k], -2.0, 2.0, &mut rng);
            let w = Tensor::uniform(vec![k, n], -1.0, 1.0, &mut rng);
            let bias: Vec<f64> = (0..n).map(|_| rng.range(-0.5, 0.5)).collect();

            // Float reference.
            let mut expect = vec![0.0; m * n];
            let mut out_min = f64::INFINITY;
            let mut out_max = f64::NEG_INFINITY;
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += x.data()[i * k + p] * w.data()[p * n + j];
                    }
                    acc += bias[j];
                    expect[i * n + j] = acc;
                    out_min = out_min.min(acc);
                    out_max = out_max.max(acc);
                }
            }

            let qp_x = QuantParams::from_range(-2.0, 2.0).unwrap();
            let x_q = quantize_tensor(&x, qp_x);
            let w_q = quantize_weight(&w);
            let out_qp = QuantParams::from_range(out_min, out_max).unwrap();
            let got = quantized_linear(&x_q, &w_q, &bias, out_qp).unwrap();
            // Output-grid rounding plus input/weight grid noise propagated
            // through the K-term reduction.
            let tol = 3.0 * out_qp.scale + (k as f64) * (qp_x.scale + 2.0 * w_q.qp.scale);
            for (g, e) in got.data.iter().zip(&expect) {
                let v = out_qp.dequantize_value(*g);
                assert!((v - e).abs() < tol, "{v} vs {e} (tol {tol})");
            }
        }
    }

    #[test]
    fn accumulation_depth_contract() {
        let qp = QuantParams::new(1.0, 0).unwrap();
        let k = MAX_ACCUM_DEPTH + 1;
        let x_q = QuantizedTensor { shape: vec![1, k], data: vec![1; k], qp };
        let w_q = QuantizedTensor { shape: vec![k, 1], data: vec![1; k], qp };
        assert!(quantized_linear(&x_q, &w_q, &[0.0], qp).is_err());
    }

    proptest! {
        #[test]
        fn quantize_is_monotone(a in -10.0f64..10.0, b in -10.0f64..10.0) {
            let qp = QuantParams::from_range(-5.0, 5.0).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(qp.quantize_value(lo) <= qp.quantize_value(hi));
        }

        #[test]
        fn round_trip_bounded_inside_range(x in -5.0f64..5.0) {
            let qp = QuantParams::from_range(-5.0, 5.0).unwrap();
            let err = (qp.dequantize_value(qp.quantize_value(x)) - x).abs();
            prop_assert!(err <= qp.scale / 2.0 + 1e-12);
        }
    }
}

//! The full depth network: encoder, projections, pooling head, decoder, and
//! depth composition, plus parameter/MAC accounting and the quantization
//! hooks over the whole model.

use std::rc::Rc;

use crate::config::ModelConfig;
use crate::decoder::{compose_depth, Decoder, DECODE_STRIDES};
use crate::encoder::{Encoder, Projection};
use crate::error::{Error, Result};
use crate::layers::{ExecMode, Session};
use crate::mpsp::{DepthBins, Mpsp};
use crate::params::{ParamKind, ParamSet};
use crate::quant::{
    quantize_weight, CalibRecorder, QuantLayer, QuantModel, QuantParams, QuantizedTensor,
};
use crate::rng::Rng;
use crate::tensor::{Tensor, Var};
use crate::weights::{WeightEntry, WeightFile};

/// Graph handles of one full forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// Metric depth at input resolution, `H x W`.
    pub depth: Var,
    /// Bin logits at stride 2, `n_bins x H/2 x W/2`.
    pub prob_logits: Var,
    pub class_logits: Var,
    pub bin_widths: Var,
    pub bin_centers: Var,
}

#[derive(Debug)]
pub struct LmDepth {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    encoder: Encoder,
    projection: Projection,
    mpsp: Mpsp,
    decoder: Decoder,
}

impl LmDepth {
    /// Build with fresh seeded weights.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut rng = Rng::new(seed);
        let encoder = Encoder::new(&mut params, &mut rng, &cfg.encoder)?;
        let projection = Projection::new(&mut params, &mut rng, &cfg.encoder, cfg.projection_dim);
        let mpsp = Mpsp::new(
            &mut params,
            &mut rng,
            &cfg.mpsp,
            cfg.encoder.bottleneck_channels(),
            cfg.projection_dim,
        )?;
        let decoder = Decoder::new(
            &mut params,
            &mut rng,
            &cfg.decoder,
            cfg.projection_dim,
            cfg.mpsp.n_bins,
        );
        Ok(LmDepth {
            cfg: cfg.clone(),
            params,
            encoder,
            projection,
            mpsp,
            decoder,
        })
    }

    pub fn session<'m, 'q>(&'m self, mode: ExecMode<'q>) -> Session<'m, 'q> {
        Session::new(&self.params, mode)
    }

    /// Full forward pass over a `3 x H x W` image already inserted into the
    /// session.
    pub fn forward(&self, s: &mut Session, image: Var) -> Result<ForwardOutput> {
        let shape = s.graph.value(image).shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Shape(format!("expected 3xHxW image, got {shape:?}")));
        }
        let (h, w) = (shape[1], shape[2]);
        let pyramid = self.encoder.forward(s, image)?;
        let head = self.mpsp.forward(s, pyramid.bottleneck())?;
        let mut projected = Vec::with_capacity(DECODE_STRIDES.len());
        for stride in DECODE_STRIDES {
            let level = pyramid.level(stride)?;
            projected.push(self.projection.project(s, stride, level)?);
        }
        let prob_logits = self.decoder.decode(s, head.global_feats, &projected)?;
        let depth = compose_depth(&mut s.graph, prob_logits, head.bin_centers, h, w)?;
        Ok(ForwardOutput {
            depth,
            prob_logits,
            class_logits: head.class_logits,
            bin_widths: head.bin_widths,
            bin_centers: head.bin_centers,
        })
    }

    /// Convenience: run inference on an image tensor and return the depth
    /// map values with their dimensions.
    pub fn infer_depth(&self, image: Tensor, quant: Option<&QuantModel>) -> Result<Vec<f64>> {
        let mode = match quant {
            Some(qm) => ExecMode::Quantized(qm),
            None => ExecMode::Infer,
        };
        let mut s = self.session(mode);
        let img = s.input(image)?;
        let out = self.forward(&mut s, img)?;
        Ok(s.graph.value(out.depth).data().to_vec())
    }

    pub fn bins_snapshot(&self, s: &Session, out: &ForwardOutput) -> Result<DepthBins> {
        DepthBins::from_widths(
            s.graph.value(out.bin_widths).data().to_vec(),
            self.cfg.mpsp.d_min,
            self.cfg.mpsp.d_max,
        )
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn param_count_prefix(&self, prefix: &str) -> usize {
        self.params
            .entries()
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Analytic multiply-accumulate count of one forward pass at the given
    /// resolution: each dense op contributes its closed-form cost through
    /// the graph meter.
    pub fn mac_count(&self, h: usize, w: usize) -> Result<u64> {
        let mut s = self.session(ExecMode::Infer);
        let img = s.input(Tensor::zeros(vec![3, h, w]))?;
        self.forward(&mut s, img)?;
        Ok(s.graph.mac_count())
    }

    // ---------------------------------------------------- serialization

    pub fn save_weights(&self) -> WeightFile {
        crate::weights::save_params(&self.params)
    }

    /// Load float (or dequantized) weights; the table must match exactly.
    pub fn load_weights(&mut self, wf: &WeightFile) -> Result<()> {
        crate::weights::load_params(wf, &mut self.params)
    }

    /// Construct a model from a config plus a weight file.
    pub fn from_weights(cfg: &ModelConfig, wf: &WeightFile) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        model.load_weights(wf)?;
        Ok(model)
    }

    // ----------------------------------------------------- quantization

    /// Run float forwards over the calibration images, recording activation
    /// ranges at every conv/linear boundary.
    pub fn calibrate(&self, images: &[Tensor]) -> Result<CalibRecorder> {
        if images.is_empty() {
            return Err(Error::Param("empty calibration set".into()));
        }
        let mut merged = CalibRecorder::default();
        for image in images {
            let mut s = self.session(ExecMode::Calibrate);
            let img = s.input(image.clone())?;
            self.forward(&mut s, img)?;
            for (k, (lo, hi)) in &s.recorder.ranges {
                let e = merged
                    .ranges
                    .entry(k.clone())
                    .or_insert((f64::INFINITY, f64::NEG_INFINITY));
                e.0 = e.0.min(*lo);
                e.1 = e.1.max(*hi);
            }
        }
        Ok(merged)
    }

    /// Serialize with conv/linear weights quantized to i8 and activation
    /// grids stored as marker entries. Norms, biases, and scan parameters
    /// stay f32. Layers without calibrated boundaries (norm-followed convs)
    /// still store i8 weights but execute on the float path after load.
    pub fn quantize_weights(&self, calib: &CalibRecorder) -> Result<WeightFile> {
        let qps = calib.qparams()?;
        if qps.is_empty() {
            return Err(Error::Param("calibration recorded no activation ranges".into()));
        }
        let mut entries = Vec::new();
        for e in self.params.entries() {
            let quantizable = matches!(e.kind, ParamKind::ConvWeight | ParamKind::LinearWeight)
                && e.name.ends_with(".w");
            if quantizable {
                let q = quantize_weight(&e.tensor);
                entries.push(WeightEntry::i8_tensor(
                    &e.name,
                    q.shape.clone(),
                    &q.data,
                    q.qp.scale,
                    q.qp.zero_point,
                ));
            } else {
                entries.push(WeightEntry::f32_tensor(
                    &e.name,
                    e.tensor.shape().to_vec(),
                    e.tensor.data(),
                ));
            }
        }
        for (key, qp) in &qps {
            entries.push(WeightEntry::marker(key, qp.scale, qp.zero_point));
        }
        Ok(WeightFile { entries })
    }
}

/// Assemble the integer execution table from a quantized weight file.
/// Layers without i8 weights simply stay on the float path.
pub fn build_quant_model(wf: &WeightFile, params: &ParamSet) -> Result<QuantModel> {
    let mut qm = QuantModel::default();
    for e in &wf.entries {
        if e.dtype != crate::tensor::DType::I8 {
            continue;
        }
        let layer_name = e
            .name
            .strip_suffix(".w")
            .ok_or_else(|| Error::NamedTensor(format!("i8 tensor {} is not a layer weight", e.name)))?;
        let weight = QuantizedTensor {
            shape: e.dims.clone(),
            data: e.i8_values()?,
            qp: QuantParams::new(e.scale, e.zero_point)?,
        };
        let out_dim = match e.dims.len() {
            4 => e.dims[0],
            2 => e.dims[1],
            r => {
                return Err(Error::NamedTensor(format!(
                    "quantized weight {} has unsupported rank {r}",
                    e.name
                )))
            }
        };
        let bias = match params.find(&format!("{layer_name}.b")) {
            Some(id) => params.get(id).data().to_vec(),
            None => vec![0.0; out_dim],
        };
        // Only layers with calibrated boundaries join the integer path; the
        // rest execute float on the dequantized weights already loaded.
        let (qin, qout) = match (
            wf.find(&format!("aq.in.{layer_name}")),
            wf.find(&format!("aq.out.{layer_name}")),
        ) {
            (Some(i), Some(o)) => (i, o),
            _ => continue,
        };
        qm.layers.insert(
            layer_name.to_string(),
            Rc::new(QuantLayer {
                weight,
                bias,
                qp_in: QuantParams::new(qin.scale, qin.zero_point)?,
                qp_out: QuantParams::new(qout.scale, qout.zero_point)?,
            }),
        );
    }
    Ok(qm)
}

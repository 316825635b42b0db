//! Modified pyramid spatial pooling head: multi-scale pooling and fusion of
//! the bottleneck feature, emitting scene classification logits, adaptive
//! depth bins, and global depth features.

use crate::config::MpspConfig;
use crate::error::{Error, Result};
use crate::layers::{Conv2dLayer, MlpHead, Session};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tensor::{Tensor, Var};

/// A learned partition of the depth range: positive widths summing to 1 and
/// the strictly increasing bin centers they imply.
#[derive(Debug, Clone)]
pub struct DepthBins {
    pub widths: Vec<f64>,
    pub centers: Vec<f64>,
    pub d_min: f64,
    pub d_max: f64,
}

impl DepthBins {
    /// Build from normalized widths:
    /// `centers[i] = d_min + (d_max - d_min) * (cumsum(w)[i] - w[i]/2)`.
    pub fn from_widths(widths: Vec<f64>, d_min: f64, d_max: f64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Param("need at least 2 bins".into()));
        }
        if widths.iter().any(|w| *w <= 0.0) {
            return Err(Error::Param("bin widths must be positive".into()));
        }
        let total: f64 = widths.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Param(format!("bin widths sum to {total}, expected 1")));
        }
        // Configs require d_min > 0; the bare partition only needs a
        // nonnegative, nonempty range (centers stay strictly positive).
        if !(d_min >= 0.0 && d_min < d_max) {
            return Err(Error::Param(format!("invalid depth range [{d_min}, {d_max}]")));
        }
        let range = d_max - d_min;
        let mut centers = Vec::with_capacity(widths.len());
        let mut cum = 0.0;
        for &w in &widths {
            cum += w;
            centers.push(d_min + range * (cum - 0.5 * w));
        }
        Ok(DepthBins {
            widths,
            centers,
            d_min,
            d_max,
        })
    }

    /// Uniform partition, the zero-information default.
    pub fn uniform(n: usize, d_min: f64, d_max: f64) -> Result<Self> {
        Self::from_widths(vec![1.0 / n as f64; n], d_min, d_max)
    }
}

/// Graph handles produced by one MPSP forward pass.
#[derive(Debug, Clone, Copy)]
pub struct MpspVars {
    pub fused: Var,
    pub class_logits: Var,
    pub bin_widths: Var,
    pub bin_centers: Var,
    pub global_feats: Var,
}

#[derive(Debug)]
pub struct Mpsp {
    pub cfg: MpspConfig,
    branches: Vec<Conv2dLayer>,
    cls_head: MlpHead,
    bins_head: MlpHead,
    global: Conv2dLayer,
}

impl Mpsp {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut Rng,
        cfg: &MpspConfig,
        c_in: usize,
        global_dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let branches = cfg
            .scales
            .iter()
            .map(|&s| {
                Conv2dLayer::new(
                    ps,
                    rng,
                    &format!("mpsp.branch{s}"),
                    c_in,
                    cfg.branch_channels,
                    1,
                    1,
                    0,
                    1,
                )
            })
            .collect();
        let fused = c_in + cfg.scales.len() * cfg.branch_channels;
        let hidden = 4 * fused;
        let cls_head = MlpHead::new(ps, rng, "mpsp.cls", fused, hidden, cfg.n_classes);
        let bins_head = MlpHead::new(ps, rng, "mpsp.bins", fused, hidden, cfg.n_bins);
        let global = Conv2dLayer::new(ps, rng, "mpsp.global", fused, global_dim, 3, 1, 1, 1);
        Ok(Mpsp {
            cfg: cfg.clone(),
            branches,
            cls_head,
            bins_head,
            global,
        })
    }

    /// Multi-scale pooling, per-branch 1x1 refinement, upsampling back to the
    /// input resolution, and channel concatenation with the input map.
    ///
    /// Scales that do not divide the map fall back to clipped trailing
    /// pooling windows; on divisible maps this is exactly block pooling.
    pub fn pyramid_fuse(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.graph.value(x).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape(format!("pyramid_fuse expects CxHxW, got {shape:?}")));
        }
        let (h, w) = (shape[1], shape[2]);
        let mut parts = vec![x];
        for (scale, conv) in self.cfg.scales.iter().zip(&self.branches) {
            let pooled = if h % scale == 0 && w % scale == 0 {
                s.graph.pool_avg(x, *scale)?
            } else {
                s.graph.pool_avg_ceil(x, *scale)?
            };
            let refined = conv.forward(s, pooled)?;
            let up = s.graph.upsample_bilinear(refined, h, w)?;
            parts.push(up);
        }
        s.graph.concat_channels(&parts)
    }

    fn pooled_row(s: &mut Session, fused: Var) -> Result<Var> {
        let pooled = s.graph.global_avg_pool(fused)?;
        let c = s.graph.value(pooled).len();
        s.graph.reshape(pooled, vec![1, c])
    }

    /// Scene classification logits: global pool then the three-layer MLP.
    pub fn classify(&self, s: &mut Session, fused: Var) -> Result<Var> {
        let row = Self::pooled_row(s, fused)?;
        let out = self.cls_head.forward(s, row)?;
        s.graph.reshape(out, vec![self.cfg.n_classes])
    }

    /// Bin widths (softmax-normalized scores) and the centers they imply,
    /// both differentiable so depth supervision reaches this head.
    pub fn predict_bins(&self, s: &mut Session, fused: Var) -> Result<(Var, Var)> {
        let row = Self::pooled_row(s, fused)?;
        let scores = self.bins_head.forward(s, row)?;
        let scores = s.graph.reshape(scores, vec![self.cfg.n_bins])?;
        let widths = s.graph.softmax(scores, 0)?;
        let cum = s.graph.cumsum(widths)?;
        let half = s.graph.scale(widths, 0.5)?;
        let mid = s.graph.sub(cum, half)?;
        let scaled = s.graph.scale(mid, self.cfg.d_max - self.cfg.d_min)?;
        let dmin = s.constant(Tensor::scalar_value(self.cfg.d_min))?;
        let centers = s.graph.add(scaled, dmin)?;
        Ok((widths, centers))
    }

    /// Global depth features: 3x3 convolution, spatial dims preserved.
    pub fn global_feats(&self, s: &mut Session, fused: Var) -> Result<Var> {
        self.global.forward(s, fused)
    }

    pub fn forward(&self, s: &mut Session, bottleneck: Var) -> Result<MpspVars> {
        let fused = self.pyramid_fuse(s, bottleneck)?;
        let class_logits = self.classify(s, fused)?;
        let (bin_widths, bin_centers) = self.predict_bins(s, fused)?;
        let global_feats = self.global_feats(s, fused)?;
        Ok(MpspVars {
            fused,
            class_logits,
            bin_widths,
            bin_centers,
            global_feats,
        })
    }

    /// Snapshot graph values into a checked [`DepthBins`].
    pub fn bins_from_session(&self, s: &Session, vars: &MpspVars) -> Result<DepthBins> {
        DepthBins::from_widths(
            s.graph.value(vars.bin_widths).data().to_vec(),
            self.cfg.d_min,
            self.cfg.d_max,
        )
    }
}

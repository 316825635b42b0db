//! MobileNetV2-style inverted-residual encoder with multi-scale outputs,
//! plus the projection layers that reduce every scale to the decoder width.

use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::layers::{ChannelNormLayer, Conv2dLayer, Session};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tensor::Var;

/// Multi-scale features of one image: strides 4, 8, 16, 32 relative to the
/// input. The stride-32 map doubles as the bottleneck fed to the pooling
/// head.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    levels: [Var; 4],
}

pub const PYRAMID_STRIDES: [usize; 4] = [4, 8, 16, 32];

impl FeaturePyramid {
    pub fn level(&self, stride: usize) -> Result<Var> {
        PYRAMID_STRIDES
            .iter()
            .position(|&s| s == stride)
            .map(|i| self.levels[i])
            .ok_or_else(|| Error::Param(format!("no pyramid level at stride {stride}")))
    }

    pub fn bottleneck(&self) -> Var {
        self.levels[3]
    }
}

/// Inverted residual: 1x1 expand, depthwise 3x3, 1x1 project, each followed
/// by per-channel normalization; skip connection iff stride is 1 and the
/// channel count is preserved.
#[derive(Debug, Clone)]
pub struct InvertedResidual {
    expand: Conv2dLayer,
    norm1: ChannelNormLayer,
    depthwise: Conv2dLayer,
    norm2: ChannelNormLayer,
    project: Conv2dLayer,
    norm3: ChannelNormLayer,
    skip: bool,
}

impl InvertedResidual {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        expansion: usize,
        stride: usize,
    ) -> Result<Self> {
        if stride != 1 && stride != 2 {
            return Err(Error::Param(format!("inverted residual stride must be 1 or 2, got {stride}")));
        }
        let mid = c_in * expansion;
        let expand = Conv2dLayer::new_no_bias(ps, rng, &format!("{name}.expand"), c_in, mid, 1, 1, 0, 1);
        let norm1 = ChannelNormLayer::new(ps, &format!("{name}.expand.norm"), mid);
        let depthwise =
            Conv2dLayer::new_no_bias(ps, rng, &format!("{name}.dw"), mid, mid, 3, stride, 1, mid);
        let norm2 = ChannelNormLayer::new(ps, &format!("{name}.dw.norm"), mid);
        let project = Conv2dLayer::new_no_bias(ps, rng, &format!("{name}.project"), mid, c_out, 1, 1, 0, 1);
        let norm3 = ChannelNormLayer::new(ps, &format!("{name}.project.norm"), c_out);
        Ok(InvertedResidual {
            expand,
            norm1,
            depthwise,
            norm2,
            project,
            norm3,
            skip: stride == 1 && c_in == c_out,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.expand.forward(s, x)?;
        let h = self.norm1.forward(s, h)?;
        let h = s.graph.silu(h)?;
        let h = self.depthwise.forward(s, h)?;
        let h = self.norm2.forward(s, h)?;
        let h = s.graph.silu(h)?;
        let h = self.project.forward(s, h)?;
        let h = self.norm3.forward(s, h)?;
        if self.skip {
            s.graph.add(h, x)
        } else {
            Ok(h)
        }
    }
}

#[derive(Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    stem: Conv2dLayer,
    stem_norm: ChannelNormLayer,
    stages: Vec<Vec<InvertedResidual>>,
}

impl Encoder {
    pub fn new(ps: &mut ParamSet, rng: &mut Rng, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let stem = Conv2dLayer::new_no_bias(ps, rng, "enc.stem", 3, cfg.stem_channels, 3, 2, 1, 1);
        let stem_norm = ChannelNormLayer::new(ps, "enc.stem.norm", cfg.stem_channels);
        let mut stages = Vec::new();
        let mut c_in = cfg.stem_channels;
        for (si, (&c_out, (&stride, &repeats))) in cfg
            .stage_channels
            .iter()
            .zip(cfg.stage_strides.iter().zip(cfg.stage_repeats.iter()))
            .enumerate()
        {
            let mut blocks = Vec::new();
            for bi in 0..repeats {
                let s = if bi == 0 { stride } else { 1 };
                blocks.push(InvertedResidual::new(
                    ps,
                    rng,
                    &format!("enc.s{si}.b{bi}"),
                    c_in,
                    c_out,
                    cfg.expansion,
                    s,
                )?);
                c_in = c_out;
            }
            stages.push(blocks);
        }
        Ok(Encoder {
            cfg: cfg.clone(),
            stem,
            stem_norm,
            stages,
        })
    }

    /// Run the encoder, returning one feature map per pyramid stride.
    pub fn forward(&self, s: &mut Session, image: Var) -> Result<FeaturePyramid> {
        let shape = s.graph.value(image).shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Shape(format!("encoder expects a 3xHxW image, got {shape:?}")));
        }
        let (h, w) = (shape[1], shape[2]);
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Shape(format!(
                "encoder input {h}x{w} must be padded to multiples of 32 (next: {}x{})",
                h.div_ceil(32) * 32,
                w.div_ceil(32) * 32
            )));
        }
        let mut x = self.stem.forward(s, image)?;
        x = self.stem_norm.forward(s, x)?;
        x = s.graph.silu(x)?;
        let mut levels = [x; 4];
        for (si, stage) in self.stages.iter().enumerate() {
            for block in stage {
                x = block.forward(s, x)?;
            }
            levels[si] = x;
        }
        Ok(FeaturePyramid { levels })
    }
}

/// Per-scale 1x1 convolutions reducing pyramid channels to the decoder
/// width. Spatial dims are untouched.
#[derive(Debug)]
pub struct Projection {
    convs: Vec<Conv2dLayer>,
}

impl Projection {
    pub fn new(ps: &mut ParamSet, rng: &mut Rng, enc: &EncoderConfig, dim: usize) -> Self {
        let convs = PYRAMID_STRIDES
            .iter()
            .zip(&enc.stage_channels)
            .map(|(&stride, &c)| {
                Conv2dLayer::new(ps, rng, &format!("proj.s{stride}"), c, dim, 1, 1, 0, 1)
            })
            .collect();
        Projection { convs }
    }

    pub fn project(&self, s: &mut Session, stride: usize, level: Var) -> Result<Var> {
        let i = PYRAMID_STRIDES
            .iter()
            .position(|&st| st == stride)
            .ok_or_else(|| Error::Param(format!("no projection for stride {stride}")))?;
        self.convs[i].forward(s, level)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ExecMode;
    use crate::tensor::Tensor;

    fn build(cfg: &EncoderConfig) -> (ParamSet, Encoder) {
        let mut ps = ParamSet::new();
        let mut rng = Rng::new(3);
        let enc = Encoder::new(&mut ps, &mut rng, cfg).unwrap();
        (ps, enc)
    }

    #[test]
    fn pyramid_shapes_at_64() {
        let cfg = EncoderConfig::default();
        let (ps, enc) = build(&cfg);
        let mut s = Session::new(&ps, ExecMode::Infer);
        let img = s.input(Tensor::zeros(vec![3, 64, 64])).unwrap();
        let pyr = enc.forward(&mut s, img).unwrap();
        for (stride, want_c) in PYRAMID_STRIDES.iter().zip(&cfg.stage_channels) {
            let v = pyr.level(*stride).unwrap();
            assert_eq!(
                s.graph.value(v).shape(),
                &[*want_c, 64 / stride, 64 / stride],
                "stride {stride}"
            );
        }
        assert_eq!(s.graph.value(pyr.bottleneck()).shape(), &[96, 2, 2]);
    }

    #[test]
    fn indivisible_input_reports_padding() {
        let cfg = EncoderConfig::default();
        let (ps, enc) = build(&cfg);
        let mut s = Session::new(&ps, ExecMode::Infer);
        let img = s.input(Tensor::zeros(vec![3, 60, 64])).unwrap();
        let err = enc.forward(&mut s, img).unwrap_err();
        assert!(err.to_string().contains("64x64"), "{err}");
    }

    #[test]
    fn zero_image_zero_features() {
        // Norm layers keep a zero map at zero (mean 0, beta 0), so an
        // all-zero image with zero biases produces all-zero features.
        let cfg = EncoderConfig::default();
        let (ps, enc) = build(&cfg);
        let mut s = Session::new(&ps, ExecMode::Infer);
        let img = s.input(Tensor::zeros(vec![3, 64, 64])).unwrap();
        let pyr = enc.forward(&mut s, img).unwrap();
        let bn = s.graph.value(pyr.bottleneck());
        assert!(bn.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn inverted_residual_skip_is_identity_at_zero_weights() {
        let mut ps = ParamSet::new();
        let mut rng = Rng::new(4);
        let block = InvertedResidual::new(&mut ps, &mut rng, "t", 8, 8, 4, 1).unwrap();
        for e in ps.entries_mut() {
            if e.name.ends_with(".w") {
                e.tensor.data_mut().fill(0.0);
            }
        }
        let mut s = Session::new(&ps, ExecMode::Infer);
        let mut rng2 = Rng::new(5);
        let x = Tensor::uniform(vec![8, 4, 4], -1.0, 1.0, &mut rng2);
        let xv = s.input(x.clone()).unwrap();
        let y = block.forward(&mut s, xv).unwrap();
        assert_eq!(s.graph.value(y).data(), x.data());
    }

    #[test]
    fn stride2_block_halves_spatial_dims() {
        let mut ps = ParamSet::new();
        let mut rng = Rng::new(6);
        let block = InvertedResidual::new(&mut ps, &mut rng, "t", 8, 16, 4, 2).unwrap();
        let mut s = Session::new(&ps, ExecMode::Infer);
        let x = s.input(Tensor::zeros(vec![8, 16, 16])).unwrap();
        let y = block.forward(&mut s, x).unwrap();
        assert_eq!(s.graph.value(y).shape(), &[16, 8, 8]);
    }

    #[test]
    fn block_parameter_count_matches_hand_formula() {
        let mut ps = ParamSet::new();
        let mut rng = Rng::new(7);
        let (c, t, c_out) = (16usize, 4usize, 24usize);
        InvertedResidual::new(&mut ps, &mut rng, "t", c, c_out, t, 2).unwrap();
        let tc = t * c;
        // Conv weights C*tC + tC*9 + tC*C' plus the three norm affine pairs.
        let expect = c * tc + tc * 9 + tc * c_out + 2 * tc + 2 * tc + 2 * c_out;
        assert_eq!(ps.param_count(), expect);
    }

    #[test]
    fn projection_identity_and_linearity() {
        let cfg = EncoderConfig::default();
        let mut ps = ParamSet::new();
        let mut rng = Rng::new(8);
        let proj = Projection::new(&mut ps, &mut rng, &cfg, 24);

        // Identity-initialized 1x1 conv with C_s == P reproduces its input.
        let id = ps.find("proj.s4.w").unwrap();
        {
            let t = ps.get_mut(id);
            t.data_mut().fill(0.0);
            for i in 0..24 {
                t.data_mut()[i * 24 + i] = 1.0;
            }
        }
        ps.get_mut(ps.find("proj.s4.b").unwrap()).data_mut().fill(0.0);

        let mut rng2 = Rng::new(9);
        let x = Tensor::uniform(vec![24, 4, 4], -1.0, 1.0, &mut rng2);
        let mut s = Session::new(&ps, ExecMode::Infer);
        let xv = s.input(x.clone()).unwrap();
        let y = proj.project(&mut s, 4, xv).unwrap();
        assert_eq!(s.graph.value(y).data(), x.data());

        // Linearity through stride 8 with its random weights (bias zero).
        ps.get_mut(ps.find("proj.s8.b").unwrap()).data_mut().fill(0.0);
        let a = Tensor::uniform(vec![32, 3, 3], -1.0, 1.0, &mut rng2);
        let b = Tensor::uniform(vec![32, 3, 3], -1.0, 1.0, &mut rng2);
        let sum = Tensor::from_vec(
            vec![32, 3, 3],
            a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
        )
        .unwrap();
        let mut s = Session::new(&ps, ExecMode::Infer);
        let (av, bv, sv) = (
            s.input(a).unwrap(),
            s.input(b).unwrap(),
            s.input(sum).unwrap(),
        );
        let ya = proj.project(&mut s, 8, av).unwrap();
        let yb = proj.project(&mut s, 8, bv).unwrap();
        let ys = proj.project(&mut s, 8, sv).unwrap();
        for ((pa, pb), psum) in s
            .graph
            .value(ya)
            .data()
            .iter()
            .zip(s.graph.value(yb).data())
            .zip(s.graph.value(ys).data())
        {
            assert!((pa + pb - psum).abs() < 1e-10);
        }
    }

    #[test]
    fn projection_preserves_impulse_location() {
        let cfg = EncoderConfig::default();
        let mut ps = ParamSet::new();
        let mut rng = Rng::new(10);
        let proj = Projection::new(&mut ps, &mut rng, &cfg, 24);
        ps.get_mut(ps.find("proj.s4.b").unwrap()).data_mut().fill(0.0);
        let mut x = Tensor::zeros(vec![24, 4, 4]);
        x.data_mut()[2 * 16 + 1 * 4 + 3] = 1.0; // channel 2, y=1, x=3
        let mut s = Session::new(&ps, ExecMode::Infer);
        let xv = s.input(x).unwrap();
        let y = proj.project(&mut s, 4, xv).unwrap();
        let out = s.graph.value(y);
        for c in 0..24 {
            for p in 0..16 {
                let v = out.data()[c * 16 + p];
                if p != 7 {
                    assert_eq!(v, 0.0, "response leaked to channel {c} pixel {p}");
                }
            }
        }
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let cfg = EncoderConfig::default();
        let (ps1, _) = build(&cfg);
        let (ps2, _) = build(&cfg);
        for (a, b) in ps1.entries().iter().zip(ps2.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
    }

    #[test]
    fn default_encoder_parameter_budget() {
        let cfg = EncoderConfig::default();
        let (ps, _) = build(&cfg);
        let count = ps.param_count();
        assert!(
            (800_000..=2_500_000).contains(&count),
            "encoder params = {count}"
        );
    }
}

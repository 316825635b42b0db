//! Decoder: four Depth Mamba Blocks fusing depth features with projected
//! encoder features through selective-scan token mixers, ending in a
//! per-pixel bin-probability map and depth composition.

use crate::config::DecoderConfig;
use crate::error::{Error, Result};
use crate::layers::{LayerNormLayer, LinearLayer, Session};
use crate::params::{ParamId, ParamKind, ParamSet};
use crate::rng::Rng;
use crate::ssm::{init_a_log, selective_scan_op};
use crate::tensor::{Graph, Tensor, Var};

/// Flatten a `C x h x w` map into `(h*w) x C` row-major tokens.
pub fn tokens_from_chw(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("tokenize expects CxHxW, got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let flat = g.reshape(x, vec![c, h * w])?;
    g.transpose2d(flat)
}

/// Inverse of [`tokens_from_chw`].
pub fn chw_from_tokens(g: &mut Graph, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let shape = g.value(tokens).shape().to_vec();
    if shape.len() != 2 || shape[0] != h * w {
        return Err(Error::Shape(format!(
            "expected {}x{} tokens for a {h}x{w} map, got {shape:?}",
            h * w,
            shape.first().copied().unwrap_or(0)
        )));
    }
    let c = shape[1];
    let flat = g.transpose2d(tokens)?;
    g.reshape(flat, vec![c, h, w])
}

/// Token mixer: normalization, causal depthwise 1-D convolution, selective
/// scan with input-derived timescale/projections, residual; then
/// normalization, feed-forward, residual.
#[derive(Debug)]
pub struct VMambaBlock {
    norm1: LayerNormLayer,
    conv_w: ParamId,
    conv_b: ParamId,
    dt_proj: LinearLayer,
    b_proj: LinearLayer,
    c_proj: LinearLayer,
    a_log: ParamId,
    out_proj: LinearLayer,
    norm2: LayerNormLayer,
    ffn0: LinearLayer,
    ffn1: LinearLayer,
}

impl VMambaBlock {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut Rng,
        name: &str,
        dim: usize,
        state_dim: usize,
        kernel: usize,
    ) -> Self {
        let norm1 = LayerNormLayer::new(ps, &format!("{name}.norm1"), dim);
        let bound = (1.0 / kernel as f64).sqrt();
        let conv_w = ps.add(
            format!("{name}.conv1d.w"),
            Tensor::uniform(vec![dim, kernel], -bound, bound, rng),
            ParamKind::Other,
        );
        let conv_b = ps.add(
            format!("{name}.conv1d.b"),
            Tensor::zeros(vec![dim]),
            ParamKind::Bias,
        );
        let dt_proj = LinearLayer::new(ps, rng, &format!("{name}.dt"), dim, dim);
        // Timescales start log-uniform in [1e-3, 1e-1]; the bias places
        // softplus(0 + b) at the sampled value.
        {
            let bias = ps.get_mut(dt_proj.b);
            for v in bias.data_mut() {
                let dt = (rng.range((1e-3f64).ln(), (1e-1f64).ln())).exp();
                *v = (dt.exp_m1().ln()) as f32 as f64;
            }
        }
        let b_proj = LinearLayer::new(ps, rng, &format!("{name}.bproj"), dim, state_dim);
        let c_proj = LinearLayer::new(ps, rng, &format!("{name}.cproj"), dim, state_dim);
        let a_log = ps.add(format!("{name}.alog"), init_a_log(dim, state_dim), ParamKind::Other);
        let out_proj = LinearLayer::new(ps, rng, &format!("{name}.out"), dim, dim);
        let norm2 = LayerNormLayer::new(ps, &format!("{name}.norm2"), dim);
        let ffn0 = LinearLayer::new(ps, rng, &format!("{name}.ffn0"), dim, 4 * dim);
        let ffn1 = LinearLayer::new(ps, rng, &format!("{name}.ffn1"), 4 * dim, dim);
        VMambaBlock {
            norm1,
            conv_w,
            conv_b,
            dt_proj,
            b_proj,
            c_proj,
            a_log,
            out_proj,
            norm2,
            ffn0,
            ffn1,
        }
    }

    pub fn forward(&self, s: &mut Session, tokens: Var) -> Result<Var> {
        let u = self.norm1.forward(s, tokens)?;
        let cw = s.var(self.conv_w);
        let cb = s.var(self.conv_b);
        let u = s.graph.conv1d_depthwise(u, cw)?;
        let u = s.graph.add_bias_row(u, cb)?;

        let delta_raw = self.dt_proj.forward(s, u)?;
        let delta = s.graph.softplus(delta_raw)?;
        let b_t = self.b_proj.forward(s, u)?;
        let c_t = self.c_proj.forward(s, u)?;
        let a_exp = {
            let alog = s.var(self.a_log);
            let e = s.graph.exp(alog)?;
            s.graph.scale(e, -1.0)?
        };
        let scanned = selective_scan_op(&mut s.graph, u, a_exp, delta, b_t, c_t)?;
        let mixed = self.out_proj.forward(s, scanned)?;
        let t1 = s.graph.add(tokens, mixed)?;

        let f = self.norm2.forward(s, t1)?;
        let f = self.ffn0.forward(s, f)?;
        let f = s.graph.silu(f)?;
        let f = self.ffn1.forward(s, f)?;
        s.graph.add(t1, f)
    }
}

/// Depth Mamba Block: enhance depth tokens, fuse additively with visual
/// tokens through a second mixer, refine, restore the map, upsample x2.
#[derive(Debug)]
pub struct Dmb {
    vm_depth: VMambaBlock,
    vm_fuse: VMambaBlock,
    refine: LinearLayer,
}

impl Dmb {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut Rng,
        name: &str,
        dim: usize,
        state_dim: usize,
        kernel: usize,
    ) -> Self {
        Dmb {
            vm_depth: VMambaBlock::new(ps, rng, &format!("{name}.vmd"), dim, state_dim, kernel),
            vm_fuse: VMambaBlock::new(ps, rng, &format!("{name}.vmf"), dim, state_dim, kernel),
            refine: LinearLayer::new(ps, rng, &format!("{name}.refine"), dim, dim),
        }
    }

    pub fn forward(&self, s: &mut Session, depth_feats: Var, enc_feats: Var) -> Result<Var> {
        let dshape = s.graph.value(depth_feats).shape().to_vec();
        let eshape = s.graph.value(enc_feats).shape().to_vec();
        if dshape != eshape {
            return Err(Error::Shape(format!(
                "depth features {dshape:?} and encoder features {eshape:?} must match"
            )));
        }
        let (h, w) = (dshape[1], dshape[2]);
        let d_tokens = tokens_from_chw(&mut s.graph, depth_feats)?;
        let v_tokens = tokens_from_chw(&mut s.graph, enc_feats)?;
        let d2 = self.vm_depth.forward(s, d_tokens)?;
        let merged = s.graph.add(d2, v_tokens)?;
        let fused = self.vm_fuse.forward(s, merged)?;
        let refined = self.refine.forward(s, fused)?;
        let map = chw_from_tokens(&mut s.graph, refined, h, w)?;
        s.graph.upsample_bilinear(map, 2 * h, 2 * w)
    }
}

/// Pyramid strides consumed by the decoder chain, in application order: the
/// first block pairs the stride-32 global features with the stride-32
/// projection, then 16, 8, 4.
pub const DECODE_STRIDES: [usize; 4] = [32, 16, 8, 4];

#[derive(Debug)]
pub struct Decoder {
    pub dmbs: Vec<Dmb>,
    head: crate::layers::Conv2dLayer,
}

impl Decoder {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut Rng,
        cfg: &DecoderConfig,
        dim: usize,
        n_bins: usize,
    ) -> Self {
        let dmbs = (0..cfg.n_dmb)
            .map(|i| Dmb::new(ps, rng, &format!("dec.dmb{i}"), dim, cfg.state_dim, cfg.conv1d_kernel))
            .collect();
        let head = crate::layers::Conv2dLayer::new(ps, rng, "dec.head", dim, n_bins, 1, 1, 0, 1);
        Decoder { dmbs, head }
    }

    /// Chain the depth blocks over projected pyramid levels (ordered per
    /// [`DECODE_STRIDES`]) and emit bin logits at stride 2.
    pub fn decode(&self, s: &mut Session, global_feats: Var, projected: &[Var]) -> Result<Var> {
        if projected.len() != self.dmbs.len() {
            return Err(Error::Param(format!(
                "decoder expects {} projected levels, got {}",
                self.dmbs.len(),
                projected.len()
            )));
        }
        let mut x = global_feats;
        for (dmb, &visual) in self.dmbs.iter().zip(projected) {
            x = dmb.forward(s, x, visual)?;
        }
        self.head.forward(s, x)
    }
}

/// Softmax the bin axis, take the probability-weighted sum of bin centers
/// per pixel, and upsample the depth map to the requested size.
pub fn compose_depth(
    g: &mut Graph,
    prob_logits: Var,
    centers: Var,
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    let shape = g.value(prob_logits).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("compose_depth expects n x h x w logits, got {shape:?}")));
    }
    if g.value(centers).len() != shape[0] {
        return Err(Error::Shape(format!(
            "{} bin centers vs {} logit channels",
            g.value(centers).len(),
            shape[0]
        )));
    }
    let probs = g.softmax(prob_logits, 0)?;
    let depth = g.bin_compose(probs, centers)?;
    let lifted = g.reshape(depth, vec![1, shape[1], shape[2]])?;
    let up = g.upsample_bilinear(lifted, out_h, out_w)?;
    g.reshape(up, vec![out_h, out_w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ExecMode;
    use crate::tensor::{finite_diff_check_multi, DEFAULT_FD_STEP};

    fn zero_mix_params(ps: &mut ParamSet, base: &str) {
        for suffix in [".out.w", ".out.b", ".ffn1.w", ".ffn1.b"] {
            let id = ps.find(&format!("{base}{suffix}")).unwrap();
            ps.get_mut(id).data_mut().fill(0.0);
        }
    }

    fn identity_refine(ps: &mut ParamSet, name: &str, dim: usize) {
        let w = ps.find(&format!("{name}.w")).unwrap();
        let t = ps.get_mut(w);
        t.data_mut().fill(0.0);
        for i in 0..dim {
            t.data_mut()[i * dim + i] = 1.0;
        }
        let b = ps.find(&format!("{name}.b")).unwrap();
        ps.get_mut(b).data_mut().fill(0.0);
    }

    #[test]
    fn zeroed_projections_make_vmamba_identity() {
        let mut ps = ParamSet::new();
        let mut rng = Rng::new(21);
        let block = VMambaBlock::new(&mut ps, &mut rng, "t", 8, 4, 3);
        zero_mix_params(&mut ps, "t");
        let mut rng2 = Rng::new(22);
        let x = Tensor::uniform(vec![6, 8], -1.0, 1.0, &mut rng2);
        let mut s = Session::new(&ps, ExecMode::Infer);
        let xv = s.input(x.clone()).unwrap();
        let y = block.forward(&mut s, xv).unwrap();
        assert_eq!(s.graph.value(y).data(), x.data());
    }

    #[test]
    fn single_token_is_finite_and_deterministic() {
        let mut ps = ParamSet::new();
        let mut rng = Rng::new(23);
        let block = VMambaBlock::new(&mut ps, &mut rng, "t", 8, 4, 3);
        let mut rng2 = Rng::new(24);
        let x = Tensor::uniform(vec![1, 8], -1.0, 1.0, &mut rng2);
        let run = |x: &Tensor| {
            let mut s = Session::new(&ps, ExecMode::Infer);
            let xv = s.input(x.clone()).unwrap();
            let y = block.forward(&mut s, xv).unwrap();
            s.graph.value(y).data().to_vec()
        };
        let a = run(&x);
        let b = run(&x);
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, b);
    }

    #[test]
    fn vmamba_stack_gradients_check_out() {
        let mut ps = ParamSet::new();
        let mut rng = Rng::new(25);
        let b0 = VMambaBlock::new(&mut ps, &mut rng, "s0", 4, 3, 3);
        let b1 = VMambaBlock::new(&mut ps, &mut rng, "s1", 4, 3, 3);
        let mut rng2 = Rng::new(26);
        let x = Tensor::uniform(vec![8, 4], -1.0, 1.0, &mut rng2);

        // Differentiate wrt the input tokens through both blocks; parameters
        // get their own coverage through the training-path tests.
        let err = finite_diff_check_multi(
            |g, vars| {
                let mut s = Session::from_graph(&ps, ExecMode::Infer, std::mem::take(g));
                let out = (|| {
                    let y0 = b0.forward(&mut s, vars[0])?;
                    let y1 = b1.forward(&mut s, y0)?;
                    let sq = s.graph.mul(y1, y1)?;
                    s.graph.sum(sq)
                })();
                *g = s.into_graph();
                out
            },
            std::slice::from_ref(&x),
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn dmb_output_shape_doubles() {
        let mut ps = ParamSet::new();
        let mut rng = Rng::new(27);
        let dmb = Dmb::new(&mut ps, &mut rng, "d", 24, 8, 3);
        let mut s = Session::new(&ps, ExecMode::Infer);
        let d = s.input(Tensor::zeros(vec![24, 4, 4])).unwrap();
        let v = s.input(Tensor::zeros(vec![24, 4, 4])).unwrap();
        let y = dmb.forward(&mut s, d, v).unwrap();
        assert_eq!(s.graph.value(y).shape(), &[24, 8, 8]);
    }

    #[test]
    fn identity_blocks_reduce_to_additive_fusion() {
        let mut ps = ParamSet::new();
        let mut rng = Rng::new(28);
        let dmb = Dmb::new(&mut ps, &mut rng, "d", 8, 4, 3);
        zero_mix_params(&mut ps, "d.vmd");
        zero_mix_params(&mut ps, "d.vmf");
        identity_refine(&mut ps, "d.refine", 8);

        let mut rng2 = Rng::new(29);
        let depth = Tensor::uniform(vec![8, 3, 3], -1.0, 1.0, &mut rng2);
        let visual = Tensor::uniform(vec![8, 3, 3], -1.0, 1.0, &mut rng2);
        let mut s = Session::new(&ps, ExecMode::Infer);
        let (dv, vv) = (s.input(depth.clone()).unwrap(), s.input(visual.clone()).unwrap());
        let y = dmb.forward(&mut s, dv, vv).unwrap();

        // Expectation: bilinear x2 upsample of (depth + visual).
        let sum = Tensor::from_vec(
            vec![8, 3, 3],
            depth.data().iter().zip(visual.data()).map(|(a, b)| a + b).collect(),
        )
        .unwrap();
        let mut g2 = Graph::new();
        let sv = g2.constant(sum);
        let expect = g2.upsample_bilinear(sv, 6, 6).unwrap();
        assert_eq!(s.graph.value(y).data(), g2.value(expect).data());
    }

    #[test]
    fn token_reshape_round_trips_bit_exactly() {
        let mut rng = Rng::new(30);
        let x = Tensor::uniform(vec![5, 4, 3], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let tk = tokens_from_chw(&mut g, xv).unwrap();
        assert_eq!(g.value(tk).shape(), &[12, 5]);
        let back = chw_from_tokens(&mut g, tk, 4, 3).unwrap();
        assert_eq!(g.value(back).data(), x.data());
    }

    #[test]
    fn scan_causality_inside_vmamba() {
        // Perturbing the last token must leave every earlier output bit
        // unchanged: the conv is causal and the scan runs forward.
        let mut ps = ParamSet::new();
        let mut rng = Rng::new(31);
        let block = VMambaBlock::new(&mut ps, &mut rng, "t", 6, 4, 3);
        let mut rng2 = Rng::new(32);
        let x = Tensor::uniform(vec![10, 6], -1.0, 1.0, &mut rng2);
        let mut x2 = x.clone();
        for j in 0..6 {
            x2.data_mut()[9 * 6 + j] += 0.5;
        }
        let run = |t: &Tensor| {
            let mut s = Session::new(&ps, ExecMode::Infer);
            let v = s.input(t.clone()).unwrap();
            let y = block.forward(&mut s, v).unwrap();
            s.graph.value(y).data().to_vec()
        };
        let (ya, yb) = (run(&x), run(&x2));
        assert_eq!(&ya[..9 * 6], &yb[..9 * 6]);
        assert!(ya[9 * 6..] != yb[9 * 6..]);
    }

    #[test]
    fn compose_depth_uniform_and_saturated() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(vec![2, 2, 2]));
        let centers = g.constant(Tensor::from_vec(vec![2], vec![2.5, 7.5]).unwrap());
        let d = compose_depth(&mut g, logits, centers, 2, 2).unwrap();
        for v in g.value(d).data() {
            assert!((v - 5.0).abs() < 1e-12);
        }

        // One-hot logits (+30 on bin 1) saturate to that center.
        let mut hot = Tensor::zeros(vec![2, 1, 1]);
        hot.data_mut()[1] = 30.0;
        let hv = g.constant(hot);
        let c2 = g.constant(Tensor::from_vec(vec![2], vec![2.5, 7.5]).unwrap());
        let d2 = compose_depth(&mut g, hv, c2, 1, 1).unwrap();
        assert!((g.value(d2).data()[0] - 7.5).abs() < 1e-6);
    }

    #[test]
    fn composed_depth_is_convex_combination_of_centers() {
        let mut rng = Rng::new(33);
        let centers_t = {
            let bins = crate::mpsp::DepthBins::uniform(16, 0.1, 10.0).unwrap();
            Tensor::from_vec(vec![16], bins.centers).unwrap()
        };
        let lo = centers_t.data()[0];
        let hi = *centers_t.data().last().unwrap();
        for _ in 0..20 {
            let logits = Tensor::uniform(vec![16, 5, 5], -8.0, 8.0, &mut rng);
            let mut g = Graph::new();
            let lv = g.constant(logits);
            let cv = g.constant(centers_t.clone());
            let d = compose_depth(&mut g, lv, cv, 10, 10).unwrap();
            for v in g.value(d).data() {
                assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12, "depth {v} outside [{lo}, {hi}]");
            }
        }
    }

    fn decoder_param_formula(p: usize, n: usize, k: usize, n_bins: usize) -> usize {
        let vmamba = 2 * p                       // norm1
            + p * k + p                          // conv1d
            + p * p + p                          // dt proj
            + p * n + n                          // B proj
            + p * n + n                          // C proj
            + p * n                              // a_log
            + p * p + p                          // out proj
            + 2 * p                              // norm2
            + p * 4 * p + 4 * p                  // ffn0
            + 4 * p * p + p; // ffn1
        let dmb = 2 * vmamba + p * p + p;
        4 * dmb + p * n_bins + n_bins
    }

    #[test]
    fn decoder_parameter_count_matches_hand_formula() {
        for p in [24usize, 16] {
            let mut ps = ParamSet::new();
            let mut rng = Rng::new(34);
            let cfg = DecoderConfig::default();
            Decoder::new(&mut ps, &mut rng, &cfg, p, 64);
            let count: usize = ps
                .entries()
                .iter()
                .filter(|e| e.name.starts_with("dec."))
                .map(|e| e.tensor.len())
                .sum();
            assert_eq!(count, decoder_param_formula(p, 8, 3, 64), "P = {p}");
        }
    }

    #[test]
    fn decode_shape_chain_and_zero_weights() {
        let mut ps = ParamSet::new();
        let mut rng = Rng::new(35);
        let cfg = DecoderConfig::default();
        let dec = Decoder::new(&mut ps, &mut rng, &cfg, 24, 64);
        for e in ps.entries_mut() {
            e.tensor.data_mut().fill(0.0);
        }
        let mut s = Session::new(&ps, ExecMode::Infer);
        let global = s.input(Tensor::zeros(vec![24, 2, 2])).unwrap();
        let proj: Vec<Var> = [2usize, 4, 8, 16]
            .iter()
            .map(|&side| s.input(Tensor::zeros(vec![24, side, side])).unwrap())
            .collect();
        let logits = dec.decode(&mut s, global, &proj).unwrap();
        assert_eq!(s.graph.value(logits).shape(), &[64, 32, 32]);
        assert!(s.graph.value(logits).data().iter().all(|v| *v == 0.0));
    }
}

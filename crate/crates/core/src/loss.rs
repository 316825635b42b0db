//! Training losses: auxiliary scene classification, scaled scale-invariant
//! log-depth regression, and their weighted combination.

use crate::config::LossConfig;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Negative log-likelihood of the labelled class under the softmax of the
/// logits.
pub fn cls_loss(g: &mut Graph, logits: Var, label: usize) -> Result<Var> {
    let n = g.value(logits).len();
    if g.value(logits).rank() != 1 {
        return Err(Error::Shape(format!(
            "cls_loss expects a logit vector, got {:?}",
            g.value(logits).shape()
        )));
    }
    if label >= n {
        return Err(Error::Param(format!("label {label} out of range for {n} classes")));
    }
    let probs = g.softmax(logits, 0)?;
    let logp = g.log(probs)?;
    let mut onehot = Tensor::zeros(vec![n]);
    onehot.data_mut()[label] = 1.0;
    let oh = g.constant(onehot);
    let picked = g.mul(logp, oh)?;
    let s = g.sum(picked)?;
    g.scale(s, -1.0)
}

/// Scaled scale-invariant loss over log-depth residuals
/// `gi = ln(pred_i) - ln(gt_i)` on valid pixels:
/// `alpha * sqrt( mean(g^2) - lambda * mean(g)^2 )`.
///
/// The under-root value is clamped at zero before the square root; the
/// gradient denominator is floored so a perfect prediction has loss exactly
/// zero with a zero (not NaN) gradient.
pub fn si_loss(
    g: &mut Graph,
    pred: Var,
    gt: &[f64],
    valid: &[bool],
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let pv = g.value(pred);
    if pv.len() != gt.len() || gt.len() != valid.len() {
        return Err(Error::Shape(format!(
            "si_loss sizes differ: pred {}, gt {}, mask {}",
            pv.len(),
            gt.len(),
            valid.len()
        )));
    }
    let t = valid.iter().filter(|v| **v).count();
    if t == 0 {
        return Err(Error::EmptyTarget("si_loss has no valid pixels".into()));
    }
    for (i, (&gv, &m)) in gt.iter().zip(valid).enumerate() {
        if m && gv <= 0.0 {
            return Err(Error::Domain(format!(
                "ground-truth depth {gv} at valid pixel {i} is not positive"
            )));
        }
    }
    // log_masked validates pred > 0 on valid pixels itself.
    let shape = pv.shape().to_vec();
    let log_pred = g.log_masked(pred, valid.to_vec())?;
    let log_gt: Vec<f64> = gt
        .iter()
        .zip(valid)
        .map(|(&d, &m)| if m { d.ln() } else { 0.0 })
        .collect();
    let log_gt = g.constant(Tensor::from_vec(shape, log_gt)?);
    let diff = g.sub(log_pred, log_gt)?;

    let tf = t as f64;
    let sq = g.mul(diff, diff)?;
    let sum_sq = g.sum(sq)?;
    let mean_sq = g.scale(sum_sq, 1.0 / tf)?;
    let sum_g = g.sum(diff)?;
    let sum_g_sq = g.mul(sum_g, sum_g)?;
    let penalty = g.scale(sum_g_sq, cfg.lambda / (tf * tf))?;
    let inner = g.sub(mean_sq, penalty)?;
    let root = g.sqrt_guard(inner, 1e-12)?;
    g.scale(root, cfg.alpha)
}

/// Combined objective: `cls + beta * reg` when the classification term is in
/// use, otherwise the regression term alone.
pub fn total_loss(g: &mut Graph, cls: Option<Var>, reg: Var, cfg: &LossConfig) -> Result<Var> {
    match (cfg.use_cls, cls) {
        (true, Some(cls)) => {
            let weighted = g.scale(reg, cfg.beta)?;
            g.add(cls, weighted)
        }
        _ => Ok(reg),
    }
}

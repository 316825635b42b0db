//! Toy-scale training: AdamW with decoupled weight decay over shuffled
//! mini-batches of ingested samples, with divergence detection and a
//! last-good checkpoint.

use crate::dataset::SamplePair;
use crate::error::{Error, Result};
use crate::layers::ExecMode;
use crate::loss::{cls_loss, si_loss, total_loss};
use crate::metrics::{evaluate, MetricReport};
use crate::model::LmDepth;
use crate::params::ParamId;
use crate::quant::QuantModel;
use crate::rng::Rng;
use crate::tensor::Graph;

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 500,
            lr: 2e-4,
            batch_size: 4,
            seed: 0,
            weight_decay: 1e-4,
        }
    }
}

/// One loss-log row.
#[derive(Debug, Clone, Copy)]
pub struct LossRow {
    pub step: usize,
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
}

impl LossRow {
    pub fn to_line(&self) -> String {
        format!(
            "step={} total={:.6} cls={:.6} reg={:.6}",
            self.step, self.total, self.cls, self.reg
        )
    }
}

#[derive(Debug)]
pub struct TrainReport {
    pub rows: Vec<LossRow>,
    /// Set when the loss went non-finite; the model holds the last good
    /// parameters in that case.
    pub diverged_at: Option<usize>,
}

/// AdamW: first/second moment estimates with bias correction and decoupled
/// weight decay. Updated parameters snap to the f32 grid so that saved
/// weights reload bit-exactly.
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(model: &LmDepth, lr: f64, weight_decay: f64) -> Self {
        let sizes: Vec<usize> = model.params.entries().iter().map(|e| e.tensor.len()).collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, model: &mut LmDepth, grads: &[Option<Vec<f64>>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, entry) in model.params.entries_mut().iter_mut().enumerate() {
            let Some(g) = grads[i].as_ref() else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (j, p) in entry.tensor.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let update = m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *p;
                *p = (*p - self.lr * update) as f32 as f64;
            }
        }
    }
}

/// Run the training loop. Scene labels participate only when the loss
/// config enables classification and the sample carries a label.
pub fn train(model: &mut LmDepth, samples: &[SamplePair], opt: &TrainOptions) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(Error::Param("training needs at least one sample".into()));
    }
    if opt.batch_size == 0 {
        return Err(Error::Param("batch size must be >= 1".into()));
    }
    let mut rng = Rng::new(opt.seed ^ 0x7261_696e);
    let mut optimizer = AdamW::new(model, opt.lr, opt.weight_decay);
    let mut rows = Vec::with_capacity(opt.steps);
    let mut pool: Vec<usize> = Vec::new();
    let loss_cfg = model.cfg.loss.clone();

    for step in 1..=opt.steps {
        let mut batch = Vec::with_capacity(opt.batch_size);
        for _ in 0..opt.batch_size {
            if pool.is_empty() {
                pool = (0..samples.len()).collect();
                rng.shuffle(&mut pool);
            }
            batch.push(pool.pop().unwrap());
        }

        let snapshot: Vec<Vec<f64>> = model
            .params
            .entries()
            .iter()
            .map(|e| e.tensor.data().to_vec())
            .collect();

        let mut s = model.session(ExecMode::Train);
        let mut batch_total = None;
        let mut sum_cls = 0.0;
        let mut sum_reg = 0.0;
        for &idx in &batch {
            let sample = &samples[idx];
            let img = s.input(sample.rgb.clone())?;
            let out = model.forward(&mut s, img)?;
            let reg = si_loss(&mut s.graph, out.depth, &sample.depth_gt, &sample.valid, &loss_cfg)?;
            sum_reg += s.graph.value(reg).item()?;
            let cls = match (loss_cfg.use_cls, sample.scene_label) {
                (true, Some(label)) => {
                    let c = cls_loss(&mut s.graph, out.class_logits, label)?;
                    sum_cls += s.graph.value(c).item()?;
                    Some(c)
                }
                _ => None,
            };
            let sample_total = total_loss(&mut s.graph, cls, reg, &loss_cfg)?;
            batch_total = Some(match batch_total {
                None => sample_total,
                Some(acc) => s.graph.add(acc, sample_total)?,
            });
        }
        let total = s.graph.scale(batch_total.unwrap(), 1.0 / batch.len() as f64)?;
        let total_value = s.graph.value(total).item()?;
        let row = LossRow {
            step,
            total: total_value,
            cls: sum_cls / batch.len() as f64,
            reg: sum_reg / batch.len() as f64,
        };

        if !total_value.is_finite() {
            // Restore the last good parameters and stop.
            for (entry, snap) in model.params.entries_mut().iter_mut().zip(&snapshot) {
                entry.tensor.data_mut().copy_from_slice(snap);
            }
            return Ok(TrainReport {
                rows,
                diverged_at: Some(step),
            });
        }

        s.graph.backward(total)?;
        let grads: Vec<Option<Vec<f64>>> = (0..model.params.len())
            .map(|i| s.graph.grad(s.var(ParamId(i))).map(|g| g.to_vec()))
            .collect();
        drop(s);
        optimizer.step(model, &grads);
        rows.push(row);
    }
    Ok(TrainReport {
        rows,
        diverged_at: None,
    })
}

/// Evaluate a model over ingested samples at model resolution; returns the
/// per-image reports and their mean.
pub fn evaluate_model(
    model: &LmDepth,
    samples: &[SamplePair],
    quant: Option<&QuantModel>,
) -> Result<(Vec<MetricReport>, MetricReport)> {
    if samples.is_empty() {
        return Err(Error::EmptyTarget("no samples to evaluate".into()));
    }
    let mut reports = Vec::with_capacity(samples.len());
    for sample in samples {
        let depth = model.infer_depth(sample.rgb.clone(), quant)?;
        reports.push(evaluate(&depth, &sample.depth_gt, &sample.valid)?);
    }
    let mean = MetricReport::mean(&reports)?;
    Ok((reports, mean))
}

/// Compute the regression loss of a model over samples without training;
/// used for before/after comparisons.
pub fn mean_reg_loss(model: &LmDepth, samples: &[SamplePair]) -> Result<f64> {
    let mut sum = 0.0;
    for sample in samples {
        let mut s = model.session(ExecMode::Infer);
        let img = s.input(sample.rgb.clone())?;
        let out = model.forward(&mut s, img)?;
        let reg = si_loss(
            &mut s.graph,
            out.depth,
            &sample.depth_gt,
            &sample.valid,
            &model.cfg.loss,
        )?;
        sum += s.graph.value(reg).item()?;
    }
    Ok(sum / samples.len() as f64)
}

/// Gradient presence check across both heads: with classification enabled,
/// one training step must push nonzero gradients into the classifier and
/// the bins head alike.
pub fn head_grads_nonzero(model: &LmDepth, sample: &SamplePair) -> Result<(bool, bool)> {
    let mut s = model.session(ExecMode::Train);
    let img = s.input(sample.rgb.clone())?;
    let out = model.forward(&mut s, img)?;
    let reg = si_loss(&mut s.graph, out.depth, &sample.depth_gt, &sample.valid, &model.cfg.loss)?;
    let cls = cls_loss(&mut s.graph, out.class_logits, sample.scene_label.unwrap_or(0))?;
    let total = total_loss(&mut s.graph, Some(cls), reg, &model.cfg.loss)?;
    s.graph.backward(total)?;
    let nonzero = |prefix: &str, s: &crate::layers::Session, g: &Graph| -> bool {
        model
            .params
            .entries()
            .iter()
            .enumerate()
            .filter(|(_, e)| e.name.starts_with(prefix))
            .any(|(i, _)| {
                g.grad(s.var(ParamId(i)))
                    .is_some_and(|gr| gr.iter().any(|v| *v != 0.0))
            })
    };
    let cls_hit = nonzero("mpsp.cls.", &s, &s.graph);
    let bins_hit = nonzero("mpsp.bins.", &s, &s.graph);
    Ok((cls_hit, bins_hit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::dataset::generate_synthetic;

    fn tiny_config() -> ModelConfig {
        let mut cfg = ModelConfig::lmdepth();
        cfg.encoder.stem_channels = 4;
        cfg.encoder.stage_channels = vec![6, 8, 10, 12];
        cfg.encoder.stage_repeats = vec![1, 1, 1, 1];
        cfg.encoder.expansion = 2;
        cfg.projection_dim = 6;
        cfg.mpsp.branch_channels = 4;
        cfg.mpsp.n_bins = 8;
        cfg.mpsp.n_classes = 5;
        cfg.decoder.state_dim = 4;
        cfg
    }

    #[test]
    fn few_steps_reduce_loss() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_synthetic(dir.path(), 4, &cfg, 3).unwrap();
        let samples = crate::dataset::ingest_dataset(&manifest, &cfg).unwrap();
        let mut model = LmDepth::new(&cfg, 5).unwrap();
        let before = mean_reg_loss(&model, &samples).unwrap();
        let opt = TrainOptions {
            steps: 30,
            lr: 1e-3,
            batch_size: 2,
            seed: 1,
            ..TrainOptions::default()
        };
        let report = train(&mut model, &samples, &opt).unwrap();
        assert!(report.diverged_at.is_none());
        assert_eq!(report.rows.len(), 30);
        let after = mean_reg_loss(&model, &samples).unwrap();
        assert!(after < before, "loss did not drop: {before} -> {after}");
    }

    #[test]
    fn training_is_seed_deterministic() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_synthetic(dir.path(), 4, &cfg, 3).unwrap();
        let samples = crate::dataset::ingest_dataset(&manifest, &cfg).unwrap();
        let run = || {
            let mut model = LmDepth::new(&cfg, 5).unwrap();
            let opt = TrainOptions {
                steps: 5,
                batch_size: 2,
                seed: 9,
                ..TrainOptions::default()
            };
            train(&mut model, &samples, &opt).unwrap();
            model.save_weights().to_bytes()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn nan_parameters_abort_with_last_good() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_synthetic(dir.path(), 2, &cfg, 3).unwrap();
        let samples = crate::dataset::ingest_dataset(&manifest, &cfg).unwrap();
        let mut model = LmDepth::new(&cfg, 5).unwrap();
        // Poison one weight so the first forward yields a non-finite loss.
        model.params.entries_mut()[0].tensor.data_mut()[0] = f64::NAN;
        let snapshot: Vec<f64> = model.params.entries()[0].tensor.data().to_vec();
        let report = train(&mut model, &samples, &TrainOptions::default()).unwrap();
        assert_eq!(report.diverged_at, Some(1));
        // Parameters equal the pre-step snapshot (bitwise, NaN-aware).
        let now = model.params.entries()[0].tensor.data();
        for (a, b) in snapshot.iter().zip(now) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn gradients_reach_both_heads() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_synthetic(dir.path(), 2, &cfg, 3).unwrap();
        let samples = crate::dataset::ingest_dataset(&manifest, &cfg).unwrap();
        let model = LmDepth::new(&cfg, 5).unwrap();
        let (cls_hit, bins_hit) = head_grads_nonzero(&model, &samples[0]).unwrap();
        assert!(cls_hit, "classifier head received no gradient");
        assert!(bins_hit, "bins head received no gradient");
    }
}

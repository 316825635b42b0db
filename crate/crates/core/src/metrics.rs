//! Depth evaluation metrics: REL, RMS, log10, the three threshold
//! accuracies, squared relative difference, and RMSE of log depth.

use crate::error::{Error, Result};

pub const DELTA_THRESHOLDS: [f64; 3] = [1.25, 1.5625, 1.953125];

/// Per-image (or aggregate) metric values plus the number of valid pixels
/// they were computed over.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rel: f64,
    pub rms: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub sq_rel: f64,
    pub rmse_log: f64,
    pub n_valid: usize,
}

impl MetricReport {
    /// Flat `key=value` serialization, one token per metric field.
    pub fn to_kv(&self) -> String {
        format!(
            "rel={:.6} rms={:.6} log10={:.6} delta1={:.6} delta2={:.6} delta3={:.6} sq_rel={:.6} rmse_log={:.6} n_valid={}",
            self.rel,
            self.rms,
            self.log10,
            self.delta1,
            self.delta2,
            self.delta3,
            self.sq_rel,
            self.rmse_log,
            self.n_valid
        )
    }

    /// Unweighted mean over per-image reports; `n_valid` accumulates.
    pub fn mean(reports: &[MetricReport]) -> Result<MetricReport> {
        if reports.is_empty() {
            return Err(Error::EmptyTarget("no reports to aggregate".into()));
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(MetricReport {
            rel: avg(|r| r.rel),
            rms: avg(|r| r.rms),
            log10: avg(|r| r.log10),
            delta1: avg(|r| r.delta1),
            delta2: avg(|r| r.delta2),
            delta3: avg(|r| r.delta3),
            sq_rel: avg(|r| r.sq_rel),
            rmse_log: avg(|r| r.rmse_log),
            n_valid: reports.iter().map(|r| r.n_valid).sum(),
        })
    }
}

/// Evaluate predicted against ground-truth depth over the valid mask.
/// Pixels with nonpositive ground truth are excluded regardless of the mask;
/// a nonpositive prediction at a valid pixel is a domain error.
pub fn evaluate(pred: &[f64], gt: &[f64], valid: &[bool]) -> Result<MetricReport> {
    if pred.len() != gt.len() || gt.len() != valid.len() {
        return Err(Error::Shape(format!(
            "evaluate sizes differ: pred {}, gt {}, mask {}",
            pred.len(),
            gt.len(),
            valid.len()
        )));
    }
    let mut n = 0usize;
    let mut rel = 0.0;
    let mut rms = 0.0;
    let mut log10 = 0.0;
    let mut hits = [0usize; 3];
    let mut sq_rel = 0.0;
    let mut rmse_log = 0.0;
    for ((&p, &y), &m) in pred.iter().zip(gt).zip(valid) {
        if !m || y <= 0.0 {
            continue;
        }
        if p <= 0.0 {
            return Err(Error::Domain(format!(
                "nonpositive prediction {p} at a valid pixel"
            )));
        }
        n += 1;
        let diff = y - p;
        rel += diff.abs() / y;
        rms += diff * diff;
        log10 += (y.log10() - p.log10()).abs();
        let ratio = (y / p).max(p / y);
        for (h, thr) in hits.iter_mut().zip(DELTA_THRESHOLDS) {
            if ratio < thr {
                *h += 1;
            }
        }
        sq_rel += diff * diff / y;
        let dl = y.ln() - p.ln();
        rmse_log += dl * dl;
    }
    if n == 0 {
        return Err(Error::EmptyTarget("no valid pixels to evaluate".into()));
    }
    let nf = n as f64;
    Ok(MetricReport {
        rel: rel / nf,
        rms: (rms / nf).sqrt(),
        log10: log10 / nf,
        delta1: hits[0] as f64 / nf,
        delta2: hits[1] as f64 / nf,
        delta3: hits[2] as f64 / nf,
        sq_rel: sq_rel / nf,
        rmse_log: (rmse_log / nf).sqrt(),
        n_valid: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn perfect_prediction() {
        let gt = vec![1.0, 2.0, 3.0];
        let r = evaluate(&gt, &gt, &[true; 3]).unwrap();
        assert_eq!(r.rel, 0.0);
        assert_eq!(r.rms, 0.0);
        assert_eq!((r.delta1, r.delta2, r.delta3), (1.0, 1.0, 1.0));
        assert_eq!(r.n_valid, 3);
    }

    #[test]
    fn hand_computed_two_pixel_case() {
        // gt = [1, 2], pred = [1.2, 2.6]: ratios 1.2 and 1.3.
        let r = evaluate(&[1.2, 2.6], &[1.0, 2.0], &[true; 2]).unwrap();
        assert_eq!(r.delta1, 0.5);
        assert_eq!(r.delta2, 1.0);
        assert!((r.rel - 0.25).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_sq_rel_and_rmse_log() {
        // gt = [4], pred = [2]: Sq-Rel = 4/4 = 1, RMSE-log = ln 2.
        let r = evaluate(&[2.0], &[4.0], &[true]).unwrap();
        assert!((r.sq_rel - 1.0).abs() < 1e-12);
        assert!((r.rmse_log - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn delta_is_symmetric_rel_is_not() {
        let a = evaluate(&[2.0], &[4.0], &[true]).unwrap();
        let b = evaluate(&[4.0], &[2.0], &[true]).unwrap();
        assert_eq!(a.delta1, b.delta1);
        assert_eq!(a.delta2, b.delta2);
        assert!((a.rel - 0.5).abs() < 1e-12);
        assert!((b.rel - 1.0).abs() < 1e-12);
        assert!(a.rel != b.rel);
        assert!(a.sq_rel != b.sq_rel);
    }

    #[test]
    fn zero_gt_pixels_are_excluded() {
        let r = evaluate(&[1.0, 5.0], &[1.0, 0.0], &[true, true]).unwrap();
        assert_eq!(r.n_valid, 1);
        assert_eq!(r.rel, 0.0);
    }

    #[test]
    fn all_invalid_is_empty_target() {
        let e = evaluate(&[1.0], &[0.0], &[true]);
        assert!(matches!(e, Err(Error::EmptyTarget(_))));
    }

    #[test]
    fn matches_independent_per_pixel_oracle() {
        // Second implementation written from the metric definitions, pixel
        // by pixel, kept deliberately naive.
        fn oracle(pred: &[f64], gt: &[f64]) -> MetricReport {
            let pixels: Vec<(f64, f64)> = pred
                .iter()
                .zip(gt)
                .filter(|(_, y)| **y > 0.0)
                .map(|(p, y)| (*p, *y))
                .collect();
            let n = pixels.len() as f64;
            let mut r = MetricReport {
                rel: 0.0,
                rms: 0.0,
                log10: 0.0,
                delta1: 0.0,
                delta2: 0.0,
                delta3: 0.0,
                sq_rel: 0.0,
                rmse_log: 0.0,
                n_valid: pixels.len(),
            };
            for &(p, y) in &pixels {
                r.rel += (y - p).abs() / y / n;
                r.rms += (y - p) * (y - p) / n;
                r.log10 += (y.log10() - p.log10()).abs() / n;
                r.sq_rel += (y - p) * (y - p) / y / n;
                r.rmse_log += (y.ln() - p.ln()).powi(2) / n;
                let ratio = (y / p).max(p / y);
                if ratio < 1.25 {
                    r.delta1 += 1.0 / n;
                }
                if ratio < 1.25 * 1.25 {
                    r.delta2 += 1.0 / n;
                }
                if ratio < 1.25 * 1.25 * 1.25 {
                    r.delta3 += 1.0 / n;
                }
            }
            r.rms = r.rms.sqrt();
            r.rmse_log = r.rmse_log.sqrt();
            r
        }

        let mut rng = Rng::new(61);
        for _ in 0..100 {
            let n = 16 + rng.below(64);
            let gt: Vec<f64> = (0..n).map(|_| rng.range(0.2, 9.5)).collect();
            let pred: Vec<f64> = (0..n).map(|_| rng.range(0.2, 9.5)).collect();
            let got = evaluate(&pred, &gt, &vec![true; n]).unwrap();
            let want = oracle(&pred, &gt);
            for (a, b) in [
                (got.rel, want.rel),
                (got.rms, want.rms),
                (got.log10, want.log10),
                (got.delta1, want.delta1),
                (got.delta2, want.delta2),
                (got.delta3, want.delta3),
                (got.sq_rel, want.sq_rel),
                (got.rmse_log, want.rmse_log),
            ] {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
            assert_eq!(got.n_valid, want.n_valid);
        }
    }

    #[test]
    fn kv_schema_has_nine_fields() {
        let r = evaluate(&[1.0], &[1.0], &[true]).unwrap();
        let kv = r.to_kv();
        assert_eq!(kv.split_whitespace().count(), 9);
        for key in [
            "rel=", "rms=", "log10=", "delta1=", "delta2=", "delta3=", "sq_rel=", "rmse_log=",
            "n_valid=",
        ] {
            assert!(kv.contains(key), "missing {key} in {kv}");
        }
    }

    #[test]
    fn aggregate_is_mean_over_images() {
        let a = evaluate(&[1.0, 1.0], &[1.0, 2.0], &[true; 2]).unwrap();
        let b = evaluate(&[3.0], &[3.0], &[true]).unwrap();
        let m = MetricReport::mean(&[a.clone(), b.clone()]).unwrap();
        assert!((m.rel - (a.rel + b.rel) / 2.0).abs() < 1e-12);
        assert_eq!(m.n_valid, 3);
    }

    #[test]
    fn deltas_are_ordered() {
        let mut rng = Rng::new(62);
        let gt: Vec<f64> = (0..100).map(|_| rng.range(0.2, 9.5)).collect();
        let pred: Vec<f64> = (0..100).map(|_| rng.range(0.2, 9.5)).collect();
        let r = evaluate(&pred, &gt, &vec![true; 100]).unwrap();
        assert!(r.delta1 <= r.delta2 && r.delta2 <= r.delta3 && r.delta3 <= 1.0);
        assert!(r.rel >= 0.0 && r.rms >= 0.0 && r.sq_rel >= 0.0 && r.rmse_log >= 0.0);
    }
}

//! Depth evaluation metrics over the joint validity mask.
//!
//! | metric | definition (over masked pixels, `p` = pred, `g` = gt) |
//! |--------|------------------------------------------------------|
//! | REL    | `mean(|p - g| / g)` |
//! | sqREL  | `mean((p - g)^2 / g)` |
//! | RMSE   | `sqrt(mean((p - g)^2))`, meters |
//! | MAE    | `mean(|p - g|)`, meters |
//! | iRMSE  | `sqrt(mean((1000/p - 1000/g)^2))`, 1/km |
//! | SILog  | `100 * std(ln p - ln g)` |
//! | δi     | fraction with `max(p/g, g/p) < 1.25^i` |

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataio::DepthMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub irmse: f64,
    pub silog: f64,
    pub mae: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_valid: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Metrics per image, then the unweighted mean across images.
    #[default]
    PerImage,
    /// All masked pixels of all images pooled into one population.
    Pooled,
}

#[derive(Default)]
struct Accumulator {
    n: usize,
    abs_rel: f64,
    sq_rel: f64,
    sq: f64,
    abs: f64,
    inv_sq: f64,
    log_err: Vec<f64>,
    d: [usize; 3],
}

impl Accumulator {
    fn add(&mut self, pred: &DepthMap, gt: &DepthMap) -> Result<()> {
        if pred.width() != gt.width() || pred.height() != gt.height() {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.width(),
                pred.height(),
                gt.width(),
                gt.height()
            )));
        }
        let thresholds = [1.25, 1.25f64.powi(2), 1.25f64.powi(3)];
        let pixels = pred.values().iter().zip(pred.valid()).zip(gt.values().iter().zip(gt.valid()));
        for ((&p, &pv), (&g, &gv)) in pixels {
            if !(pv && gv && p > 0.0 && g > 0.0) {
                continue;
            }
            let diff = p - g;
            self.n += 1;
            self.abs_rel += diff.abs() / g;
            self.sq_rel += diff * diff / g;
            self.sq += diff * diff;
            self.abs += diff.abs();
            let inv = 1000.0 / p - 1000.0 / g;
            self.inv_sq += inv * inv;
            self.log_err.push(p.ln() - g.ln());
            let ratio = (p / g).max(g / p);
            for (count, t) in self.d.iter_mut().zip(thresholds) {
                if ratio < t {
                    *count += 1;
                }
            }
        }
        Ok(())
    }

    fn finish(self) -> Result<MetricReport> {
        if self.n == 0 {
            return Err(Error::EmptyEvaluation);
        }
        let n = self.n as f64;
        let mean_log = self.log_err.iter().sum::<f64>() / n;
        let var_log = self.log_err.iter().map(|e| (e - mean_log).powi(2)).sum::<f64>() / n;
        Ok(MetricReport {
            rel: self.abs_rel / n,
            sq_rel: self.sq_rel / n,
            rmse: (self.sq / n).sqrt(),
            irmse: (self.inv_sq / n).sqrt(),
            silog: 100.0 * var_log.sqrt(),
            mae: self.abs / n,
            delta1: self.d[0] as f64 / n,
            delta2: self.d[1] as f64 / n,
            delta3: self.d[2] as f64 / n,
            n_valid: self.n,
        })
    }
}

/// Metrics of one prediction against its ground truth. Pixels are evaluated
/// only where both maps are valid and positive.
pub fn compute_metrics(pred: &DepthMap, gt: &DepthMap) -> Result<MetricReport> {
    let mut acc = Accumulator::default();
    acc.add(pred, gt)?;
    acc.finish()
}

/// Metrics over the union of all masked pixels of several pairs.
pub fn compute_metrics_pooled<'a>(pairs: impl IntoIterator<Item = (&'a DepthMap, &'a DepthMap)>) -> Result<MetricReport> {
    let mut acc = Accumulator::default();
    for (p, g) in pairs {
        acc.add(p, g)?;
    }
    acc.finish()
}

/// Unweighted mean of per-image reports; `n_valid` is summed.
pub fn aggregate_reports(reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::InvalidInput("no reports to aggregate".into()));
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(MetricReport {
        rel: mean(|r| r.rel),
        sq_rel: mean(|r| r.sq_rel),
        rmse: mean(|r| r.rmse),
        irmse: mean(|r| r.irmse),
        silog: mean(|r| r.silog),
        mae: mean(|r| r.mae),
        delta1: mean(|r| r.delta1),
        delta2: mean(|r| r.delta2),
        delta3: mean(|r| r.delta3),
        n_valid: reports.iter().map(|r| r.n_valid).sum(),
    })
}

/// Fixed-width text table, one row per image plus an aggregate row.
pub fn format_report_table(rows: &[(String, MetricReport)], aggregate: &MetricReport) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "{:<24} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>7} {:>7} {:>7} {:>8}",
        "image", "REL", "sqREL", "RMSE", "iRMSE", "SILog", "MAE", "d1", "d2", "d3", "n_valid"
    )
    .unwrap();
    let row = |s: &mut String, name: &str, r: &MetricReport| {
        writeln!(
            s,
            "{:<24} {:>8.4} {:>8.4} {:>8.4} {:>8.3} {:>8.3} {:>8.4} {:>7.4} {:>7.4} {:>7.4} {:>8}",
            name, r.rel, r.sq_rel, r.rmse, r.irmse, r.silog, r.mae, r.delta1, r.delta2, r.delta3, r.n_valid
        )
        .unwrap();
    };
    for (name, r) in rows {
        row(&mut s, name, r);
    }
    row(&mut s, "AGGREGATE", aggregate);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn map(v: &[f64]) -> DepthMap {
        DepthMap::from_values(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn exact_prediction() {
        let g = map(&[1.0, 2.0, 5.0]);
        let r = compute_metrics(&g, &g).unwrap();
        for v in [r.rel, r.sq_rel, r.rmse, r.irmse, r.silog, r.mae] {
            assert_eq!(v, 0.0);
        }
        assert_eq!((r.delta1, r.delta2, r.delta3), (1.0, 1.0, 1.0));
    }

    #[test]
    fn single_pixel_hand_values() {
        let r = compute_metrics(&map(&[2.0]), &map(&[1.0])).unwrap();
        assert_eq!(r.rel, 1.0);
        assert_eq!(r.sq_rel, 1.0);
        assert_eq!(r.rmse, 1.0);
        assert_eq!(r.mae, 1.0);
        assert_eq!(r.delta1, 0.0);
        assert_eq!(r.delta2, 0.0);
        assert_eq!(r.delta3, 0.0); // 1.25^3 = 1.953125 < 2
        assert_eq!(r.silog, 0.0);
        assert_eq!(r.irmse, 500.0);
    }

    #[test]
    fn delta_boundary_is_strict() {
        let r = compute_metrics(&map(&[1.25]), &map(&[1.0])).unwrap();
        assert_eq!(r.delta1, 0.0);
        assert_eq!(r.delta2, 1.0);
    }

    #[test]
    fn scaled_prediction_has_zero_silog() {
        let g = map(&[1.0, 3.0, 7.0, 0.4]);
        let p = map(&[2.0, 6.0, 14.0, 0.8]);
        assert!(compute_metrics(&p, &g).unwrap().silog < 1e-12);
    }

    #[test]
    fn mask_and_errors() {
        let g = DepthMap::new(1, 3, vec![1.0, 2.0, 3.0], vec![true, false, true]).unwrap();
        let p = DepthMap::new(1, 3, vec![1.0, 9.0, 0.0], vec![true, true, false]).unwrap();
        assert_eq!(compute_metrics(&p, &g).unwrap().n_valid, 1);
        assert!(matches!(
            compute_metrics(&DepthMap::invalid(1, 3), &g),
            Err(Error::EmptyEvaluation)
        ));
        assert!(matches!(compute_metrics(&map(&[1.0]), &g), Err(Error::Shape(_))));
    }

    #[test]
    fn aggregation() {
        let a = compute_metrics(&map(&[1.1]), &map(&[1.0])).unwrap();
        let b = compute_metrics(&map(&[1.3]), &map(&[1.0])).unwrap();
        assert_eq!(aggregate_reports(&[a]).unwrap(), a);
        let same = aggregate_reports(&[a, a]).unwrap();
        assert_relative_eq!(same.rel, a.rel, max_relative = 1e-15);
        let m = aggregate_reports(&[a, b]).unwrap();
        assert_relative_eq!(m.rel, 0.2, max_relative = 1e-12);
        assert_eq!(m.n_valid, 2);
        assert!(aggregate_reports(&[]).is_err());
    }

    #[test]
    fn pooled_weights_by_pixels() {
        let g1 = map(&[1.0]);
        let p1 = map(&[1.1]);
        let g2 = map(&[1.0, 1.0, 1.0]);
        let p2 = map(&[1.0, 1.0, 1.0]);
        let pooled = compute_metrics_pooled([(&p1, &g1), (&p2, &g2)]).unwrap();
        assert_relative_eq!(pooled.rel, 0.1 / 4.0, max_relative = 1e-9);
    }

    #[test]
    fn table_has_aggregate_row() {
        let a = compute_metrics(&map(&[1.1]), &map(&[1.0])).unwrap();
        let t = format_report_table(&[("x".into(), a)], &a);
        assert_eq!(t.lines().count(), 3);
        assert!(t.lines().last().unwrap().starts_with("AGGREGATE"));
    }
}

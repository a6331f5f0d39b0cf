use std::fmt::Write as _;
use std::fs;
use std::path::Path;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::data::{NormStats, PatchSet};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// A pixel counts as correct when its absolute error is below this many metres.
pub const ACC_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// Fraction of pixels with `|error| < threshold`.
    pub acc: f64,
    pub mae: f64,
    pub medae: f64,
    pub pixels: usize,
}

/// Accuracy, mean and median of absolute errors. Non-finite entries are
/// skipped. The result does not depend on the order of `errors`.
pub fn metrics_from_errors(errors: &[f64], threshold: f64) -> Result<Metrics> {
    let mut e: Vec<f64> = errors.iter().filter(|v| v.is_finite()).map(|v| v.abs()).collect();
    if e.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    e.sort_by(f64::total_cmp);
    let n = e.len();
    let hits = e.partition_point(|&v| v < threshold);
    let medae = if n % 2 == 1 {
        e[n / 2]
    } else {
        0.5 * (e[n / 2 - 1] + e[n / 2])
    };
    Ok(Metrics {
        acc: hits as f64 / n as f64,
        mae: e.iter().sum::<f64>() / n as f64,
        medae,
        pixels: n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchMetrics {
    pub origin: (usize, usize),
    pub model: Metrics,
    pub baseline: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub threshold: f64,
    pub model: Metrics,
    /// The unrefined input scored against the same ground truth.
    pub baseline: Metrics,
    pub per_patch: Vec<PatchMetrics>,
    /// Largest disagreement between overlapping tiles, when measured.
    pub seam: Option<f64>,
}

/// Refined and baseline metre errors for one normalised patch.
fn patch_errors(
    model: &Model<f32>,
    input: &[f32],
    target: &[f32],
    center: f64,
    n: usize,
    s: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let x = Tensor::new(vec![1, 1, n, n], input.to_vec())?;
    let (_, residual) = model.forward_residual(&x)?;
    let mut refined = Vec::with_capacity(n * n);
    let mut baseline = Vec::with_capacity(n * n);
    for ((&xi, &ti), &ri) in input.iter().zip(target).zip(residual.data()) {
        let x_m = xi as f64 * s + center;
        let t_m = ti as f64 * s + center;
        let y_m = x_m + ri as f64 * s;
        refined.push(y_m - t_m);
        baseline.push(x_m - t_m);
    }
    Ok((refined, baseline))
}

/// Scores the model on normalised test patches, in metres, over pixels with
/// valid ground truth.
pub fn evaluate(model: &Model<f32>, set: &PatchSet, stats: &NormStats) -> Result<MetricsReport> {
    if set.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    if !set.normalized {
        return Err(Error::Contract("evaluation needs a normalised patch set".into()));
    }
    let n = set.patch_size;
    let s = stats.global_std;
    let run = |p: &crate::data::Patch| patch_errors(model, &p.input, &p.target, p.center, n, s);
    #[cfg(feature = "parallel")]
    let errs: Vec<Result<(Vec<f64>, Vec<f64>)>> = set.patches.par_iter().map(run).collect();
    #[cfg(not(feature = "parallel"))]
    let errs: Vec<Result<(Vec<f64>, Vec<f64>)>> = set.patches.iter().map(run).collect();

    let mut all_model = Vec::new();
    let mut all_base = Vec::new();
    let mut per_patch = Vec::with_capacity(set.len());
    for (p, e) in set.patches.iter().zip(errs) {
        let (m, b) = e?;
        if let (Ok(mm), Ok(bm)) = (
            metrics_from_errors(&m, ACC_THRESHOLD),
            metrics_from_errors(&b, ACC_THRESHOLD),
        ) {
            per_patch.push(PatchMetrics {
                origin: p.origin,
                model: mm,
                baseline: bm,
            });
        }
        all_model.extend(m);
        all_base.extend(b);
    }
    Ok(MetricsReport {
        threshold: ACC_THRESHOLD,
        model: metrics_from_errors(&all_model, ACC_THRESHOLD)?,
        baseline: metrics_from_errors(&all_base, ACC_THRESHOLD)?,
        per_patch,
        seam: None,
    })
}

impl MetricsReport {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "pixels evaluated   {}", self.model.pixels);
        let _ = writeln!(s, "                   {:>10} {:>10}", "refined", "input");
        let _ = writeln!(
            s,
            "acc@{:.2} m         {:>9.2}% {:>9.2}%",
            self.threshold,
            100.0 * self.model.acc,
            100.0 * self.baseline.acc
        );
        let _ = writeln!(
            s,
            "MAE [m]            {:>10.4} {:>10.4}",
            self.model.mae, self.baseline.mae
        );
        let _ = writeln!(
            s,
            "median AE [m]      {:>10.4} {:>10.4}",
            self.model.medae, self.baseline.medae
        );
        if let Some(seam) = self.seam {
            let _ = writeln!(s, "max seam [m]       {seam:>10.4}");
        }
        s
    }

    /// Machine-readable `key=value` lines, with one `patch.<i>=` line per
    /// patch.
    pub fn to_key_values(&self) -> String {
        fn put(s: &mut String, prefix: &str, m: &Metrics) {
            let _ = writeln!(s, "{prefix}acc={}", m.acc);
            let _ = writeln!(s, "{prefix}mae={}", m.mae);
            let _ = writeln!(s, "{prefix}medae={}", m.medae);
            let _ = writeln!(s, "{prefix}pixels={}", m.pixels);
        }
        let mut s = String::new();
        put(&mut s, "", &self.model);
        put(&mut s, "baseline.", &self.baseline);
        let _ = writeln!(s, "threshold={}", self.threshold);
        if let Some(seam) = self.seam {
            let _ = writeln!(s, "seam={seam}");
        }
        let _ = writeln!(s, "patches={}", self.per_patch.len());
        for (i, p) in self.per_patch.iter().enumerate() {
            let _ = writeln!(
                s,
                "patch.{i}=row:{} col:{} acc:{} mae:{} medae:{} baseline_acc:{} baseline_mae:{}",
                p.origin.0, p.origin.1, p.model.acc, p.model.mae, p.model.medae, p.baseline.acc, p.baseline.mae
            );
        }
        s
    }

    /// Writes `<stem>.txt` (summary) and `<stem>.kv` (key=value) next to
    /// each other.
    pub fn write(&self, stem: &Path) -> Result<()> {
        let txt = stem.with_extension("txt");
        fs::write(&txt, self.summary()).map_err(|e| Error::io(&txt, e))?;
        let kv = stem.with_extension("kv");
        fs::write(&kv, self.to_key_values()).map_err(|e| Error::io(&kv, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_vector() {
        let m = metrics_from_errors(&[0.1, 0.6, 0.2, 1.0], 0.5).unwrap();
        assert_eq!(m.acc, 0.5);
        assert!((m.mae - 0.475).abs() < 1e-15);
        assert!((m.medae - 0.4).abs() < 1e-15);
    }

    #[test]
    fn signs_and_nans_ignored() {
        let m = metrics_from_errors(&[-0.1, f64::NAN, 0.3], 0.5).unwrap();
        assert_eq!(m.pixels, 2);
        assert_eq!(m.acc, 1.0);
        assert!((m.medae - 0.2).abs() < 1e-15);
        assert!(matches!(
            metrics_from_errors(&[f64::NAN], 0.5),
            Err(Error::EmptyTestSet)
        ));
    }

    #[test]
    fn threshold_is_strict() {
        assert_eq!(metrics_from_errors(&[0.5], 0.5).unwrap().acc, 0.0);
    }
}

//! Detection metrics. OOD is the positive class and larger scores mean
//! "more OOD"; a threshold `t` flags every sample with score `≥ t`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(scores_in: &[f64], scores_out: &[f64]) -> Result<()> {
    if scores_in.is_empty() || scores_out.is_empty() {
        return Err(Error::contract("metrics need nonempty in- and out-of-distribution scores"));
    }
    if scores_in.iter().chain(scores_out).any(|s| !s.is_finite()) {
        return Err(Error::contract("scores must be finite"));
    }
    Ok(())
}

/// Cumulative `(negatives, positives)` at or above each distinct threshold,
/// thresholds descending. `positive` marks each score's class.
fn sweep(scores_in: &[f64], scores_out: &[f64]) -> Vec<(f64, u64, u64)> {
    let mut all: Vec<(f64, bool)> = scores_in
        .iter()
        .map(|&s| (s, false))
        .chain(scores_out.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut fp, mut tp) = (0u64, 0u64);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((t, fp, tp));
    }
    points
}

/// Area under the ROC curve by the trapezoid rule over every distinct
/// threshold; equals `P(out > in) + ½ P(out = in)`.
pub fn auroc(scores_in: &[f64], scores_out: &[f64]) -> Result<f64> {
    check(scores_in, scores_out)?;
    let (n, p) = (scores_in.len() as u128, scores_out.len() as u128);
    // Twice the area in units of 1/(n·p), accumulated exactly.
    let mut twice = 0u128;
    let (mut fp0, mut tp0) = (0u128, 0u128);
    for (_, fp, tp) in sweep(scores_in, scores_out) {
        let (fp, tp) = (fp as u128, tp as u128);
        twice += (fp - fp0) * (tp + tp0);
        fp0 = fp;
        tp0 = tp;
    }
    Ok(twice as f64 / (2 * n * p) as f64)
}

/// In-distribution false-positive rate at the largest threshold whose OOD
/// true-positive rate reaches `tpr_target`.
pub fn fpr_at_tpr(scores_in: &[f64], scores_out: &[f64], tpr_target: f64) -> Result<f64> {
    check(scores_in, scores_out)?;
    let (n, p) = (scores_in.len() as f64, scores_out.len() as f64);
    let points = sweep(scores_in, scores_out);
    let (_, fp, _) = points
        .iter()
        .find(|&&(_, _, tp)| tp as f64 / p >= tpr_target)
        .copied()
        .unwrap_or(*points.last().expect("nonempty"));
    Ok(fp as f64 / n)
}

pub fn fpr_at_95_tpr(scores_in: &[f64], scores_out: &[f64]) -> Result<f64> {
    fpr_at_tpr(scores_in, scores_out, 0.95)
}

/// `min_t ½ (FPR(t) + FNR(t))`, including the threshold above every score.
pub fn detection_error(scores_in: &[f64], scores_out: &[f64]) -> Result<f64> {
    check(scores_in, scores_out)?;
    let (n, p) = (scores_in.len() as f64, scores_out.len() as f64);
    Ok(sweep(scores_in, scores_out)
        .into_iter()
        .map(|(_, fp, tp)| 0.5 * (fp as f64 / n + (p - tp as f64) / p))
        .fold(0.5, f64::min))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positive {
    In,
    Out,
}

/// Average precision, `Σ (R_k − R_{k−1}) P_k` over distinct thresholds.
/// With `Positive::In` the scores are negated so inliers rank first.
pub fn aupr(scores_in: &[f64], scores_out: &[f64], positive: Positive) -> Result<f64> {
    check(scores_in, scores_out)?;
    let points = match positive {
        Positive::Out => sweep(scores_in, scores_out),
        Positive::In => {
            let neg = |v: &[f64]| v.iter().map(|s| -s).collect::<Vec<_>>();
            sweep(&neg(scores_out), &neg(scores_in))
        }
    };
    let total_pos = points.last().map_or(0, |p| p.2) as f64;
    let mut ap = 0.0;
    let mut tp0 = 0u64;
    for (_, fp, tp) in points {
        if tp > tp0 {
            ap += (tp - tp0) as f64 / total_pos * (tp as f64 / (tp + fp) as f64);
        }
        tp0 = tp;
    }
    Ok(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub in_dataset: String,
    pub ood_dataset: String,
    pub rule: String,
    pub n_in: usize,
    pub n_out: usize,
    pub fpr_at_95_tpr: f64,
    pub detection_error: f64,
    pub auroc: f64,
    pub aupr_in: f64,
    pub aupr_out: f64,
}

impl MetricsReport {
    pub fn compute(in_dataset: &str, ood_dataset: &str, rule: &str, scores_in: &[f64], scores_out: &[f64]) -> Result<Self> {
        Ok(Self {
            in_dataset: in_dataset.to_owned(),
            ood_dataset: ood_dataset.to_owned(),
            rule: rule.to_owned(),
            n_in: scores_in.len(),
            n_out: scores_out.len(),
            fpr_at_95_tpr: fpr_at_95_tpr(scores_in, scores_out)?,
            detection_error: detection_error(scores_in, scores_out)?,
            auroc: auroc(scores_in, scores_out)?,
            aupr_in: aupr(scores_in, scores_out, Positive::In)?,
            aupr_out: aupr(scores_in, scores_out, Positive::Out)?,
        })
    }

    pub const CSV_HEADER: &'static str =
        "in_dataset,ood_dataset,rule,n_in,n_out,fpr_at_95_tpr,detection_error,auroc,aupr_in,aupr_out";

    /// One CSV row at full precision (shortest round-trip representation).
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:?},{:?},{:?},{:?},{:?}",
            self.in_dataset,
            self.ood_dataset,
            self.rule,
            self.n_in,
            self.n_out,
            self.fpr_at_95_tpr,
            self.detection_error,
            self.auroc,
            self.aupr_in,
            self.aupr_out
        )
    }
}

pub fn write_csv(reports: &[MetricsReport], w: &mut impl Write) -> Result<()> {
    writeln!(w, "{}", MetricsReport::CSV_HEADER)?;
    for r in reports {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// JSON grouped like a results table: in-dataset → OOD dataset → rule → metrics.
pub fn to_json(reports: &[MetricsReport]) -> serde_json::Value {
    use serde_json::{json, Map, Value};
    let mut root = Map::new();
    for r in reports {
        let by_ood = root
            .entry(r.in_dataset.clone())
            .or_insert_with(|| Value::Object(Map::new()))
            .as_object_mut()
            .expect("object");
        let by_rule = by_ood
            .entry(r.ood_dataset.clone())
            .or_insert_with(|| Value::Object(Map::new()))
            .as_object_mut()
            .expect("object");
        by_rule.insert(
            r.rule.clone(),
            json!({
                "fpr_at_95_tpr": r.fpr_at_95_tpr,
                "detection_error": r.detection_error,
                "auroc": r.auroc,
                "aupr_in": r.aupr_in,
                "aupr_out": r.aupr_out,
                "n_in": r.n_in,
                "n_out": r.n_out,
            }),
        );
    }
    Value::Object(root)
}

/// Percent table with one decimal, one line per report.
pub fn format_table(reports: &[MetricsReport]) -> String {
    let mut s = format!(
        "{:<12} {:<14} {:<20} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "in", "ood", "rule", "FPR95", "DetErr", "AUROC", "AUPR-In", "AUPR-Out"
    );
    for r in reports {
        s.push_str(&format!(
            "{:<12} {:<14} {:<20} {:>8.1} {:>8.1} {:>8.1} {:>8.1} {:>8.1}\n",
            r.in_dataset,
            r.ood_dataset,
            r.rule,
            100.0 * r.fpr_at_95_tpr,
            100.0 * r.detection_error,
            100.0 * r.auroc,
            100.0 * r.aupr_in,
            100.0 * r.aupr_out
        ));
    }
    s
}

//! OOD evaluation metrics. In-distribution samples are the positive class and
//! a sample is predicted positive when `score >= threshold`. All returned
//! metrics are percentages.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TARGET_TPR: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// `+inf` for the initial `(0, 0)` point; written as `null` in JSON.
    #[serde(with = "threshold_serde")]
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

mod threshold_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// How the FPR at the target TPR is read off the ROC curve.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FprMode {
    /// FPR at the largest threshold whose TPR reaches the target.
    #[default]
    Step,
    /// Linear interpolation between the two ROC points bracketing the target.
    Interpolated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fpr_at_95_tpr: f64,
    pub detection_error: f64,
    pub auroc: f64,
    pub aupr: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub roc_points: Vec<RocPoint>,
}

impl EvalReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// `threshold,tpr,fpr` per line, with a header.
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("threshold,tpr,fpr\n");
        for p in &self.roc_points {
            out.push_str(&format!("{:e},{:e},{:e}\n", p.threshold, p.tpr, p.fpr));
        }
        out
    }

    pub fn write_roc_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.roc_csv()).map_err(|e| Error::io(path, e))
    }
}

fn check_scores(pos: &[f64], neg: &[f64]) -> Result<()> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid(
            "metrics need at least one positive and one negative score",
        ));
    }
    if pos.iter().chain(neg).any(|v| !v.is_finite()) {
        return Err(Error::invalid("metric inputs must be finite"));
    }
    Ok(())
}

/// Cumulative `(threshold, tp, fp)` at each distinct score, descending.
fn sweep(pos: &[f64], neg: &[f64]) -> Vec<(f64, usize, usize)> {
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out: Vec<(f64, usize, usize)> = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        // -0.0 and 0.0 compare equal as thresholds
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((t, tp, fp));
    }
    out
}

/// ROC curve from `(0, 0)` at threshold `+inf` down to `(1, 1)` at the
/// lowest score, one point per distinct score.
pub fn roc_curve(pos: &[f64], neg: &[f64]) -> Result<Vec<RocPoint>> {
    check_scores(pos, neg)?;
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        tpr: 0.0,
        fpr: 0.0,
    }];
    points.extend(sweep(pos, neg).into_iter().map(|(t, tp, fp)| RocPoint {
        threshold: t,
        tpr: tp as f64 / np,
        fpr: fp as f64 / nn,
    }));
    Ok(points)
}

fn fpr_from_curve(points: &[RocPoint], target_tpr: f64, mode: FprMode) -> f64 {
    let idx = points
        .iter()
        .position(|p| p.tpr >= target_tpr)
        .expect("the last ROC point has TPR 1");
    let hit = points[idx];
    let fpr = match mode {
        FprMode::Step => hit.fpr,
        FprMode::Interpolated if idx > 0 && hit.tpr > target_tpr => {
            let prev = points[idx - 1];
            let w = (target_tpr - prev.tpr) / (hit.tpr - prev.tpr);
            prev.fpr + w * (hit.fpr - prev.fpr)
        }
        FprMode::Interpolated => hit.fpr,
    };
    100.0 * fpr
}

fn check_target(target_tpr: f64) -> Result<()> {
    if !(target_tpr > 0.0 && target_tpr <= 1.0) {
        return Err(Error::invalid(format!("target TPR {target_tpr} outside (0, 1]")));
    }
    Ok(())
}

/// FPR (percent) at the largest threshold whose TPR reaches `target_tpr`.
pub fn fpr_at_tpr(pos: &[f64], neg: &[f64], target_tpr: f64) -> Result<f64> {
    fpr_at_tpr_with(pos, neg, target_tpr, FprMode::Step)
}

pub fn fpr_at_tpr_with(pos: &[f64], neg: &[f64], target_tpr: f64, mode: FprMode) -> Result<f64> {
    check_target(target_tpr)?;
    Ok(fpr_from_curve(&roc_curve(pos, neg)?, target_tpr, mode))
}

/// Detection error `0.5 (1 - TPR + FPR)` in percent; inputs are fractions.
pub fn detection_error(tpr: f64, fpr: f64) -> Result<f64> {
    for (name, v) in [("tpr", tpr), ("fpr", fpr)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("{name} = {v} outside [0, 1]")));
        }
    }
    // scale before subtracting: 50 * 0.95 rounds to exactly 47.5
    Ok(50.0 - 50.0 * tpr + 50.0 * fpr)
}

/// Area under the ROC curve (percent) by the rank-sum statistic; ties count half.
pub fn auroc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_scores(pos, neg)?;
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the rank sum of positives, using midranks for ties (1-based).
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let twice_midrank = (i + 1 + j) as u128;
        let n_pos_in_group = all[i..j].iter().filter(|e| e.1).count() as u128;
        twice_rank_sum += twice_midrank * n_pos_in_group;
        i = j;
    }
    let (np, nn) = (pos.len() as u128, neg.len() as u128);
    // U = R - np(np+1)/2, computed exactly in integers
    let twice_u = twice_rank_sum - np * (np + 1);
    Ok(100.0 * twice_u as f64 / (2 * np * nn) as f64)
}

/// Trapezoidal area (percent) under a ROC curve.
pub fn roc_area(points: &[RocPoint]) -> f64 {
    100.0
        * points
            .windows(2)
            .map(|w| 0.5 * (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr))
            .sum::<f64>()
}

/// Area under the precision-recall curve (percent), positives as the
/// relevant class, with step-wise interpolation:
/// `sum_t (recall_t - recall_{t-1}) * precision_t` over distinct thresholds.
pub fn aupr(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_scores(pos, neg)?;
    let np = pos.len() as f64;
    let mut area = 0.0;
    let mut prev_tp = 0;
    for (_, tp, fp) in sweep(pos, neg) {
        if tp > prev_tp {
            area += (tp - prev_tp) as f64 / np * (tp as f64 / (tp + fp) as f64);
        }
        prev_tp = tp;
    }
    Ok(100.0 * area)
}

/// All metrics at the default 95% TPR operating point.
///
/// Detection error is taken at the nominal operating point,
/// `0.5 (1 - 0.95 + FPR@95)`, so perfect separation reports 2.5%.
pub fn evaluate(pos: &[f64], neg: &[f64]) -> Result<EvalReport> {
    evaluate_with(pos, neg, DEFAULT_TARGET_TPR, FprMode::Step)
}

pub fn evaluate_with(pos: &[f64], neg: &[f64], target_tpr: f64, mode: FprMode) -> Result<EvalReport> {
    check_target(target_tpr)?;
    let roc_points = roc_curve(pos, neg)?;
    let fpr = fpr_from_curve(&roc_points, target_tpr, mode);
    Ok(EvalReport {
        fpr_at_95_tpr: fpr,
        detection_error: detection_error(target_tpr, fpr / 100.0)?,
        auroc: auroc(pos, neg)?,
        aupr: aupr(pos, neg)?,
        n_pos: pos.len(),
        n_neg: neg.len(),
        roc_points,
    })
}

/// Rounds half-to-even at `decimals` places, for display only.
pub fn round_half_even(v: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    let x = v * scale;
    let r = x.round();
    let r = if (x - x.trunc()).abs() == 0.5 && r % 2.0 != 0.0 {
        r - x.signum()
    } else {
        r
    };
    r / scale
}

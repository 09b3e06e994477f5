//! Pixel-level DICE score, confusion counts and ROC analysis.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::BinaryMask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(mut self, rhs: ConfusionCounts) -> ConfusionCounts {
        self.merge(&rhs);
        self
    }
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::Shape("prediction and ground truth sizes differ".into()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dice {
    pub value: f64,
    /// Neither prediction nor ground truth had a positive pixel; `value` is 1 by convention.
    pub empty: bool,
}

/// `2TP / (2TP + FP + FN)`.
pub fn dice(c: &ConfusionCounts) -> Dice {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        Dice { value: 1.0, empty: true }
    } else {
        Dice { value: (2 * c.tp) as f64 / denom as f64, empty: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from the highest threshold down; starts at (0,0) and ends at (1,1).
    pub points: Vec<(f64, f64)>,
    /// Threshold of each point after the first; a score `>= threshold` is positive.
    pub thresholds: Vec<f64>,
    pub auc: f64,
}

/// Sweeps thresholds over the unique scores and integrates with the trapezoidal rule.
pub fn roc_auc(scores: &[f32], gt: &[u8]) -> Result<RocCurve> {
    if scores.len() != gt.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), gt.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let pos = gt.iter().filter(|&&g| g != 0).count() as u64;
    let neg = gt.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data("ROC needs both classes in the ground truth".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut auc2 = 0u128; // twice the area, in units of 1/(pos·neg)
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if gt[order[i]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        auc2 += ((fp - fp0) as u128) * ((tp + tp0) as u128);
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        thresholds.push(s as f64);
    }
    let auc = auc2 as f64 / (2.0 * pos as f64 * neg as f64);
    Ok(RocCurve { points, thresholds, auc })
}

impl RocCurve {
    /// CSV with columns `threshold,fpr,tpr`; the origin row has an infinite threshold.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "threshold,fpr,tpr")?;
        for (k, (fpr, tpr)) in self.points.iter().enumerate() {
            let t = if k == 0 { f64::INFINITY } else { self.thresholds[k - 1] };
            writeln!(out, "{t},{fpr},{tpr}")?;
        }
        Ok(())
    }
}

/// Normalized Mann–Whitney statistic: `P(score_pos > score_neg) + ½ P(equal)`, by
/// direct pairwise comparison.
pub fn mann_whitney_auc(scores: &[f32], gt: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0f64, 0u64);
    for (i, &gi) in gt.iter().enumerate() {
        if gi == 0 {
            continue;
        }
        for (j, &gj) in gt.iter().enumerate() {
            if gj != 0 {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs as f64
}

/// Test-set summary written by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice: f64,
    pub dice_empty: bool,
    pub auc: Option<f64>,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub n_images: usize,
}

impl MetricsReport {
    /// Pooled (micro) aggregation over the images.
    pub fn new(counts: &ConfusionCounts, roc: Option<&RocCurve>, n_images: usize) -> Self {
        let d = dice(counts);
        MetricsReport {
            dice: d.value,
            dice_empty: d.empty,
            auc: roc.map(|r| r.auc),
            tp: counts.tp,
            fp: counts.fp,
            fn_: counts.fn_,
            tn: counts.tn,
            n_images,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

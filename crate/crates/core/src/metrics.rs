//! Proposal-quality evaluation: temporal IoU, recall at a per-video proposal
//! budget, the AR-vs-AN curve and its area.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{BmnError, Result};

/// A closed temporal interval `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub const fn new(start: f64, end: f64) -> Self {
        Interval { start, end }
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.end > self.start)
    }

    pub fn intersection(&self, other: &Interval) -> f64 {
        (self.end.min(other.end) - self.start.max(other.start)).max(0.0)
    }
}

/// Temporal intersection-over-union; 0 when either interval is degenerate.
pub fn tiou(a: &Interval, b: &Interval) -> f64 {
    if a.is_degenerate() || b.is_degenerate() {
        return 0.0;
    }
    let inter = a.intersection(b);
    let union = a.len() + b.len() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Ranked proposals (best first) keyed by video id.
pub type RankedProposals = BTreeMap<String, Vec<Interval>>;
/// Ground-truth instances keyed by video id.
pub type GroundTruth = BTreeMap<String, Vec<Interval>>;

/// Fraction of all ground-truth instances retrieved at tIoU ≥ `tau` by the
/// top-`an` proposals of their video. Instances are pooled across videos.
pub fn recall_at(
    proposals: &RankedProposals,
    gts: &GroundTruth,
    an: usize,
    tau: f64,
) -> Result<f64> {
    let total = total_instances(gts)?;
    let mut retrieved = 0usize;
    for (video, instances) in gts {
        let Some(props) = proposals.get(video) else {
            continue;
        };
        let top = &props[..an.min(props.len())];
        retrieved += instances
            .iter()
            .filter(|gt| top.iter().any(|p| tiou(p, gt) >= tau))
            .count();
    }
    Ok(retrieved as f64 / total as f64)
}

fn total_instances(gts: &GroundTruth) -> Result<usize> {
    let total: usize = gts.values().map(Vec::len).sum();
    if total == 0 {
        return Err(BmnError::UndefinedMetric(
            "dataset contains no ground-truth instances".into(),
        ));
    }
    Ok(total)
}

/// Average recall for AN = 1..=an_max.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArCurve {
    pub thresholds: Vec<f64>,
    /// `values[k]` is AR at AN = k + 1.
    pub values: Vec<f64>,
}

impl ArCurve {
    pub fn an_max(&self) -> usize {
        self.values.len()
    }

    /// AR at the given AN (1-based). AN = 0 is 0 by definition; AN past the
    /// end of the curve saturates at the last value.
    pub fn at(&self, an: usize) -> f64 {
        match an {
            0 => 0.0,
            _ => self.values[(an - 1).min(self.values.len() - 1)],
        }
    }
}

/// Averages [`recall_at`] over the threshold grid for every AN up to `an_max`.
///
/// Each instance's earliest hitting rank is found once per threshold, so the
/// whole curve costs one pass over the proposal/instance pairs.
pub fn ar_curve(
    proposals: &RankedProposals,
    gts: &GroundTruth,
    thresholds: &[f64],
    an_max: usize,
) -> Result<ArCurve> {
    if thresholds.is_empty() {
        return Err(BmnError::Parameter("empty tIoU threshold grid".into()));
    }
    if an_max == 0 {
        return Err(BmnError::Parameter("AN_max must be positive".into()));
    }
    let total = total_instances(gts)?;

    // hits[k][a] = number of instances first retrieved at rank a under threshold k
    let mut hits = vec![vec![0usize; an_max]; thresholds.len()];
    for (video, instances) in gts {
        let Some(props) = proposals.get(video) else {
            continue;
        };
        let top = &props[..an_max.min(props.len())];
        for gt in instances {
            let ious: Vec<f64> = top.iter().map(|p| tiou(p, gt)).collect();
            for (k, &tau) in thresholds.iter().enumerate() {
                if let Some(rank) = ious.iter().position(|&v| v >= tau) {
                    hits[k][rank] += 1;
                }
            }
        }
    }

    let mut values = vec![0.0; an_max];
    for per_tau in &hits {
        let mut cumulative = 0usize;
        for (a, &h) in per_tau.iter().enumerate() {
            cumulative += h;
            values[a] += cumulative as f64 / total as f64;
        }
    }
    let n = thresholds.len() as f64;
    values.iter_mut().for_each(|v| *v /= n);
    Ok(ArCurve {
        thresholds: thresholds.to_vec(),
        values,
    })
}

/// Area under the AR-vs-AN curve as a percentage: right-endpoint mean over
/// integer AN.
pub fn auc(curve: &ArCurve) -> f64 {
    if curve.values.is_empty() {
        return 0.0;
    }
    100.0 * curve.values.iter().sum::<f64>() / curve.values.len() as f64
}

/// `[start:step:end]` inclusive grid, e.g. `threshold_grid(0.5, 0.05, 0.95)`.
pub fn threshold_grid(start: f64, step: f64, end: f64) -> Vec<f64> {
    let count = ((end - start) / step + 1e-9).floor() as usize + 1;
    (0..count)
        .map(|k| ((start + k as f64 * step) * 1e6).round() / 1e6)
        .collect()
}

/// Serialized evaluation summary.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub ar_at: BTreeMap<String, f64>,
    pub auc: f64,
    pub thresholds: Vec<f64>,
    pub an_max: usize,
    pub num_videos: usize,
    pub num_ground_truth: usize,
    pub num_proposals: usize,
}

pub const REPORTED_AN: [usize; 5] = [1, 5, 10, 50, 100];

pub fn report(
    proposals: &RankedProposals,
    gts: &GroundTruth,
    thresholds: &[f64],
    an_max: usize,
) -> Result<MetricsReport> {
    let curve = ar_curve(proposals, gts, thresholds, an_max)?;
    let ar_at = REPORTED_AN
        .iter()
        .map(|&an| (an.to_string(), curve.at(an)))
        .collect();
    Ok(MetricsReport {
        ar_at,
        auc: auc(&curve),
        thresholds: thresholds.to_vec(),
        an_max,
        num_videos: gts.len(),
        num_ground_truth: gts.values().map(Vec::len).sum(),
        num_proposals: proposals.values().map(Vec::len).sum(),
    })
}

//! Training targets: boundary label sequences for the temporal evaluation
//! head and the BM label map for the proposal evaluation head.

use crate::bm::cell_is_valid;
use crate::error::{BmnError, Result};
use crate::metrics::{tiou, Interval};

/// Width of a location's local region, in snippets.
const LOCATION_WIDTH: f64 = 1.0;

/// Intersection over the first region's length.
pub fn ior(region: &Interval, gt: &Interval) -> Result<f64> {
    if region.is_degenerate() || gt.end < gt.start {
        return Err(BmnError::DegenerateInput(format!(
            "IoR needs a positive-length region, got [{}, {}]",
            region.start, region.end
        )));
    }
    Ok(region.intersection(gt) / region.len())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryLabels {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

/// Starting/ending labels: for every location `n`, the largest IoR of
/// `[n - 1/2, n + 1/2]` against any instance's boundary region
/// (`boundary ± duration/10`).
pub fn tem_labels(instances: &[Interval], t: usize) -> BoundaryLabels {
    let regions = |pick: fn(&Interval) -> f64| -> Vec<Interval> {
        instances
            .iter()
            .map(|gt| {
                let half = gt.len().max(0.0) / 10.0;
                let b = pick(gt);
                Interval::new(b - half, b + half)
            })
            .collect()
    };
    let starts = regions(|gt| gt.start);
    let ends = regions(|gt| gt.end);
    let best = |n: usize, regions: &[Interval]| -> f64 {
        let local = Interval::new(
            n as f64 - LOCATION_WIDTH / 2.0,
            n as f64 + LOCATION_WIDTH / 2.0,
        );
        regions
            .iter()
            .map(|r| local.intersection(r) / local.len())
            .fold(0.0, f64::max)
    };
    BoundaryLabels {
        start: (0..t).map(|n| best(n, &starts)).collect(),
        end: (0..t).map(|n| best(n, &ends)).collect(),
    }
}

/// BM label map, `D × T`, row-major by duration index.
#[derive(Clone, Debug, PartialEq)]
pub struct BmLabelMap {
    pub d: usize,
    pub t: usize,
    pub values: Vec<f64>,
}

impl BmLabelMap {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.t + j]
    }
}

/// `G_C[i, j]` is the best tIoU of proposal `[j, j + i + 1]` with any
/// instance; invalid cells stay 0.
pub fn pem_label_map(instances: &[Interval], t: usize, d: usize) -> BmLabelMap {
    let mut values = vec![0.0; d * t];
    for i in 0..d {
        for j in 0..t {
            if !cell_is_valid(i, j, t) {
                continue;
            }
            let proposal = Interval::new(j as f64, (j + i + 1) as f64);
            values[i * t + j] = instances
                .iter()
                .map(|gt| tiou(&proposal, gt))
                .fold(0.0, f64::max);
        }
    }
    BmLabelMap { d, t, values }
}

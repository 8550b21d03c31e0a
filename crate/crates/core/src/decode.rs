//! Post-processing: boundary candidates, proposal pairing, score fusion and
//! redundant-proposal suppression.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bm::cell_is_valid;
use crate::metrics::{tiou, Interval};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub t_start: f64,
    pub t_end: f64,
    pub p_start: f64,
    pub p_end: f64,
    pub p_cc: f64,
    pub p_cr: f64,
    /// Fused score; decayed in place by soft-NMS.
    pub score: f64,
}

impl Proposal {
    /// Builds a proposal and fuses its score.
    pub fn new(t_start: f64, t_end: f64, p_start: f64, p_end: f64, p_cc: f64, p_cr: f64) -> Self {
        let mut p = Proposal {
            t_start,
            t_end,
            p_start,
            p_end,
            p_cc,
            p_cr,
            score: 0.0,
        };
        p.score = fuse_score(&p);
        p
    }

    pub fn interval(&self) -> Interval {
        Interval::new(self.t_start, self.t_end)
    }
}

/// `p_s · p_e · √(p_cc · p_cr)`
pub fn fuse_score(p: &Proposal) -> f64 {
    p.p_start * p.p_end * (p.p_cc * p.p_cr).sqrt()
}

/// Locations above half the sequence maximum, plus strict local peaks.
/// Endpoints are compared against their single neighbour.
pub fn candidate_boundaries(p: &[f64]) -> Vec<usize> {
    let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let last = p.len().saturating_sub(1);
    (0..p.len())
        .filter(|&t| {
            let above = p[t] > 0.5 * max;
            let left = t == 0 || p[t] > p[t - 1];
            let right = t == last || p[t] > p[t + 1];
            above || (left && right)
        })
        .collect()
}

/// Decoder inputs for one window. Maps are `D × T` row-major.
pub struct WindowScores<'a> {
    pub p_start: &'a [f64],
    pub p_end: &'a [f64],
    pub m_cc: &'a [f64],
    pub m_cr: &'a [f64],
    pub max_duration: usize,
}

/// Pairs every candidate start with every later candidate end whose duration
/// fits within `max_duration`, reading the BM maps at `(t_e - t_s - 1, t_s)`.
pub fn generate_proposals(starts: &[usize], ends: &[usize], s: &WindowScores<'_>) -> Vec<Proposal> {
    let t = s.p_start.len();
    let mut out = Vec::new();
    for &ts in starts {
        for &te in ends {
            if te <= ts || te - ts > s.max_duration || te >= t {
                continue;
            }
            let row = te - ts - 1;
            if !cell_is_valid(row, ts, t) {
                continue;
            }
            let cell = row * t + ts;
            out.push(Proposal::new(
                ts as f64,
                te as f64,
                s.p_start[ts],
                s.p_end[te],
                s.m_cc[cell],
                s.m_cr[cell],
            ));
        }
    }
    out
}

/// Candidate extraction, pairing and fusion for one window.
pub fn decode_window(s: &WindowScores<'_>) -> Vec<Proposal> {
    let starts = candidate_boundaries(s.p_start);
    let ends = candidate_boundaries(s.p_end);
    generate_proposals(&starts, &ends, s)
}

/// Descending score; ties go to the earlier start, then the earlier end.
fn rank(a: &Proposal, b: &Proposal) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.t_start.total_cmp(&b.t_start))
        .then(a.t_end.total_cmp(&b.t_end))
}

/// Gaussian soft-NMS: repeatedly keep the best remaining proposal and decay
/// the others by `exp(-tIoU² / sigma)`.
pub fn soft_nms(props: &[Proposal], sigma: f64, score_floor: f64, top_k: usize) -> Vec<Proposal> {
    let mut remaining = props.to_vec();
    let mut kept = Vec::with_capacity(top_k.min(props.len()));
    while kept.len() < top_k && !remaining.is_empty() {
        let best = (0..remaining.len())
            .min_by(|&a, &b| rank(&remaining[a], &remaining[b]))
            .unwrap();
        if remaining[best].score < score_floor {
            break;
        }
        let chosen = remaining.swap_remove(best);
        let span = chosen.interval();
        for p in &mut remaining {
            let iou = tiou(&span, &p.interval());
            p.score *= (-(iou * iou) / sigma).exp();
        }
        kept.push(chosen);
    }
    kept.sort_by(rank);
    kept
}

/// Hard suppression: keep the best, drop everything overlapping it by
/// `iou_threshold` or more, repeat.
pub fn greedy_nms(props: &[Proposal], iou_threshold: f64, top_k: usize) -> Vec<Proposal> {
    let mut sorted = props.to_vec();
    sorted.sort_by(rank);
    let mut kept: Vec<Proposal> = Vec::new();
    for p in sorted {
        if kept.len() >= top_k {
            break;
        }
        if kept.iter().all(|k| tiou(&k.interval(), &p.interval()) < iou_threshold) {
            kept.push(p);
        }
    }
    kept
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Suppression {
    Soft {
        sigma: f64,
        score_floor: f64,
        top_k: usize,
    },
    Greedy {
        iou_threshold: f64,
        top_k: usize,
    },
}

impl Default for Suppression {
    fn default() -> Self {
        Suppression::Soft {
            sigma: 0.4,
            score_floor: 0.001,
            top_k: 100,
        }
    }
}

impl Suppression {
    pub fn apply(&self, props: &[Proposal]) -> Vec<Proposal> {
        match *self {
            Suppression::Soft {
                sigma,
                score_floor,
                top_k,
            } => soft_nms(props, sigma, score_floor, top_k),
            Suppression::Greedy { iou_threshold, top_k } => greedy_nms(props, iou_threshold, top_k),
        }
    }
}

/// Unions the per-window proposals of one video (already in seconds) and
/// suppresses once over the union.
pub fn merge_windows(per_window: &[Vec<Proposal>], suppression: &Suppression) -> Vec<Proposal> {
    let all: Vec<Proposal> = per_window.iter().flatten().copied().collect();
    suppression.apply(&all)
}

pub const CSV_HEADER: &str = "video,t_start,t_end,score,p_start,p_end,p_cc,p_cr";

/// Writes one row per proposal; rows are emitted in the given order.
pub fn write_csv<W: Write>(mut out: W, rows: &[(String, Proposal)]) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for (video, p) in rows {
        writeln!(
            out,
            "{video},{:.4},{:.4},{:.6},{:.6},{:.6},{:.6},{:.6}",
            p.t_start, p.t_end, p.score, p.p_start, p.p_end, p.p_cc, p.p_cr
        )?;
    }
    Ok(())
}

/// Parses a proposal CSV. Malformed lines are reported with their line number.
pub fn read_csv(text: &str) -> Result<Vec<(String, Proposal)>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        Some(h) => return Err(format!("unexpected CSV header `{h}`")),
        None => return Ok(Vec::new()),
    }
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(format!("line {}: expected 8 fields, got {}", k + 2, fields.len()));
        }
        let num = |i: usize| -> Result<f64, String> {
            fields[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| format!("line {}: field {}: {e}", k + 2, i + 1))
        };
        rows.push((
            fields[0].to_string(),
            Proposal {
                t_start: num(1)?,
                t_end: num(2)?,
                score: num(3)?,
                p_start: num(4)?,
                p_end: num(5)?,
                p_cc: num(6)?,
                p_cr: num(7)?,
            },
        ));
    }
    Ok(rows)
}

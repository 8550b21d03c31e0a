//! Training objective: weighted binary logistic loss for boundaries and the
//! classification map, sampled squared error for the regression map, and
//! weight decay.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::Window;
use crate::labeling::{pem_label_map, tem_labels, BmLabelMap, BoundaryLabels};
use crate::metrics::Interval;
use crate::network::model::{ForwardOutput, ModelParams, OutputGrads};
use crate::real::Real;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Binarisation threshold for boundary labels.
    pub theta_tem: f64,
    /// Binarisation threshold for the classification map.
    pub theta_pem: f64,
    /// Weight of the regression term inside the PEM loss.
    pub lambda_reg: f64,
    pub lambda_pem: f64,
    pub lambda_l2: f64,
    pub pos_threshold: f64,
    pub neg_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            theta_tem: 0.5,
            theta_pem: 0.5,
            lambda_reg: 10.0,
            lambda_pem: 1.0,
            lambda_l2: 1e-4,
            pos_threshold: 0.6,
            neg_threshold: 0.2,
        }
    }
}

/// Class-balanced logistic loss and its gradient with respect to `p`.
///
/// Positives are `g > theta`. Each class is averaged separately, which is
/// the same as weighting by `L / l±` and dividing by `L`. A class with no
/// members contributes nothing.
pub fn weighted_bl<S: Real>(p: &[S], g: &[f64], theta: f64) -> (f64, Vec<S>) {
    assert_eq!(p.len(), g.len(), "probabilities and labels differ in length");
    let n_pos = g.iter().filter(|&&v| v > theta).count();
    let n_neg = g.len() - n_pos;
    let mut loss = 0.0;
    let mut grad = vec![S::zero(); p.len()];
    for ((&pi, &gi), d) in p.iter().zip(g).zip(grad.iter_mut()) {
        let raw = pi.as_f64();
        let q = raw.clamp(EPS, 1.0 - EPS);
        let inside = raw == q;
        if gi > theta {
            let w = 1.0 / n_pos as f64;
            loss -= w * q.ln();
            if inside {
                *d = S::of(-w / q);
            }
        } else {
            let w = 1.0 / n_neg as f64;
            loss -= w * (1.0 - q).ln();
            if inside {
                *d = S::of(w / (1.0 - q));
            }
        }
    }
    (loss, grad)
}

pub fn weighted_bl_loss(p: &[f64], g: &[f64], theta: f64) -> f64 {
    weighted_bl(p, g, theta).0
}

/// Sum of the starting and ending losses, with gradients.
pub fn loss_tem<S: Real>(p_start: &[S], p_end: &[S], labels: &BoundaryLabels, theta: f64) -> (f64, Vec<S>, Vec<S>) {
    let (ls, ds) = weighted_bl(p_start, &labels.start, theta);
    let (le, de) = weighted_bl(p_end, &labels.end, theta);
    (ls + le, ds, de)
}

/// Cells used by the regression term: every valid cell with a label above
/// `pos`, plus as many valid cells below `neg` drawn without replacement.
/// Returned in ascending order.
pub fn regression_sample<R: Rng + ?Sized>(
    g: &[f64],
    valid: &[bool],
    pos: f64,
    neg: f64,
    rng: &mut R,
) -> Vec<usize> {
    let positives: Vec<usize> = (0..g.len()).filter(|&k| valid[k] && g[k] > pos).collect();
    if positives.is_empty() {
        return positives;
    }
    let negatives: Vec<usize> = (0..g.len()).filter(|&k| valid[k] && g[k] < neg).collect();
    let take = positives.len().min(negatives.len());
    let mut cells = positives;
    cells.extend(sample(rng, negatives.len(), take).into_iter().map(|k| negatives[k]));
    cells.sort_unstable();
    cells
}

/// Mean squared error over `cells`; zero when `cells` is empty.
pub fn regression_loss<S: Real>(m: &[S], g: &[f64], cells: &[usize]) -> (f64, Vec<S>) {
    let mut grad = vec![S::zero(); m.len()];
    if cells.is_empty() {
        return (0.0, grad);
    }
    let k = cells.len() as f64;
    let mut loss = 0.0;
    for &c in cells {
        let diff = m[c].as_f64() - g[c];
        loss += diff * diff / k;
        grad[c] = S::of(2.0 * diff / k);
    }
    (loss, grad)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PemLoss<S> {
    pub classification: f64,
    pub regression: f64,
    pub total: f64,
    pub d_cc: Vec<S>,
    pub d_cr: Vec<S>,
}

pub fn loss_pem<S: Real, R: Rng + ?Sized>(
    m_cc: &[S],
    m_cr: &[S],
    labels: &BmLabelMap,
    valid: &[bool],
    cfg: &LossConfig,
    rng: &mut R,
) -> PemLoss<S> {
    let cells: Vec<usize> = (0..valid.len()).filter(|&k| valid[k]).collect();
    let p: Vec<S> = cells.iter().map(|&k| m_cc[k]).collect();
    let g: Vec<f64> = cells.iter().map(|&k| labels.values[k]).collect();
    let (classification, dp) = weighted_bl(&p, &g, cfg.theta_pem);
    let mut d_cc = vec![S::zero(); m_cc.len()];
    for (&k, &d) in cells.iter().zip(&dp) {
        d_cc[k] = d;
    }

    let picked = regression_sample(&labels.values, valid, cfg.pos_threshold, cfg.neg_threshold, rng);
    let (regression, mut d_cr) = regression_loss(m_cr, &labels.values, &picked);
    d_cr.iter_mut().for_each(|v| *v *= S::of(cfg.lambda_reg));
    PemLoss {
        classification,
        regression,
        total: classification + cfg.lambda_reg * regression,
        d_cc,
        d_cr,
    }
}

/// `tem + λ₁·pem + λ₂·½Σw²`.
pub fn total_loss<S: Real>(tem: f64, pem: f64, params: &ModelParams<S>, cfg: &LossConfig) -> f64 {
    tem + cfg.lambda_pem * pem + cfg.lambda_l2 * params.l2()
}

/// Supervision for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowTargets {
    pub boundary: BoundaryLabels,
    pub map: BmLabelMap,
}

impl WindowTargets {
    pub fn new(instances: &[Interval], t: usize, d: usize) -> Self {
        WindowTargets {
            boundary: tem_labels(instances, t),
            map: pem_label_map(instances, t, d),
        }
    }

    pub fn from_window(w: &Window, d: usize) -> Self {
        Self::new(&w.instances, w.end - w.start, d)
    }
}

/// Data terms of one window's loss (weight decay is added per batch).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub tem: f64,
    pub pem: f64,
    pub pem_classification: f64,
    pub pem_regression: f64,
}

impl LossParts {
    pub fn data_term(&self, cfg: &LossConfig) -> f64 {
        self.tem + cfg.lambda_pem * self.pem
    }

    pub fn is_finite(&self) -> bool {
        self.tem.is_finite() && self.pem.is_finite()
    }
}

/// Loss of one forward pass and the gradient of its data term with respect
/// to the network outputs.
pub fn window_loss<S: Real, R: Rng + ?Sized>(
    out: &ForwardOutput<S>,
    targets: &WindowTargets,
    valid: &[bool],
    cfg: &LossConfig,
    rng: &mut R,
) -> (LossParts, OutputGrads<S>) {
    let (tem, d_start, d_end) = loss_tem(&out.p_start, &out.p_end, &targets.boundary, cfg.theta_tem);
    let pem = loss_pem(&out.m_cc, &out.m_cr, &targets.map, valid, cfg, rng);
    let k = S::of(cfg.lambda_pem);
    let parts = LossParts {
        tem,
        pem: pem.total,
        pem_classification: pem.classification,
        pem_regression: pem.regression,
    };
    let grads = OutputGrads {
        d_start,
        d_end,
        d_cc: pem.d_cc.into_iter().map(|v| v * k).collect(),
        d_cr: pem.d_cr.into_iter().map(|v| v * k).collect(),
    };
    (parts, grads)
}

//! Finite-difference verification of every hand-written backward pass.
//!
//! All suites run in `f64`. Each compares an analytic gradient against
//! central differences and reports the largest relative error
//! `|a - n| / max(|a|, |n|, floor)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bm::{bm_backward, bm_forward, BmFeatureMap, SampleMask};
use crate::error::{BmnError, Result};
use crate::labeling::BmLabelMap;
use crate::metrics::Interval;
use crate::network::layers::{Conv1d, Conv2d, SampleReduce};
use crate::network::loss::{loss_pem, loss_tem, regression_loss, weighted_bl, LossConfig, WindowTargets};
use crate::network::model::{Bmn, BmnShape, Layer, ModelParams};
use crate::network::train::{batch_gradient, batch_loss, Example};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    pub layer_tolerance: f64,
    pub network_tolerance: f64,
    /// How many times a coordinate that misses its tolerance is re-probed
    /// with a step ten times smaller. A step that straddles a ReLU or clamp
    /// kink disagrees with the exact gradient; a wrong gradient disagrees
    /// at every step.
    pub refinements: u32,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            step: 1e-5,
            floor: 1e-6,
            layer_tolerance: 1e-4,
            network_tolerance: 1e-3,
            refinements: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<26} n={:<6} max_rel_err={:.3e} tol={:.0e} {}",
            self.name,
            self.checked,
            self.max_rel_error,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Relative error of `analytic[k]` against the central difference of `f`
/// at `point` along coordinate `k`, for every coordinate. Errors above
/// `tolerance` are re-measured with smaller steps (see
/// [`CheckConfig::refinements`]).
pub fn relative_errors(
    point: &[f64],
    analytic: &[f64],
    mut f: impl FnMut(&[f64]) -> f64,
    tolerance: f64,
    cfg: &CheckConfig,
) -> Vec<f64> {
    assert_eq!(point.len(), analytic.len(), "gradient length differs from the point");
    let mut x = point.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = x[k];
            let mut step = cfg.step;
            let mut err = f64::INFINITY;
            for _ in 0..=cfg.refinements {
                x[k] = orig + step;
                let up = f(&x);
                x[k] = orig - step;
                let down = f(&x);
                x[k] = orig;
                err = rel_error(analytic[k], (up - down) / (2.0 * step), cfg.floor);
                if err <= tolerance {
                    break;
                }
                step /= 10.0;
            }
            err
        })
        .collect()
}

fn summarize(name: impl Into<String>, errors: &[f64], tolerance: f64) -> CheckResult {
    let max = errors.iter().copied().fold(0.0, f64::max);
    CheckResult {
        name: name.into(),
        checked: errors.len(),
        max_rel_error: max,
        tolerance,
        passed: errors.iter().all(|e| e.is_finite()) && max <= tolerance,
    }
}

/// Checks `analytic` as the gradient of `f` at `point`.
pub fn check_gradient(
    name: &str,
    point: &[f64],
    analytic: &[f64],
    f: impl FnMut(&[f64]) -> f64,
    tolerance: f64,
    cfg: &CheckConfig,
) -> CheckResult {
    summarize(name, &relative_errors(point, analytic, f, tolerance, cfg), tolerance)
}

fn uniform(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn probs(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(0.05..0.95)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn concat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

/// Splits a flat vector into consecutive pieces of the given lengths.
fn split<'a>(v: &'a [f64], lens: &[usize]) -> Vec<&'a [f64]> {
    let mut out = Vec::with_capacity(lens.len());
    let mut at = 0;
    for &l in lens {
        out.push(&v[at..at + l]);
        at += l;
    }
    out
}

/// Multiplies a gradient by `1 + bias` when `name` matches, to verify that
/// the harness notices a broken backward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corruption {
    pub target: Option<String>,
    pub bias: f64,
}

impl Corruption {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn of(target: &str) -> Self {
        Corruption {
            target: Some(target.to_string()),
            bias: 0.05,
        }
    }

    fn apply(&self, name: &str, grad: &mut [f64]) {
        if self.target.as_deref() == Some(name) {
            grad.iter_mut().for_each(|g| *g *= 1.0 + self.bias);
        }
    }
}

pub fn check_conv1d(rng: &mut impl Rng, cfg: &CheckConfig, corrupt: &Corruption) -> Result<CheckResult> {
    let conv = Conv1d {
        c_in: 3,
        c_out: 4,
        kernel: 3,
        pad: 1,
    };
    let t = 7;
    let (x, w, b) = (uniform(rng, 3 * t), uniform(rng, conv.weight_len()), uniform(rng, 4));
    let r = uniform(rng, 4 * t);
    let (_, cols) = conv.forward(&x, t, &w, &b)?;
    let g = conv.backward(&r, &cols, &w, t)?;
    let mut analytic = concat(&[&g.dx, &g.dw, &g.db]);
    corrupt.apply("conv1d", &mut analytic);
    let lens = [x.len(), w.len(), b.len()];
    Ok(check_gradient(
        "conv1d",
        &concat(&[&x, &w, &b]),
        &analytic,
        |p| {
            let s = split(p, &lens);
            dot(&conv.forward(s[0], t, s[1], s[2]).unwrap().0, &r)
        },
        cfg.layer_tolerance,
        cfg,
    ))
}

pub fn check_conv2d(
    rng: &mut impl Rng,
    conv: Conv2d,
    name: &str,
    cfg: &CheckConfig,
    corrupt: &Corruption,
) -> Result<CheckResult> {
    let (h, w) = (4, 5);
    let x = uniform(rng, conv.c_in * h * w);
    let wt = uniform(rng, conv.weight_len());
    let b = uniform(rng, conv.c_out);
    let (y, cols) = conv.forward(&x, h, w, &wt, &b)?;
    let r = uniform(rng, y.len());
    let g = conv.backward(&r, &cols, &wt, h, w)?;
    let mut analytic = concat(&[&g.dx, &g.dw, &g.db]);
    corrupt.apply(name, &mut analytic);
    let lens = [x.len(), wt.len(), b.len()];
    Ok(check_gradient(
        name,
        &concat(&[&x, &wt, &b]),
        &analytic,
        |p| {
            let s = split(p, &lens);
            dot(&conv.forward(s[0], h, w, s[1], s[2]).unwrap().0, &r)
        },
        cfg.layer_tolerance,
        cfg,
    ))
}

pub fn check_conv3d(rng: &mut impl Rng, cfg: &CheckConfig, corrupt: &Corruption) -> Result<CheckResult> {
    let layer = SampleReduce {
        c_in: 3,
        n: 4,
        c_out: 5,
    };
    let cells = 6;
    let mf = uniform(rng, 3 * 4 * cells);
    let w = uniform(rng, layer.weight_len());
    let b = uniform(rng, 5);
    let r = uniform(rng, 5 * cells);
    let y = layer.forward(&mf, cells, &w, &b)?;
    let g = layer.backward(&r, &y, &mf, cells, &w)?;
    let mut analytic = concat(&[&g.dx, &g.dw, &g.db]);
    corrupt.apply("conv3d", &mut analytic);
    let lens = [mf.len(), w.len(), b.len()];
    Ok(check_gradient(
        "conv3d",
        &concat(&[&mf, &w, &b]),
        &analytic,
        |p| {
            let s = split(p, &lens);
            dot(&layer.forward(s[0], cells, s[1], s[2]).unwrap(), &r)
        },
        cfg.layer_tolerance,
        cfg,
    ))
}

pub fn check_bm_layer(rng: &mut impl Rng, cfg: &CheckConfig, corrupt: &Corruption) -> Result<CheckResult> {
    let (c, t, d, n) = (3, 10, 5, 6);
    let mask = SampleMask::cached(t, d, n, 0.25)?;
    let s = uniform(rng, c * t);
    let mut g = BmFeatureMap::zeros(c, n, d, t);
    g.data = uniform(rng, g.data.len());
    let mut analytic = bm_backward(&g, &mask)?;
    corrupt.apply("bm_layer", &mut analytic);
    Ok(check_gradient(
        "bm_layer",
        &s,
        &analytic,
        |p| dot(&bm_forward(p, c, &mask).unwrap().data, &g.data),
        cfg.layer_tolerance,
        cfg,
    ))
}

pub fn check_losses(rng: &mut impl Rng, cfg: &CheckConfig, corrupt: &Corruption) -> Result<Vec<CheckResult>> {
    let len = 12;
    let labels: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut out = Vec::new();

    let p = probs(rng, len);
    let (_, mut d) = weighted_bl(&p, &labels, 0.5);
    corrupt.apply("weighted_bl", &mut d);
    out.push(check_gradient(
        "weighted_bl",
        &p,
        &d,
        |q| weighted_bl(q, &labels, 0.5).0,
        cfg.layer_tolerance,
        cfg,
    ));

    let m = probs(rng, len);
    let cells: Vec<usize> = (0..len).filter(|k| k % 3 != 1).collect();
    let (_, mut d) = regression_loss(&m, &labels, &cells);
    corrupt.apply("regression", &mut d);
    out.push(check_gradient(
        "regression",
        &m,
        &d,
        |q| regression_loss(q, &labels, &cells).0,
        cfg.layer_tolerance,
        cfg,
    ));

    let t = 10;
    let targets = WindowTargets::new(&[Interval::new(2.0, 6.5)], t, 4);
    let (ps, pe) = (probs(rng, t), probs(rng, t));
    let (_, ds, de) = loss_tem(&ps, &pe, &targets.boundary, 0.5);
    let mut analytic = concat(&[&ds, &de]);
    corrupt.apply("loss_tem", &mut analytic);
    out.push(check_gradient(
        "loss_tem",
        &concat(&[&ps, &pe]),
        &analytic,
        |q| loss_tem(&q[..t], &q[t..], &targets.boundary, 0.5).0,
        cfg.layer_tolerance,
        cfg,
    ));

    let (d, cells) = (4, 4 * t);
    let valid: Vec<bool> = (0..cells).map(|k| crate::bm::cell_is_valid(k / t, k % t, t)).collect();
    let map = BmLabelMap {
        d,
        t,
        values: targets.map.values.clone(),
    };
    let (cc, cr) = (probs(rng, cells), probs(rng, cells));
    let loss_cfg = LossConfig::default();
    let seed = rng.random::<u64>();
    let eval = |cc: &[f64], cr: &[f64]| {
        loss_pem(cc, cr, &map, &valid, &loss_cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    };
    let l = eval(&cc, &cr);
    let mut analytic = concat(&[&l.d_cc, &l.d_cr]);
    corrupt.apply("loss_pem", &mut analytic);
    out.push(check_gradient(
        "loss_pem",
        &concat(&[&cc, &cr]),
        &analytic,
        |q| eval(&q[..cells], &q[cells..]).total,
        cfg.layer_tolerance,
        cfg,
    ));
    Ok(out)
}

/// Network shapes used by the end-to-end check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradcheckProfile {
    /// `T = 16`, `D = 8`, widths 8/4/8/2 and 16/8/8/2.
    Scaled,
    /// `T = 8`, `D = 4`, 8 sample points, halved widths.
    Tiny,
}

impl GradcheckProfile {
    pub fn shape(self) -> BmnShape {
        match self {
            GradcheckProfile::Scaled => BmnShape::scaled_down(4),
            GradcheckProfile::Tiny => BmnShape {
                in_channels: 3,
                window: 8,
                max_duration: 4,
                num_samples: 8,
                expand: 0.25,
                base_hidden: 4,
                base_out: 2,
                tem_hidden: 4,
                pem_hidden_3d: 8,
                pem_hidden_2d: 4,
            },
        }
    }
}

impl std::str::FromStr for GradcheckProfile {
    type Err = BmnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scaled" => Ok(GradcheckProfile::Scaled),
            "tiny" => Ok(GradcheckProfile::Tiny),
            other => Err(BmnError::Config(format!("unknown gradcheck profile {other:?} (scaled|tiny)"))),
        }
    }
}

/// Total-loss gradient of the whole network over a two-window batch,
/// reported per layer and overall.
pub fn check_network(
    shape: &BmnShape,
    seed: u64,
    cfg: &CheckConfig,
    corrupt: &Corruption,
) -> Result<Vec<CheckResult>> {
    let net = Bmn::<f64>::new(shape.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::<f64>::init(shape, rng.random());
    let t = shape.window;
    let examples: Vec<Example<f64>> = (0..2)
        .map(|_| {
            let s = rng.random_range(0.0..(t as f64 / 2.0));
            let len = rng.random_range(2.0..(t as f64 / 2.0));
            Example {
                features: uniform(&mut rng, shape.in_channels * t),
                targets: WindowTargets::new(&[Interval::new(s, s + len)], t, shape.max_duration),
            }
        })
        .collect();
    let batch: Vec<&Example<f64>> = examples.iter().collect();
    let loss_cfg = LossConfig::default();
    let sample_seed: u64 = rng.random();
    let (_, _, grads) = batch_gradient(&net, &params, &batch, &loss_cfg, sample_seed, 0, None)?;

    let lens: Vec<usize> = params.tensors.iter().map(|t| t.data.len()).collect();
    let point: Vec<f64> = params.tensors.iter().flat_map(|t| t.data.iter().copied()).collect();
    let mut analytic = Vec::with_capacity(point.len());
    for (tensor, g) in params.tensors.iter().zip(&grads.tensors) {
        let mut g = g.data.clone();
        let layer = tensor.name.split('.').next().unwrap_or_default();
        corrupt.apply(&format!("network.{layer}"), &mut g);
        analytic.extend(g);
    }
    let mut probe = params.clone();
    let errors = relative_errors(
        &point,
        &analytic,
        |p| {
            for (t, piece) in probe.tensors.iter_mut().zip(split(p, &lens)) {
                t.data.copy_from_slice(piece);
            }
            let (parts, l2) = batch_loss(&net, &probe, &batch, &loss_cfg, sample_seed, 0).unwrap();
            parts.data_term(&loss_cfg) + loss_cfg.lambda_l2 * l2
        },
        cfg.network_tolerance,
        cfg,
    );

    let mut out = Vec::new();
    let mut at = 0;
    for layer in Layer::ALL {
        let n = params.weight(layer).len() + params.bias(layer).len();
        out.push(summarize(
            format!("network.{}", layer.name()),
            &errors[at..at + n],
            cfg.network_tolerance,
        ));
        at += n;
    }
    out.push(summarize("network.total", &errors, cfg.network_tolerance));
    Ok(out)
}

/// Every suite, with layer inputs drawn from `seed`.
pub fn run_all(
    profile: GradcheckProfile,
    seed: u64,
    cfg: &CheckConfig,
    corrupt: &Corruption,
) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![
        check_conv1d(&mut rng, cfg, corrupt)?,
        check_conv2d(&mut rng, Conv2d::pointwise(3, 4), "conv2d_1x1", cfg, corrupt)?,
        check_conv2d(&mut rng, Conv2d::same3x3(3, 2), "conv2d_3x3", cfg, corrupt)?,
        check_conv3d(&mut rng, cfg, corrupt)?,
        check_bm_layer(&mut rng, cfg, corrupt)?,
    ];
    out.extend(check_losses(&mut rng, cfg, corrupt)?);
    out.extend(check_network(&profile.shape(), rng.random(), cfg, corrupt)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_uses_floor() {
        assert_eq!(rel_error(1.0, 1.0, 1e-6), 0.0);
        assert!((rel_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
        assert!((rel_error(0.0, 1e-9, 1e-6) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn quadratic_gradient_passes_and_wrong_one_fails() {
        let cfg = CheckConfig::default();
        let x = [0.3, -1.2, 2.0];
        let f = |p: &[f64]| p.iter().map(|v| v * v).sum::<f64>();
        let good: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert!(check_gradient("q", &x, &good, f, 1e-6, &cfg).passed);
        let bad: Vec<f64> = good.iter().map(|v| v * 1.01).collect();
        assert!(!check_gradient("q", &x, &bad, f, 1e-4, &cfg).passed);
    }

    #[test]
    fn kink_inside_the_step_is_refined_away() {
        let f = |p: &[f64]| (p[0] - 0.5).max(0.0);
        let x = [0.5 + 4e-6];
        let mut cfg = CheckConfig::default();
        assert!(check_gradient("relu", &x, &[1.0], f, 1e-4, &cfg).passed);
        assert!(!check_gradient("relu", &x, &[1.1], f, 1e-4, &cfg).passed);
        cfg.refinements = 0;
        assert!(!check_gradient("relu", &x, &[1.0], f, 1e-4, &cfg).passed);
    }

    #[test]
    fn layer_suites_pass() {
        let cfg = CheckConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let none = Corruption::none();
        for r in [
            check_conv1d(&mut rng, &cfg, &none).unwrap(),
            check_conv2d(&mut rng, Conv2d::same3x3(2, 3), "conv2d_3x3", &cfg, &none).unwrap(),
            check_conv3d(&mut rng, &cfg, &none).unwrap(),
            check_bm_layer(&mut rng, &cfg, &none).unwrap(),
        ] {
            assert!(r.passed, "{r}");
        }
        for r in check_losses(&mut rng, &cfg, &none).unwrap() {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn tiny_network_passes() {
        let cfg = CheckConfig::default();
        let res = check_network(&GradcheckProfile::Tiny.shape(), 5, &cfg, &Corruption::none()).unwrap();
        for r in &res {
            assert!(r.passed, "{r}");
        }
        assert_eq!(res.len(), 9);
    }

    #[test]
    fn corrupted_gradients_are_caught() {
        let cfg = CheckConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(!check_conv1d(&mut rng, &cfg, &Corruption::of("conv1d")).unwrap().passed);
        let res = check_network(
            &GradcheckProfile::Tiny.shape(),
            5,
            &cfg,
            &Corruption::of("network.conv2d_2"),
        )
        .unwrap();
        let failed: Vec<_> = res.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        assert_eq!(failed, vec!["network.conv2d_2", "network.total"]);
    }
}

//! Mini-batch training loop.
//!
//! Each window in a batch is processed independently (optionally on a
//! worker pool); per-window gradients are then summed in index order, so the
//! result does not depend on how the work was scheduled.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BmnError, Result};
use crate::network::loss::{window_loss, LossConfig, LossParts, WindowTargets};
use crate::network::model::{Bmn, ModelParams};
use crate::network::optim::{Optimizer, OptimizerConfig};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    /// Worker threads for per-window passes; 0 or 1 runs serially.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            workers: 1,
        }
    }
}

/// One training window: input features and its supervision.
#[derive(Clone, Debug)]
pub struct Example<S> {
    pub features: Vec<S>,
    pub targets: WindowTargets,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub tem: f64,
    pub pem: f64,
    pub l2: f64,
    /// Mean total loss over the epoch's steps.
    pub total: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Total loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

/// Random stream for the `k`-th window of step `stream`.
fn window_rng(seed: u64, stream: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_mul(1 << 16).wrapping_add(k as u64));
    rng
}

/// Batch-mean data terms and the weight-decay sum `½Σw²`, evaluated exactly
/// as [`batch_gradient`] does but without the backward pass.
pub fn batch_loss<S: Real>(
    net: &Bmn<S>,
    params: &ModelParams<S>,
    batch: &[&Example<S>],
    cfg: &LossConfig,
    seed: u64,
    stream: u64,
) -> Result<(LossParts, f64)> {
    if batch.is_empty() {
        return Err(BmnError::EmptyInput("batch has no windows".into()));
    }
    let mut sum = LossParts::default();
    for (k, ex) in batch.iter().enumerate() {
        let out = net.forward(params, &ex.features)?;
        let (parts, _) = window_loss(&out, &ex.targets, net.mask().valid(), cfg, &mut window_rng(seed, stream, k));
        sum.tem += parts.tem;
        sum.pem += parts.pem;
        sum.pem_classification += parts.pem_classification;
        sum.pem_regression += parts.pem_regression;
    }
    let n = batch.len() as f64;
    Ok((
        LossParts {
            tem: sum.tem / n,
            pem: sum.pem / n,
            pem_classification: sum.pem_classification / n,
            pem_regression: sum.pem_regression / n,
        },
        params.l2(),
    ))
}

/// Loss (data terms averaged over the batch, plus weight decay) and its
/// parameter gradient for one batch. `stream` selects the random stream used
/// for negative sampling.
pub fn batch_gradient<S: Real>(
    net: &Bmn<S>,
    params: &ModelParams<S>,
    batch: &[&Example<S>],
    cfg: &LossConfig,
    seed: u64,
    stream: u64,
    pool: Option<&rayon::ThreadPool>,
) -> Result<(LossParts, f64, ModelParams<S>)> {
    if batch.is_empty() {
        return Err(BmnError::EmptyInput("batch has no windows".into()));
    }
    let one = |k: usize| -> Result<(LossParts, ModelParams<S>)> {
        let ex = batch[k];
        let out = net.forward(params, &ex.features)?;
        let mut rng = window_rng(seed, stream, k);
        let (parts, og) = window_loss(&out, &ex.targets, net.mask().valid(), cfg, &mut rng);
        let grads = net.backward(params, &out, &og)?;
        Ok((parts, grads))
    };

    let scale = S::of(1.0 / batch.len() as f64);
    let mut sum = LossParts::default();
    let mut grads: Option<ModelParams<S>> = None;
    let mut absorb = |(parts, g): (LossParts, ModelParams<S>)| {
        sum.tem += parts.tem;
        sum.pem += parts.pem;
        sum.pem_classification += parts.pem_classification;
        sum.pem_regression += parts.pem_regression;
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => acc.add_scaled(&g, S::one()),
        }
    };
    match pool {
        Some(pool) if batch.len() > 1 => {
            use rayon::prelude::*;
            let results: Vec<_> = pool.install(|| (0..batch.len()).into_par_iter().map(one).collect());
            for r in results {
                absorb(r?);
            }
        }
        _ => {
            for k in 0..batch.len() {
                absorb(one(k)?);
            }
        }
    }
    let mut grads = grads.expect("non-empty batch");
    for t in grads.tensors.iter_mut() {
        t.data.iter_mut().for_each(|v| *v *= scale);
    }
    let n = batch.len() as f64;
    let mean = LossParts {
        tem: sum.tem / n,
        pem: sum.pem / n,
        pem_classification: sum.pem_classification / n,
        pem_regression: sum.pem_regression / n,
    };
    let decay = S::of(cfg.lambda_l2);
    for (g, p) in grads.tensors.iter_mut().zip(&params.tensors) {
        if p.decay {
            g.data.iter_mut().zip(&p.data).for_each(|(g, &w)| *g += decay * w);
        }
    }
    let l2 = params.l2();
    Ok((mean, l2, grads))
}

/// Trains `params` in place and returns the loss history.
pub fn train<S: Real>(
    net: &Bmn<S>,
    params: &mut ModelParams<S>,
    data: &[Example<S>],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(BmnError::EmptyInput("no training windows".into()));
    }
    if cfg.batch_size == 0 {
        return Err(BmnError::Config("batch size must be positive".into()));
    }
    if !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) {
        return Err(BmnError::Config("learning rate must be finite and non-negative".into()));
    }
    params.check_shape(net.shape())?;
    let pool = if cfg.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.workers)
                .build()
                .map_err(|e| BmnError::Config(format!("worker pool: {e}")))?,
        )
    } else {
        None
    };

    let mut opt = Optimizer::new(cfg.optimizer.clone(), cfg.learning_rate, params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut acc = EpochLog {
            epoch: epoch + 1,
            tem: 0.0,
            pem: 0.0,
            l2: 0.0,
            total: 0.0,
            steps: 0,
        };
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example<S>> = chunk.iter().map(|&k| &data[k]).collect();
            let (parts, l2, grads) =
                batch_gradient(net, params, &batch, &cfg.loss, cfg.seed, step, pool.as_ref())?;
            let total = parts.data_term(&cfg.loss) + cfg.loss.lambda_l2 * l2;
            if !parts.is_finite() || !total.is_finite() {
                return Err(BmnError::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: b + 1,
                    tem: parts.tem,
                    pem: parts.pem,
                    l2,
                });
            }
            opt.step(params, &grads);
            step += 1;
            debug!(
                "epoch {} batch {}: tem {:.5} pem {:.5} (cls {:.5} reg {:.5}) total {:.5}",
                epoch + 1,
                b + 1,
                parts.tem,
                parts.pem,
                parts.pem_classification,
                parts.pem_regression,
                total
            );
            report.step_losses.push(total);
            acc.tem += parts.tem;
            acc.pem += parts.pem;
            acc.l2 += l2;
            acc.total += total;
            acc.steps += 1;
        }
        let k = acc.steps.max(1) as f64;
        acc.tem /= k;
        acc.pem /= k;
        acc.l2 /= k;
        acc.total /= k;
        info!(
            "epoch {}/{}: tem {:.5} pem {:.5} total {:.5}",
            acc.epoch, cfg.epochs, acc.tem, acc.pem, acc.total
        );
        report.epochs.push(acc);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Interval;
    use crate::network::model::BmnShape;

    fn toy(shape: &BmnShape, seed: u64) -> Example<f32> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = shape.window;
        let inst = Interval::new(4.0, 10.0);
        let features = (0..shape.in_channels * t)
            .map(|k| {
                let pos = (k % t) as f64;
                let on = if pos >= inst.start && pos < inst.end { 1.0 } else { 0.0 };
                (on + 0.1 * rng.random_range(-1.0..1.0)) as f32
            })
            .collect();
        Example {
            features,
            targets: WindowTargets::new(&[inst], t, shape.max_duration),
        }
    }

    #[test]
    fn single_window_loss_halves() {
        let shape = BmnShape::scaled_down(4);
        let net = Bmn::new(shape.clone()).unwrap();
        let mut params = ModelParams::init(&shape, 3);
        let data = vec![toy(&shape, 1)];
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let report = train(&net, &mut params, &data, &cfg).unwrap();
        let first = report.step_losses[0];
        let last = *report.step_losses.last().unwrap();
        assert!(last <= 0.5 * first, "loss {first} -> {last}");
    }

    #[test]
    fn training_is_deterministic_and_pool_independent() {
        let shape = BmnShape::scaled_down(3);
        let net = Bmn::new(shape.clone()).unwrap();
        let data: Vec<_> = (0..5).map(|s| toy(&shape, s)).collect();
        let run = |workers| {
            let mut p = ModelParams::init(&shape, 11);
            let cfg = TrainConfig {
                epochs: 2,
                batch_size: 2,
                workers,
                ..TrainConfig::default()
            };
            let r = train(&net, &mut p, &data, &cfg).unwrap();
            (p, r)
        };
        let (a, ra) = run(1);
        let (b, rb) = run(1);
        let (c, rc) = run(3);
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(a, c);
        assert_eq!(ra, rc);
        assert_eq!(ra.epochs.len(), 2);
        assert_eq!(ra.epochs[1].epoch, 2);
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let shape = BmnShape::scaled_down(2);
        let net = Bmn::new(shape.clone()).unwrap();
        let mut p = ModelParams::init(&shape, 0);
        let before = p.clone();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 1,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        train(&net, &mut p, &[toy(&shape, 0), toy(&shape, 1)], &cfg).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn non_finite_input_aborts_with_diagnostics() {
        let shape = BmnShape::scaled_down(2);
        let net = Bmn::new(shape.clone()).unwrap();
        let mut p = ModelParams::init(&shape, 0);
        p.weight_mut(crate::network::model::Layer::Conv1d4)[0] = f32::NAN;
        let err = train(&net, &mut p, &[toy(&shape, 0)], &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, BmnError::NonFiniteLoss { epoch: 1, batch: 1, .. }), "{err:?}");
    }

    #[test]
    fn rejects_empty_data() {
        let shape = BmnShape::scaled_down(2);
        let net = Bmn::<f32>::new(shape.clone()).unwrap();
        let mut p = ModelParams::init(&shape, 0);
        assert!(matches!(
            train(&net, &mut p, &[], &TrainConfig::default()),
            Err(BmnError::EmptyInput(_))
        ));
    }
}

//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Criteria 8 and 9 train the
//! full-width network twice on the synthetic dataset and dominate runtime.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use bmn::bm::{bm_backward, bm_forward, build_sample_mask, BmFeatureMap, SampleMask};
use bmn::config::{PathsConfig, Profile, RunConfig};
use bmn::decode::{decode_window, fuse_score, merge_windows, soft_nms, Proposal, Suppression, WindowScores};
use bmn::gradcheck::{run_all, CheckConfig, Corruption, GradcheckProfile};
use bmn::labeling::{pem_label_map, tem_labels};
use bmn::metrics::{ar_curve, auc, recall_at, threshold_grid, GroundTruth, Interval, RankedProposals};
use bmn::network::loss::weighted_bl_loss;
use bmn::pipeline;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Per-proposal sampling loop straight from the mask definition.
fn naive_bm(s: &[f64], c: usize, t: usize, d: usize, n: usize, expand: f64) -> Vec<f64> {
    let mut out = vec![0.0; c * n * d * t];
    for ch in 0..c {
        for k in 0..n {
            for i in 0..d {
                for j in 0..t {
                    if j + i + 1 > t - 1 {
                        continue;
                    }
                    let dur = (i + 1) as f64;
                    let start = j as f64 - expand * dur;
                    let end = (j + i + 1) as f64 + expand * dur;
                    let x = start + (end - start) * k as f64 / (n - 1) as f64;
                    let mut v = 0.0;
                    for tt in 0..t {
                        let w = 1.0 - (x - tt as f64).abs();
                        if w > 0.0 {
                            v += w * s[ch * t + tt];
                        }
                    }
                    out[((ch * n + k) * d + i) * t + j] = v;
                }
            }
        }
    }
    out
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for (t, d, n) in [(8, 4, 2), (16, 8, 4), (16, 8, 8)] {
        let mask = build_sample_mask(t, d, n, 0.25).map_err(|e| e.to_string())?;
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = 3;
            let s: Vec<f64> = (0..c * t).map(|_| rng.random_range(-2.0..2.0)).collect();
            let fast = bm_forward(&s, c, &mask).map_err(|e| e.to_string())?;
            let slow = naive_bm(&s, c, t, d, n, 0.25);
            for (a, b) in fast.data.iter().zip(&slow) {
                worst = worst.max(rel(*a, *b));
            }
        }
    }
    let took = started.elapsed();
    ensure(
        worst <= 1e-6 && took < Duration::from_secs(5),
        format!("max rel err {worst:.2e} (tol 1e-6), {took:.2?} (limit 5 s)"),
    )
}

fn criterion_2() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in 0..20 {
        let (t, d, n) = [(8, 4, 2), (16, 8, 4), (16, 8, 8), (12, 12, 5)][k % 4];
        let c = 1 + k % 3;
        let mask = build_sample_mask(t, d, n, 0.25).map_err(|e| e.to_string())?;
        let s: Vec<f64> = (0..c * t).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = BmFeatureMap::<f64>::zeros(c, n, d, t);
        g.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let m = bm_forward(&s, c, &mask).map_err(|e| e.to_string())?;
        let back = bm_backward(&g, &mask).map_err(|e| e.to_string())?;
        let lhs: f64 = m.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = s.iter().zip(&back).map(|(a, b)| a * b).sum();
        worst = worst.max(rel(lhs, rhs));
    }
    ensure(worst <= 1e-6, format!("20 pairs, max rel gap {worst:.2e} (tol 1e-6)"))
}

fn criterion_3() -> Outcome {
    let started = Instant::now();
    let cfg = CheckConfig::default();
    let mut failures = Vec::new();
    let mut worst_layer: f64 = 0.0;
    let mut worst_network: f64 = 0.0;
    let mut checks = 0;
    for seed in 0..5 {
        let results = run_all(GradcheckProfile::Scaled, seed, &cfg, &Corruption::none()).map_err(|e| e.to_string())?;
        for r in results {
            checks += 1;
            if r.name.starts_with("network.") {
                worst_network = worst_network.max(r.max_rel_error);
            } else {
                worst_layer = worst_layer.max(r.max_rel_error);
            }
            if !r.passed || (r.name.starts_with("network.") && r.tolerance > 1e-3) || (!r.name.starts_with("network.") && r.tolerance > 1e-4) {
                failures.push(format!("seed {seed}: {r}"));
            }
        }
    }
    let took = started.elapsed();
    let detail = format!(
        "{checks} checks over 5 seeds, worst layer {worst_layer:.2e} (tol 1e-4), worst network {worst_network:.2e} (tol 1e-3), {took:.2?} (limit 60 s)"
    );
    if failures.is_empty() && took < Duration::from_secs(60) {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", failures.join("; ")))
    }
}

fn criterion_4() -> Outcome {
    let (t, d, n, expand) = (100, 100, 32, 0.25);
    let mask = build_sample_mask(t, d, n, expand).map_err(|e| e.to_string())?;
    let mut max_nnz = 0;
    let mut in_range_rows = 0;
    let mut worst_sum: f64 = 0.0;
    let mut validity_errors = 0;
    for i in 0..d {
        for j in 0..t {
            let end = j + i + 1;
            if mask.is_valid(i, j) != (end < t) {
                validity_errors += 1;
            }
            let dur = (i + 1) as f64;
            let lo = j as f64 - expand * dur;
            let hi = end as f64 + expand * dur;
            for k in 0..n {
                let row = mask.row(k, i, j);
                max_nnz = max_nnz.max(row.nnz as usize);
                let x = lo + (hi - lo) * k as f64 / (n - 1) as f64;
                if (0.0..=(t - 1) as f64).contains(&x) {
                    in_range_rows += 1;
                    worst_sum = worst_sum.max((row.weight_sum() - 1.0).abs());
                }
            }
        }
    }
    ensure(
        max_nnz <= 2 && worst_sum <= 1e-6 && validity_errors == 0,
        format!(
            "max nnz {max_nnz}, {in_range_rows} in-range rows with max |Σw−1| {worst_sum:.2e}, {validity_errors} validity mismatches"
        ),
    )
}

fn random_instances(rng: &mut ChaCha8Rng, t: usize) -> Vec<Interval> {
    let count = rng.random_range(0..=3);
    (0..count)
        .map(|_| {
            let s = rng.random_range(0.0..t as f64 - 0.5);
            let e = (s + rng.random_range(0.25..t as f64 / 2.0)).min(t as f64);
            Interval::new(s, e)
        })
        .collect()
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

fn criterion_5() -> Outcome {
    let (t, d) = (16, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let inst = random_instances(&mut rng, t);
        let labels = tem_labels(&inst, t);
        for loc in 0..t {
            let (r0, r1) = (loc as f64 - 0.5, loc as f64 + 0.5);
            let mut gs: f64 = 0.0;
            let mut ge: f64 = 0.0;
            for g in &inst {
                let h = (g.end - g.start) / 10.0;
                gs = gs.max(overlap(r0, r1, g.start - h, g.start + h) / (r1 - r0));
                ge = ge.max(overlap(r0, r1, g.end - h, g.end + h) / (r1 - r0));
            }
            worst = worst.max((labels.start[loc] - gs).abs()).max((labels.end[loc] - ge).abs());
        }
        let map = pem_label_map(&inst, t, d);
        for i in 0..d {
            for j in 0..t {
                let (p0, p1) = (j as f64, (j + i + 1) as f64);
                let mut best: f64 = 0.0;
                if j + i + 1 < t {
                    for g in &inst {
                        let inter = overlap(p0, p1, g.start, g.end);
                        let union = (p1 - p0) + (g.end - g.start) - inter;
                        if union > 0.0 && g.end > g.start {
                            best = best.max(inter / union);
                        }
                    }
                }
                worst = worst.max((map.get(i, j) - best).abs());
            }
        }
    }
    ensure(worst <= 1e-9, format!("50 windows, max abs diff {worst:.2e} (tol 1e-9)"))
}

fn criterion_6() -> Outcome {
    let bl = weighted_bl_loss(&[0.5, 0.5], &[1.0, 0.0], 0.5);
    let bl_err = (bl - 2.0 * 2f64.ln()).abs();
    let fused = fuse_score(&Proposal::new(0.0, 1.0, 0.8, 0.9, 0.64, 0.25));
    let fuse_err = (fused - 0.288).abs();
    let mut a = Proposal::new(0.0, 10.0, 1.0, 1.0, 1.0, 1.0);
    a.score = 0.9;
    let mut b = a;
    b.score = 0.8;
    let kept = soft_nms(&[a, b], 0.5, 0.0, 10);
    let decayed = kept.get(1).map_or(f64::NAN, |p| p.score);
    let nms_err = (decayed - 0.8 * (-2f64).exp()).abs();
    ensure(
        bl_err <= 1e-9 && fuse_err <= 1e-9 && nms_err <= 1e-9,
        format!("BL {bl:.12} (err {bl_err:.1e}), fuse {fused:.12} (err {fuse_err:.1e}), soft-NMS {decayed:.12} (err {nms_err:.1e})"),
    )
}

fn random_ground_truth(rng: &mut ChaCha8Rng, max_per_video: usize) -> GroundTruth {
    (0..6)
        .map(|v| {
            let inst = (0..rng.random_range(1..=max_per_video))
                .map(|k| {
                    let s = 30.0 * k as f64 + rng.random_range(0.0..10.0);
                    Interval::new(s, s + rng.random_range(2.0..15.0))
                })
                .collect();
            (format!("v{v}"), inst)
        })
        .collect()
}

fn criterion_7() -> Outcome {
    let grid = threshold_grid(0.5, 0.05, 0.95);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let err = |e: bmn::BmnError| e.to_string();

    // One instance per video: every AN ≥ 1 retrieves everything.
    let single = random_ground_truth(&mut rng, 1);
    let auc_perfect = auc(&ar_curve(&single, &single, &grid, 100).map_err(err)?);

    // Several instances per video: top-AN per video caps recall at
    // Σ_v min(AN, n_v) / N, which gives the exact AUC.
    let multi = random_ground_truth(&mut rng, 3);
    let total: usize = multi.values().map(Vec::len).sum();
    let closed_form = 100.0
        * (1..=100)
            .map(|an| multi.values().map(|v| v.len().min(an)).sum::<usize>() as f64 / total as f64)
            .sum::<f64>()
        / 100.0;
    let auc_multi = auc(&ar_curve(&multi, &multi, &grid, 100).map_err(err)?);

    let auc_empty = auc(&ar_curve(&RankedProposals::new(), &multi, &grid, 100).map_err(err)?);
    let mut monotone_violations = 0;
    for _ in 0..100 {
        let props: RankedProposals = multi
            .keys()
            .map(|v| {
                let list = (0..rng.random_range(0..40))
                    .map(|_| {
                        let s = rng.random_range(0.0..100.0);
                        Interval::new(s, s + rng.random_range(0.5..30.0))
                    })
                    .collect();
                (v.clone(), list)
            })
            .collect();
        let curve = ar_curve(&props, &multi, &grid, 100).map_err(err)?;
        monotone_violations += curve.values.windows(2).filter(|w| w[1] < w[0]).count();
    }
    ensure(
        auc_perfect == 100.0 && (auc_multi - closed_form).abs() <= 1e-9 && auc_empty == 0.0 && monotone_violations == 0,
        format!(
            "ground truth as proposals: AUC {auc_perfect} (one instance per video), {auc_multi:.6} vs closed form {closed_form:.6} (up to 3 per video); empty AUC {auc_empty}; {monotone_violations} monotonicity violations in 100 trials"
        ),
    )
}

struct EndToEnd {
    first_epoch: f64,
    last_epoch: f64,
    ar10: f64,
    checkpoint: Vec<u8>,
    metrics: Vec<u8>,
    took: Duration,
}

fn end_to_end(root: &Path) -> Result<EndToEnd, String> {
    let started = Instant::now();
    let mut cfg = RunConfig::profile(Profile::Anet);
    cfg.seed = 2024;
    cfg.workers = 1;
    cfg.paths = PathsConfig::under(&root.join("data"), &root.join("runs"));
    let err = |e: bmn::BmnError| e.to_string();
    pipeline::gen_synthetic(&cfg).map_err(err)?;
    let trained = pipeline::train_model(&cfg, None).map_err(err)?;
    let rows = pipeline::infer(&cfg, &trained.checkpoint).map_err(err)?;
    pipeline::evaluate(&cfg, &cfg.paths.proposals(), &cfg.paths.val.annotations).map_err(err)?;
    let val = pipeline::load_dataset(&cfg.paths.val, cfg.data.frame_interval).map_err(err)?;
    let ar10 = recall_at(&pipeline::rank_proposals(&rows), &val.ground_truth(), 10, 0.5).map_err(err)?;
    let epochs = &trained.report.epochs;
    Ok(EndToEnd {
        first_epoch: epochs.first().map_or(f64::NAN, |e| e.total),
        last_epoch: epochs.last().map_or(f64::NAN, |e| e.total),
        ar10,
        checkpoint: fs::read(&trained.checkpoint).map_err(|e| e.to_string())?,
        metrics: fs::read(cfg.paths.metrics()).map_err(|e| e.to_string())?,
        took: started.elapsed(),
    })
}

fn criterion_8(run: &Result<EndToEnd, String>) -> Outcome {
    let r = run.as_ref().map_err(Clone::clone)?;
    let drop = 1.0 - r.last_epoch / r.first_epoch;
    ensure(
        drop >= 0.5 && r.ar10 >= 0.70,
        format!(
            "loss {:.4} -> {:.4} (drop {:.1}%, need ≥ 50%), AR@10 tIoU 0.5 = {:.3} (need ≥ 0.70), {:.1?}",
            r.first_epoch,
            r.last_epoch,
            100.0 * drop,
            r.ar10,
            r.took
        ),
    )
}

fn criterion_9(first: &Result<EndToEnd, String>, root: &Path) -> Outcome {
    let a = first.as_ref().map_err(Clone::clone)?;
    let b = end_to_end(root)?;
    ensure(
        a.checkpoint == b.checkpoint && a.metrics == b.metrics,
        format!(
            "checkpoint {} ({} bytes), metrics JSON {}",
            if a.checkpoint == b.checkpoint { "identical" } else { "differs" },
            a.checkpoint.len(),
            if a.metrics == b.metrics { "identical" } else { "differs" }
        ),
    )
}

fn criterion_10() -> Outcome {
    let (c, t, d, n) = (128, 100, 100, 32);
    let mask: std::sync::Arc<SampleMask> = SampleMask::cached(t, d, n, 0.25).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let s: Vec<f32> = (0..c * t).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut bm_best = Duration::MAX;
    for _ in 0..3 {
        let started = Instant::now();
        let m = bm_forward(&s, c, &mask).map_err(|e| e.to_string())?;
        bm_best = bm_best.min(started.elapsed());
        std::hint::black_box(&m);
    }

    // 20 start candidates × 50 end candidates = 1000 proposals
    let mut p_start = vec![0.1; t];
    let mut p_end = vec![0.1; t];
    p_start[..20].iter_mut().for_each(|v| *v = 0.9);
    p_end[50..].iter_mut().for_each(|v| *v = 0.8);
    let m_cc: Vec<f64> = (0..d * t).map(|_| rng.random_range(0.0..1.0)).collect();
    let m_cr: Vec<f64> = (0..d * t).map(|_| rng.random_range(0.0..1.0)).collect();
    let scores = WindowScores {
        p_start: &p_start,
        p_end: &p_end,
        m_cc: &m_cc,
        m_cr: &m_cr,
        max_duration: d,
    };
    let mut decode_best = Duration::MAX;
    let mut candidates = 0;
    let mut kept = 0;
    for _ in 0..3 {
        let started = Instant::now();
        let props = decode_window(&scores);
        candidates = props.len();
        kept = merge_windows(&[props], &Suppression::default()).len();
        decode_best = decode_best.min(started.elapsed());
    }
    ensure(
        bm_best < Duration::from_millis(200) && decode_best < Duration::from_millis(100) && candidates == 1000,
        format!(
            "bm_forward {bm_best:.2?} (limit 200 ms); decode+soft-NMS on {candidates} candidates -> {kept} kept in {decode_best:.2?} (limit 100 ms)"
        ),
    )
}

fn report(k: usize, name: &str, outcome: Outcome) -> bool {
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {k:>2} {tag}  {name}: {detail}");
    outcome.is_ok()
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    })
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let dir = tempfile::tempdir().expect("temporary directory");
    let mut passed = 0;
    let mut all = |k: usize, name: &str, outcome: Outcome| {
        passed += usize::from(report(k, name, outcome));
    };
    all(1, "BM oracle equivalence", guarded(criterion_1));
    all(2, "adjoint identity", guarded(criterion_2));
    all(3, "gradient suite", guarded(criterion_3));
    all(4, "mask structure", guarded(criterion_4));
    all(5, "label oracles", guarded(criterion_5));
    all(6, "loss arithmetic", guarded(criterion_6));
    all(7, "metric sanity", guarded(criterion_7));
    let first = catch_unwind(AssertUnwindSafe(|| end_to_end(&dir.path().join("a"))))
        .unwrap_or_else(|_| Err("end-to-end run panicked".into()));
    all(8, "end-to-end synthetic", guarded(|| criterion_8(&first)));
    all(9, "determinism", guarded(|| criterion_9(&first, &dir.path().join("b"))));
    all(10, "throughput", guarded(criterion_10));
    println!("{passed}/10 criteria passed");
    if passed != 10 {
        std::process::exit(1);
    }
}

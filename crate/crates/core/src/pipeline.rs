//! End-to-end stages driven by a [`RunConfig`]: synthetic data generation,
//! training, inference, evaluation and gradient checking.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data_io::{
    load_annotations, load_features, make_windows, rescale_features, seconds_per_snippet, to_seconds,
    AnnotationSet, FeatureSequence, TimeMode, Window,
};
use crate::decode::{decode_window, merge_windows, read_csv, write_csv, Proposal, WindowScores};
use crate::error::{BmnError, Result};
use crate::gradcheck::{run_all, CheckConfig, CheckResult, Corruption, GradcheckProfile};
use crate::metrics::{report, GroundTruth, Interval, MetricsReport, RankedProposals};
use crate::network::{load_checkpoint, save_checkpoint, train, Bmn, Example, ModelParams, TrainReport, WindowTargets};
use crate::synthetic::{generate, write_dataset, DatasetPaths};

/// Feature sequences of one split, with durations from its annotations.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub videos: Vec<FeatureSequence>,
    pub annotations: AnnotationSet,
}

impl Dataset {
    pub fn channels(&self) -> Result<usize> {
        let first = self
            .videos
            .first()
            .ok_or_else(|| BmnError::EmptyInput("dataset has no feature files".into()))?;
        if let Some(v) = self.videos.iter().find(|v| v.channels != first.channels) {
            return Err(BmnError::Shape(format!(
                "video {} has {} channels, {} has {}",
                v.video_id, v.channels, first.video_id, first.channels
            )));
        }
        Ok(first.channels)
    }

    pub fn ground_truth(&self) -> GroundTruth {
        self.annotations
            .iter()
            .map(|(id, a)| (id.clone(), a.instances.clone()))
            .collect()
    }
}

/// Loads every `*.bmnf` under `paths.features` in file-name order.
pub fn load_dataset(paths: &DatasetPaths, frame_interval: u32) -> Result<Dataset> {
    let annotations = load_annotations(&paths.annotations)?;
    let dir = &paths.features;
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| BmnError::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| BmnError::io(dir, e)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|x| x == "bmnf"))
        .collect();
    files.sort();
    let videos = files
        .iter()
        .map(|p| {
            let f = load_features(p)?;
            let duration = annotations.get(&f.video_id)?.duration_seconds;
            Ok(f.with_duration(duration)?.with_frame_interval(frame_interval))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { videos, annotations })
}

/// A window together with the (possibly rescaled) sequence it was cut from.
pub struct PreparedVideo {
    pub sequence: FeatureSequence,
    pub windows: Vec<Window>,
}

/// Cuts network inputs from `f`: one rescaled window in rescale mode,
/// 50%-overlap windows over native snippets otherwise.
pub fn prepare_video(
    f: &FeatureSequence,
    instances: &[Interval],
    cfg: &RunConfig,
    training: bool,
) -> Result<PreparedVideo> {
    let l = cfg.model.window;
    let sequence = match cfg.data.mode {
        TimeMode::Rescale if f.length != l => rescale_features(f, l)?,
        _ => f.clone(),
    };
    let spp = match cfg.data.mode {
        TimeMode::Rescale => sequence.duration_seconds / l as f64,
        mode => seconds_per_snippet(&sequence, &mode)?,
    };
    let windows = make_windows(&sequence, instances, l, training, spp)?;
    Ok(PreparedVideo { sequence, windows })
}

pub fn training_examples(data: &Dataset, cfg: &RunConfig) -> Result<Vec<Example<f32>>> {
    let mut out = Vec::new();
    for f in &data.videos {
        let instances = &data.annotations.get(&f.video_id)?.instances;
        for w in prepare_video(f, instances, cfg, true)?.windows {
            out.push(Example {
                targets: WindowTargets::from_window(&w, cfg.model.max_duration),
                features: w.features,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub train_videos: usize,
    pub val_videos: usize,
    pub train_instances: usize,
    pub val_instances: usize,
}

/// Writes the train and validation splits to `cfg.paths.train` / `.val`.
/// Both splits share one generator so they share the action template.
pub fn gen_synthetic(cfg: &RunConfig) -> Result<SynthSummary> {
    for split in [&cfg.paths.train, &cfg.paths.val] {
        fs::create_dir_all(&split.features).map_err(|e| {
            BmnError::Config(format!("cannot create output directory {}: {e}", split.features.display()))
        })?;
    }
    let gen = cfg.synthetic.generator(cfg.seed);
    let mut videos = generate(&gen)?;
    let val = videos.split_off(cfg.synthetic.train_videos);
    write_dataset(&cfg.paths.train, &videos)?;
    write_dataset(&cfg.paths.val, &val)?;
    let count = |v: &[crate::synthetic::SynthVideo]| v.iter().map(|x| x.instances.len()).sum();
    Ok(SynthSummary {
        train_videos: videos.len(),
        val_videos: val.len(),
        train_instances: count(&videos),
        val_instances: count(&val),
    })
}

pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub report: TrainReport,
    pub windows: usize,
    pub checkpoint: PathBuf,
}

/// Trains on the train split, starting from `resume` if given, and writes
/// the checkpoint and the loss log.
pub fn train_model(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    let data = load_dataset(&cfg.paths.train, cfg.data.frame_interval)?;
    let shape = cfg.model.shape(data.channels()?);
    let net = Bmn::<f32>::new(shape.clone())?;
    let examples = training_examples(&data, cfg)?;
    info!(
        "training on {} windows from {} videos ({} parameters)",
        examples.len(),
        data.videos.len(),
        ModelParams::<f32>::zeros(&shape).num_values()
    );
    let mut params = match resume {
        Some(path) => {
            let p = load_checkpoint(path)?;
            p.check_shape(&shape)?;
            info!("resuming from {}", path.display());
            p
        }
        None => ModelParams::init(&shape, cfg.seed),
    };
    let report = train(&net, &mut params, &examples, &cfg.train_config())?;
    create_dir(&cfg.paths.output)?;
    let checkpoint = cfg.paths.checkpoint();
    if let Some(parent) = checkpoint.parent() {
        create_dir(parent)?;
    }
    save_checkpoint(&checkpoint, &params)?;
    let log = serde_json::to_string_pretty(&report).expect("report serializes");
    let log_path = cfg.paths.train_log();
    fs::write(&log_path, log).map_err(|e| BmnError::io(&log_path, e))?;
    Ok(TrainOutcome {
        params,
        report,
        windows: examples.len(),
        checkpoint,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    if dir.as_os_str().is_empty() {
        return Ok(());
    }
    fs::create_dir_all(dir).map_err(|e| BmnError::io(dir, e))
}

/// Decodes one video into suppressed proposals in seconds, best first.
pub fn infer_video(net: &Bmn<f32>, params: &ModelParams<f32>, f: &FeatureSequence, cfg: &RunConfig) -> Result<Vec<Proposal>> {
    let prepared = prepare_video(f, &[], cfg, false)?;
    let widen = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
    let mut per_window = Vec::with_capacity(prepared.windows.len());
    for w in &prepared.windows {
        let out = net.forward(params, &w.features)?;
        let (ps, pe, cc, cr) = (widen(&out.p_start), widen(&out.p_end), widen(&out.m_cc), widen(&out.m_cr));
        let scores = WindowScores {
            p_start: &ps,
            p_end: &pe,
            m_cc: &cc,
            m_cr: &cr,
            max_duration: cfg.model.max_duration,
        };
        let mut props = Vec::new();
        for p in decode_window(&scores) {
            let mut s = to_seconds(&p, w, &prepared.sequence, &cfg.data.mode)?;
            // zero padding past the end of a short sequence
            s.t_end = s.t_end.min(f.duration_seconds);
            if s.t_end > s.t_start {
                props.push(s);
            }
        }
        per_window.push(props);
    }
    Ok(merge_windows(&per_window, &cfg.decode.suppression))
}

/// Runs inference over the validation split and writes the proposal CSV.
pub fn infer(cfg: &RunConfig, checkpoint: &Path) -> Result<Vec<(String, Proposal)>> {
    let data = load_dataset(&cfg.paths.val, cfg.data.frame_interval)?;
    let params = load_checkpoint(checkpoint)?;
    let channels = match data.videos.first() {
        Some(_) => data.channels()?,
        None => params.tensors.first().and_then(|t| t.dims.get(1).copied()).unwrap_or(1),
    };
    let shape = cfg.model.shape(channels);
    params.check_shape(&shape)?;
    let net = Bmn::<f32>::new(shape)?;
    let run = |f: &FeatureSequence| infer_video(&net, &params, f, cfg);
    let per_video: Vec<Vec<Proposal>> = if cfg.workers > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| BmnError::Config(format!("worker pool: {e}")))?
            .install(|| data.videos.par_iter().map(run).collect::<Result<_>>())?
    } else {
        data.videos.iter().map(run).collect::<Result<_>>()?
    };
    let mut rows: Vec<(String, Proposal)> = data
        .videos
        .iter()
        .zip(per_video)
        .flat_map(|(f, props)| props.into_iter().map(move |p| (f.video_id.clone(), p)))
        .collect();
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.score.total_cmp(&a.1.score)));
    create_dir(&cfg.paths.output)?;
    let path = cfg.paths.proposals();
    let file = fs::File::create(&path).map_err(|e| BmnError::io(&path, e))?;
    write_csv(std::io::BufWriter::new(file), &rows).map_err(|e| BmnError::io(&path, e))?;
    info!("wrote {} proposals for {} videos to {}", rows.len(), data.videos.len(), path.display());
    Ok(rows)
}

/// Groups CSV rows by video, each list sorted by descending score.
pub fn rank_proposals(rows: &[(String, Proposal)]) -> RankedProposals {
    let mut by_video: BTreeMap<String, Vec<&Proposal>> = BTreeMap::new();
    for (v, p) in rows {
        by_video.entry(v.clone()).or_default().push(p);
    }
    by_video
        .into_iter()
        .map(|(v, mut ps)| {
            ps.sort_by(|a, b| b.score.total_cmp(&a.score));
            (v, ps.into_iter().map(Proposal::interval).collect())
        })
        .collect()
}

/// Scores a proposal CSV against an annotation file and writes the report
/// to `cfg.paths.metrics()`.
pub fn evaluate(cfg: &RunConfig, proposals: &Path, annotations: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(proposals).map_err(|e| BmnError::io(proposals, e))?;
    let rows = read_csv(&text).map_err(|msg| BmnError::Format {
        path: proposals.to_path_buf(),
        msg,
    })?;
    let gts: GroundTruth = load_annotations(annotations)?
        .iter()
        .map(|(id, a)| (id.clone(), a.instances.clone()))
        .collect();
    let metrics = report(&rank_proposals(&rows), &gts, &cfg.eval.grid(), cfg.eval.an_max)?;
    create_dir(&cfg.paths.output)?;
    let path = cfg.paths.metrics();
    let json = serde_json::to_string_pretty(&metrics).expect("report serializes");
    fs::write(&path, json).map_err(|e| BmnError::io(&path, e))?;
    Ok(metrics)
}

/// Runs every finite-difference suite for `repeats` consecutive seeds.
pub fn gradcheck(
    profile: GradcheckProfile,
    seed: u64,
    repeats: usize,
    corrupt: &Corruption,
) -> Result<Vec<(u64, Vec<CheckResult>)>> {
    let cfg = CheckConfig::default();
    (0..repeats as u64)
        .map(|k| {
            let s = seed.wrapping_add(k);
            run_all(profile, s, &cfg, corrupt).map(|r| (s, r))
        })
        .collect()
}

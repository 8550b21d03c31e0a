//! Seeded synthetic videos: Gaussian background noise with a constant
//! additive template switched on inside each action span.
//!
//! One snippet is one second, so `duration_second` equals `T` and interval
//! endpoints are snippet indices.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data_io::{save_annotations, save_features, AnnotationSet, FeatureSequence, VideoAnnotation};
use crate::error::{BmnError, Result};
use crate::metrics::Interval;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub videos: usize,
    pub channels: usize,
    pub length: usize,
    pub min_actions: usize,
    pub max_actions: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub amplitude: f64,
    pub noise_std: f64,
    /// Minimum number of background snippets between two actions.
    pub min_gap: usize,
    /// Placement attempts per video before giving up.
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            videos: 250,
            channels: 16,
            length: 100,
            min_actions: 1,
            max_actions: 3,
            min_duration: 5,
            max_duration: 40,
            amplitude: 1.0,
            noise_std: 0.3,
            min_gap: 2,
            max_retries: 1000,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(BmnError::Config(msg));
        if self.channels == 0 || self.length < 2 {
            return bad(format!(
                "need channels ≥ 1 and length ≥ 2, got {}×{}",
                self.channels, self.length
            ));
        }
        if self.min_actions == 0 || self.min_actions > self.max_actions {
            return bad(format!(
                "action count range [{}, {}] is empty or starts at zero",
                self.min_actions, self.max_actions
            ));
        }
        if self.min_duration < 2 || self.min_duration > self.max_duration {
            return bad(format!(
                "duration range [{}, {}] must satisfy 2 ≤ min ≤ max",
                self.min_duration, self.max_duration
            ));
        }
        if self.min_gap < 2 {
            return bad(format!("gap between actions must be ≥ 2, got {}", self.min_gap));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite() && self.amplitude.is_finite()) {
            return bad("noise std must be finite and non-negative; amplitude finite".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthVideo {
    pub features: FeatureSequence,
    /// Seconds (equal to snippet indices).
    pub instances: Vec<Interval>,
}

pub fn video_id(index: usize) -> String {
    format!("synth_{index:05}")
}

/// The dataset-wide action pattern: `a · U(0.5, 1.5)` per channel.
pub fn template(cfg: &SynthConfig) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    (0..cfg.channels)
        .map(|_| (cfg.amplitude * rng.random_range(0.5..1.5)) as f32)
        .collect()
}

/// Draws action spans `[s, s + d)` with every end at most `T - 1`.
fn place_actions(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Option<Vec<(usize, usize)>> {
    let count = rng.random_range(cfg.min_actions..=cfg.max_actions);
    let last_end = cfg.length - 1;
    for _ in 0..cfg.max_retries.max(1) {
        let mut spans = Vec::with_capacity(count);
        for _ in 0..count {
            let d = rng.random_range(cfg.min_duration..=cfg.max_duration);
            if d > last_end {
                break;
            }
            let s = rng.random_range(0..=last_end - d);
            spans.push((s, s + d));
        }
        if spans.len() < count {
            continue;
        }
        spans.sort_unstable();
        if spans.windows(2).all(|p| p[1].0 >= p[0].1 + cfg.min_gap) {
            return Some(spans);
        }
    }
    None
}

pub fn generate_video(cfg: &SynthConfig, template: &[f32], index: usize) -> Result<SynthVideo> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ index as u64);
    let spans = place_actions(cfg, &mut rng).ok_or_else(|| {
        BmnError::Generation(format!(
            "could not place non-overlapping actions in video {index} after {} attempts",
            cfg.max_retries
        ))
    })?;
    let t = cfg.length;
    let mut data = vec![0.0f32; cfg.channels * t];
    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| BmnError::Config(e.to_string()))?;
        data.iter_mut().for_each(|v| *v = noise.sample(&mut rng) as f32);
    }
    for &(s, e) in &spans {
        for (c, &a) in template.iter().enumerate() {
            data[c * t + s..c * t + e].iter_mut().for_each(|v| *v += a);
        }
    }
    let features = FeatureSequence::new(video_id(index), cfg.channels, t, data)?.with_duration(t as f64)?;
    Ok(SynthVideo {
        features,
        instances: spans.iter().map(|&(s, e)| Interval::new(s as f64, e as f64)).collect(),
    })
}

/// Generates `cfg.videos` videos numbered from 0.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthVideo>> {
    cfg.validate()?;
    let pattern = template(cfg);
    (0..cfg.videos).map(|k| generate_video(cfg, &pattern, k)).collect()
}

/// Where a dataset split lives on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub features: PathBuf,
    pub annotations: PathBuf,
}

impl DatasetPaths {
    pub fn under(dir: &Path) -> Self {
        DatasetPaths {
            features: dir.join("features"),
            annotations: dir.join("annotations.json"),
        }
    }
}

/// Writes one `<video_id>.bmnf` per video plus a shared annotation file.
pub fn write_dataset(paths: &DatasetPaths, videos: &[SynthVideo]) -> Result<()> {
    fs::create_dir_all(&paths.features).map_err(|e| BmnError::io(&paths.features, e))?;
    if let Some(parent) = paths.annotations.parent() {
        fs::create_dir_all(parent).map_err(|e| BmnError::io(parent, e))?;
    }
    let mut set = AnnotationSet::new();
    for v in videos {
        let f = &v.features;
        save_features(paths.features.join(format!("{}.bmnf", f.video_id)), f)?;
        set.insert(
            f.video_id.clone(),
            VideoAnnotation {
                duration_seconds: f.duration_seconds,
                instances: v.instances.clone(),
            },
        )?;
    }
    save_annotations(&paths.annotations, &set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small(videos: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            videos,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(generate(&small(5, 9)).unwrap(), generate(&small(5, 9)).unwrap());
        assert_ne!(generate(&small(5, 9)).unwrap(), generate(&small(5, 10)).unwrap());
    }

    #[test]
    fn noiseless_spans_are_recoverable_by_thresholding() {
        let cfg = SynthConfig {
            noise_std: 0.0,
            ..small(20, 3)
        };
        let t = cfg.length;
        for v in generate(&cfg).unwrap() {
            let mean = |s: usize| (0..cfg.channels).map(|c| v.features.data[c * t + s]).sum::<f32>() / cfg.channels as f32;
            let on: Vec<bool> = (0..t).map(|s| mean(s) > 0.25).collect();
            let truth: Vec<bool> = (0..t)
                .map(|s| v.instances.iter().any(|i| (s as f64) >= i.start && (s as f64) < i.end))
                .collect();
            assert_eq!(on, truth);
        }
    }

    #[test]
    fn impossible_placement_is_a_generation_error() {
        let cfg = SynthConfig {
            length: 20,
            min_actions: 3,
            max_actions: 3,
            min_duration: 8,
            max_duration: 8,
            max_retries: 50,
            ..small(1, 0)
        };
        assert!(matches!(generate(&cfg), Err(BmnError::Generation(_))));
    }

    #[test]
    fn writes_one_file_per_video() {
        let dir = tempfile::tempdir().unwrap();
        let paths = DatasetPaths::under(dir.path());
        let videos = generate(&small(10, 1)).unwrap();
        write_dataset(&paths, &videos).unwrap();
        assert_eq!(fs::read_dir(&paths.features).unwrap().count(), 10);
        let set = crate::data_io::load_annotations(&paths.annotations).unwrap();
        assert_eq!(set.len(), 10);
        let back = crate::data_io::load_features(paths.features.join("synth_00004.bmnf")).unwrap();
        assert_eq!(back.data, videos[4].features.data);
    }

    proptest! {
        #[test]
        fn annotations_are_valid_and_separated(seed in any::<u64>(), index in 0usize..1000) {
            let cfg = small(1, seed);
            let v = generate_video(&cfg, &template(&cfg), index).unwrap();
            let n = v.instances.len();
            prop_assert!((cfg.min_actions..=cfg.max_actions).contains(&n));
            for i in &v.instances {
                prop_assert!(i.start >= 0.0 && i.end <= (cfg.length - 1) as f64);
                let d = i.len() as usize;
                prop_assert!((cfg.min_duration..=cfg.max_duration).contains(&d));
            }
            for p in v.instances.windows(2) {
                prop_assert!(p[1].start >= p[0].end + cfg.min_gap as f64);
            }
            prop_assert!(v.features.data.iter().all(|x| x.is_finite()));
        }
    }
}

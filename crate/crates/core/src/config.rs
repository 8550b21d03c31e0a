//! Run configuration: one JSON document layered over a named profile.
//!
//! Loading starts from the profile's defaults (`"profile"` key, default
//! `anet`), deep-merges the user's document on top and validates the result.
//! A nested object whose `"kind"` differs from the default replaces it
//! instead of merging, so switching e.g. the suppression method does not
//! inherit the old method's fields.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data_io::TimeMode;
use crate::decode::Suppression;
use crate::error::{BmnError, Result};
use crate::metrics::threshold_grid;
use crate::network::{BmnShape, LossConfig, OptimizerConfig, TrainConfig};
use crate::synthetic::{DatasetPaths, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Whole videos rescaled to a 100-snippet window, D = 100.
    Anet,
    /// 128-snippet sliding windows over native snippets, D = 64.
    Thumos,
    /// 16-snippet window with narrow layers, for smoke tests.
    Tiny,
}

impl std::str::FromStr for Profile {
    type Err = BmnError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_string()))
            .map_err(|_| BmnError::Config(format!("unknown profile `{s}` (expected anet, thumos or tiny)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub train: DatasetPaths,
    pub val: DatasetPaths,
    /// Checkpoint, proposals, metrics and logs are written here.
    pub output: PathBuf,
    /// Defaults to `<output>/model.bmnc`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl PathsConfig {
    pub fn under(data: &Path, output: &Path) -> Self {
        PathsConfig {
            train: DatasetPaths::under(&data.join("train")),
            val: DatasetPaths::under(&data.join("val")),
            output: output.to_path_buf(),
            checkpoint: None,
        }
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.output.join("model.bmnc"))
    }

    pub fn proposals(&self) -> PathBuf {
        self.output.join("proposals.csv")
    }

    pub fn metrics(&self) -> PathBuf {
        self.output.join("metrics.json")
    }

    pub fn train_log(&self) -> PathBuf {
        self.output.join("train_log.json")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub window: usize,
    pub max_duration: usize,
    pub num_samples: usize,
    pub expand: f64,
    pub base_hidden: usize,
    pub base_out: usize,
    pub tem_hidden: usize,
    pub pem_hidden_3d: usize,
    pub pem_hidden_2d: usize,
}

impl ModelConfig {
    fn from_shape(s: &BmnShape) -> Self {
        ModelConfig {
            window: s.window,
            max_duration: s.max_duration,
            num_samples: s.num_samples,
            expand: s.expand,
            base_hidden: s.base_hidden,
            base_out: s.base_out,
            tem_hidden: s.tem_hidden,
            pem_hidden_3d: s.pem_hidden_3d,
            pem_hidden_2d: s.pem_hidden_2d,
        }
    }

    pub fn shape(&self, in_channels: usize) -> BmnShape {
        BmnShape {
            in_channels,
            window: self.window,
            max_duration: self.max_duration,
            num_samples: self.num_samples,
            expand: self.expand,
            base_hidden: self.base_hidden,
            base_out: self.base_out,
            tem_hidden: self.tem_hidden,
            pem_hidden_3d: self.pem_hidden_3d,
            pem_hidden_2d: self.pem_hidden_2d,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub mode: TimeMode,
    /// Video frames per snippet. Feature files do not carry it.
    pub frame_interval: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub suppression: Suppression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Inclusive tIoU grid `[start:step:end]`.
    pub thresholds: [f64; 3],
    pub an_max: usize,
}

impl EvalConfig {
    pub fn grid(&self) -> Vec<f64> {
        let [start, step, end] = self.thresholds;
        threshold_grid(start, step, end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub train_videos: usize,
    pub val_videos: usize,
    pub channels: usize,
    pub length: usize,
    pub actions: [usize; 2],
    pub durations: [usize; 2],
    pub amplitude: f64,
    pub noise_std: f64,
    pub min_gap: usize,
    pub max_retries: usize,
}

impl SyntheticSection {
    fn from_synth(train_videos: usize, val_videos: usize, s: &SynthConfig) -> Self {
        SyntheticSection {
            train_videos,
            val_videos,
            channels: s.channels,
            length: s.length,
            actions: [s.min_actions, s.max_actions],
            durations: [s.min_duration, s.max_duration],
            amplitude: s.amplitude,
            noise_std: s.noise_std,
            min_gap: s.min_gap,
            max_retries: s.max_retries,
        }
    }

    /// Generator settings covering both splits (train first, then val).
    pub fn generator(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            videos: self.train_videos + self.val_videos,
            channels: self.channels,
            length: self.length,
            min_actions: self.actions[0],
            max_actions: self.actions[1],
            min_duration: self.durations[0],
            max_duration: self.durations[1],
            amplitude: self.amplitude,
            noise_std: self.noise_std,
            min_gap: self.min_gap,
            max_retries: self.max_retries,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    /// Source of all randomness: data generation, initialization,
    /// shuffling and negative sampling.
    pub seed: u64,
    /// Worker threads for per-window training passes and per-video
    /// inference; 1 runs serially.
    pub workers: usize,
    pub paths: PathsConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainSection,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
    pub synthetic: SyntheticSection,
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let train = TrainSection {
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
        };
        let synth = SynthConfig::default();
        let base = RunConfig {
            profile,
            seed: 0,
            workers: 1,
            paths: PathsConfig::under(Path::new("data"), Path::new("runs")),
            model: ModelConfig::from_shape(&BmnShape::standard(0, 100, 100)),
            data: DataConfig {
                mode: TimeMode::Rescale,
                frame_interval: 16,
            },
            train,
            decode: DecodeConfig {
                suppression: Suppression::default(),
            },
            eval: EvalConfig {
                thresholds: [0.5, 0.05, 0.95],
                an_max: 100,
            },
            synthetic: SyntheticSection::from_synth(200, 50, &synth),
        };
        match profile {
            Profile::Anet => base,
            Profile::Thumos => RunConfig {
                model: ModelConfig::from_shape(&BmnShape::standard(0, 128, 64)),
                data: DataConfig {
                    mode: TimeMode::Windowed { fps: Some(30.0) },
                    frame_interval: 5,
                },
                eval: EvalConfig {
                    thresholds: [0.5, 0.05, 1.0],
                    an_max: 100,
                },
                ..base
            },
            Profile::Tiny => {
                let synth = SynthConfig {
                    length: 16,
                    min_duration: 2,
                    max_duration: 6,
                    ..synth
                };
                RunConfig {
                    model: ModelConfig::from_shape(&BmnShape::scaled_down(0)),
                    synthetic: SyntheticSection::from_synth(24, 8, &synth),
                    train: TrainSection {
                        epochs: 2,
                        batch_size: 4,
                        ..base.train
                    },
                    ..base
                }
            }
        }
    }

    /// Parses a user document layered over its profile and validates it.
    pub fn from_value(user: Value) -> Result<Self> {
        let profile = match user.get("profile") {
            None => Profile::Anet,
            Some(Value::String(s)) => s.parse()?,
            Some(other) => return Err(BmnError::Config(format!("profile must be a string, got {other}"))),
        };
        let mut merged = serde_json::to_value(Self::profile(profile)).expect("config serializes");
        merge(&mut merged, user);
        let cfg: RunConfig =
            serde_json::from_value(merged).map_err(|e| BmnError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value =
            serde_json::from_str(text).map_err(|e| BmnError::Config(format!("config is not valid JSON: {e}")))?;
        if !user.is_object() {
            return Err(BmnError::Config("config must be a JSON object".into()));
        }
        Self::from_value(user)
    }

    /// Reads `path`, or returns the `anet` defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Self::from_value(Value::Object(Default::default())),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| BmnError::Config(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_json(&text)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(BmnError::Config(msg));
        let m = &self.model;
        self.model.shape(1).validate()?;
        if !(m.expand >= 0.0 && m.expand.is_finite()) {
            return bad(format!("expand ratio must be finite and ≥ 0, got {}", m.expand));
        }
        if m.window < 2 {
            return bad(format!("window must be ≥ 2, got {}", m.window));
        }
        if self.data.frame_interval == 0 {
            return bad("frame interval must be positive".into());
        }
        if let TimeMode::Windowed { fps } = self.data.mode {
            if !fps.is_some_and(|f| f > 0.0 && f.is_finite()) {
                return bad("windowed mode requires a positive fps".into());
            }
        }
        let t = &self.train;
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", t.learning_rate));
        }
        if t.batch_size == 0 || t.epochs == 0 {
            return bad("batch size and epochs must be positive".into());
        }
        let l = &t.loss;
        let rates = [l.lambda_reg, l.lambda_pem, l.lambda_l2];
        if rates.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return bad("loss weights must be finite and ≥ 0".into());
        }
        match t.optimizer {
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                    return bad("Adam needs 0 ≤ β < 1 and ε > 0".into());
                }
            }
            OptimizerConfig::Sgd { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return bad("momentum must lie in [0, 1)".into());
                }
            }
        }
        match self.decode.suppression {
            Suppression::Soft { sigma, score_floor, top_k } => {
                if !(sigma > 0.0 && score_floor >= 0.0 && top_k > 0) {
                    return bad("soft suppression needs σ > 0, floor ≥ 0, top_k > 0".into());
                }
            }
            Suppression::Greedy { iou_threshold, top_k } => {
                if !((0.0..=1.0).contains(&iou_threshold) && top_k > 0) {
                    return bad("greedy suppression needs a threshold in [0, 1] and top_k > 0".into());
                }
            }
        }
        let [start, step, end] = self.eval.thresholds;
        if !(step > 0.0 && start > 0.0 && start <= end && end <= 1.0) {
            return bad(format!("tIoU grid [{start}:{step}:{end}] must satisfy 0 < start ≤ end ≤ 1, step > 0"));
        }
        if self.eval.an_max == 0 {
            return bad("AN_max must be positive".into());
        }
        self.synthetic.generator(self.seed).validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            seed: self.seed,
            optimizer: self.train.optimizer.clone(),
            loss: self.train.loss.clone(),
            workers: self.workers,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn merge(base: &mut Value, user: Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            let kind_changes = |b: &serde_json::Map<String, Value>| {
                matches!((b.get("kind"), u.get("kind")), (Some(x), Some(y)) if x != y)
            };
            if kind_changes(b) {
                *b = u;
                return;
            }
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

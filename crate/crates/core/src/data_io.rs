//! Feature/annotation ingestion, observation windows, rescaling and the
//! snippet ↔ seconds mapping.
//!
//! Feature file layout (little endian):
//!
//! ```text
//! "BMNF" | version: u32 = 1 | C: u32 | T: u32 | C·T × f32, channel-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decode::Proposal;
use crate::error::{BmnError, Result};
use crate::metrics::Interval;

pub const FEATURE_MAGIC: &[u8; 4] = b"BMNF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Per-snippet visual features of one video, `channels × length`, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    pub channels: usize,
    pub length: usize,
    pub data: Vec<f32>,
    pub duration_seconds: f64,
    /// Frames per snippet. Metadata only.
    pub frame_interval: u32,
}

impl FeatureSequence {
    /// Builds a sequence with placeholder timing (one second per snippet).
    pub fn new(
        video_id: impl Into<String>,
        channels: usize,
        length: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if channels == 0 || length == 0 {
            return Err(BmnError::Data(format!(
                "feature sequence needs positive C and T, got C={channels}, T={length}"
            )));
        }
        if data.len() != channels * length {
            return Err(BmnError::Shape(format!(
                "{} values for C={channels}, T={length}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(BmnError::Data(format!(
                "non-finite feature at channel {}, snippet {}",
                pos / length,
                pos % length
            )));
        }
        Ok(FeatureSequence {
            video_id: video_id.into(),
            channels,
            length,
            data,
            duration_seconds: length as f64,
            frame_interval: 1,
        })
    }

    pub fn with_duration(mut self, seconds: f64) -> Result<Self> {
        if !(seconds > 0.0) || !seconds.is_finite() {
            return Err(BmnError::Data(format!(
                "video {} has non-positive duration {seconds}",
                self.video_id
            )));
        }
        self.duration_seconds = seconds;
        Ok(self)
    }

    pub fn with_frame_interval(mut self, frames: u32) -> Self {
        self.frame_interval = frames.max(1);
        self
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.length..(c + 1) * self.length]
    }
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| BmnError::io(path, e))?;
    let format = |msg: &str| BmnError::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
        return Err(format("missing BMNF magic"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(BmnError::Truncation {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    if word(4) != FEATURE_VERSION {
        return Err(format(&format!("unsupported version {}", word(4))));
    }
    let (channels, length) = (word(8) as usize, word(12) as usize);
    if channels == 0 || length == 0 {
        return Err(format("C and T must be positive"));
    }
    let payload = &bytes[HEADER_LEN..];
    let expected = channels * length * 4;
    if payload.len() != expected {
        return Err(BmnError::Truncation {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let video_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    FeatureSequence::new(video_id, channels, length, data)
}

pub fn save_features(path: impl AsRef<Path>, f: &FeatureSequence) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(HEADER_LEN + f.data.len() * 4);
    bytes.extend_from_slice(FEATURE_MAGIC);
    bytes.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(f.channels as u32).to_le_bytes());
    bytes.extend_from_slice(&(f.length as u32).to_le_bytes());
    for v in &f.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| BmnError::io(path, e))
}

/// Ground-truth instances of one video, in seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoAnnotation {
    pub duration_seconds: f64,
    pub instances: Vec<Interval>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnnotationSet {
    videos: BTreeMap<String, VideoAnnotation>,
}

#[derive(Serialize, Deserialize)]
struct RawVideo {
    duration_second: f64,
    #[serde(default)]
    annotations: Vec<RawSegment>,
}

#[derive(Serialize, Deserialize)]
struct RawSegment {
    segment: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

impl AnnotationSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, video_id: impl Into<String>, video: VideoAnnotation) -> Result<()> {
        let video_id = video_id.into();
        validate_video(&video_id, &video)?;
        self.videos.insert(video_id, video);
        Ok(())
    }

    pub fn get(&self, video_id: &str) -> Result<&VideoAnnotation> {
        self.videos
            .get(video_id)
            .ok_or_else(|| BmnError::Lookup(video_id.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &VideoAnnotation)> {
        self.videos.iter()
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let raw: BTreeMap<String, RawVideo> =
            serde_json::from_str(text).map_err(|e| BmnError::json(origin, e))?;
        let mut set = AnnotationSet::new();
        for (id, video) in raw {
            let instances = video
                .annotations
                .iter()
                .map(|s| Interval::new(s.segment[0], s.segment[1]))
                .collect();
            set.insert(
                id,
                VideoAnnotation {
                    duration_seconds: video.duration_second,
                    instances,
                },
            )?;
        }
        Ok(set)
    }

    pub fn to_json(&self) -> String {
        let raw: BTreeMap<&String, RawVideo> = self
            .videos
            .iter()
            .map(|(id, v)| {
                let annotations = v
                    .instances
                    .iter()
                    .map(|i| RawSegment {
                        segment: [i.start, i.end],
                        label: Some("action".into()),
                    })
                    .collect();
                (
                    id,
                    RawVideo {
                        duration_second: v.duration_seconds,
                        annotations,
                    },
                )
            })
            .collect();
        serde_json::to_string_pretty(&raw).expect("annotation set serializes")
    }
}

fn validate_video(id: &str, video: &VideoAnnotation) -> Result<()> {
    if !(video.duration_seconds >= 0.0) {
        return Err(BmnError::Validation(format!(
            "video {id}: negative duration {}",
            video.duration_seconds
        )));
    }
    for seg in &video.instances {
        if !(seg.start < seg.end) {
            return Err(BmnError::Validation(format!(
                "video {id}: segment [{}, {}] does not satisfy start < end",
                seg.start, seg.end
            )));
        }
        if seg.start < 0.0 || seg.end > video.duration_seconds {
            return Err(BmnError::Validation(format!(
                "video {id}: segment [{}, {}] outside [0, {}]",
                seg.start, seg.end, video.duration_seconds
            )));
        }
    }
    Ok(())
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<AnnotationSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| BmnError::io(path, e))?;
    AnnotationSet::from_json(&text, path)
}

pub fn save_annotations(path: impl AsRef<Path>, set: &AnnotationSet) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, set.to_json()).map_err(|e| BmnError::io(path, e))
}

/// A fixed-length slice `[start, end)` of a feature sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub video_id: String,
    pub start: usize,
    pub end: usize,
    pub channels: usize,
    /// `channels × (end - start)`, channel-major. Zero-padded past the end of
    /// sequences shorter than the window.
    pub features: Vec<f32>,
    /// Instances in window-local snippet units, clipped to `[0, len]`.
    pub instances: Vec<Interval>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Slides windows of `window_len` snippets with 50% overlap over `f`.
///
/// `instances` are in seconds and are mapped to snippets with
/// `seconds_per_snippet`. A partially covered instance survives clipping
/// only if at least half of it lies inside the window. With `training`, only
/// windows holding at least one surviving instance are returned.
pub fn make_windows(
    f: &FeatureSequence,
    instances: &[Interval],
    window_len: usize,
    training: bool,
    seconds_per_snippet: f64,
) -> Result<Vec<Window>> {
    if window_len < 2 {
        return Err(BmnError::Parameter(format!(
            "window length must be ≥ 2, got {window_len}"
        )));
    }
    if !(seconds_per_snippet > 0.0) {
        return Err(BmnError::Parameter(format!(
            "seconds per snippet must be positive, got {seconds_per_snippet}"
        )));
    }
    let snippets: Vec<Interval> = instances
        .iter()
        .map(|i| {
            Interval::new(
                i.start / seconds_per_snippet,
                i.end / seconds_per_snippet,
            )
        })
        .collect();

    let mut windows = Vec::new();
    for start in window_starts(f.length, window_len) {
        let end = start + window_len;
        let local = clip_instances(&snippets, start as f64, end as f64);
        if training && local.is_empty() {
            continue;
        }
        let mut features = vec![0.0f32; f.channels * window_len];
        let avail = f.length.min(end) - start;
        for c in 0..f.channels {
            features[c * window_len..c * window_len + avail]
                .copy_from_slice(&f.channel(c)[start..start + avail]);
        }
        windows.push(Window {
            video_id: f.video_id.clone(),
            start,
            end,
            channels: f.channels,
            features,
            instances: local,
        });
    }
    Ok(windows)
}

fn window_starts(length: usize, window_len: usize) -> Vec<usize> {
    if length <= window_len {
        return vec![0];
    }
    let stride = (window_len / 2).max(1);
    let mut starts = Vec::new();
    let mut s = 0;
    while s + window_len < length {
        starts.push(s);
        s += stride;
    }
    let last = length - window_len;
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    starts
}

fn clip_instances(instances: &[Interval], start: f64, end: f64) -> Vec<Interval> {
    instances
        .iter()
        .filter_map(|i| {
            let lo = i.start.max(start);
            let hi = i.end.min(end);
            let kept = hi - lo;
            (kept > 0.0 && kept >= 0.5 * i.len()).then(|| Interval::new(lo - start, hi - start))
        })
        .collect()
}

/// Per-channel linear interpolation onto `target_len` evenly spaced points
/// spanning `[0, T-1]`.
pub fn rescale_features(f: &FeatureSequence, target_len: usize) -> Result<FeatureSequence> {
    if f.length == 0 || f.data.is_empty() {
        return Err(BmnError::EmptyInput("cannot rescale an empty sequence".into()));
    }
    if target_len < 2 {
        return Err(BmnError::Parameter(format!(
            "rescale target must be ≥ 2, got {target_len}"
        )));
    }
    let span = (f.length - 1) as f64;
    let taps: Vec<(usize, f64)> = (0..target_len)
        .map(|k| {
            let pos = k as f64 * span / (target_len - 1) as f64;
            let lo = (pos.floor() as usize).min(f.length - 1);
            (lo, pos - lo as f64)
        })
        .collect();
    let mut data = Vec::with_capacity(f.channels * target_len);
    for c in 0..f.channels {
        let row = f.channel(c);
        data.extend(taps.iter().map(|&(lo, frac)| {
            if frac == 0.0 {
                row[lo]
            } else {
                ((1.0 - frac) * row[lo] as f64 + frac * row[lo + 1] as f64) as f32
            }
        }));
    }
    Ok(FeatureSequence {
        video_id: f.video_id.clone(),
        channels: f.channels,
        length: target_len,
        data,
        duration_seconds: f.duration_seconds,
        frame_interval: f.frame_interval,
    })
}

/// How window snippet indices relate to seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeMode {
    /// Whole video rescaled to one window: index `t` ↦ `t / l_ω · duration`.
    Rescale,
    /// Sliding windows over native snippets: index `t` ↦ `(t + t_ω,s)·σ / fps`.
    Windowed {
        #[serde(default)]
        fps: Option<f64>,
    },
}

/// Seconds covered by one snippet of `f` under `mode`.
pub fn seconds_per_snippet(f: &FeatureSequence, mode: &TimeMode) -> Result<f64> {
    match *mode {
        TimeMode::Rescale => Ok(f.duration_seconds / f.length as f64),
        TimeMode::Windowed { fps: Some(fps) } if fps > 0.0 => {
            Ok(f.frame_interval as f64 / fps)
        }
        TimeMode::Windowed { .. } => Err(BmnError::Config(
            "windowed mode requires a positive fps".into(),
        )),
    }
}

/// Maps a proposal from window snippet indices to seconds.
pub fn to_seconds(
    p: &Proposal,
    w: &Window,
    f: &FeatureSequence,
    mode: &TimeMode,
) -> Result<Proposal> {
    let map = |t: f64| -> Result<f64> {
        Ok(match mode {
            TimeMode::Rescale => t / w.len() as f64 * f.duration_seconds,
            TimeMode::Windowed { .. } => (t + w.start as f64) * seconds_per_snippet(f, mode)?,
        })
    };
    Ok(Proposal {
        t_start: map(p.t_start)?,
        t_end: map(p.t_end)?,
        ..*p
    })
}

/// Inverse of [`to_seconds`] for a single time.
pub fn seconds_to_window(
    seconds: f64,
    w: &Window,
    f: &FeatureSequence,
    mode: &TimeMode,
) -> Result<f64> {
    Ok(match mode {
        TimeMode::Rescale => seconds / f.duration_seconds * w.len() as f64,
        TimeMode::Windowed { .. } => seconds / seconds_per_snippet(f, mode)? - w.start as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn seq(c: usize, t: usize, data: Vec<f32>) -> FeatureSequence {
        FeatureSequence::new("v", c, t, data).unwrap()
    }

    fn write_raw(path: &Path, c: u32, t: u32, payload: &[f32]) {
        let mut b = Vec::new();
        b.extend_from_slice(b"BMNF");
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&c.to_le_bytes());
        b.extend_from_slice(&t.to_le_bytes());
        for v in payload {
            b.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, b).unwrap();
    }

    #[test]
    fn load_features_reads_channel_major() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("clip.bmnf");
        write_raw(&p, 2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let f = load_features(&p).unwrap();
        assert_eq!(f.video_id, "clip");
        assert_eq!(f.channel(0), &[1.0, 2.0, 3.0]);
        assert_eq!(f.channel(1), &[4.0, 5.0, 6.0]);

        write_raw(&p, 1, 1, &[0.5]);
        assert_eq!(load_features(&p).unwrap().data, vec![0.5]);
    }

    #[test]
    fn load_features_errors() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.bmnf");
        write_raw(&p, 2, 3, &[1.0; 5]);
        assert!(matches!(
            load_features(&p),
            Err(BmnError::Truncation { expected: 24, found: 20, .. })
        ));

        fs::write(&p, b"NOPE\x01\0\0\0").unwrap();
        assert!(matches!(load_features(&p), Err(BmnError::Format { .. })));

        write_raw(&p, 1, 2, &[1.0, f32::NAN]);
        assert!(matches!(load_features(&p), Err(BmnError::Data(_))));
    }

    #[test]
    fn feature_file_roundtrip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("x.bmnf");
        let f = FeatureSequence::new("x", 3, 4, (0..12).map(|v| v as f32 * 0.25).collect()).unwrap();
        save_features(&p, &f).unwrap();
        assert_eq!(load_features(&p).unwrap(), f);
    }

    #[test]
    fn annotation_schema() {
        let origin = Path::new("inline");
        let set = AnnotationSet::from_json(
            r#"{"v1": {"duration_second": 10, "annotations":[{"segment":[2,5], "label": "jump"}]},
                "v2": {"duration_second": 4, "annotations": []}}"#,
            origin,
        )
        .unwrap();
        assert_eq!(set.get("v1").unwrap().instances, vec![Interval::new(2.0, 5.0)]);
        assert!(set.get("v2").unwrap().instances.is_empty());
        assert!(matches!(set.get("v3"), Err(BmnError::Lookup(_))));

        let bad = AnnotationSet::from_json(
            r#"{"v1": {"duration_second": 10, "annotations":[{"segment":[5,2]}]}}"#,
            origin,
        );
        assert!(matches!(bad, Err(BmnError::Validation(_))));

        let reparsed = AnnotationSet::from_json(&set.to_json(), origin).unwrap();
        assert_eq!(reparsed, set);
    }

    #[test]
    fn window_starts_examples() {
        let f = seq(1, 256, vec![0.0; 256]);
        let w = make_windows(&f, &[], 128, false, 1.0).unwrap();
        assert_eq!(w.iter().map(|w| w.start).collect::<Vec<_>>(), vec![0, 64, 128]);

        let f = seq(1, 128, vec![0.0; 128]);
        let w = make_windows(&f, &[], 128, false, 1.0).unwrap();
        assert_eq!((w.len(), w[0].start, w[0].end), (1, 0, 128));
        assert_eq!(window_starts(200, 128), vec![0, 64, 72]);
    }

    #[test]
    fn training_windows_need_an_instance() {
        let f = seq(1, 200, (0..200).map(|v| v as f32).collect());
        let w = make_windows(&f, &[Interval::new(10.0, 20.0)], 128, true, 1.0).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].start, 0);
        assert_eq!(w[0].instances, vec![Interval::new(10.0, 20.0)]);

        // short video, no instances: nothing to train on
        let f = seq(1, 50, vec![0.0; 50]);
        assert!(make_windows(&f, &[], 128, true, 1.0).unwrap().is_empty());
        assert!(matches!(
            make_windows(&f, &[], 1, false, 1.0),
            Err(BmnError::Parameter(_))
        ));
    }

    #[test]
    fn clipping_keeps_majority_overlap_only() {
        let f = seq(1, 256, vec![0.0; 256]);
        // [120, 140]: 8/20 in window 0, all of it in window 64 and 12/20 in window 128
        let w = make_windows(&f, &[Interval::new(120.0, 140.0)], 128, true, 1.0).unwrap();
        let starts: Vec<_> = w.iter().map(|w| w.start).collect();
        assert_eq!(starts, vec![64, 128]);
        assert_eq!(w[0].instances, vec![Interval::new(56.0, 76.0)]);
        assert_eq!(w[1].instances, vec![Interval::new(0.0, 12.0)]);
    }

    #[test]
    fn rescale_examples() {
        let r = rescale_features(&seq(1, 2, vec![0.0, 10.0]), 3).unwrap();
        assert_eq!(r.data, vec![0.0, 5.0, 10.0]);
        let r = rescale_features(&seq(1, 3, vec![1.0, 2.0, 4.0]), 5).unwrap();
        assert_eq!(r.data, vec![1.0, 1.5, 2.0, 3.0, 4.0]);
        let f = seq(2, 4, vec![0.3, -1.0, 7.0, 2.5, 1.0, 1.5, 1.25, 9.0]);
        assert_eq!(rescale_features(&f, 4).unwrap().data, f.data);
    }

    #[test]
    fn to_seconds_examples() {
        let f = seq(1, 100, vec![0.0; 100]).with_duration(200.0).unwrap();
        let w = &make_windows(&f, &[], 100, false, 2.0).unwrap()[0];
        let p = Proposal::new(25.0, 50.0, 1.0, 1.0, 1.0, 1.0);
        let s = to_seconds(&p, w, &f, &TimeMode::Rescale).unwrap();
        assert_eq!((s.t_start, s.t_end), (50.0, 100.0));
        let s = to_seconds(&Proposal::new(0.0, 100.0, 1.0, 1.0, 1.0, 1.0), w, &f, &TimeMode::Rescale)
            .unwrap();
        assert_eq!((s.t_start, s.t_end), (0.0, 200.0));

        let f = seq(1, 256, vec![0.0; 256]).with_frame_interval(5);
        let w = make_windows(&f, &[], 128, false, 0.2).unwrap().remove(1);
        assert_eq!(w.start, 64);
        let mode = TimeMode::Windowed { fps: Some(25.0) };
        let s = to_seconds(&Proposal::new(10.0, 11.0, 1.0, 1.0, 1.0, 1.0), &w, &f, &mode).unwrap();
        assert!((s.t_start - 14.8).abs() < 1e-12);
        assert!(matches!(
            to_seconds(&p, &w, &f, &TimeMode::Windowed { fps: None }),
            Err(BmnError::Config(_))
        ));
    }

    proptest! {
        #[test]
        fn seconds_roundtrip(t in 0.0f64..127.0, start in 0usize..5, rescale in any::<bool>()) {
            let f = seq(1, 640, vec![0.0; 640]).with_duration(321.0).unwrap().with_frame_interval(5);
            let mode = if rescale { TimeMode::Rescale } else { TimeMode::Windowed { fps: Some(30.0) } };
            let w = make_windows(&f, &[], 128, false, 1.0).unwrap().remove(start);
            let p = Proposal::new(t, t + 0.5, 0.5, 0.5, 0.5, 0.5);
            let s = to_seconds(&p, &w, &f, &mode).unwrap();
            let back = seconds_to_window(s.t_start, &w, &f, &mode).unwrap();
            prop_assert!((back - t).abs() <= 1e-6 * t.abs().max(1.0));
        }

        #[test]
        fn windows_cover_every_snippet(len in 2usize..400, wl in 2usize..130) {
            let f = seq(1, len, vec![0.0; len]);
            let w = make_windows(&f, &[], wl, false, 1.0).unwrap();
            for t in 0..len {
                prop_assert!(w.iter().any(|w| w.start <= t && t < w.end));
            }
            prop_assert!(w.iter().all(|w| w.len() == wl));
        }

        #[test]
        fn rescale_is_convex(data in prop::collection::vec(-100.0f32..100.0, 1..40), target in 2usize..90) {
            let f = seq(1, data.len(), data.clone());
            let r = rescale_features(&f, target).unwrap();
            let lo = data.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(r.data.iter().all(|&v| v >= lo && v <= hi));
        }
    }
}

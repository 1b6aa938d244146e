//! Hierarchical video sample schema, manifest loading and synthetic data.
//!
//! A dataset lives in a directory with one `manifest.json` naming every video,
//! its feature file, its per-video metadata file and its split. Frame and
//! subtitle features are stored in the binary container from [`crate::binio`];
//! labels, replay scores and subtitle timing live in the per-video JSON.

use crate::binio;
use crate::error::{HsumError, Result};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::{Path, PathBuf};

/// Default replay-score threshold above which a frame counts as important.
pub const DEFAULT_REPLAY_THRESHOLD: f32 = 0.15;

/// One subtitle with its pre-extracted text feature and frame span.
#[derive(Debug, Clone)]
pub struct SubtitleSegment {
    /// Text feature of the subtitle sentence, length `d_t`.
    pub text_feature: Array1<f32>,
    /// First frame covered by the subtitle.
    pub start_frame: usize,
    /// One past the last frame covered (exclusive).
    pub end_frame: usize,
    /// Raw sentence, kept when available so text summaries can be scored.
    pub text: Option<String>,
}

/// One video's features, subtitles and supervision signals.
#[derive(Debug, Clone)]
pub struct VideoSample {
    pub video_id: String,
    /// `N x d_v` frame features, one row per frame at one frame per second.
    pub frame_features: Array2<f32>,
    pub subtitles: Vec<SubtitleSegment>,
    /// Feature of the video-level description, length `d_t`.
    pub global_feature: Option<Array1<f32>>,
    /// Binary keyframe ground truth, length `N`.
    pub frame_labels: Option<Vec<u8>>,
    /// Binary key-sentence ground truth, length `M`.
    pub sentence_labels: Option<Vec<u8>>,
    /// Replay-derived relevance scores in `[0, 1]`, length `N`.
    pub replay_scores: Option<Vec<f32>>,
    /// Externally supplied shot boundaries (segment start indices), if any.
    pub shot_boundaries: Option<Vec<usize>>,
}

impl VideoSample {
    pub fn n_frames(&self) -> usize {
        self.frame_features.nrows()
    }

    pub fn n_subtitles(&self) -> usize {
        self.subtitles.len()
    }

    /// Check every schema invariant; `d_v`/`d_t` are the expected feature dims.
    pub fn validate(&self, d_v: usize, d_t: usize) -> Result<()> {
        let n = self.n_frames();
        if n == 0 {
            return Err(HsumError::Invariant(format!(
                "{}: video has no frames",
                self.video_id
            )));
        }
        if self.frame_features.ncols() != d_v {
            return Err(HsumError::DimensionMismatch {
                what: format!("{} frame features", self.video_id),
                expected: d_v,
                got: self.frame_features.ncols(),
            });
        }
        for (j, sub) in self.subtitles.iter().enumerate() {
            if sub.text_feature.len() != d_t {
                return Err(HsumError::DimensionMismatch {
                    what: format!("{} subtitle {j} feature", self.video_id),
                    expected: d_t,
                    got: sub.text_feature.len(),
                });
            }
            if sub.start_frame >= sub.end_frame || sub.end_frame > n {
                return Err(HsumError::Invariant(format!(
                    "{}: subtitle {j} span [{}, {}) invalid for {n} frames",
                    self.video_id, sub.start_frame, sub.end_frame
                )));
            }
        }
        if let Some(g) = &self.global_feature {
            if g.len() != d_t {
                return Err(HsumError::DimensionMismatch {
                    what: format!("{} global feature", self.video_id),
                    expected: d_t,
                    got: g.len(),
                });
            }
        }
        if let Some(labels) = &self.frame_labels {
            if labels.len() != n {
                return Err(HsumError::DimensionMismatch {
                    what: format!("{} frame labels", self.video_id),
                    expected: n,
                    got: labels.len(),
                });
            }
            if labels.iter().any(|&v| v > 1) {
                return Err(HsumError::Invariant(format!(
                    "{}: frame labels must be 0 or 1",
                    self.video_id
                )));
            }
        }
        if let Some(labels) = &self.sentence_labels {
            if labels.len() != self.subtitles.len() {
                return Err(HsumError::DimensionMismatch {
                    what: format!("{} sentence labels", self.video_id),
                    expected: self.subtitles.len(),
                    got: labels.len(),
                });
            }
            if labels.iter().any(|&v| v > 1) {
                return Err(HsumError::Invariant(format!(
                    "{}: sentence labels must be 0 or 1",
                    self.video_id
                )));
            }
        }
        if let Some(scores) = &self.replay_scores {
            if scores.len() != n {
                return Err(HsumError::DimensionMismatch {
                    what: format!("{} replay scores", self.video_id),
                    expected: n,
                    got: scores.len(),
                });
            }
            if let Some(bad) = scores.iter().find(|&&s| !(0.0..=1.0).contains(&s)) {
                return Err(HsumError::Range(format!(
                    "{}: replay score {bad} outside [0, 1]",
                    self.video_id
                )));
            }
        }
        if let Some(bounds) = &self.shot_boundaries {
            crate::segmentation::ShotBoundaries::new(bounds.clone(), n)?;
        }
        Ok(())
    }

    /// Frame classification targets: explicit labels when present, otherwise
    /// derived from replay scores at the default threshold.
    pub fn frame_targets(&self) -> Result<Vec<u8>> {
        if let Some(labels) = &self.frame_labels {
            return Ok(labels.clone());
        }
        if let Some(scores) = &self.replay_scores {
            return replay_to_labels(scores, DEFAULT_REPLAY_THRESHOLD);
        }
        Err(HsumError::Invariant(format!(
            "{}: neither frame labels nor replay scores present",
            self.video_id
        )))
    }
}

/// Threshold replay scores into binary importance labels.
///
/// `out[i] = 1` iff `scores[i] >= threshold`.
pub fn replay_to_labels(scores: &[f32], threshold: f32) -> Result<Vec<u8>> {
    for (i, &s) in scores.iter().enumerate() {
        if !(0.0..=1.0).contains(&s) {
            return Err(HsumError::Range(format!(
                "replay score {s} at index {i} outside [0, 1]"
            )));
        }
    }
    Ok(scores
        .iter()
        .map(|&s| u8::from(s >= threshold))
        .collect())
}

/// Train/val/test split membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub video_id: String,
    /// Frame feature file, relative to the manifest directory.
    pub features: PathBuf,
    /// Per-video metadata JSON, relative to the manifest directory.
    pub meta: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    format_version: u32,
    d_v: usize,
    d_t: usize,
    entries: Vec<ManifestEntry>,
}

/// A validated dataset manifest with its root directory.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub d_v: usize,
    pub d_t: usize,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn entry(&self, video_id: &str) -> Result<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.video_id == video_id)
            .ok_or_else(|| HsumError::UnknownVideoId(video_id.to_string()))
    }

    /// Video ids belonging to one split, in manifest order.
    pub fn split_ids(&self, split: Split) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.video_id.clone())
            .collect()
    }
}

/// Per-video metadata document stored next to the feature files.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct VideoMeta {
    /// Subtitle feature file (`M x d_t`), relative to the manifest directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    subtitle_features: Option<PathBuf>,
    /// Global description feature file (`1 x d_t`), relative to the manifest directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    global_feature: Option<PathBuf>,
    #[serde(default)]
    subtitles: Vec<SubtitleMeta>,
    #[serde(skip_serializing_if = "Option::is_none")]
    frame_labels: Option<Vec<u8>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sentence_labels: Option<Vec<u8>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    replay_scores: Option<Vec<f32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    shot_boundaries: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubtitleMeta {
    start_frame: usize,
    end_frame: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| HsumError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| HsumError::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializing to JSON cannot fail");
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| HsumError::io(path, e))
}

/// Load and validate a dataset manifest.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.is_file() {
        return Err(HsumError::MissingFile(path.to_path_buf()));
    }
    let file: ManifestFile = read_json(path)?;
    if file.format_version != 1 {
        return Err(HsumError::ManifestSchema(format!(
            "unsupported format_version {}",
            file.format_version
        )));
    }
    if file.d_v == 0 || file.d_t == 0 {
        return Err(HsumError::ManifestSchema(
            "feature dimensions must be at least 1".into(),
        ));
    }
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut seen = HashSet::new();
    for entry in &file.entries {
        if !seen.insert(entry.video_id.clone()) {
            return Err(HsumError::DuplicateVideoId(entry.video_id.clone()));
        }
        for rel in [&entry.features, &entry.meta] {
            let p = root.join(rel);
            if !p.is_file() {
                return Err(HsumError::MissingFile(p));
            }
        }
    }
    Ok(DatasetManifest {
        root,
        d_v: file.d_v,
        d_t: file.d_t,
        entries: file.entries,
    })
}

/// Write `manifest.json` for the given entries. Returns the manifest path.
pub fn write_manifest(
    dir: &Path,
    d_v: usize,
    d_t: usize,
    entries: Vec<ManifestEntry>,
) -> Result<PathBuf> {
    let file = ManifestFile {
        format_version: 1,
        d_v,
        d_t,
        entries,
    };
    let path = dir.join("manifest.json");
    write_json(&path, &file)?;
    Ok(path)
}

/// Load one fully validated sample by id.
pub fn load_sample(manifest: &DatasetManifest, video_id: &str) -> Result<VideoSample> {
    let entry = manifest.entry(video_id)?;
    let features = binio::read_f32(&manifest.root.join(&entry.features))?;
    let meta: VideoMeta = read_json(&manifest.root.join(&entry.meta))?;

    let subtitle_features = match &meta.subtitle_features {
        Some(rel) => Some(binio::read_f32(&manifest.root.join(rel))?),
        None => None,
    };
    if let Some(sf) = &subtitle_features {
        if sf.nrows() != meta.subtitles.len() {
            return Err(HsumError::DimensionMismatch {
                what: format!("{video_id} subtitle feature rows"),
                expected: meta.subtitles.len(),
                got: sf.nrows(),
            });
        }
    } else if !meta.subtitles.is_empty() {
        return Err(HsumError::ManifestSchema(format!(
            "{video_id}: subtitles listed but no subtitle feature file"
        )));
    }

    let subtitles = meta
        .subtitles
        .iter()
        .enumerate()
        .map(|(j, s)| SubtitleSegment {
            text_feature: subtitle_features
                .as_ref()
                .expect("checked above")
                .row(j)
                .to_owned(),
            start_frame: s.start_frame,
            end_frame: s.end_frame,
            text: s.text.clone(),
        })
        .collect();

    let global_feature = match &meta.global_feature {
        Some(rel) => {
            let arr = binio::read_f32(&manifest.root.join(rel))?;
            if arr.nrows() != 1 {
                return Err(HsumError::DimensionMismatch {
                    what: format!("{video_id} global feature rows"),
                    expected: 1,
                    got: arr.nrows(),
                });
            }
            Some(arr.row(0).to_owned())
        }
        None => None,
    };

    let sample = VideoSample {
        video_id: video_id.to_string(),
        frame_features: features,
        subtitles,
        global_feature,
        frame_labels: meta.frame_labels,
        sentence_labels: meta.sentence_labels,
        replay_scores: meta.replay_scores,
        shot_boundaries: meta.shot_boundaries,
    };
    sample.validate(manifest.d_v, manifest.d_t)?;
    Ok(sample)
}

/// Write one sample's feature and metadata files under `dir`. Returns the
/// manifest entry describing them (paths relative to `dir`).
pub fn write_sample(dir: &Path, sample: &VideoSample, split: Split) -> Result<ManifestEntry> {
    let id = &sample.video_id;
    let videos = dir.join("videos");
    std::fs::create_dir_all(&videos).map_err(|e| HsumError::io(&videos, e))?;

    let features_rel = PathBuf::from("videos").join(format!("{id}.frames.hsum"));
    binio::write_f32(&dir.join(&features_rel), &sample.frame_features)?;

    let mut meta = VideoMeta {
        subtitles: sample
            .subtitles
            .iter()
            .map(|s| SubtitleMeta {
                start_frame: s.start_frame,
                end_frame: s.end_frame,
                text: s.text.clone(),
            })
            .collect(),
        frame_labels: sample.frame_labels.clone(),
        sentence_labels: sample.sentence_labels.clone(),
        replay_scores: sample.replay_scores.clone(),
        shot_boundaries: sample.shot_boundaries.clone(),
        ..VideoMeta::default()
    };

    if !sample.subtitles.is_empty() {
        let d_t = sample.subtitles[0].text_feature.len();
        let mut subs = Array2::<f32>::zeros((sample.subtitles.len(), d_t));
        for (j, s) in sample.subtitles.iter().enumerate() {
            subs.row_mut(j).assign(&s.text_feature);
        }
        let rel = PathBuf::from("videos").join(format!("{id}.subs.hsum"));
        binio::write_f32(&dir.join(&rel), &subs)?;
        meta.subtitle_features = Some(rel);
    }
    if let Some(g) = &sample.global_feature {
        let arr = g.clone().insert_axis(ndarray::Axis(0));
        let rel = PathBuf::from("videos").join(format!("{id}.global.hsum"));
        binio::write_f32(&dir.join(&rel), &arr)?;
        meta.global_feature = Some(rel);
    }

    let meta_rel = PathBuf::from("videos").join(format!("{id}.json"));
    write_json(&dir.join(&meta_rel), &meta)?;

    Ok(ManifestEntry {
        video_id: id.clone(),
        features: features_rel,
        meta: meta_rel,
        split,
    })
}

/// Shared step-archetype library: steps are drawn from a fixed pool whose
/// first `n_important` members are the globally important ones.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthLibrary {
    pub n_archetypes: usize,
    pub n_important: usize,
}

/// Parameters of the synthetic instructional-video generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_videos: usize,
    pub steps_per_video: usize,
    pub frames_per_step: usize,
    pub d_v: usize,
    pub d_t: usize,
    /// How many steps per video carry importance labels.
    #[serde(default = "default_important_per_video")]
    pub important_per_video: usize,
    /// Standard deviation of per-frame feature noise.
    #[serde(default = "default_frame_noise")]
    pub frame_noise: f64,
    /// Standard deviation of subtitle feature noise.
    #[serde(default = "default_text_noise")]
    pub text_noise: f64,
    /// Draw step latents from a shared archetype library instead of fresh
    /// per-video vectors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub library: Option<SynthLibrary>,
    /// Videos assigned to the validation split (taken from the end).
    #[serde(default)]
    pub n_val: usize,
    /// Videos assigned to the test split (taken after the validation block).
    #[serde(default)]
    pub n_test: usize,
}

fn default_important_per_video() -> usize {
    2
}
fn default_frame_noise() -> f64 {
    0.05
}
fn default_text_noise() -> f64 {
    0.05
}

impl SynthConfig {
    pub fn new(seed: u64, n_videos: usize) -> Self {
        SynthConfig {
            seed,
            n_videos,
            steps_per_video: 4,
            frames_per_step: 5,
            d_v: 32,
            d_t: 24,
            important_per_video: default_important_per_video(),
            frame_noise: default_frame_noise(),
            text_noise: default_text_noise(),
            library: None,
            n_val: 0,
            n_test: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_videos", self.n_videos),
            ("steps_per_video", self.steps_per_video),
            ("frames_per_step", self.frames_per_step),
            ("d_v", self.d_v),
            ("d_t", self.d_t),
        ] {
            if v == 0 {
                return Err(HsumError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.important_per_video > self.steps_per_video {
            return Err(HsumError::Config(
                "important_per_video cannot exceed steps_per_video".into(),
            ));
        }
        if self.n_val + self.n_test > self.n_videos {
            return Err(HsumError::Config(
                "n_val + n_test cannot exceed n_videos".into(),
            ));
        }
        if let Some(lib) = &self.library {
            if lib.n_important > lib.n_archetypes {
                return Err(HsumError::Config(
                    "library n_important cannot exceed n_archetypes".into(),
                ));
            }
            if lib.n_archetypes > self.d_v {
                return Err(HsumError::Config(
                    "library n_archetypes cannot exceed d_v".into(),
                ));
            }
            if lib.n_important < self.important_per_video
                || lib.n_archetypes - lib.n_important
                    < self.steps_per_video - self.important_per_video
            {
                return Err(HsumError::Config(
                    "library pools too small for the per-video step mix".into(),
                ));
            }
        } else if self.steps_per_video > self.d_v {
            return Err(HsumError::Config(
                "steps_per_video cannot exceed d_v without a library".into(),
            ));
        }
        Ok(())
    }
}

/// Orthonormal random rows via Gram-Schmidt on Gaussian draws. `rows <= cols`.
fn orthonormal_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut out = Array2::<f64>::zeros((rows, cols));
    for i in 0..rows {
        loop {
            let mut v: Array1<f64> = Array1::from_iter((0..cols).map(|_| normal.sample(rng)));
            for j in 0..i {
                let proj = v.dot(&out.row(j));
                v = &v - &(&out.row(j) * proj);
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-6 {
                out.row_mut(i).assign(&(&v / norm));
                break;
            }
        }
    }
    out
}

const SYNTH_VERBS: &[&str] = &[
    "whisk", "season", "fold", "trim", "preheat", "measure", "slice", "rinse",
];
const SYNTH_NOUNS: &[&str] = &[
    "batter", "fillet", "dough", "edges", "oven", "mixture", "board", "pan",
];

/// Generate a deterministic synthetic dataset under `out_dir` and return its
/// validated manifest.
///
/// Each video is a sequence of steps; frames repeat the step latent plus
/// noise, each step emits one subtitle mapped from the latent, and the global
/// feature is the mapped mean of the important-step latents.
pub fn synth_generate(config: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| HsumError::io(out_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let text_map = orthonormal_rows(&mut rng, config.d_t.min(config.d_v), config.d_v);

    let library = config
        .library
        .as_ref()
        .map(|lib| orthonormal_rows(&mut rng, lib.n_archetypes, config.d_v));

    let mut entries = Vec::with_capacity(config.n_videos);
    let n_train = config.n_videos - config.n_val - config.n_test;
    for vi in 0..config.n_videos {
        let split = if vi < n_train {
            Split::Train
        } else if vi < n_train + config.n_val {
            Split::Val
        } else {
            Split::Test
        };
        let sample = synth_video(config, &mut rng, &normal, &text_map, library.as_ref(), vi)?;
        entries.push(write_sample(out_dir, &sample, split)?);
    }

    write_manifest(out_dir, config.d_v, config.d_t, entries)?;
    load_manifest(&out_dir.join("manifest.json"))
}

fn map_to_text_space(text_map: &Array2<f64>, latent: &Array1<f64>, d_t: usize) -> Array1<f64> {
    let mapped = text_map.dot(latent);
    if mapped.len() == d_t {
        mapped
    } else {
        // d_t > d_v: zero-pad the mapped coordinates.
        let mut out = Array1::<f64>::zeros(d_t);
        out.slice_mut(ndarray::s![..mapped.len()]).assign(&mapped);
        out
    }
}

fn synth_video(
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
    normal: &Normal<f64>,
    text_map: &Array2<f64>,
    library: Option<&Array2<f64>>,
    index: usize,
) -> Result<VideoSample> {
    let k = config.steps_per_video;
    let n = k * config.frames_per_step;

    // Which steps matter, and the latent vector for each step.
    let (latents, important): (Array2<f64>, Vec<bool>) = match (library, &config.library) {
        (Some(lib), Some(spec)) => {
            let mut imp_pool: Vec<usize> = (0..spec.n_important).collect();
            let mut other_pool: Vec<usize> = (spec.n_important..spec.n_archetypes).collect();
            imp_pool.shuffle(rng);
            other_pool.shuffle(rng);
            let mut chosen: Vec<(usize, bool)> = imp_pool
                .into_iter()
                .take(config.important_per_video)
                .map(|a| (a, true))
                .chain(
                    other_pool
                        .into_iter()
                        .take(k - config.important_per_video)
                        .map(|a| (a, false)),
                )
                .collect();
            chosen.shuffle(rng);
            let mut lat = Array2::<f64>::zeros((k, config.d_v));
            let mut imp = Vec::with_capacity(k);
            for (step, (arch, is_imp)) in chosen.into_iter().enumerate() {
                lat.row_mut(step).assign(&lib.row(arch));
                imp.push(is_imp);
            }
            (lat, imp)
        }
        _ => {
            let lat = orthonormal_rows(rng, k, config.d_v);
            let mut steps: Vec<usize> = (0..k).collect();
            steps.shuffle(rng);
            let chosen: HashSet<usize> =
                steps.into_iter().take(config.important_per_video).collect();
            let imp = (0..k).map(|s| chosen.contains(&s)).collect();
            (lat, imp)
        }
    };

    let mut frames = Array2::<f32>::zeros((n, config.d_v));
    let mut frame_labels = Vec::with_capacity(n);
    let mut replay = Vec::with_capacity(n);
    for step in 0..k {
        for f in 0..config.frames_per_step {
            let i = step * config.frames_per_step + f;
            for d in 0..config.d_v {
                frames[[i, d]] =
                    (latents[[step, d]] + config.frame_noise * normal.sample(rng)) as f32;
            }
            frame_labels.push(u8::from(important[step]));
            let u: f64 = rng.random();
            replay.push(if important[step] {
                (0.5 + 0.5 * u) as f32
            } else {
                (0.1 * u) as f32
            });
        }
    }

    let mut subtitles = Vec::with_capacity(k);
    let mut sentence_labels = Vec::with_capacity(k);
    for step in 0..k {
        let mapped = map_to_text_space(text_map, &latents.row(step).to_owned(), config.d_t);
        let feat: Array1<f32> = mapped.mapv(|v| (v + config.text_noise * normal.sample(rng)) as f32);
        let verb = SYNTH_VERBS[rng.random_range(0..SYNTH_VERBS.len())];
        let noun = SYNTH_NOUNS[rng.random_range(0..SYNTH_NOUNS.len())];
        let text = if important[step] {
            format!("now {verb} the {noun} carefully before moving on")
        } else {
            format!("next {verb} the {noun}")
        };
        subtitles.push(SubtitleSegment {
            text_feature: feat,
            start_frame: step * config.frames_per_step,
            end_frame: (step + 1) * config.frames_per_step,
            text: Some(text),
        });
        sentence_labels.push(u8::from(important[step]));
    }

    // Mean of the important-step latents in the text embedding space.
    let mut mean = Array1::<f64>::zeros(config.d_v);
    let n_imp = important.iter().filter(|&&b| b).count();
    if n_imp > 0 {
        for step in 0..k {
            if important[step] {
                mean = &mean + &latents.row(step);
            }
        }
        mean /= n_imp as f64;
    }
    let global = map_to_text_space(text_map, &mean, config.d_t).mapv(|v| v as f32);

    Ok(VideoSample {
        video_id: format!("vid_{index:04}"),
        frame_features: frames,
        subtitles,
        global_feature: Some(global),
        frame_labels: Some(frame_labels),
        sentence_labels: Some(sentence_labels),
        replay_scores: Some(replay),
        shot_boundaries: None,
    })
}

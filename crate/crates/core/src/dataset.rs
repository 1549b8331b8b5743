//! Aligned pose/speech sequences: alignment, episode split, mirroring,
//! standardization, windowing, and the prepared-dataset file.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::audio::{mel_spectrogram, AudioError, MelConfig, Waveform};
use crate::bvh::{parse_bvh, write_bvh, BvhError, MotionClip, Skeleton};
use crate::kinematics::{
    clip_to_pose_sequence, mirror_pose, KinematicsError, MirrorConvention, MirrorMap, PoseVector,
};
use crate::matrix::Matrix;
use crate::tensorfile::{Tensor, TensorError, TensorFile};

/// Largest tolerated length difference between the two streams, in frames.
pub const MAX_MISALIGNMENT: usize = 20;

/// Smallest standard deviation a standardizer will divide by.
pub const MIN_STD: f64 = 1e-6;

pub const FRAME_RATE: f64 = 20.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("episode {episode:?}: {pose_frames} pose frames vs {mel_frames} speech frames")]
    Misaligned {
        episode: String,
        pose_frames: usize,
        mel_frames: usize,
    },
    #[error("need at least 2 episodes, found {0}")]
    TooFewEpisodes(usize),
    #[error("episode {episode:?}: {message}")]
    Episode { episode: String, message: String },
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Bvh(#[from] BvhError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("standardizer: {0}")]
    Standardizer(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Add laterally mirrored copies of the training sequences.
    pub mirror: bool,
    pub mirror_convention: MirrorConvention,
    /// JSON file with explicit joint pairs; overrides the naming convention.
    pub mirror_override: Option<String>,
    pub standardize_poses: bool,
    pub standardize_mels: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            mirror: true,
            mirror_convention: MirrorConvention::default(),
            mirror_override: None,
            standardize_poses: true,
            standardize_mels: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSequence {
    pub poses: Matrix,
    pub mels: Matrix,
    pub episode_id: String,
}

impl AlignedSequence {
    pub fn len(&self) -> usize {
        self.poses.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.rows() == 0
    }
}

/// Truncates both streams to the shorter one.
pub fn align(poses: Matrix, mels: Matrix, episode_id: &str) -> Result<AlignedSequence, DatasetError> {
    let (a, b) = (poses.rows(), mels.rows());
    if a.abs_diff(b) > MAX_MISALIGNMENT {
        return Err(DatasetError::Misaligned {
            episode: episode_id.to_string(),
            pose_frames: a,
            mel_frames: b,
        });
    }
    let t = a.min(b);
    Ok(AlignedSequence {
        poses: poses.truncated(t),
        mels: mels.truncated(t),
        episode_id: episode_id.to_string(),
    })
}

/// Id of the episode held out for testing: the last in natural sort order.
pub fn holdout_episode<'a>(ids: impl IntoIterator<Item = &'a str>) -> Result<String, DatasetError> {
    let mut ids: Vec<&str> = ids.into_iter().collect();
    ids.sort_by(|a, b| natord::compare(a, b));
    ids.dedup();
    if ids.len() < 2 {
        return Err(DatasetError::TooFewEpisodes(ids.len()));
    }
    Ok(ids[ids.len() - 1].to_string())
}

/// Holds out every sequence of the last episode.
pub fn split_by_episode(
    sequences: Vec<AlignedSequence>,
) -> Result<(Vec<AlignedSequence>, Vec<AlignedSequence>), DatasetError> {
    let last = holdout_episode(sequences.iter().map(|s| s.episode_id.as_str()))?;
    let (test, train) = sequences.into_iter().partition(|s| s.episode_id == last);
    Ok((train, test))
}

fn mirror_matrix(poses: &Matrix, map: &MirrorMap) -> Result<Matrix, DatasetError> {
    let mut out = Matrix::zeros(poses.rows(), poses.cols());
    for (src, dst) in poses.iter_rows().zip(out.iter_rows_mut()) {
        let p = mirror_pose(&PoseVector::from_slice(src)?, map)?;
        dst.copy_from_slice(&p.to_vec());
    }
    Ok(out)
}

/// Appends a laterally mirrored copy of every sequence. Works on
/// unstandardized pose vectors.
pub fn augment_mirror(sequences: Vec<AlignedSequence>, map: &MirrorMap) -> Result<Vec<AlignedSequence>, DatasetError> {
    let mirrored = sequences
        .par_iter()
        .map(|s| {
            Ok(AlignedSequence {
                poses: mirror_matrix(&s.poses, map)?,
                mels: s.mels.clone(),
                episode_id: s.episode_id.clone(),
            })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    let mut out = sequences;
    out.extend(mirrored);
    Ok(out)
}

/// Per-dimension affine normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population statistics over every row of every matrix.
    pub fn fit<'a>(mats: impl IntoIterator<Item = &'a Matrix>) -> Result<Self, DatasetError> {
        let mats: Vec<&Matrix> = mats.into_iter().collect();
        let dim = mats
            .first()
            .map(|m| m.cols())
            .ok_or_else(|| DatasetError::Standardizer("no data".into()))?;
        let n: usize = mats.iter().map(|m| m.rows()).sum();
        if n == 0 {
            return Err(DatasetError::Standardizer("no frames".into()));
        }
        let mut mean = vec![0.0; dim];
        for row in mats.iter().flat_map(|m| m.iter_rows()) {
            for (a, v) in mean.iter_mut().zip(row) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for row in mats.iter().flat_map(|m| m.iter_rows()) {
            for ((a, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *a += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|v| (v / n as f64).sqrt().max(MIN_STD)).collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn destandardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }

    pub fn apply(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for row in out.iter_rows_mut() {
            let s = self.standardize(row);
            row.copy_from_slice(&s);
        }
        out
    }

    pub fn invert(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for row in out.iter_rows_mut() {
            let s = self.destandardize(row);
            row.copy_from_slice(&s);
        }
        out
    }
}

/// Frame indices feeding the window at `t`: `H` history frames
/// `t-H .. t-1` and `2w + 1` context frames `t-w ..= t+w`, clamped to the
/// sequence (edge replication).
pub fn window_indices(t: usize, len: usize, history: usize, context: usize) -> (Vec<usize>, Vec<usize>) {
    let last = len.saturating_sub(1) as isize;
    let clamp = |i: isize| i.clamp(0, last) as usize;
    let t = t as isize;
    let h = (0..history as isize).map(|k| clamp(t - history as isize + k)).collect();
    let c = (-(context as isize)..=context as isize).map(|k| clamp(t + k)).collect();
    (h, c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindow {
    pub target: Vec<f64>,
    pub pose_history: Vec<Vec<f64>>,
    pub speech_context: Vec<Vec<f64>>,
}

/// One window per frame.
pub fn make_windows(seq: &AlignedSequence, history: usize, context: usize) -> Vec<TrainingWindow> {
    (0..seq.len())
        .map(|t| {
            let (h, c) = window_indices(t, seq.len(), history, context);
            TrainingWindow {
                target: seq.poses.row(t).to_vec(),
                pose_history: h.iter().map(|&i| seq.poses.row(i).to_vec()).collect(),
                speech_context: c.iter().map(|&i| seq.mels.row(i).to_vec()).collect(),
            }
        })
        .collect()
}

/// Picks the nearest source frame for every 20 fps output frame.
pub fn resample_clip(clip: &MotionClip, frame_rate: f64) -> MotionClip {
    let target = 1.0 / frame_rate;
    if (clip.frame_time() - target).abs() < 1e-9 || clip.frame_count() == 0 {
        return clip.clone();
    }
    let n = clip.frame_count();
    let out = ((n as f64 * clip.frame_time()) / target).round().max(1.0) as usize;
    let rows: Vec<Vec<f64>> = (0..out)
        .map(|k| {
            let i = ((k as f64 * target / clip.frame_time()).round() as usize).min(n - 1);
            clip.frame(i).to_vec()
        })
        .collect();
    MotionClip::from_rows(target, clip.channel_count(), &rows).expect("rows share the clip width")
}

/// Raw inputs for one episode.
#[derive(Debug, Clone)]
pub struct EpisodeSource {
    pub id: String,
    pub skeleton: Skeleton,
    pub clip: MotionClip,
    pub waveform: Waveform,
}

/// Unstandardized features of one episode.
#[derive(Debug, Clone)]
pub struct EpisodeFeatures {
    pub sequence: AlignedSequence,
    /// Root height at frame 0.
    pub root_height: f64,
}

pub fn episode_features(src: &EpisodeSource, mel: &MelConfig) -> Result<EpisodeFeatures, DatasetError> {
    let clip = resample_clip(&src.clip, FRAME_RATE);
    let (poses, initial) = clip_to_pose_sequence(&src.skeleton, &clip)?;
    let dim = PoseVector::dim_for(src.skeleton.joint_count());
    let rows: Vec<Vec<f64>> = poses.iter().map(PoseVector::to_vec).collect();
    let poses = Matrix::from_rows(dim, &rows);
    let mels = mel_spectrogram(&src.waveform, mel)?.frames;
    Ok(EpisodeFeatures {
        sequence: align(poses, mels, &src.id)?,
        root_height: initial.position.y,
    })
}

/// Everything the model and the evaluation need from the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedDataset {
    pub skeleton: Skeleton,
    pub mirror_map: MirrorMap,
    pub train: Vec<AlignedSequence>,
    pub test: Vec<AlignedSequence>,
    pub pose_standardizer: Standardizer,
    pub mel_standardizer: Standardizer,
    pub mel_config: MelConfig,
    /// Mean root height at frame 0 over the training episodes.
    pub root_height: f64,
}

pub fn mirror_map_for(skeleton: &Skeleton, cfg: &DatasetConfig, base: &Path) -> Result<MirrorMap, DatasetError> {
    match &cfg.mirror_override {
        Some(p) => {
            let path = base.join(p);
            let text = std::fs::read_to_string(&path)?;
            Ok(MirrorMap::from_override_json(skeleton, &text)?)
        }
        None => Ok(MirrorMap::from_convention(skeleton, &cfg.mirror_convention)?),
    }
}

fn same_skeleton(a: &Skeleton, b: &Skeleton) -> bool {
    a.joint_count() == b.joint_count()
        && a.joints().iter().zip(b.joints()).all(|(x, y)| x.name == y.name && x.parent == y.parent)
}

/// Alignment, split, mirroring and standardization. `base` resolves a
/// relative mirror override path.
pub fn prepare(
    episodes: &[EpisodeSource],
    cfg: &DatasetConfig,
    mel: &MelConfig,
    base: &Path,
) -> Result<PreparedDataset, DatasetError> {
    let first = episodes.first().ok_or(DatasetError::TooFewEpisodes(0))?;
    let skeleton = first.skeleton.clone();
    for e in episodes {
        if !same_skeleton(&skeleton, &e.skeleton) {
            return Err(DatasetError::Episode {
                episode: e.id.clone(),
                message: "skeleton differs from the first episode".into(),
            });
        }
    }
    let mirror_map = mirror_map_for(&skeleton, cfg, base)?;
    let features = episodes
        .par_iter()
        .map(|e| episode_features(e, mel))
        .collect::<Result<Vec<_>, _>>()?;
    let last = holdout_episode(features.iter().map(|f| f.sequence.episode_id.as_str()))?;
    let heights: Vec<f64> = features
        .iter()
        .filter(|f| f.sequence.episode_id != last)
        .map(|f| f.root_height)
        .collect();
    let root_height = heights.iter().sum::<f64>() / heights.len() as f64;
    let (train, test) = split_by_episode(features.into_iter().map(|f| f.sequence).collect())?;
    let train = if cfg.mirror {
        augment_mirror(train, &mirror_map)?
    } else {
        train
    };
    let pose_dim = train[0].poses.cols();
    let mel_dim = train[0].mels.cols();
    let pose_standardizer = if cfg.standardize_poses {
        Standardizer::fit(train.iter().map(|s| &s.poses))?
    } else {
        Standardizer::identity(pose_dim)
    };
    let mel_standardizer = if cfg.standardize_mels {
        Standardizer::fit(train.iter().map(|s| &s.mels))?
    } else {
        Standardizer::identity(mel_dim)
    };
    let standardize = |s: AlignedSequence| AlignedSequence {
        poses: pose_standardizer.apply(&s.poses),
        mels: mel_standardizer.apply(&s.mels),
        episode_id: s.episode_id,
    };
    let train = train.into_iter().map(standardize).collect();
    let test = test.into_iter().map(standardize).collect();
    Ok(PreparedDataset {
        skeleton,
        mirror_map,
        train,
        test,
        pose_standardizer,
        mel_standardizer,
        mel_config: mel.clone(),
        root_height,
    })
}

fn matrix_tensor(m: &Matrix) -> Tensor {
    Tensor::f64(vec![m.rows(), m.cols()], m.data().to_vec()).expect("matrix shape")
}

fn tensor_matrix(f: &TensorFile, name: &str) -> Result<Matrix, DatasetError> {
    let t = f.get(name)?;
    if t.dims.len() != 2 {
        return Err(DatasetError::Manifest(format!("{name} is not a matrix")));
    }
    Ok(Matrix::from_vec(t.dims[0], t.dims[1], t.to_f64()))
}

impl PreparedDataset {
    pub fn pose_dim(&self) -> usize {
        self.pose_standardizer.dim()
    }

    pub fn mel_dim(&self) -> usize {
        self.mel_standardizer.dim()
    }

    /// Serializes to the tensor container. `extra` is merged into the metadata.
    pub fn to_tensor_file(&self, extra: serde_json::Value) -> Result<TensorFile, DatasetError> {
        let ids = |v: &[AlignedSequence]| v.iter().map(|s| s.episode_id.clone()).collect::<Vec<_>>();
        let mut meta = json!({
            "kind": "prepared_dataset",
            "skeleton_bvh": write_bvh(&self.skeleton, &MotionClip::new(0.05, self.skeleton.channel_count(), vec![])?)?,
            "mirror_map": self.mirror_map,
            "train_episodes": ids(&self.train),
            "test_episodes": ids(&self.test),
            "mel_config": self.mel_config,
            "root_height": self.root_height,
        });
        if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
            m.extend(e);
        }
        let mut f = TensorFile::new(meta);
        f.insert("pose_mean", Tensor::vector(self.pose_standardizer.mean.clone()));
        f.insert("pose_std", Tensor::vector(self.pose_standardizer.std.clone()));
        f.insert("mel_mean", Tensor::vector(self.mel_standardizer.mean.clone()));
        f.insert("mel_std", Tensor::vector(self.mel_standardizer.std.clone()));
        for (split, seqs) in [("train", &self.train), ("test", &self.test)] {
            for (i, s) in seqs.iter().enumerate() {
                f.insert(format!("{split}/{i}/poses"), matrix_tensor(&s.poses));
                f.insert(format!("{split}/{i}/mels"), matrix_tensor(&s.mels));
            }
        }
        Ok(f)
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self, DatasetError> {
        let m = &f.meta;
        let get = |k: &str| m.get(k).ok_or_else(|| DatasetError::Manifest(format!("missing metadata field {k:?}")));
        let bvh = get("skeleton_bvh")?
            .as_str()
            .ok_or_else(|| DatasetError::Manifest("skeleton_bvh is not a string".into()))?;
        let (skeleton, _) = parse_bvh(bvh)?;
        let de = |k: &str| -> Result<serde_json::Value, DatasetError> { Ok(get(k)?.clone()) };
        let parse_err = |e: serde_json::Error| DatasetError::Manifest(e.to_string());
        let mirror_map: MirrorMap = serde_json::from_value(de("mirror_map")?).map_err(parse_err)?;
        let mel_config: MelConfig = serde_json::from_value(de("mel_config")?).map_err(parse_err)?;
        let root_height = get("root_height")?
            .as_f64()
            .ok_or_else(|| DatasetError::Manifest("root_height".into()))?;
        let std = |mean: &str, std: &str| -> Result<Standardizer, DatasetError> {
            Ok(Standardizer {
                mean: f.get(mean)?.to_f64(),
                std: f.get(std)?.to_f64(),
            })
        };
        let seqs = |split: &str, key: &str| -> Result<Vec<AlignedSequence>, DatasetError> {
            let ids: Vec<String> = serde_json::from_value(de(key)?).map_err(parse_err)?;
            ids.into_iter()
                .enumerate()
                .map(|(i, id)| {
                    Ok(AlignedSequence {
                        poses: tensor_matrix(f, &format!("{split}/{i}/poses"))?,
                        mels: tensor_matrix(f, &format!("{split}/{i}/mels"))?,
                        episode_id: id,
                    })
                })
                .collect()
        };
        Ok(Self {
            skeleton,
            mirror_map,
            train: seqs("train", "train_episodes")?,
            test: seqs("test", "test_episodes")?,
            pose_standardizer: std("pose_mean", "pose_std")?,
            mel_standardizer: std("mel_mean", "mel_std")?,
            mel_config,
            root_height,
        })
    }
}

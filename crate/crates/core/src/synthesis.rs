//! Autoregressive sampling of pose sequences from speech features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::MelSpectrogram;
use crate::bvh::MotionClip;
use crate::checkpoint::ModelBundle;
use crate::dataset::{window_indices, FRAME_RATE};
use crate::flow::{encoder_input, FlowError};
use crate::kinematics::{pose_sequence_to_clip, KinematicsError, PoseVector, RootState};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("speech features have {actual} bands, the model expects {expected}")]
    StandardizerMismatch { expected: usize, actual: usize },
    #[error("initial pose has dimension {actual}, the model expects {expected}")]
    InitPose { expected: usize, actual: usize },
    #[error("non-finite pose at frame {frame}")]
    NonFinite { frame: usize },
    #[error("empty speech input")]
    Empty,
    #[error("temperature must be a finite value >= 0, got {0}")]
    Temperature(f64),
    #[error("sample count must be at least 1")]
    NoSamples,
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub seed: u64,
    /// Scale of the latent standard deviation; 0 gives `z = 0` every frame.
    pub temperature: f64,
    /// Unstandardized pose used to seed the history. `None` is the rest pose.
    pub init_pose: Option<Vec<f64>>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            temperature: 1.0,
            init_pose: None,
        }
    }
}

/// Latent draw for one frame, `N(0, sigma^2 I)`. Each `(seed, frame)` pair
/// has its own stream, so draws do not depend on evaluation order.
pub fn latent(seed: u64, frame: usize, dim: usize, temperature: f64) -> Vec<f64> {
    if temperature == 0.0 {
        return vec![0.0; dim];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame as u64);
    (0..dim)
        .map(|_| temperature * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Unstandardized pose vectors, one per speech frame.
pub fn sample_poses(
    bundle: &ModelBundle,
    mel: &MelSpectrogram,
    cfg: &SamplingConfig,
) -> Result<Vec<PoseVector>, SynthError> {
    let model = &bundle.model;
    let flow = &model.config;
    let d = model.pose_dim();
    if mel.n_mels() != bundle.mel_standardizer.dim() {
        return Err(SynthError::StandardizerMismatch {
            expected: bundle.mel_standardizer.dim(),
            actual: mel.n_mels(),
        });
    }
    if !(cfg.temperature >= 0.0 && cfg.temperature.is_finite()) {
        return Err(SynthError::Temperature(cfg.temperature));
    }
    let frames = mel.frame_count();
    if frames == 0 {
        return Err(SynthError::Empty);
    }
    let mels = bundle.mel_standardizer.apply(&mel.frames);
    let init = match &cfg.init_pose {
        Some(p) if p.len() != d => return Err(SynthError::InitPose { expected: d, actual: p.len() }),
        Some(p) => p.clone(),
        None => PoseVector::rest(bundle.skeleton.joint_count()).to_vec(),
    };
    let seed_pose = bundle.pose_standardizer.standardize(&init);
    let mut generated: Vec<Vec<f64>> = Vec::with_capacity(frames);
    let mut state = model.encoder.initial_state();
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let (_, ctx) = window_indices(t, frames, flow.history, flow.context);
        let hist: Vec<&[f64]> = (0..flow.history)
            .map(|k| {
                let back = flow.history - k;
                if back > t {
                    &seed_pose[..]
                } else {
                    &generated[t - back][..]
                }
            })
            .collect();
        let ctx: Vec<&[f64]> = ctx.iter().map(|&i| mels.row(i)).collect();
        let cond = model.encoder.step(&mut state, &encoder_input(&hist, &ctx));
        let z = latent(cfg.seed, t, d, cfg.temperature);
        let x = model.inverse(&z, &cond).map_err(|e| match e {
            FlowError::NonFinite { .. } => SynthError::NonFinite { frame: t },
            e => SynthError::Flow(e),
        })?;
        let pose = bundle.pose_standardizer.destandardize(&x);
        if !pose.iter().all(|v| v.is_finite()) {
            return Err(SynthError::NonFinite { frame: t });
        }
        out.push(PoseVector::from_slice(&pose)?);
        generated.push(x);
    }
    Ok(out)
}

pub fn poses_to_clip(bundle: &ModelBundle, poses: &[PoseVector]) -> Result<MotionClip, SynthError> {
    let mut initial = RootState::default();
    initial.position.y = bundle.root_height;
    Ok(pose_sequence_to_clip(&bundle.skeleton, poses, &initial, 1.0 / FRAME_RATE)?)
}

/// One clip with exactly as many frames as the speech features.
pub fn sample_sequence(
    bundle: &ModelBundle,
    mel: &MelSpectrogram,
    cfg: &SamplingConfig,
) -> Result<MotionClip, SynthError> {
    poses_to_clip(bundle, &sample_poses(bundle, mel, cfg)?)
}

/// `n` independent clips; clip `i` uses seed `base_seed + i`.
pub fn batch_sample(
    bundle: &ModelBundle,
    mel: &MelSpectrogram,
    n: usize,
    base_seed: u64,
    temperature: f64,
) -> Result<Vec<MotionClip>, SynthError> {
    if n == 0 {
        return Err(SynthError::NoSamples);
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let cfg = SamplingConfig {
                seed: base_seed.wrapping_add(i as u64),
                temperature,
                init_pose: None,
            };
            sample_sequence(bundle, mel, &cfg)
        })
        .collect()
}

/// Per-clip record written next to every synthesized BVH file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub seed: u64,
    pub temperature: f64,
    pub config_hash: String,
    pub checkpoint_id: String,
    pub format_version: u32,
    pub frames: usize,
    pub input: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::MelConfig;
    use crate::dataset::Standardizer;
    use crate::flow::{FlowConfig, FlowModel};
    use crate::matrix::Matrix;
    use crate::toy::toy_skeleton;

    fn bundle() -> ModelBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = FlowModel::new(FlowConfig::test_profile(27, 3), &mut rng).unwrap();
        ModelBundle {
            model,
            skeleton: toy_skeleton(),
            pose_standardizer: Standardizer {
                mean: vec![0.0; 27],
                std: vec![0.05; 27],
            },
            mel_standardizer: Standardizer::identity(3),
            mel_config: MelConfig::default(),
            root_height: 95.0,
            config_hash: "test".into(),
        }
    }

    fn mel(frames: usize) -> MelSpectrogram {
        MelSpectrogram {
            frames: Matrix::from_vec(frames, 3, (0..frames * 3).map(|i| (i as f64 * 0.37).sin()).collect()),
            frame_rate: 20.0,
            log_floor: 1e-10f64.ln(),
        }
    }

    #[test]
    fn length_contract() {
        let clip = sample_sequence(&bundle(), &mel(37), &SamplingConfig::default()).unwrap();
        assert_eq!(clip.frame_count(), 37);
        assert_eq!(clip.frame_time(), 0.05);
    }

    #[test]
    fn seeds_and_temperature() {
        let b = bundle();
        let m = mel(20);
        let cfg = |seed, temperature| SamplingConfig {
            seed,
            temperature,
            init_pose: None,
        };
        let a = sample_sequence(&b, &m, &cfg(1, 1.0)).unwrap();
        assert_eq!(a, sample_sequence(&b, &m, &cfg(1, 1.0)).unwrap());
        assert_ne!(a, sample_sequence(&b, &m, &cfg(2, 1.0)).unwrap());
        assert_eq!(
            sample_sequence(&b, &m, &cfg(1, 0.0)).unwrap(),
            sample_sequence(&b, &m, &cfg(9, 0.0)).unwrap()
        );
    }

    #[test]
    fn batch_matches_single_and_sequential() {
        let b = bundle();
        let m = mel(15);
        let batch = batch_sample(&b, &m, 4, 10, 1.0).unwrap();
        let cfg = SamplingConfig {
            seed: 10,
            ..SamplingConfig::default()
        };
        assert_eq!(batch[0], sample_sequence(&b, &m, &cfg).unwrap());
        let seq: Vec<_> = (0..4)
            .map(|i| {
                let cfg = SamplingConfig {
                    seed: 10 + i,
                    ..SamplingConfig::default()
                };
                sample_sequence(&b, &m, &cfg).unwrap()
            })
            .collect();
        assert_eq!(batch, seq);
    }

    #[test]
    fn rejects_mismatched_features() {
        let b = bundle();
        let bad = MelSpectrogram {
            frames: Matrix::zeros(5, 4),
            frame_rate: 20.0,
            log_floor: 0.0,
        };
        assert!(matches!(
            sample_sequence(&b, &bad, &SamplingConfig::default()),
            Err(SynthError::StandardizerMismatch { expected: 3, actual: 4 })
        ));
    }
}

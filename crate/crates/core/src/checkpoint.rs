//! Trained-model bundles and resumable training checkpoints, stored in the
//! tensor container.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use thiserror::Error;

use crate::audio::MelConfig;
use crate::bvh::{parse_bvh, write_bvh, BvhError, MotionClip, Skeleton};
use crate::dataset::{PreparedDataset, Standardizer};
use crate::flow::{FlowConfig, FlowError, FlowModel};
use crate::tensorfile::{Tensor, TensorError, TensorFile};
use crate::training::{Adam, LogRow, RngState, TrainConfig, TrainError, TrainState};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Bvh(#[from] BvhError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("checkpoint metadata: {0}")]
    Meta(String),
    #[error("unsupported format version {0}")]
    Version(u64),
}

/// A model plus everything needed to turn its samples into motion.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub model: FlowModel<f64>,
    pub skeleton: Skeleton,
    pub pose_standardizer: Standardizer,
    pub mel_standardizer: Standardizer,
    pub mel_config: MelConfig,
    pub root_height: f64,
    pub config_hash: String,
}

impl ModelBundle {
    pub fn new(model: FlowModel<f64>, data: &PreparedDataset, config_hash: &str) -> Self {
        Self {
            model,
            skeleton: data.skeleton.clone(),
            pose_standardizer: data.pose_standardizer.clone(),
            mel_standardizer: data.mel_standardizer.clone(),
            mel_config: data.mel_config.clone(),
            root_height: data.root_height,
            config_hash: config_hash.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub bundle: ModelBundle,
    pub train_config: TrainConfig,
    pub step: usize,
    pub seed: u64,
    pub adam: Adam,
    pub rng: RngState,
    pub initial_nll: Option<f64>,
    pub log: Vec<LogRow>,
}

fn meta_err(m: impl std::fmt::Display) -> CheckpointError {
    CheckpointError::Meta(m.to_string())
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, data: &PreparedDataset, train_config: &TrainConfig, config_hash: &str) -> Self {
        Self {
            bundle: ModelBundle::new(state.model.clone(), data, config_hash),
            train_config: train_config.clone(),
            step: state.step,
            seed: state.seed,
            adam: state.adam.clone(),
            rng: state.rng_state(),
            initial_nll: state.initial_nll,
            log: state.log.clone(),
        }
    }

    pub fn to_state(&self) -> Result<TrainState, CheckpointError> {
        Ok(TrainState {
            model: self.bundle.model.clone(),
            adam: self.adam.clone(),
            step: self.step,
            seed: self.seed,
            rng: TrainState::restore_rng(self.seed, &self.rng)?,
            initial_nll: self.initial_nll,
            log: self.log.clone(),
        })
    }

    pub fn to_tensor_file(&self) -> Result<TensorFile, CheckpointError> {
        let b = &self.bundle;
        let m = &b.model;
        let empty = MotionClip::new(0.05, b.skeleton.channel_count(), vec![]).map_err(CheckpointError::Bvh)?;
        let meta = json!({
            "kind": "checkpoint",
            "format_version": FORMAT_VERSION,
            "config_hash": b.config_hash,
            "flow_config": m.config,
            "train_config": self.train_config,
            "mel_config": b.mel_config,
            "skeleton_bvh": write_bvh(&b.skeleton, &empty)?,
            "root_height": b.root_height,
            "step": self.step,
            "seed": self.seed,
            "rng": self.rng,
            "adam_t": self.adam.t,
            "initial_nll": self.initial_nll,
            "actnorm_initialized": m.actnorm_initialized(),
            "log": self.log,
        });
        let mut f = TensorFile::new(meta);
        for (name, block) in m.blocks() {
            f.insert(format!("param/{name}"), Tensor::vector(block.clone()));
        }
        for (k, s) in m.steps.iter().enumerate() {
            let perm = s.linear.perm.iter().map(|&p| p as i64).collect::<Vec<_>>();
            f.insert(format!("buffer/step{k}.linear.perm"), Tensor::i64(vec![perm.len()], perm)?);
            f.insert(format!("buffer/step{k}.linear.sign"), Tensor::vector(s.linear.sign.clone()));
        }
        f.insert("adam/m", Tensor::vector(self.adam.m.clone()));
        f.insert("adam/v", Tensor::vector(self.adam.v.clone()));
        f.insert("pose_mean", Tensor::vector(b.pose_standardizer.mean.clone()));
        f.insert("pose_std", Tensor::vector(b.pose_standardizer.std.clone()));
        f.insert("mel_mean", Tensor::vector(b.mel_standardizer.mean.clone()));
        f.insert("mel_std", Tensor::vector(b.mel_standardizer.std.clone()));
        Ok(f)
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self, CheckpointError> {
        let meta = &f.meta;
        let field = |k: &str| meta.get(k).ok_or_else(|| meta_err(format!("missing field {k:?}")));
        let parse = |k: &str| -> Result<serde_json::Value, CheckpointError> { Ok(field(k)?.clone()) };
        let version = field("format_version")?.as_u64().ok_or_else(|| meta_err("format_version"))?;
        if version != FORMAT_VERSION as u64 {
            return Err(CheckpointError::Version(version));
        }
        let flow: FlowConfig = serde_json::from_value(parse("flow_config")?).map_err(meta_err)?;
        let train_config: TrainConfig = serde_json::from_value(parse("train_config")?).map_err(meta_err)?;
        let mel_config: MelConfig = serde_json::from_value(parse("mel_config")?).map_err(meta_err)?;
        let rng: RngState = serde_json::from_value(parse("rng")?).map_err(meta_err)?;
        let log: Vec<LogRow> = serde_json::from_value(parse("log")?).map_err(meta_err)?;
        let initial_nll: Option<f64> = serde_json::from_value(parse("initial_nll")?).map_err(meta_err)?;
        let (skeleton, _) = parse_bvh(field("skeleton_bvh")?.as_str().ok_or_else(|| meta_err("skeleton_bvh"))?)?;
        let num = |k: &str| field(k).and_then(|v| v.as_f64().ok_or_else(|| meta_err(k)));
        let int = |k: &str| field(k).and_then(|v| v.as_u64().ok_or_else(|| meta_err(k)));
        let initialized = field("actnorm_initialized")?.as_bool().ok_or_else(|| meta_err("actnorm_initialized"))?;

        let mut model = FlowModel::new(flow, &mut ChaCha8Rng::seed_from_u64(0))?;
        for (name, block) in model.blocks_mut() {
            let n = block.len();
            *block = f.get_f64(&format!("param/{name}"), n)?;
        }
        for (k, s) in model.steps.iter_mut().enumerate() {
            let d = s.linear.perm.len();
            let perm = f.get(&format!("buffer/step{k}.linear.perm"))?;
            let perm: Vec<usize> = perm.to_f64().iter().map(|&p| p as usize).collect();
            let mut seen = vec![false; d];
            if perm.len() != d || perm.iter().any(|&p| p >= d || std::mem::replace(&mut seen[p], true)) {
                return Err(meta_err(format!("step {k}: invalid permutation")));
            }
            s.linear.perm = perm;
            s.linear.sign = f.get_f64(&format!("buffer/step{k}.linear.sign"), d)?;
            s.actnorm.initialized = initialized;
        }
        let n = model.param_count();
        let adam = Adam {
            m: f.get_f64("adam/m", n)?,
            v: f.get_f64("adam/v", n)?,
            t: int("adam_t")?,
        };
        let std = |mean: &str, std: &str| -> Result<Standardizer, CheckpointError> {
            let s = Standardizer {
                mean: f.get(mean)?.to_f64(),
                std: f.get(std)?.to_f64(),
            };
            if s.mean.len() != s.std.len() {
                return Err(meta_err(format!("{mean}/{std} length mismatch")));
            }
            Ok(s)
        };
        let pose_standardizer = std("pose_mean", "pose_std")?;
        let mel_standardizer = std("mel_mean", "mel_std")?;
        if pose_standardizer.dim() != model.pose_dim() || mel_standardizer.dim() != model.config.mel_dim {
            return Err(meta_err("standardizer dimensions do not match the model"));
        }
        Ok(Self {
            bundle: ModelBundle {
                model,
                skeleton,
                pose_standardizer,
                mel_standardizer,
                mel_config,
                root_height: num("root_height")?,
                config_hash: field("config_hash")?.as_str().ok_or_else(|| meta_err("config_hash"))?.to_string(),
            },
            train_config,
            step: int("step")? as usize,
            seed: int("seed")?,
            adam,
            rng,
            initial_nll,
            log,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), CheckpointError> {
        Ok(self.to_tensor_file()?.save(path)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, CheckpointError> {
        Self::from_tensor_file(&TensorFile::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::MelConfig;
    use crate::kinematics::MirrorMap;
    use crate::toy::toy_skeleton;

    fn dataset(pose_dim: usize, mel_dim: usize) -> PreparedDataset {
        let skeleton = toy_skeleton();
        PreparedDataset {
            mirror_map: MirrorMap::new(skeleton.joint_count(), vec![], (0..skeleton.joint_count()).collect()).unwrap(),
            skeleton,
            train: vec![],
            test: vec![],
            pose_standardizer: Standardizer {
                mean: (0..pose_dim).map(|i| i as f64 * 0.1).collect(),
                std: vec![2.0; pose_dim],
            },
            mel_standardizer: Standardizer::identity(mel_dim),
            mel_config: MelConfig::default(),
            root_height: 95.0,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = FlowModel::<f64>::new(FlowConfig::test_profile(27, 4), &mut rng).unwrap();
        let mut state = TrainState::new(model, 11);
        state.adam.m.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 1e-3);
        state.adam.t = 17;
        state.step = 17;
        state.initial_nll = Some(38.25);
        let ds = dataset(27, 4);
        let ck = Checkpoint::from_state(&state, &ds, &TrainConfig::default(), "abc");
        let bytes = ck.to_tensor_file().unwrap().to_bytes().unwrap();
        let back = Checkpoint::from_tensor_file(&TensorFile::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_tensor_file().unwrap().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_wrong_version() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = FlowModel::<f64>::new(FlowConfig::test_profile(27, 4), &mut rng).unwrap();
        let ck = Checkpoint::from_state(&TrainState::new(model, 0), &dataset(27, 4), &TrainConfig::default(), "x");
        let mut f = ck.to_tensor_file().unwrap();
        f.meta["format_version"] = json!(99);
        assert!(matches!(Checkpoint::from_tensor_file(&f), Err(CheckpointError::Version(99))));
    }
}

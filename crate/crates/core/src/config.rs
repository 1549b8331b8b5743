//! Pipeline configuration, its content hash, seed sub-streams and corpus
//! manifests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio::{read_wav_file, AudioError, MelConfig};
use crate::bvh::{parse_bvh, BvhError};
use crate::checkpoint::FORMAT_VERSION;
use crate::dataset::{DatasetConfig, EpisodeSource};
use crate::evaluation::EvalConfig;
use crate::flow::FlowConfig;
use crate::synthesis::SamplingConfig;
use crate::toy::ToyConfig;
use crate::training::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("config serialization: {0}")]
    Serialize(String),
    #[error("manifest {path}: {message}")]
    Manifest { path: String, message: String },
    #[error("episode {episode}: {source}")]
    Bvh {
        episode: String,
        #[source]
        source: BvhError,
    },
    #[error("episode {episode}: {source}")]
    Audio {
        episode: String,
        #[source]
        source: AudioError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// CSV with columns `id,bvh,wav`; paths are relative to the manifest.
    pub manifest: Option<PathBuf>,
    pub workdir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            manifest: None,
            workdir: PathBuf::from("work"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub format_version: u32,
    pub paths: Paths,
    pub audio: MelConfig,
    pub dataset: DatasetConfig,
    pub flow: FlowConfig,
    pub train: TrainConfig,
    pub sampling: SamplingConfig,
    pub eval: EvalConfig,
    pub toy: ToyConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            format_version: FORMAT_VERSION,
            paths: Paths::default(),
            audio: MelConfig::default(),
            dataset: DatasetConfig::default(),
            flow: FlowConfig::default(),
            train: TrainConfig::default(),
            sampling: SamplingConfig::default(),
            eval: EvalConfig::default(),
            toy: ToyConfig::default(),
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| ConfigError::Serialize(e.to_string()))
    }

    /// SHA-256 of everything except file locations, so moving a workdir
    /// does not change the hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    /// Hash of the settings that determine speech features.
    pub fn feature_hash(&self) -> String {
        feature_hash(&self.audio)
    }

    /// Deterministic seed for a named pipeline stage.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        stage_seed(self.seed, stage)
    }
}

pub fn feature_hash(mel: &MelConfig) -> String {
    sha256_hex(serde_json::to_string(mel).expect("mel config serializes").as_bytes())
}

pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub bvh: PathBuf,
    pub wav: PathBuf,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, ConfigError> {
    let err = |m: String| ConfigError::Manifest {
        path: path.display().to_string(),
        message: m,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let entries = r
        .deserialize()
        .collect::<Result<Vec<ManifestEntry>, _>>()
        .map_err(|e| err(e.to_string()))?;
    if entries.is_empty() {
        return Err(err("no episodes".into()));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    Ok(entries
        .into_iter()
        .map(|e| ManifestEntry {
            bvh: dir.join(e.bvh),
            wav: dir.join(e.wav),
            id: e.id,
        })
        .collect())
}

pub fn load_episode(entry: &ManifestEntry) -> Result<EpisodeSource, ConfigError> {
    let io = |p: &Path| {
        let p = p.display().to_string();
        move |source| ConfigError::Io { path: p, source }
    };
    let text = std::fs::read_to_string(&entry.bvh).map_err(io(&entry.bvh))?;
    let (skeleton, clip) = parse_bvh(&text).map_err(|source| ConfigError::Bvh {
        episode: entry.id.clone(),
        source,
    })?;
    if !entry.wav.exists() {
        return Err(io(&entry.wav)(std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let waveform = read_wav_file(&entry.wav).map_err(|source| ConfigError::Audio {
        episode: entry.id.clone(),
        source,
    })?;
    Ok(EpisodeSource {
        id: entry.id.clone(),
        skeleton,
        clip,
        waveform,
    })
}

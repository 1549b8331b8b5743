//! The four pipeline commands.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use gesticulate::audio::{mel_spectrogram, read_wav_file, write_wav_file, MelSpectrogram};
use gesticulate::bvh::{parse_bvh, write_bvh, MotionClip, Skeleton};
use gesticulate::checkpoint::{Checkpoint, ModelBundle, FORMAT_VERSION};
use gesticulate::config::{feature_hash, load_episode, read_manifest, PipelineConfig};
use gesticulate::dataset::{episode_features, prepare, EpisodeSource, PreparedDataset};
use gesticulate::evaluation::{
    gesture_space_cloud, occupancy_overlap, peak_distribution_from_clips, write_cloud_csv, write_density_csv,
};
use gesticulate::flow::FlowModel;
use gesticulate::kinematics::PoseVector;
use gesticulate::synthesis::{batch_sample, poses_to_clip, Sidecar};
use gesticulate::tensorfile::TensorFile;
use gesticulate::toy::synthetic_corpus;
use gesticulate::training::TrainState;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::CliError;
use crate::workdir::Workdir;

/// Loaded configuration plus where it came from.
pub struct Context {
    pub config: PipelineConfig,
    /// Directory that relative paths in the config resolve against.
    pub base: PathBuf,
    /// Whether a config file was given explicitly.
    pub explicit: bool,
    pub workdir: Workdir,
}

impl Context {
    fn artifact_meta(&self) -> serde_json::Value {
        json!({
            "config_hash": self.config.hash(),
            "seed": self.config.seed,
            "format_version": FORMAT_VERSION,
        })
    }
}

pub struct PrepareArgs {
    pub manifest: Option<PathBuf>,
    pub toy: bool,
    pub episodes: Option<usize>,
}

pub fn cmd_prepare(ctx: &Context, args: &PrepareArgs) -> Result<(), CliError> {
    let _lock = ctx.workdir.lock()?;
    let cfg = &ctx.config;
    let episodes: Vec<EpisodeSource> = if args.toy {
        let mut toy = cfg.toy.clone();
        if let Some(n) = args.episodes {
            toy.episodes = n;
        }
        let corpus = synthetic_corpus(cfg.stage_seed("prepare"), &toy);
        let dir = ctx.workdir.toy();
        std::fs::create_dir_all(&dir)?;
        for e in &corpus {
            let s = &e.source;
            std::fs::write(dir.join(format!("{}.bvh", s.id)), write_bvh(&s.skeleton, &s.clip).map_err(CliError::data)?)?;
            write_wav_file(&s.waveform, dir.join(format!("{}.wav", s.id))).map_err(CliError::data)?;
        }
        corpus.into_iter().map(|e| e.source).collect()
    } else {
        if args.episodes.is_some() {
            return Err(CliError::Usage("--episodes only applies with --toy".into()));
        }
        let manifest = args
            .manifest
            .clone()
            .or_else(|| cfg.paths.manifest.as_ref().map(|m| ctx.base.join(m)))
            .ok_or_else(|| CliError::Usage("prepare needs --manifest, paths.manifest in the config, or --toy".into()))?;
        let entries = read_manifest(&manifest)?;
        let loaded: Vec<_> = entries.iter().map(load_episode).collect();
        let failures: Vec<String> = loaded.iter().filter_map(|r| r.as_ref().err().map(|e| e.to_string())).collect();
        if !failures.is_empty() {
            return Err(CliError::Data(failures.join("\n")));
        }
        loaded.into_iter().map(|r| r.expect("checked above")).collect()
    };
    let misaligned: Vec<String> = episodes
        .iter()
        .filter_map(|e| episode_features(e, &cfg.audio).err().map(|err| err.to_string()))
        .collect();
    if !misaligned.is_empty() {
        return Err(CliError::Data(misaligned.join("\n")));
    }
    let data = prepare(&episodes, &cfg.dataset, &cfg.audio, &ctx.base)?;
    data.to_tensor_file(ctx.artifact_meta())?.save(ctx.workdir.dataset())?;
    let count = |v: &[gesticulate::dataset::AlignedSequence]| {
        v.iter()
            .map(|s| s.episode_id.as_str())
            .collect::<std::collections::BTreeSet<_>>()
            .len()
    };
    println!(
        "prepared {} train / {} test episodes ({} training sequences) into {}",
        count(&data.train),
        count(&data.test),
        data.train.len(),
        ctx.workdir.dataset().display()
    );
    Ok(())
}

fn load_dataset(w: &Workdir) -> Result<PreparedDataset, CliError> {
    let path = w.dataset();
    if !path.exists() {
        return Err(CliError::Data(format!(
            "no prepared dataset at {}; run `prepare` first",
            path.display()
        )));
    }
    Ok(PreparedDataset::from_tensor_file(&TensorFile::load(path)?)?)
}

pub struct TrainArgs {
    pub resume: bool,
    /// Stop after this many total steps without changing the schedule.
    pub until: Option<usize>,
}

fn write_log_csv(path: &Path, state: &TrainState) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(CliError::data)?;
    for row in &state.log {
        w.serialize(row).map_err(CliError::data)?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_train(ctx: &Context, args: &TrainArgs) -> Result<(), CliError> {
    let _lock = ctx.workdir.lock()?;
    let cfg = &ctx.config;
    let hash = cfg.hash();
    let data = load_dataset(&ctx.workdir)?;
    let mut state = if args.resume {
        let path = ctx.workdir.latest();
        let ck = Checkpoint::load(&path)
            .map_err(|e| CliError::Data(format!("cannot resume from {}: {e}", path.display())))?;
        if ck.bundle.config_hash != hash {
            return Err(CliError::Data(format!(
                "checkpoint config hash {} differs from the current config hash {hash}",
                ck.bundle.config_hash
            )));
        }
        ck.to_state()?
    } else {
        let mut flow = cfg.flow.clone();
        flow.pose_dim = data.pose_dim();
        flow.mel_dim = data.mel_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed("init"));
        TrainState::new(FlowModel::new(flow, &mut rng)?, cfg.stage_seed("train"))
    };
    std::fs::create_dir_all(ctx.workdir.checkpoints())?;
    let until = args.until.unwrap_or(cfg.train.steps).min(cfg.train.steps);
    let interval = cfg.train.checkpoint_interval.max(1);
    let save = |s: &TrainState| -> Result<(), CliError> {
        let ck = Checkpoint::from_state(s, &data, &cfg.train, &hash);
        let f = ck.to_tensor_file()?;
        f.save(ctx.workdir.latest())?;
        if s.step % interval == 0 || s.step == cfg.train.steps {
            f.save(ctx.workdir.checkpoint(s.step))?;
        }
        write_log_csv(&ctx.workdir.train_log(), s)
    };
    let mut save_error = None;
    let result = state.run(&data.train, &cfg.train, until, |s| {
        if s.step % interval == 0 {
            if let Err(e) = save(s) {
                save_error = Some(e);
                return Err(gesticulate::training::TrainError::Data("checkpoint write failed".into()));
            }
        }
        Ok(())
    });
    if let Some(e) = save_error {
        return Err(e);
    }
    result?;
    save(&state)?;
    let last = state.log.last().map(|r| r.nll).unwrap_or(f64::NAN);
    println!(
        "trained to step {} of {} (last logged nll {last:.4}); checkpoint {}",
        state.step,
        cfg.train.steps,
        ctx.workdir.latest().display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, String), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let ck = Checkpoint::from_tensor_file(&TensorFile::from_bytes(&bytes)?)?;
    let id = hex::encode(Sha256::digest(&bytes))[..16].to_string();
    Ok((ck, id))
}

/// Features for `wav` under the checkpoint's feature settings. An explicit
/// config must agree with them.
fn features_for(ctx: &Context, bundle: &ModelBundle, wav: &Path) -> Result<MelSpectrogram, CliError> {
    let ours = feature_hash(&ctx.config.audio);
    let theirs = feature_hash(&bundle.mel_config);
    if ctx.explicit && ours != theirs {
        return Err(CliError::Data(format!(
            "feature config mismatch: checkpoint feature hash {theirs}, config feature hash {ours}"
        )));
    }
    let waveform = read_wav_file(wav).map_err(|e| CliError::Data(format!("{}: {e}", wav.display())))?;
    mel_spectrogram(&waveform, &bundle.mel_config).map_err(CliError::data)
}

pub struct SynthArgs {
    pub checkpoint: PathBuf,
    pub wav: PathBuf,
    pub n: usize,
    pub seed: Option<u64>,
    pub temperature: Option<f64>,
    pub out: Option<PathBuf>,
}

pub fn cmd_synth(ctx: &Context, args: &SynthArgs) -> Result<(), CliError> {
    let _lock = ctx.workdir.lock()?;
    let (ck, checkpoint_id) = load_checkpoint(&args.checkpoint)?;
    let bundle = &ck.bundle;
    let mel = features_for(ctx, bundle, &args.wav)?;
    let seed = args.seed.unwrap_or(ctx.config.sampling.seed);
    let temperature = args.temperature.unwrap_or(ctx.config.sampling.temperature);
    let clips = batch_sample(bundle, &mel, args.n, seed, temperature)?;
    let out = args.out.clone().unwrap_or_else(|| ctx.workdir.root.join("synth"));
    std::fs::create_dir_all(&out)?;
    let stem = args.wav.file_stem().and_then(|s| s.to_str()).unwrap_or("sample");
    for (i, clip) in clips.iter().enumerate() {
        let s = seed.wrapping_add(i as u64);
        let name = format!("{stem}_seed{s}");
        std::fs::write(out.join(format!("{name}.bvh")), write_bvh(&bundle.skeleton, clip).map_err(CliError::data)?)?;
        let sidecar = Sidecar {
            seed: s,
            temperature,
            config_hash: bundle.config_hash.clone(),
            checkpoint_id: checkpoint_id.clone(),
            format_version: FORMAT_VERSION,
            frames: clip.frame_count(),
            input: args.wav.display().to_string(),
        };
        std::fs::write(out.join(format!("{name}.json")), serde_json::to_string_pretty(&sidecar)? + "\n")?;
    }
    println!("wrote {} clips of {} frames to {}", clips.len(), mel.frame_count(), out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalMode {
    Space,
    Peaks,
}

pub struct EvalArgs {
    pub mode: EvalMode,
    pub checkpoint: Option<PathBuf>,
    pub wav: Option<PathBuf>,
    pub clips: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Every `.bvh` file in `dir`, in natural filename order.
pub fn read_clip_dir(dir: &Path) -> Result<(Skeleton, Vec<MotionClip>), CliError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bvh"))
        .collect();
    if paths.is_empty() {
        return Err(CliError::Data(format!("no BVH clips in {}", dir.display())));
    }
    paths.sort_by(|a, b| natord::compare(&a.to_string_lossy(), &b.to_string_lossy()));
    let mut skeleton = None;
    let mut clips = Vec::with_capacity(paths.len());
    for p in &paths {
        let text = std::fs::read_to_string(p)?;
        let (sk, clip) = parse_bvh(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        match &skeleton {
            None => skeleton = Some(sk),
            Some(first) if first.channel_count() != sk.channel_count() => {
                return Err(CliError::Data(format!("{}: skeleton differs from {}", p.display(), paths[0].display())))
            }
            Some(_) => {}
        }
        clips.push(clip);
    }
    Ok((skeleton.expect("at least one clip"), clips))
}

/// Held-out episodes of the prepared dataset as motion clips.
fn dataset_reference(w: &Workdir, bundle: &ModelBundle) -> Result<Vec<MotionClip>, CliError> {
    let data = load_dataset(w)?;
    data.test
        .iter()
        .map(|s| {
            let raw = data.pose_standardizer.invert(&s.poses);
            let poses = (0..raw.rows())
                .map(|i| PoseVector::from_slice(raw.row(i)))
                .collect::<Result<Vec<_>, _>>()
                .map_err(CliError::data)?;
            Ok(poses_to_clip(bundle, &poses)?)
        })
        .collect()
}

#[derive(Serialize)]
struct PeaksReport<'a> {
    config_hash: String,
    seed: u64,
    format_version: u32,
    n_samples: usize,
    bandwidth: f64,
    hand: gesticulate::evaluation::HandSelection,
    peaks: &'a [(usize, Vec<f64>)],
}

#[derive(Serialize)]
struct SpaceReport {
    config_hash: String,
    seed: u64,
    format_version: u32,
    stride: usize,
    n_samples: usize,
    model_points: usize,
    reference_points: Option<usize>,
    overlap: Option<f64>,
}

pub fn cmd_eval(ctx: &Context, args: &EvalArgs) -> Result<(), CliError> {
    let _lock = ctx.workdir.lock()?;
    let eval = &ctx.config.eval;
    let seed = args.seed.unwrap_or(ctx.config.stage_seed("eval"));
    let default_n = match args.mode {
        EvalMode::Space => eval.space_samples,
        EvalMode::Peaks => eval.peak_samples,
    };
    let n = args.samples.unwrap_or(default_n);
    let mut bundle = None;
    let mut config_hash = ctx.config.hash();
    let (skeleton, clips) = match (&args.wav, &args.clips) {
        (Some(wav), None) => {
            let path = args
                .checkpoint
                .as_ref()
                .ok_or_else(|| CliError::Usage("--wav needs --checkpoint".into()))?;
            let (ck, _) = load_checkpoint(path)?;
            let mel = features_for(ctx, &ck.bundle, wav)?;
            let clips = batch_sample(&ck.bundle, &mel, n, seed, eval.temperature)?;
            config_hash = ck.bundle.config_hash.clone();
            let skeleton = ck.bundle.skeleton.clone();
            bundle = Some(ck.bundle);
            (skeleton, clips)
        }
        (None, Some(dir)) => read_clip_dir(dir)?,
        _ => return Err(CliError::Usage("eval needs exactly one of --wav or --clips".into())),
    };
    let out = args.out.clone().unwrap_or_else(|| ctx.workdir.root.join("eval"));
    std::fs::create_dir_all(&out)?;
    match args.mode {
        EvalMode::Peaks => {
            let dist = peak_distribution_from_clips(&skeleton, &clips, eval)?;
            write_density_csv(BufWriter::new(File::create(out.join("peaks_density.csv"))?), &[("model", &dist)])?;
            let report = PeaksReport {
                config_hash,
                seed,
                format_version: FORMAT_VERSION,
                n_samples: dist.n_samples,
                bandwidth: dist.bandwidth,
                hand: eval.hand,
                peaks: &dist.peaks,
            };
            std::fs::write(out.join("peaks.json"), serde_json::to_string_pretty(&report)? + "\n")?;
            println!("peak densities for {} clips written to {}", clips.len(), out.display());
        }
        EvalMode::Space => {
            let cloud = gesture_space_cloud(&skeleton, &clips, eval, "model")?;
            let reference = match (&args.reference, &bundle) {
                (Some(dir), _) => {
                    let (sk, clips) = read_clip_dir(dir)?;
                    Some(gesture_space_cloud(&sk, &clips, eval, "reference")?)
                }
                (None, Some(b)) if ctx.workdir.dataset().exists() => {
                    Some(gesture_space_cloud(&skeleton, &dataset_reference(&ctx.workdir, b)?, eval, "reference")?)
                }
                _ => None,
            };
            let overlap = reference.as_ref().map(|r| occupancy_overlap(&cloud, r, eval)).transpose()?;
            let mut clouds = vec![&cloud];
            clouds.extend(reference.as_ref());
            write_cloud_csv(BufWriter::new(File::create(out.join("space_points.csv"))?), &clouds)?;
            let report = SpaceReport {
                config_hash,
                seed,
                format_version: FORMAT_VERSION,
                stride: eval.stride,
                n_samples: clips.len(),
                model_points: cloud.points.len(),
                reference_points: reference.as_ref().map(|r| r.points.len()),
                overlap,
            };
            std::fs::write(out.join("space.json"), serde_json::to_string_pretty(&report)? + "\n")?;
            match overlap {
                Some(o) => println!("gesture-space overlap {o:.4}; reports in {}", out.display()),
                None => println!("gesture-space cloud written to {}", out.display()),
            }
        }
    }
    Ok(())
}

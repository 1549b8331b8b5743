//! Gesture-space occupancy and hand-velocity peak statistics.

use std::io::Write;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::MelSpectrogram;
use crate::bvh::{Channel, MotionClip, Skeleton};
use crate::checkpoint::ModelBundle;
use crate::kinematics::rotation::euler_to_matrix;
use crate::synthesis::{batch_sample, SynthError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("unknown joint {0:?}")]
    UnknownJoint(String),
    #[error("clip does not match skeleton: {0}")]
    ClipMismatch(String),
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("invalid evaluation parameter: {0}")]
    Config(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandSelection {
    Right,
    Left,
    /// Per-frame maximum of the two hand speeds.
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Clips pooled into a gesture-space cloud.
    pub space_samples: usize,
    /// Every `stride`-th frame contributes to the cloud.
    pub stride: usize,
    /// Clips sampled for the peak analysis.
    pub peak_samples: usize,
    pub n_min: usize,
    pub n_max: usize,
    /// KDE bandwidth in seconds.
    pub bandwidth: f64,
    /// KDE grid spacing in seconds.
    pub grid_step: f64,
    /// Histogram bins per axis for occupancy overlap.
    pub bins: usize,
    /// Relative padding of the shared histogram box.
    pub box_padding: f64,
    pub hand: HandSelection,
    pub left_hand: String,
    pub right_hand: String,
    pub hip_joint: String,
    /// Joints contributing to the cloud; empty means every joint.
    pub upper_body: Vec<String>,
    pub temperature: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            space_samples: 15,
            stride: 8,
            peak_samples: 300,
            n_min: 2,
            n_max: 12,
            bandwidth: 0.1,
            grid_step: 0.01,
            bins: 64,
            box_padding: 0.05,
            hand: HandSelection::Right,
            left_hand: "LeftHand".into(),
            right_hand: "RightHand".into(),
            hip_joint: "Hips".into(),
            upper_body: Vec::new(),
            temperature: 1.0,
        }
    }
}

fn joint_index(skeleton: &Skeleton, name: &str) -> Result<usize, EvalError> {
    skeleton.find(name).ok_or_else(|| EvalError::UnknownJoint(name.to_string()))
}

/// World joint positions of every frame, straight from the BVH channels.
pub fn clip_positions(skeleton: &Skeleton, clip: &MotionClip) -> Result<Vec<Vec<Vector3<f64>>>, EvalError> {
    if clip.channel_count() != skeleton.channel_count() {
        return Err(EvalError::ClipMismatch(format!(
            "{} channels vs {}",
            clip.channel_count(),
            skeleton.channel_count()
        )));
    }
    Ok(clip
        .frames()
        .map(|row| {
            let mut rot: Vec<Matrix3<f64>> = Vec::with_capacity(skeleton.joint_count());
            let mut pos: Vec<Vector3<f64>> = Vec::with_capacity(skeleton.joint_count());
            for (j, joint) in skeleton.joints().iter().enumerate() {
                let base = skeleton.channel_offset(j);
                let mut offset = Vector3::from(joint.offset);
                let mut angles = [0.0; 3];
                let mut k = 0;
                for (c, ch) in joint.channels.iter().enumerate() {
                    match ch {
                        Channel::Position(a) => offset[a.index()] += row[base + c],
                        Channel::Rotation(_) => {
                            angles[k] = row[base + c];
                            k += 1;
                        }
                    }
                }
                let local = euler_to_matrix(joint.rotation_order(), angles);
                match joint.parent {
                    None => {
                        pos.push(offset);
                        rot.push(local);
                    }
                    Some(p) => {
                        pos.push(pos[p] + rot[p] * offset);
                        rot.push(rot[p] * local);
                    }
                }
            }
            pos
        })
        .collect())
}

/// Hand speed in cm/s in hip-centred coordinates; frame 0 has speed 0.
pub fn hand_speed(skeleton: &Skeleton, clip: &MotionClip, hand_joint: &str) -> Result<Vec<f64>, EvalError> {
    let hand = joint_index(skeleton, hand_joint)?;
    let root = 0;
    let pos = clip_positions(skeleton, clip)?;
    let rel: Vec<Vector3<f64>> = pos.iter().map(|p| p[hand] - p[root]).collect();
    Ok((0..rel.len())
        .map(|t| {
            if t == 0 {
                0.0
            } else {
                (rel[t] - rel[t - 1]).norm() / clip.frame_time()
            }
        })
        .collect())
}

pub fn selected_hand_speed(skeleton: &Skeleton, clip: &MotionClip, cfg: &EvalConfig) -> Result<Vec<f64>, EvalError> {
    match cfg.hand {
        HandSelection::Right => hand_speed(skeleton, clip, &cfg.right_hand),
        HandSelection::Left => hand_speed(skeleton, clip, &cfg.left_hand),
        HandSelection::Max => {
            let l = hand_speed(skeleton, clip, &cfg.left_hand)?;
            let r = hand_speed(skeleton, clip, &cfg.right_hand)?;
            Ok(l.iter().zip(&r).map(|(a, b)| a.max(*b)).collect())
        }
    }
}

/// Frame indices of local maxima. A plateau counts once, at its first frame,
/// when the values on both sides of it are strictly lower.
pub fn local_maxima(x: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut i = 1;
    while i + 1 < x.len() {
        if x[i] > x[i - 1] {
            let mut j = i;
            while j + 1 < x.len() && x[j + 1] == x[i] {
                j += 1;
            }
            if j + 1 < x.len() && x[j + 1] < x[i] {
                out.push(i);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

/// Times (s) of the `n` highest local maxima, highest first; equal heights
/// are ordered by time.
pub fn top_n_peaks(speed: &[f64], n: usize, frame_time: f64) -> Vec<f64> {
    let mut peaks = local_maxima(speed);
    peaks.sort_by(|&a, &b| speed[b].total_cmp(&speed[a]).then(a.cmp(&b)));
    peaks.truncate(n);
    peaks.into_iter().map(|i| i as f64 * frame_time).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Density {
    pub values: Vec<f64>,
    /// Set when there were no points; the curve is then all zeros.
    pub empty: bool,
}

/// Mean of Gaussian kernels with standard deviation `bandwidth`.
pub fn kde(points: &[f64], bandwidth: f64, grid: &[f64]) -> Result<Density, EvalError> {
    if !(bandwidth > 0.0) {
        return Err(EvalError::Config(format!("bandwidth must be positive, got {bandwidth}")));
    }
    if points.is_empty() {
        return Ok(Density {
            values: vec![0.0; grid.len()],
            empty: true,
        });
    }
    let norm = 1.0 / (bandwidth * (2.0 * std::f64::consts::PI).sqrt() * points.len() as f64);
    let values = grid
        .iter()
        .map(|&g| {
            points
                .iter()
                .map(|&p| (-0.5 * ((g - p) / bandwidth).powi(2)).exp())
                .sum::<f64>()
                * norm
        })
        .collect();
    Ok(Density { values, empty: false })
}

/// Uniform grid covering `[lo - 4h, hi + 4h]`.
pub fn padded_grid(lo: f64, hi: f64, bandwidth: f64, step: f64) -> Vec<f64> {
    let a = lo - 4.0 * bandwidth;
    let b = hi + 4.0 * bandwidth;
    let n = ((b - a) / step).ceil() as usize;
    (0..=n).map(|i| a + i as f64 * step).collect()
}

pub fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    grid.windows(2)
        .zip(values.windows(2))
        .map(|(g, v)| 0.5 * (g[1] - g[0]) * (v[0] + v[1]))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakDistribution {
    pub grid: Vec<f64>,
    /// `(N, density)` for every N in the range, ascending.
    pub densities: Vec<(usize, Density)>,
    /// Pooled peak times for every N.
    pub peaks: Vec<(usize, Vec<f64>)>,
    pub n_samples: usize,
    pub bandwidth: f64,
}

/// Pools the top-N peak times of every clip and estimates their density.
pub fn peak_distribution_from_clips(
    skeleton: &Skeleton,
    clips: &[MotionClip],
    cfg: &EvalConfig,
) -> Result<PeakDistribution, EvalError> {
    if cfg.n_min == 0 || cfg.n_min > cfg.n_max {
        return Err(EvalError::Config(format!("bad N range {}..={}", cfg.n_min, cfg.n_max)));
    }
    let speeds = clips
        .par_iter()
        .map(|c| selected_hand_speed(skeleton, c, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let duration = clips
        .iter()
        .map(|c| c.frame_count().saturating_sub(1) as f64 * c.frame_time())
        .fold(0.0, f64::max);
    let grid = padded_grid(0.0, duration, cfg.bandwidth, cfg.grid_step);
    let mut densities = Vec::new();
    let mut peaks = Vec::new();
    for n in cfg.n_min..=cfg.n_max {
        let pooled: Vec<f64> = speeds
            .iter()
            .zip(clips)
            .flat_map(|(s, c)| top_n_peaks(s, n, c.frame_time()))
            .collect();
        densities.push((n, kde(&pooled, cfg.bandwidth, &grid)?));
        peaks.push((n, pooled));
    }
    Ok(PeakDistribution {
        grid,
        densities,
        peaks,
        n_samples: clips.len(),
        bandwidth: cfg.bandwidth,
    })
}

/// Samples `cfg.peak_samples` clips for one input and analyses their peaks.
pub fn peak_distribution(
    bundle: &ModelBundle,
    mel: &MelSpectrogram,
    base_seed: u64,
    cfg: &EvalConfig,
) -> Result<PeakDistribution, EvalError> {
    let clips = batch_sample(bundle, mel, cfg.peak_samples, base_seed, cfg.temperature)?;
    peak_distribution_from_clips(&bundle.skeleton, &clips, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GestureSpaceCloud {
    /// Frontal-plane `(x, y)` positions, hip at the origin.
    pub points: Vec<[f64; 2]>,
    pub source: String,
    /// Frames that contributed.
    pub frames: usize,
}

/// Hip-centred frontal projection of the upper-body joints on every
/// `stride`-th frame of every clip.
pub fn gesture_space_cloud(
    skeleton: &Skeleton,
    clips: &[MotionClip],
    cfg: &EvalConfig,
    source: &str,
) -> Result<GestureSpaceCloud, EvalError> {
    if cfg.stride == 0 {
        return Err(EvalError::Config("stride must be positive".into()));
    }
    let hip = joint_index(skeleton, &cfg.hip_joint)?;
    let joints: Vec<usize> = if cfg.upper_body.is_empty() {
        (0..skeleton.joint_count()).collect()
    } else {
        cfg.upper_body
            .iter()
            .map(|n| joint_index(skeleton, n))
            .collect::<Result<_, _>>()?
    };
    let per_clip = clips
        .par_iter()
        .map(|c| {
            let pos = clip_positions(skeleton, c)?;
            let mut pts = Vec::new();
            let mut frames = 0;
            for frame in pos.iter().step_by(cfg.stride) {
                frames += 1;
                let h = frame[hip];
                for &j in &joints {
                    let p = frame[j] - h;
                    pts.push([p.x, p.y]);
                }
            }
            Ok((pts, frames))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let frames = per_clip.iter().map(|(_, f)| f).sum();
    Ok(GestureSpaceCloud {
        points: per_clip.into_iter().flat_map(|(p, _)| p).collect(),
        source: source.to_string(),
        frames,
    })
}

/// Shared box `[x0, x1] x [y0, y1]` around both clouds.
fn union_box(a: &GestureSpaceCloud, b: &GestureSpaceCloud, pad: f64) -> [f64; 4] {
    let mut bx = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
    for p in a.points.iter().chain(&b.points) {
        bx[0] = bx[0].min(p[0]);
        bx[1] = bx[1].max(p[0]);
        bx[2] = bx[2].min(p[1]);
        bx[3] = bx[3].max(p[1]);
    }
    for k in [0, 2] {
        let w = bx[k + 1] - bx[k];
        let m = if w > 0.0 { pad * w } else { 0.5 };
        bx[k] -= m;
        bx[k + 1] += m;
    }
    bx
}

/// Normalized 2D histogram over `bx`.
pub fn histogram(points: &[[f64; 2]], bx: [f64; 4], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins * bins];
    let cell = |v: f64, lo: f64, hi: f64| (((v - lo) / (hi - lo) * bins as f64).floor() as usize).min(bins - 1);
    for p in points {
        h[cell(p[1], bx[2], bx[3]) * bins + cell(p[0], bx[0], bx[1])] += 1.0;
    }
    let n = points.len() as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

/// Bhattacharyya coefficient of the two clouds' histograms on a shared box.
pub fn occupancy_overlap(a: &GestureSpaceCloud, b: &GestureSpaceCloud, cfg: &EvalConfig) -> Result<f64, EvalError> {
    if a.points.is_empty() || b.points.is_empty() {
        return Err(EvalError::EmptyCloud);
    }
    if cfg.bins == 0 {
        return Err(EvalError::Config("bins must be positive".into()));
    }
    let bx = union_box(a, b, cfg.box_padding);
    let p = histogram(&a.points, bx, cfg.bins);
    let q = histogram(&b.points, bx, cfg.bins);
    Ok(p.iter().zip(&q).map(|(x, y)| (x * y).sqrt()).sum::<f64>().min(1.0))
}

#[derive(Serialize)]
struct DensityRow<'a> {
    grid_time: f64,
    n: usize,
    density: f64,
    source: &'a str,
}

#[derive(Serialize)]
struct PointRow<'a> {
    x: f64,
    y: f64,
    source: &'a str,
}

pub fn write_density_csv<W: Write>(out: W, dists: &[(&str, &PeakDistribution)]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    for (source, d) in dists {
        for (n, dens) in &d.densities {
            for (g, v) in d.grid.iter().zip(&dens.values) {
                w.serialize(DensityRow {
                    grid_time: *g,
                    n: *n,
                    density: *v,
                    source,
                })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_cloud_csv<W: Write>(out: W, clouds: &[&GestureSpaceCloud]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    for c in clouds {
        for p in &c.points {
            w.serialize(PointRow {
                x: p[0],
                y: p[1],
                source: &c.source,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::toy_skeleton;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn static_clip(frames: usize) -> MotionClip {
        let sk = toy_skeleton();
        let mut row = vec![0.0; sk.channel_count()];
        row[1] = 95.0;
        MotionClip::from_rows(0.05, sk.channel_count(), &vec![row; frames]).unwrap()
    }

    #[test]
    fn static_clip_has_zero_speed() {
        let sk = toy_skeleton();
        let s = hand_speed(&sk, &static_clip(10), "RightHand").unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
        assert!(matches!(hand_speed(&sk, &static_clip(2), "Nose"), Err(EvalError::UnknownJoint(_))));
    }

    #[test]
    fn hand_speed_matches_arc_length() {
        // shoulder swings at 10 deg per frame; the hand sits 53 cm from it
        // and the whole body translates, which the hip centring removes
        let sk = toy_skeleton();
        let arm = sk.channel_offset(sk.find("RightArm").unwrap());
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|k| {
                let mut r = vec![0.0; sk.channel_count()];
                r[0] = 3.0 * k as f64;
                r[1] = 95.0;
                r[arm] = 10.0 * k as f64;
                r
            })
            .collect();
        let clip = MotionClip::from_rows(0.05, sk.channel_count(), &rows).unwrap();
        let s = hand_speed(&sk, &clip, "RightHand").unwrap();
        let chord = 2.0 * 53.0 * (5f64.to_radians()).sin() / 0.05;
        assert_eq!(s[0], 0.0);
        for v in &s[1..] {
            assert!((v - chord).abs() < 1e-9, "{v} vs {chord}");
        }
        let l = hand_speed(&sk, &clip, "LeftHand").unwrap();
        assert!(l.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn two_spikes() {
        let mut s = vec![0.0; 20];
        s[4] = 3.0;
        s[12] = 5.0;
        assert_eq!(top_n_peaks(&s, 2, 0.05), vec![12.0 * 0.05, 4.0 * 0.05]);
        let mono: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert!(top_n_peaks(&mono, 3, 0.05).is_empty());
        // plateau counts once at its first frame
        assert_eq!(local_maxima(&[0.0, 2.0, 2.0, 2.0, 1.0]), vec![1]);
        // a plateau running into the end is not a peak
        assert!(local_maxima(&[0.0, 2.0, 2.0]).is_empty());
        // equal heights rank by time
        assert_eq!(top_n_peaks(&[0.0, 1.0, 0.0, 1.0, 0.0], 2, 1.0), vec![1.0, 3.0]);
    }

    #[test]
    fn kde_closed_forms() {
        let h = 0.1;
        let grid = padded_grid(0.0, 4.0, h, 0.01);
        let d = kde(&[2.0], h, &grid).unwrap();
        let imax = d.values.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let nearest = grid.iter().enumerate().min_by(|a, b| (a.1 - 2.0).abs().total_cmp(&(b.1 - 2.0).abs())).unwrap().0;
        assert_eq!(imax, nearest);
        let peak = 1.0 / (h * (2.0 * std::f64::consts::PI).sqrt());
        for (g, v) in grid.iter().zip(&d.values) {
            assert!((v - peak * (-0.5 * ((g - 2.0) / h).powi(2)).exp()).abs() < 1e-12);
        }
        assert!((d.values[imax] - peak).abs() < 0.01 * peak);
        assert!((trapezoid(&grid, &d.values) - 1.0).abs() < 1e-3);
        let e = kde(&[], h, &grid).unwrap();
        assert!(e.empty && e.values.iter().all(|&v| v == 0.0));
        assert!(kde(&[1.0], 0.0, &grid).is_err());
    }

    fn cloud(points: Vec<[f64; 2]>) -> GestureSpaceCloud {
        GestureSpaceCloud {
            points,
            source: "t".into(),
            frames: 0,
        }
    }

    #[test]
    fn overlap_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = cloud((0..500).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect());
        let b = cloud((0..500).map(|_| [rng.random_range(5.0..6.0), rng.random_range(5.0..6.0)]).collect());
        let cfg = EvalConfig::default();
        assert!((occupancy_overlap(&a, &a, &cfg).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(occupancy_overlap(&a, &b, &cfg).unwrap(), 0.0);
        let ab = occupancy_overlap(&a, &b, &cfg).unwrap();
        let ba = occupancy_overlap(&b, &a, &cfg).unwrap();
        assert_eq!(ab, ba);
        assert!(matches!(occupancy_overlap(&a, &cloud(vec![]), &cfg), Err(EvalError::EmptyCloud)));
    }

    #[test]
    fn cloud_contract() {
        let sk = toy_skeleton();
        let clips = vec![static_clip(160); 15];
        let c = gesture_space_cloud(&sk, &clips, &EvalConfig::default(), "rest").unwrap();
        assert_eq!(c.frames, 15 * 20);
        assert_eq!(c.points.len(), 15 * 20 * 8);
        // hip is joint 0 in every contributing frame
        for chunk in c.points.chunks(8) {
            assert_eq!(chunk[0], [0.0, 0.0]);
            assert_eq!(chunk, &c.points[..8]);
        }
    }

    #[test]
    fn csv_layout() {
        let c = cloud(vec![[1.0, 2.0]]);
        let mut buf = Vec::new();
        write_cloud_csv(&mut buf, &[&c]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "x,y,source\n1.0,2.0,t\n");
    }
}

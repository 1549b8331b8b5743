//! Synthetic corpus: an 8-joint upper-body character whose arms circle
//! with an amplitude that follows the loudness of noise-burst "speech".

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::bvh::{Axis, Channel, Joint, MotionClip, Skeleton};
use crate::dataset::{EpisodeSource, FRAME_RATE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub episodes: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    /// Peak shoulder swing in degrees at full loudness.
    pub arm_amplitude_deg: f64,
    /// Arm circling frequency in Hz.
    pub arm_frequency: f64,
    /// Standard deviation of the smooth joint-angle noise in degrees.
    pub noise_deg: f64,
    pub burst_s: (f64, f64),
    pub silence_s: (f64, f64),
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            episodes: 6,
            duration_s: 10.0,
            sample_rate: 16_000,
            arm_amplitude_deg: 40.0,
            arm_frequency: 1.0,
            noise_deg: 0.3,
            burst_s: (0.8, 2.0),
            silence_s: (0.6, 1.5),
        }
    }
}

pub const JOINTS: [&str; 8] = [
    "Hips",
    "Spine",
    "LeftArm",
    "LeftForeArm",
    "LeftHand",
    "RightArm",
    "RightForeArm",
    "RightHand",
];

/// Arms hang down from the shoulders in the rest pose. Lengths in cm.
pub fn toy_skeleton() -> Skeleton {
    let rot = vec![
        Channel::Rotation(Axis::Z),
        Channel::Rotation(Axis::X),
        Channel::Rotation(Axis::Y),
    ];
    let mut root_ch = vec![
        Channel::Position(Axis::X),
        Channel::Position(Axis::Y),
        Channel::Position(Axis::Z),
    ];
    root_ch.extend(rot.iter().copied());
    let layout: [(&str, Option<usize>, [f64; 3]); 8] = [
        ("Hips", None, [0.0, 0.0, 0.0]),
        ("Spine", Some(0), [0.0, 45.0, 0.0]),
        ("LeftArm", Some(1), [18.0, 0.0, 0.0]),
        ("LeftForeArm", Some(2), [0.0, -28.0, 0.0]),
        ("LeftHand", Some(3), [0.0, -25.0, 0.0]),
        ("RightArm", Some(1), [-18.0, 0.0, 0.0]),
        ("RightForeArm", Some(5), [0.0, -28.0, 0.0]),
        ("RightHand", Some(6), [0.0, -25.0, 0.0]),
    ];
    let joints = layout
        .iter()
        .map(|&(name, parent, offset)| Joint {
            name: name.to_string(),
            parent,
            offset,
            channels: if parent.is_none() { root_ch.clone() } else { rot.clone() },
        })
        .collect();
    let mut ends = vec![None; 8];
    ends[4] = Some([0.0, -8.0, 0.0]);
    ends[7] = Some([0.0, -8.0, 0.0]);
    Skeleton::new(joints, ends).expect("toy skeleton is valid")
}

/// Speech activity in [0, 1]: sin^2-shaped bursts separated by silence.
#[derive(Debug, Clone, PartialEq)]
pub struct BurstSchedule {
    /// `(start, end)` in seconds.
    pub bursts: Vec<(f64, f64)>,
}

impl BurstSchedule {
    pub fn generate<R: Rng>(duration: f64, cfg: &ToyConfig, rng: &mut R) -> Self {
        let mut t = rng.random_range(cfg.silence_s.0..cfg.silence_s.1) * 0.5;
        let mut bursts = Vec::new();
        loop {
            let len = rng.random_range(cfg.burst_s.0..cfg.burst_s.1);
            if t + len > duration {
                break;
            }
            bursts.push((t, t + len));
            t += len + rng.random_range(cfg.silence_s.0..cfg.silence_s.1);
        }
        Self { bursts }
    }

    pub fn envelope(&self, t: f64) -> f64 {
        self.bursts
            .iter()
            .find(|(a, b)| t >= *a && t < *b)
            .map(|(a, b)| (std::f64::consts::PI * (t - a) / (b - a)).sin().powi(2))
            .unwrap_or(0.0)
    }

    pub fn contains(&self, t: f64) -> bool {
        self.bursts.iter().any(|(a, b)| t >= *a && t < *b)
    }
}

#[derive(Debug, Clone)]
pub struct ToyEpisode {
    pub source: EpisodeSource,
    pub schedule: BurstSchedule,
    /// Speech activity sampled at every motion frame.
    pub envelope: Vec<f64>,
}

/// Smooth noise: one-pole low-pass filtered white noise with unit variance.
fn smooth_noise<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let a: f64 = 0.9;
    let gain = (1.0 - a * a).sqrt();
    let mut v = 0.0;
    (0..n)
        .map(|_| {
            v = a * v + gain * rng.sample::<f64, _>(StandardNormal);
            v
        })
        .collect()
}

pub fn toy_episode(seed: u64, index: usize, cfg: &ToyConfig) -> ToyEpisode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let skeleton = toy_skeleton();
    let schedule = BurstSchedule::generate(cfg.duration_s, cfg, &mut rng);
    let sr = cfg.sample_rate as f64;
    let n_samples = (cfg.duration_s * sr).round() as usize;
    let samples: Vec<f64> = (0..n_samples)
        .map(|i| 0.3 * schedule.envelope(i as f64 / sr) * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let waveform = Waveform::new(samples, cfg.sample_rate).expect("finite samples");

    let frames = (cfg.duration_s * FRAME_RATE).round() as usize;
    let dt = 1.0 / FRAME_RATE;
    let envelope: Vec<f64> = (0..frames).map(|k| schedule.envelope(k as f64 * dt)).collect();
    // one smooth noise track per rotation channel, plus one for walking speed
    let noise: Vec<Vec<f64>> = (0..25).map(|_| smooth_noise(frames, &mut rng)).collect();
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let w = std::f64::consts::TAU * cfg.arm_frequency;
    let a = cfg.arm_amplitude_deg;
    let nz = cfg.noise_deg;
    let mut x = 0.0;
    let mut z = 0.0;
    let mut heading: f64 = 0.0;
    let rows: Vec<Vec<f64>> = (0..frames)
        .map(|k| {
            let t = k as f64 * dt;
            let e = envelope[k];
            let (s, c) = (w * t + phase).sin_cos();
            // [Z, X, Y] per joint: shoulders circle, elbows bend
            let mut angles = [[0.0; 3]; 8];
            angles[2] = [a * e * (0.5 + 0.5 * c), a * e * s, 0.0];
            angles[3] = [0.0, -0.75 * a * e * (0.5 + 0.5 * s), 0.0];
            angles[5] = [-a * e * (0.5 - 0.5 * c), -a * e * s, 0.0];
            angles[6] = [0.0, -0.75 * a * e * (0.5 - 0.5 * s), 0.0];
            let speed = 0.02 * (1.0 + 0.5 * noise[24][k]);
            x += speed * heading.to_radians().sin();
            z += speed * heading.to_radians().cos();
            heading = 2.0 * (0.3 * t).sin();
            angles[0][2] = heading;
            let mut row = vec![x, 95.0, z];
            for (j, ang) in angles.iter().enumerate() {
                row.extend((0..3).map(|i| ang[i] + nz * noise[3 * j + i][k]));
            }
            row
        })
        .collect();
    let clip = MotionClip::from_rows(dt, skeleton.channel_count(), &rows).expect("toy rows match skeleton");
    ToyEpisode {
        source: EpisodeSource {
            id: format!("toy{:02}", index + 1),
            skeleton,
            clip,
            waveform,
        },
        schedule,
        envelope,
    }
}

/// `cfg.episodes` episodes, fully determined by `seed`.
pub fn synthetic_corpus(seed: u64, cfg: &ToyConfig) -> Vec<ToyEpisode> {
    (0..cfg.episodes).map(|i| toy_episode(seed, i, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::clip_to_pose_sequence;
    use crate::kinematics::rotation::expmap_to_rotation;

    fn small() -> ToyConfig {
        ToyConfig {
            episodes: 2,
            ..ToyConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = synthetic_corpus(5, &small());
        let b = synthetic_corpus(5, &small());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.source.clip, y.source.clip);
            assert_eq!(x.source.waveform, y.source.waveform);
        }
        let c = synthetic_corpus(6, &small());
        assert_ne!(a[0].source.clip, c[0].source.clip);
    }

    #[test]
    fn ten_seconds_is_two_hundred_frames() {
        let e = toy_episode(1, 0, &ToyConfig::default());
        assert_eq!(e.source.clip.frame_count(), 200);
        assert_eq!(e.source.waveform.samples().len(), 160_000);
        assert_eq!(e.source.skeleton.joint_count(), 8);
    }

    #[test]
    fn arms_rest_during_silence() {
        let cfg = ToyConfig {
            duration_s: 30.0,
            ..ToyConfig::default()
        };
        let e = toy_episode(2, 0, &cfg);
        let sk = &e.source.skeleton;
        let (poses, _) = clip_to_pose_sequence(sk, &e.source.clip).unwrap();
        let arm = ["LeftArm", "LeftForeArm", "RightArm", "RightForeArm"].map(|n| sk.find(n).unwrap());
        let rot: Vec<Vec<_>> = poses
            .iter()
            .map(|p| arm.iter().map(|&j| expmap_to_rotation(&p.joint_rotations[j])).collect())
            .collect();
        let pos: Vec<_> = (0..rot.len()).collect();
        let (mut speech, mut silent) = (Vec::new(), Vec::new());
        for k in 1..pos.len() {
            // angle of the relative rotation between consecutive frames
            let v: f64 = (0..arm.len())
                .map(|j| {
                    let rel = rot[pos[k - 1]][j].transpose() * rot[pos[k]][j];
                    ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
                })
                .sum::<f64>()
                * FRAME_RATE;
            if e.schedule.contains(k as f64 / FRAME_RATE) {
                speech.push(v);
            } else {
                silent.push(v);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(!silent.is_empty() && !speech.is_empty());
        assert!(mean(&silent) < 0.1 * mean(&speech), "{} vs {}", mean(&silent), mean(&speech));
    }
}

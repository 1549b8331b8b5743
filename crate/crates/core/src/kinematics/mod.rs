//! Conversion between BVH channel space and the model's pose vectors,
//! forward kinematics, and lateral mirroring.
//!
//! A pose vector holds one exponential-map rotation per joint followed by
//! the root's per-frame displacement expressed in its own heading frame:
//! forward (along local +z), lateral (along local +x) and angular (change of
//! heading about +y). The root joint's rotation keeps only the tilt left
//! after removing the heading. Root height is not part of the vector; it is
//! carried by the initial [`RootState`] and held constant on reintegration.

mod mirror;
pub mod rotation;

pub use mirror::{MirrorConvention, MirrorMap, MirrorOverride};

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::bvh::{Channel, MotionClip, Skeleton};
use rotation::{
    euler_to_matrix, expmap_to_rotation, heading_of, heading_rotation, matrix_to_euler,
    rotation_to_expmap, wrap_angle,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("matrix is not a rotation (orthogonality error {ortho:.3e}, det {det:.6})")]
    NotARotation { ortho: f64, det: f64 },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("mirror map: {0}")]
    Mirror(String),
    #[error("clip does not match skeleton: {0}")]
    ClipMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RootDelta {
    /// cm per frame along the heading direction
    pub forward: f64,
    /// cm per frame to the character's left (+x in the heading frame)
    pub lateral: f64,
    /// radians per frame about +y
    pub angular: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseVector {
    pub joint_rotations: Vec<Vector3<f64>>,
    pub root: RootDelta,
}

impl PoseVector {
    pub fn rest(joints: usize) -> Self {
        Self {
            joint_rotations: vec![Vector3::zeros(); joints],
            root: RootDelta::default(),
        }
    }

    pub fn dim_for(joints: usize) -> usize {
        3 * joints + 3
    }

    pub fn dim(&self) -> usize {
        Self::dim_for(self.joint_rotations.len())
    }

    /// Flat layout: `[r0.x, r0.y, r0.z, r1.x, ..., forward, lateral, angular]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        for r in &self.joint_rotations {
            v.extend_from_slice(r.as_slice());
        }
        v.extend([self.root.forward, self.root.lateral, self.root.angular]);
        v
    }

    pub fn from_slice(values: &[f64]) -> Result<Self, KinematicsError> {
        if values.len() < 6 || values.len() % 3 != 0 {
            return Err(KinematicsError::Dimension {
                expected: values.len().max(6).next_multiple_of(3),
                actual: values.len(),
            });
        }
        let joints = values.len() / 3 - 1;
        let joint_rotations = (0..joints)
            .map(|j| Vector3::new(values[3 * j], values[3 * j + 1], values[3 * j + 2]))
            .collect();
        let n = values.len();
        Ok(Self {
            joint_rotations,
            root: RootDelta {
                forward: values[n - 3],
                lateral: values[n - 2],
                angular: values[n - 1],
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootState {
    pub position: Vector3<f64>,
    pub heading: f64,
}

impl Default for RootState {
    fn default() -> Self {
        Self {
            position: Vector3::zeros(),
            heading: 0.0,
        }
    }
}

impl RootState {
    pub fn advance(&self, d: &RootDelta) -> Self {
        let step = heading_rotation(self.heading) * Vector3::new(d.lateral, 0.0, d.forward);
        Self {
            position: self.position + step,
            heading: self.heading + d.angular,
        }
    }
}

fn check_dim(skeleton: &Skeleton, pose: &PoseVector) -> Result<(), KinematicsError> {
    if pose.joint_rotations.len() != skeleton.joint_count() {
        return Err(KinematicsError::Dimension {
            expected: PoseVector::dim_for(skeleton.joint_count()),
            actual: pose.dim(),
        });
    }
    Ok(())
}

/// World position of every joint.
pub fn forward_kinematics(
    skeleton: &Skeleton,
    pose: &PoseVector,
    root: &RootState,
) -> Result<Vec<Vector3<f64>>, KinematicsError> {
    check_dim(skeleton, pose)?;
    let n = skeleton.joint_count();
    let mut rot: Vec<Matrix3<f64>> = Vec::with_capacity(n);
    let mut pos: Vec<Vector3<f64>> = Vec::with_capacity(n);
    for (i, joint) in skeleton.joints().iter().enumerate() {
        let local = expmap_to_rotation(&pose.joint_rotations[i]);
        match joint.parent {
            None => {
                rot.push(heading_rotation(root.heading) * local);
                pos.push(root.position);
            }
            Some(p) => {
                let offset = Vector3::from(joint.offset);
                pos.push(pos[p] + rot[p] * offset);
                rot.push(rot[p] * local);
            }
        }
    }
    Ok(pos)
}

/// Converts a BVH clip into pose vectors plus the root state at frame 0.
pub fn clip_to_pose_sequence(
    skeleton: &Skeleton,
    clip: &MotionClip,
) -> Result<(Vec<PoseVector>, RootState), KinematicsError> {
    if clip.channel_count() != skeleton.channel_count() {
        return Err(KinematicsError::ClipMismatch(format!(
            "clip has {} channels, skeleton {}",
            clip.channel_count(),
            skeleton.channel_count()
        )));
    }
    let mut poses = Vec::with_capacity(clip.frame_count());
    let mut states: Vec<RootState> = Vec::with_capacity(clip.frame_count());
    for row in clip.frames() {
        let mut rotations = Vec::with_capacity(skeleton.joint_count());
        let mut state = RootState::default();
        for (j, joint) in skeleton.joints().iter().enumerate() {
            let base = skeleton.channel_offset(j);
            let mut position = Vector3::from(joint.offset);
            let mut angles = [0.0; 3];
            let mut k = 0;
            for (c, ch) in joint.channels.iter().enumerate() {
                match ch {
                    Channel::Position(a) => position[a.index()] += row[base + c],
                    Channel::Rotation(_) => {
                        angles[k] = row[base + c];
                        k += 1;
                    }
                }
            }
            let r = euler_to_matrix(joint.rotation_order(), angles);
            let local = if joint.parent.is_none() {
                let heading = heading_of(&r);
                state = RootState { position, heading };
                heading_rotation(-heading) * r
            } else {
                r
            };
            rotations.push(rotation_to_expmap(&local)?);
        }
        let root = match states.last() {
            None => RootDelta::default(),
            Some(prev) => {
                let local =
                    heading_rotation(-prev.heading) * (state.position - prev.position);
                RootDelta {
                    forward: local.z,
                    lateral: local.x,
                    angular: wrap_angle(state.heading - prev.heading),
                }
            }
        };
        states.push(state);
        poses.push(PoseVector {
            joint_rotations: rotations,
            root,
        });
    }
    let initial = states.first().copied().unwrap_or_default();
    Ok((poses, initial))
}

/// Root state for every frame. The delta stored in frame 0 is ignored;
/// frame t is reached from frame t-1 by the delta of frame t.
pub fn reintegrate_root(deltas: &[RootDelta], initial: &RootState) -> Vec<RootState> {
    let mut out = Vec::with_capacity(deltas.len());
    let mut state = *initial;
    for (t, d) in deltas.iter().enumerate() {
        if t > 0 {
            state = state.advance(d);
        }
        out.push(state);
    }
    out
}

/// Converts pose vectors back into a BVH clip. Inverse of
/// [`clip_to_pose_sequence`] up to Euler-angle branch choice.
pub fn pose_sequence_to_clip(
    skeleton: &Skeleton,
    poses: &[PoseVector],
    initial: &RootState,
    frame_time: f64,
) -> Result<MotionClip, KinematicsError> {
    for p in poses {
        check_dim(skeleton, p)?;
    }
    let deltas: Vec<RootDelta> = poses.iter().map(|p| p.root).collect();
    let states = reintegrate_root(&deltas, initial);
    let width = skeleton.channel_count();
    let mut data = Vec::with_capacity(poses.len() * width);
    for (pose, state) in poses.iter().zip(&states) {
        for (j, joint) in skeleton.joints().iter().enumerate() {
            let local = expmap_to_rotation(&pose.joint_rotations[j]);
            let r = if joint.parent.is_none() {
                heading_rotation(state.heading) * local
            } else {
                local
            };
            let angles = matrix_to_euler(joint.rotation_order(), &r);
            let mut k = 0;
            for ch in &joint.channels {
                match ch {
                    Channel::Position(a) => {
                        data.push(state.position[a.index()] - joint.offset[a.index()])
                    }
                    Channel::Rotation(_) => {
                        data.push(angles[k]);
                        k += 1;
                    }
                }
            }
        }
    }
    MotionClip::new(frame_time, width, data)
        .map_err(|e| KinematicsError::ClipMismatch(e.to_string()))
}

/// Reflects a rotation across the x = 0 plane.
pub fn reflect_expmap(v: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(v.x, -v.y, -v.z)
}

/// Swaps left and right, reflecting every rotation across the sagittal plane.
pub fn mirror_pose(pose: &PoseVector, map: &MirrorMap) -> Result<PoseVector, KinematicsError> {
    if map.joint_count() != pose.joint_rotations.len() {
        return Err(KinematicsError::Mirror(format!(
            "map covers {} joints, pose has {}",
            map.joint_count(),
            pose.joint_rotations.len()
        )));
    }
    let src = &pose.joint_rotations;
    let mut out = src.clone();
    for &(l, r) in map.joint_pairs() {
        out[l] = reflect_expmap(&src[r]);
        out[r] = reflect_expmap(&src[l]);
    }
    for &i in map.self_mirrored() {
        out[i] = reflect_expmap(&src[i]);
    }
    Ok(PoseVector {
        joint_rotations: out,
        root: RootDelta {
            forward: pose.root.forward,
            lateral: -pose.root.lateral,
            angular: -pose.root.angular,
        },
    })
}

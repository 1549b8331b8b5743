use regex::Regex;
use serde::{Deserialize, Serialize};

use super::KinematicsError;
use crate::bvh::Skeleton;

/// Left/right pairing of joints for lateral mirroring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MirrorMap {
    joint_pairs: Vec<(usize, usize)>,
    self_mirrored: Vec<usize>,
    joints: usize,
}

/// Name-based pairing rule: a joint whose name matches `left` is paired
/// with the joint named by replacing the match with `right`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MirrorConvention {
    pub left: String,
    pub right: String,
}

impl Default for MirrorConvention {
    fn default() -> Self {
        Self {
            left: "Left".into(),
            right: "Right".into(),
        }
    }
}

/// Explicit pairing by joint name, as read from a JSON override file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MirrorOverride {
    pub joint_pairs: Vec<(String, String)>,
    pub self_mirrored: Vec<String>,
}

fn err(m: impl Into<String>) -> KinematicsError {
    KinematicsError::Mirror(m.into())
}

impl MirrorMap {
    pub fn new(
        joints: usize,
        joint_pairs: Vec<(usize, usize)>,
        self_mirrored: Vec<usize>,
    ) -> Result<Self, KinematicsError> {
        let mut seen = vec![false; joints];
        let all = joint_pairs
            .iter()
            .flat_map(|&(l, r)| [l, r])
            .chain(self_mirrored.iter().copied());
        for j in all {
            if j >= joints {
                return Err(err(format!("joint index {j} out of range ({joints} joints)")));
            }
            if seen[j] {
                return Err(err(format!("joint {j} appears more than once")));
            }
            seen[j] = true;
        }
        if let Some(j) = seen.iter().position(|s| !s) {
            return Err(err(format!("joint {j} is neither paired nor self-mirrored")));
        }
        Ok(Self {
            joint_pairs,
            self_mirrored,
            joints,
        })
    }

    pub fn from_convention(
        skeleton: &Skeleton,
        convention: &MirrorConvention,
    ) -> Result<Self, KinematicsError> {
        let left = Regex::new(&convention.left).map_err(|e| err(e.to_string()))?;
        let right = Regex::new(&regex::escape(&convention.right)).map_err(|e| err(e.to_string()))?;
        let joints = skeleton.joints();
        let mut pairs = Vec::new();
        let mut paired = vec![false; joints.len()];
        for (i, j) in joints.iter().enumerate() {
            if left.is_match(&j.name) {
                let other = left.replace(&j.name, convention.right.as_str());
                let k = skeleton
                    .find(&other)
                    .ok_or_else(|| err(format!("{:?} has no counterpart {other:?}", j.name)))?;
                if paired[i] || paired[k] {
                    return Err(err(format!("{:?} paired twice", j.name)));
                }
                paired[i] = true;
                paired[k] = true;
                pairs.push((i, k));
            }
        }
        let mut self_mirrored = Vec::new();
        for (i, j) in joints.iter().enumerate() {
            if paired[i] {
                continue;
            }
            if right.is_match(&j.name) {
                return Err(err(format!("{:?} has no left counterpart", j.name)));
            }
            self_mirrored.push(i);
        }
        Self::new(joints.len(), pairs, self_mirrored)
    }

    pub fn from_override(skeleton: &Skeleton, o: &MirrorOverride) -> Result<Self, KinematicsError> {
        let idx = |n: &str| {
            skeleton
                .find(n)
                .ok_or_else(|| err(format!("unknown joint {n:?}")))
        };
        let pairs = o
            .joint_pairs
            .iter()
            .map(|(l, r)| Ok((idx(l)?, idx(r)?)))
            .collect::<Result<Vec<_>, KinematicsError>>()?;
        let selfs = o
            .self_mirrored
            .iter()
            .map(|n| idx(n))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(skeleton.joint_count(), pairs, selfs)
    }

    pub fn from_override_json(skeleton: &Skeleton, json: &str) -> Result<Self, KinematicsError> {
        let o: MirrorOverride = serde_json::from_str(json).map_err(|e| err(e.to_string()))?;
        Self::from_override(skeleton, &o)
    }

    pub fn joint_pairs(&self) -> &[(usize, usize)] {
        &self.joint_pairs
    }

    pub fn self_mirrored(&self) -> &[usize] {
        &self.self_mirrored
    }

    pub fn joint_count(&self) -> usize {
        self.joints
    }

    /// The joint that `j` maps to under mirroring.
    pub fn counterpart(&self, j: usize) -> usize {
        for &(l, r) in &self.joint_pairs {
            if l == j {
                return r;
            }
            if r == j {
                return l;
            }
        }
        j
    }
}

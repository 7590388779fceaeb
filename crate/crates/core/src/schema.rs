//! Keypoint vocabularies and the head / upper / lower grouping.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BODY_JOINTS: [&str; 17] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

pub const PART_NAMES: [&str; 5] = ["face", "left_hand", "right_hand", "left_foot", "right_foot"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Body,
    Wholebody,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "body" => Ok(Mode::Body),
            "wholebody" => Ok(Mode::Wholebody),
            other => Err(Error::Schema(format!(
                "unknown mode `{other}` (expected `body` or `wholebody`)"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Body => "body",
            Mode::Wholebody => "wholebody",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Head = 0,
    Upper = 1,
    Lower = 2,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Head, Group::Upper, Group::Lower];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Head => "head",
            Group::Upper => "upper",
            Group::Lower => "lower",
        }
    }
}

/// Dense keypoints per region: `hand` and `foot` are per side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseLayout {
    pub face: usize,
    pub hand: usize,
    pub foot: usize,
}

impl DenseLayout {
    /// 68 face, 21 per hand, 3 per foot: 116 dense keypoints.
    pub const FULL: DenseLayout = DenseLayout {
        face: 68,
        hand: 21,
        foot: 3,
    };

    /// Reduced layout used for CPU-sized whole-body training (42 dense).
    pub const DESK: DenseLayout = DenseLayout {
        face: 20,
        hand: 8,
        foot: 3,
    };

    pub fn total(&self) -> usize {
        self.face + 2 * self.hand + 2 * self.foot
    }
}

impl Default for DenseLayout {
    fn default() -> Self {
        Self::DESK
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSchema {
    pub mode: Mode,
    pub sparse_names: Vec<String>,
    pub dense_names: Vec<String>,
    pub part_names: Vec<String>,
    /// Group of every keypoint, sparse first then dense.
    pub group_of: Vec<Group>,
    pub part_group: Vec<Group>,
    /// Owning part index of each dense keypoint.
    pub dense_owner: Vec<usize>,
}

/// Schema for `mode` with the full 133-keypoint whole-body layout.
pub fn build_schema(mode: &str) -> Result<KeypointSchema> {
    Ok(KeypointSchema::new(mode.parse()?, DenseLayout::FULL))
}

fn sparse_group(joint: usize) -> Group {
    match joint {
        0..=4 => Group::Head,
        5..=10 => Group::Upper,
        _ => Group::Lower,
    }
}

impl KeypointSchema {
    pub fn new(mode: Mode, layout: DenseLayout) -> Self {
        let sparse_names: Vec<String> = BODY_JOINTS.iter().map(|s| s.to_string()).collect();
        let mut group_of: Vec<Group> = (0..BODY_JOINTS.len()).map(sparse_group).collect();
        let (mut dense_names, mut dense_owner, mut part_names, mut part_group) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());

        if mode == Mode::Wholebody {
            part_names = PART_NAMES.iter().map(|s| s.to_string()).collect();
            part_group = vec![Group::Head, Group::Upper, Group::Upper, Group::Lower, Group::Lower];
            // feet, face, hands: the usual whole-body ordering
            let regions = [
                (3usize, layout.foot),
                (4, layout.foot),
                (0, layout.face),
                (1, layout.hand),
                (2, layout.hand),
            ];
            for (part, count) in regions {
                for i in 0..count {
                    dense_names.push(format!("{}_{i}", PART_NAMES[part]));
                    dense_owner.push(part);
                    group_of.push(part_group[part]);
                }
            }
        }

        Self {
            mode,
            sparse_names,
            dense_names,
            part_names,
            group_of,
            part_group,
            dense_owner,
        }
    }

    pub fn num_sparse(&self) -> usize {
        self.sparse_names.len()
    }

    pub fn num_dense(&self) -> usize {
        self.dense_names.len()
    }

    pub fn num_parts(&self) -> usize {
        self.part_names.len()
    }

    pub fn num_keypoints(&self) -> usize {
        self.num_sparse() + self.num_dense()
    }

    pub fn sparse_in(&self, g: Group) -> Vec<usize> {
        (0..self.num_sparse()).filter(|&i| self.group_of[i] == g).collect()
    }

    /// Dense indices (0-based within the dense list) owned by group `g`.
    pub fn dense_in(&self, g: Group) -> Vec<usize> {
        let ns = self.num_sparse();
        (0..self.num_dense()).filter(|&i| self.group_of[ns + i] == g).collect()
    }

    pub fn parts_in(&self, g: Group) -> Vec<usize> {
        (0..self.num_parts()).filter(|&i| self.part_group[i] == g).collect()
    }

    /// Global keypoint indices of group `g`.
    pub fn keypoints_in(&self, g: Group) -> Vec<usize> {
        (0..self.num_keypoints()).filter(|&i| self.group_of[i] == g).collect()
    }

    pub fn keypoint_name(&self, i: usize) -> &str {
        let ns = self.num_sparse();
        if i < ns {
            &self.sparse_names[i]
        } else {
            &self.dense_names[i - ns]
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.group_of.len() != self.num_keypoints() {
            return Err(Error::Schema(format!(
                "{} group entries for {} keypoints",
                self.group_of.len(),
                self.num_keypoints()
            )));
        }
        if self.dense_owner.len() != self.num_dense() || self.part_group.len() != self.num_parts() {
            return Err(Error::Schema("owner or part tables have wrong length".into()));
        }
        let ns = self.num_sparse();
        for (d, &owner) in self.dense_owner.iter().enumerate() {
            if owner >= self.num_parts() {
                return Err(Error::Schema(format!("dense keypoint {d} has no owning part")));
            }
            if self.part_group[owner] != self.group_of[ns + d] {
                return Err(Error::Schema(format!(
                    "dense keypoint {d} is grouped apart from its owner"
                )));
            }
        }
        for g in Group::ALL {
            if !self.group_of.contains(&g) {
                return Err(Error::Schema(format!("group {} is empty", g.name())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn body_has_seventeen_sparse_only() {
        let s = build_schema("body").unwrap();
        assert_eq!((s.num_sparse(), s.num_dense(), s.num_parts()), (17, 0, 0));
        s.check().unwrap();
    }

    #[test]
    fn wholebody_has_133_and_five_parts() {
        let s = build_schema("wholebody").unwrap();
        assert_eq!(s.num_sparse(), 17);
        assert_eq!(s.num_dense(), 116);
        assert_eq!(s.num_keypoints(), 133);
        assert_eq!(s.num_parts(), 5);
        s.check().unwrap();
    }

    #[test]
    fn unknown_mode_is_rejected() {
        let err = build_schema("hands").unwrap_err().to_string();
        assert!(err.contains("hands"));
    }

    #[test]
    fn groups_partition_the_keypoints() {
        for mode in ["body", "wholebody"] {
            let s = build_schema(mode).unwrap();
            let mut all: Vec<usize> = Group::ALL.iter().flat_map(|&g| s.keypoints_in(g)).collect();
            all.sort_unstable();
            assert_eq!(all, (0..s.num_keypoints()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn face_dense_tokens_belong_to_head() {
        let s = build_schema("wholebody").unwrap();
        assert_eq!(s.dense_in(Group::Head).len(), 68);
        assert_eq!(s.dense_in(Group::Lower).len(), 6);
        assert_eq!(s.dense_in(Group::Upper).len(), 42);
        for d in s.dense_in(Group::Head) {
            assert_eq!(s.part_names[s.dense_owner[d]], "face");
        }
    }

    #[test]
    fn sparse_group_table() {
        let s = build_schema("body").unwrap();
        assert_eq!(s.sparse_in(Group::Head), vec![0, 1, 2, 3, 4]);
        assert_eq!(s.sparse_in(Group::Upper), vec![5, 6, 7, 8, 9, 10]);
        assert_eq!(s.sparse_in(Group::Lower), vec![11, 12, 13, 14, 15, 16]);
    }

    #[test]
    fn construction_is_deterministic() {
        assert_eq!(build_schema("wholebody").unwrap(), build_schema("wholebody").unwrap());
    }
}

//! Interaction sequences: articulated human poses, rigid object poses, and
//! per-body-region contact groups.

mod contacts;
mod format;
mod skeleton;
mod synth;

pub use contacts::{group_contacts, nearest_joint_contacts, sample_contact_subsets};
pub use format::{deserialize_sequence, read_dataset, serialize_sequence, write_dataset};
pub use skeleton::Skeleton;
pub use synth::{generate_dataset, generate_synthetic, ContactMode, SynthConfig};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidTransform, Rotation6D, Vec3};

/// One frame of the articulated human: joint positions and per-joint local
/// rotations (relative to the parent joint).
#[derive(Clone, Debug, PartialEq)]
pub struct HumanPose {
    pub joint_positions: Vec<Vec3>,
    pub joint_rotations: Vec<Rotation6D>,
}

impl HumanPose {
    pub fn num_joints(&self) -> usize {
        self.joint_positions.len()
    }

    /// Joints-major, position before rotation: `[p_j (3), rot6d_j (6)]` per joint.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for (p, r) in self.joint_positions.iter().zip(&self.joint_rotations) {
            out.extend_from_slice(p.as_slice());
            out.extend_from_slice(&r.to_array());
        }
    }

    pub fn from_flat(v: &[f64], joints: usize) -> Self {
        assert_eq!(v.len(), joints * 9, "flattened human pose length");
        let joint_positions = (0..joints).map(|j| Vec3::new(v[9 * j], v[9 * j + 1], v[9 * j + 2])).collect();
        let joint_rotations = (0..joints).map(|j| Rotation6D::from_slice(&v[9 * j + 3..9 * j + 9])).collect();
        Self { joint_positions, joint_rotations }
    }
}

/// Object centroid and rotation relative to the rest-pose point cloud.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectPose {
    pub centroid: Vec3,
    pub rotation: Rotation6D,
}

impl ObjectPose {
    pub const DIM: usize = 9;

    pub fn from_transform(t: &RigidTransform) -> Self {
        let r = t.rotation();
        Self {
            centroid: *t.translation(),
            rotation: Rotation6D::new(r.column(0).into_owned(), r.column(1).into_owned()),
        }
    }

    pub fn transform(&self) -> Result<RigidTransform> {
        RigidTransform::from_rot6d(&self.rotation, self.centroid)
    }

    /// `[centroid (3), rot6d (6)]`
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.centroid.as_slice());
        out.extend_from_slice(&self.rotation.to_array());
    }

    pub fn from_flat(v: &[f64]) -> Self {
        assert!(v.len() >= 9, "flattened object pose length");
        Self { centroid: Vec3::new(v[0], v[1], v[2]), rotation: Rotation6D::from_slice(&v[3..9]) }
    }
}

/// Contact groups of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ContactSet {
    /// Rest-cloud indices of the contact points in each body region.
    pub groups: Vec<Vec<usize>>,
    /// `N×k` sampled positions; zero rows where the group is empty.
    pub subsets: Vec<Vec<Vec3>>,
    pub mask: Vec<bool>,
}

/// Sequence-level contact description. Group membership and the sampled
/// subsets are fixed for the whole sequence; `mask` switches regions on and
/// off per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ContactTrack {
    pub group_sizes: Vec<usize>,
    /// Rest-cloud indices sampled from each group; empty for empty groups.
    pub subset_indices: Vec<Vec<usize>>,
    /// `frames × N`
    pub mask: Vec<Vec<bool>>,
}

impl ContactTrack {
    pub fn num_groups(&self) -> usize {
        self.group_sizes.len()
    }

    pub fn active_frames(&self) -> usize {
        self.mask.iter().filter(|m| m.iter().any(|&b| b)).count()
    }
}

/// Predicted contact trajectories over the forecast horizon, attached to
/// sampled sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedContacts {
    /// `future_len × (N·k)` from the human branch.
    pub contacts_human: Vec<Vec<Vec3>>,
    /// `future_len × (N·k)` from the rigid map of the predicted object poses.
    pub contacts_object: Vec<Vec<Vec3>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HoiSequence {
    pub past_len: usize,
    pub future_len: usize,
    pub frame_rate: f64,
    pub human: Vec<HumanPose>,
    pub object: Vec<ObjectPose>,
    pub rest_cloud: PointCloud,
    /// Contact point indices into `rest_cloud`, concatenated group by group.
    pub rest_contact_indices: Vec<usize>,
    pub contact: ContactTrack,
    pub prediction: Option<PredictedContacts>,
}

impl HoiSequence {
    pub fn len(&self) -> usize {
        self.past_len + self.future_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_joints(&self) -> usize {
        self.human.first().map_or(0, HumanPose::num_joints)
    }

    pub fn num_groups(&self) -> usize {
        self.contact.num_groups()
    }

    /// Rest-cloud indices of every group.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::with_capacity(self.contact.group_sizes.len());
        let mut off = 0;
        for &n in &self.contact.group_sizes {
            out.push(self.rest_contact_indices[off..off + n].to_vec());
            off += n;
        }
        out
    }

    /// Rest-pose positions of the sampled contact points, `N·k` rows,
    /// zero-filled for empty groups.
    pub fn rest_contacts(&self, k: usize) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(self.num_groups() * k);
        for subset in &self.contact.subset_indices {
            if subset.is_empty() {
                out.extend(std::iter::repeat_n(Vec3::zeros(), k));
            } else {
                out.extend(subset.iter().map(|&i| self.rest_cloud.points()[i]));
            }
        }
        out
    }

    /// Ground-truth contact positions at `frame`, `N·k` rows; rows of inactive
    /// groups are zero.
    pub fn contact_positions(&self, frame: usize, k: usize) -> Result<Vec<Vec3>> {
        let t = self.object[frame].transform()?;
        let rest = self.rest_contacts(k);
        let mask = &self.contact.mask[frame];
        Ok(rest
            .iter()
            .enumerate()
            .map(|(i, p)| if mask[i / k] { t.apply(p) } else { Vec3::zeros() })
            .collect())
    }

    pub fn contact_set(&self, frame: usize, k: usize) -> Result<ContactSet> {
        let mask = self.contact.mask[frame].clone();
        let positions = self.contact_positions(frame, k)?;
        let groups = self
            .groups()
            .into_iter()
            .zip(&mask)
            .map(|(g, &m)| if m { g } else { Vec::new() })
            .collect();
        let subsets = positions.chunks(k).map(<[Vec3]>::to_vec).collect();
        Ok(ContactSet { groups, subsets, mask })
    }

    /// Width of the sampled subsets, or `None` when every group is empty.
    pub fn subset_size(&self) -> Option<usize> {
        self.contact.subset_indices.iter().map(Vec::len).find(|&n| n > 0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Error::Parse { line: 0, field: field.into(), message };
        let n = self.len();
        if self.past_len == 0 || self.future_len == 0 {
            return Err(bad("past_len", "past_len and future_len must be positive".into()));
        }
        if !(self.frame_rate > 0.0) {
            return Err(bad("frame_rate", format!("must be positive, got {}", self.frame_rate)));
        }
        if self.human.len() != n {
            return Err(bad("human", format!("expected {n} frames, got {}", self.human.len())));
        }
        if self.object.len() != n {
            return Err(bad("object", format!("expected {n} frames, got {}", self.object.len())));
        }
        if self.contact.mask.len() != n {
            return Err(bad("contact.mask", format!("expected {n} frames, got {}", self.contact.mask.len())));
        }
        let joints = self.num_joints();
        if joints == 0 {
            return Err(bad("human.positions", "no joints".into()));
        }
        for (f, h) in self.human.iter().enumerate() {
            if h.joint_positions.len() != joints || h.joint_rotations.len() != joints {
                return Err(bad("human", format!("frame {f} has inconsistent joint count")));
            }
        }
        for (f, o) in self.object.iter().enumerate() {
            o.rotation.to_matrix().map_err(|e| bad("object.rotation6d", format!("frame {f}: {e}")))?;
        }
        let groups = self.num_groups();
        if self.contact.subset_indices.len() != groups {
            return Err(bad("contact.subset_indices", format!("expected {groups} groups")));
        }
        let total: usize = self.contact.group_sizes.iter().sum();
        if total != self.rest_contact_indices.len() {
            return Err(bad("contact.group_sizes", "sizes do not sum to rest_contact_indices length".into()));
        }
        let m = self.rest_cloud.len();
        if let Some(&i) = self.rest_contact_indices.iter().find(|&&i| i >= m) {
            return Err(bad("rest_contact_indices", format!("index {i} out of range for {m} points")));
        }
        let k = self.subset_size();
        for (i, (g, s)) in self.groups().iter().zip(&self.contact.subset_indices).enumerate() {
            if g.is_empty() != s.is_empty() {
                return Err(bad("contact.subset_indices", format!("group {i}: subset/group emptiness differs")));
            }
            if !s.is_empty() && Some(s.len()) != k {
                return Err(bad("contact.subset_indices", format!("group {i}: ragged subset width")));
            }
            if let Some(x) = s.iter().find(|x| !g.contains(x)) {
                return Err(bad("contact.subset_indices", format!("group {i}: index {x} not in group")));
            }
        }
        for (f, row) in self.contact.mask.iter().enumerate() {
            if row.len() != groups {
                return Err(bad("contact.mask", format!("frame {f}: expected {groups} entries")));
            }
            if let Some(i) = (0..groups).find(|&i| row[i] && self.contact.group_sizes[i] == 0) {
                return Err(bad("contact.mask", format!("frame {f}: group {i} active but empty")));
            }
        }
        if let Some(p) = &self.prediction {
            let width = p.contacts_human.first().map_or(0, Vec::len);
            let width_ok = width % groups.max(1) == 0 && k.is_none_or(|k| width == groups * k);
            for (name, track) in [("contacts_human", &p.contacts_human), ("contacts_object", &p.contacts_object)] {
                if !width_ok || track.len() != self.future_len || track.iter().any(|r| r.len() != width) {
                    return Err(bad(name, format!("expected {} frames of equal width", self.future_len)));
                }
            }
        }
        Ok(())
    }
}

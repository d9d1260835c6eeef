use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec3};

/// Kinematic tree; joints are topologically ordered (parents precede
/// children).
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    names: Vec<&'static str>,
    parents: Vec<Option<usize>>,
    offsets: Vec<Vec3>,
    end_effector: usize,
}

// name, parent, rest offset from parent (meters, y up, right hand on -x)
const TEMPLATE: [(&str, Option<usize>, [f64; 3]); 21] = [
    ("pelvis", None, [0.0, 0.0, 0.0]),
    ("spine1", Some(0), [0.0, 0.10, 0.0]),
    ("spine2", Some(1), [0.0, 0.13, 0.0]),
    ("spine3", Some(2), [0.0, 0.13, 0.0]),
    ("right_collar", Some(3), [-0.07, 0.10, 0.0]),
    ("right_shoulder", Some(4), [-0.12, 0.02, 0.0]),
    ("right_elbow", Some(5), [-0.26, 0.0, 0.0]),
    ("right_wrist", Some(6), [-0.25, 0.0, 0.0]),
    ("right_hand", Some(7), [-0.08, 0.0, 0.0]),
    ("neck", Some(3), [0.0, 0.16, 0.0]),
    ("head", Some(9), [0.0, 0.10, 0.0]),
    ("left_collar", Some(3), [0.07, 0.10, 0.0]),
    ("left_shoulder", Some(11), [0.12, 0.02, 0.0]),
    ("left_elbow", Some(12), [0.26, 0.0, 0.0]),
    ("left_wrist", Some(13), [0.25, 0.0, 0.0]),
    ("left_hip", Some(0), [0.09, -0.08, 0.0]),
    ("left_knee", Some(15), [0.0, -0.40, 0.0]),
    ("left_ankle", Some(16), [0.0, -0.40, 0.0]),
    ("right_hip", Some(0), [-0.09, -0.08, 0.0]),
    ("right_knee", Some(18), [0.0, -0.40, 0.0]),
    ("right_ankle", Some(19), [0.0, -0.40, 0.0]),
];

const RIGHT_HAND: usize = 8;

impl Skeleton {
    pub const MAX_JOINTS: usize = TEMPLATE.len();

    /// The first `joints` joints of the built-in 21-joint body. The right
    /// hand is the grasping end effector when present, otherwise the last
    /// joint.
    pub fn template(joints: usize) -> Result<Self> {
        if !(2..=Self::MAX_JOINTS).contains(&joints) {
            return Err(Error::Config(format!("skeleton supports 2..={} joints, got {joints}", Self::MAX_JOINTS)));
        }
        let t = &TEMPLATE[..joints];
        Ok(Self {
            names: t.iter().map(|j| j.0).collect(),
            parents: t.iter().map(|j| j.1).collect(),
            offsets: t.iter().map(|j| Vec3::from(j.2)).collect(),
            end_effector: if joints > RIGHT_HAND { RIGHT_HAND } else { joints - 1 },
        })
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn name(&self, j: usize) -> &'static str {
        self.names[j]
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parents[j]
    }

    pub fn offset(&self, j: usize) -> &Vec3 {
        &self.offsets[j]
    }

    pub fn end_effector(&self) -> usize {
        self.end_effector
    }

    /// `(parent, child)` pairs, one per non-root joint.
    pub fn bones(&self) -> Vec<(usize, usize)> {
        self.parents.iter().enumerate().filter_map(|(c, p)| p.map(|p| (p, c))).collect()
    }

    /// Forward kinematics from local joint rotations and the root position.
    /// Returns `(global positions, global rotations)`.
    pub fn forward_kinematics(&self, root: &Vec3, local: &[Mat3]) -> (Vec<Vec3>, Vec<Mat3>) {
        assert_eq!(local.len(), self.num_joints(), "one local rotation per joint");
        let mut pos = Vec::with_capacity(local.len());
        let mut rot: Vec<Mat3> = Vec::with_capacity(local.len());
        for (j, r) in local.iter().enumerate() {
            match self.parents[j] {
                None => {
                    pos.push(*root);
                    rot.push(*r);
                }
                Some(p) => {
                    pos.push(pos[p] + rot[p] * self.offsets[j]);
                    rot.push(rot[p] * r);
                }
            }
        }
        (pos, rot)
    }
}

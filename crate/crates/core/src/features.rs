//! Tensor layouts fed to the networks.
//!
//! Per frame the human state is `[pose (9J), contacts (3Nk)]`: joints-major
//! `[p (3), rot6d (6)]` followed by the sampled contact points group-major,
//! sample-major, `xyz`. The object state is `[centroid (3), rot6d (6)]`.

use hoi_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::{HoiSequence, ObjectPose};
use crate::error::{Error, Result};
use crate::geometry::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub joints: usize,
    pub groups: usize,
    pub subset_size: usize,
    pub past_len: usize,
    pub future_len: usize,
}

impl Dims {
    pub fn frames(&self) -> usize {
        self.past_len + self.future_len
    }

    pub fn dim_h(&self) -> usize {
        9 * self.joints
    }

    pub fn dim_c(&self) -> usize {
        3 * self.groups * self.subset_size
    }

    pub fn human_state(&self) -> usize {
        self.dim_h() + self.dim_c()
    }

    pub fn contact_points(&self) -> usize {
        self.groups * self.subset_size
    }

    /// Human encoder input per past frame: `[pose, object pose, contacts, mask]`.
    pub fn human_cond(&self) -> usize {
        self.dim_h() + ObjectPose::DIM + self.dim_c() + self.groups
    }

    /// Object encoder input per past frame: `[pose, object pose]`.
    pub fn object_cond(&self) -> usize {
        self.dim_h() + ObjectPose::DIM
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints == 0 || self.groups == 0 || self.subset_size == 0 || self.past_len == 0 || self.future_len == 0 {
            return Err(Error::Config(format!("all dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Checks that `seq` fits these dimensions.
    pub fn check(&self, seq: &HoiSequence) -> Result<()> {
        let pairs = [
            ("joints", self.joints, seq.num_joints()),
            ("contact groups", self.groups, seq.num_groups()),
            ("past_len", self.past_len, seq.past_len),
            ("future_len", self.future_len, seq.future_len),
        ];
        for (what, expect, got) in pairs {
            if expect != got {
                return Err(Error::ShapeMismatch { context: what, expected: expect.to_string(), got: got.to_string() });
            }
        }
        if let Some(k) = seq.subset_size() {
            if k != self.subset_size {
                return Err(Error::shape("contact subset size", self.subset_size, k));
            }
        }
        Ok(())
    }
}

/// Network-ready tensors for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    /// `T × (dim_h + dim_c)`; inactive contact groups are zero.
    pub human_x0: Tensor,
    /// Same shape as `human_x0`; 1 for counted entries, 0 for inactive
    /// contact groups.
    pub human_mask: Tensor,
    /// `T × 9`
    pub object_x0: Tensor,
    /// `T_p × human_cond`
    pub human_cond: Tensor,
    /// `T_p × object_cond`
    pub object_cond: Tensor,
    /// `(T_p·N) × 3k`, rows ordered frame-major then group.
    pub contact_hist: Tensor,
    /// One flag per `contact_hist` row.
    pub contact_hist_mask: Vec<bool>,
    /// `T × dim_c`, 1 where the group is active.
    pub contact_mask: Tensor,
    /// Rest-pose contact points, `N·k` entries.
    pub rest_contacts: Vec<Vec3>,
    /// `M × 3`
    pub rest_cloud: Tensor,
}

pub fn prepare(seq: &HoiSequence, dims: &Dims) -> Result<Prepared> {
    dims.check(seq)?;
    let (t_all, tp, k, n) = (dims.frames(), dims.past_len, dims.subset_size, dims.groups);
    let (dh, dc) = (dims.dim_h(), dims.dim_c());

    let mut human_x0 = Tensor::zeros(t_all, dh + dc);
    let mut human_mask = Tensor::filled(t_all, dh + dc, 1.0);
    let mut object_x0 = Tensor::zeros(t_all, ObjectPose::DIM);
    let mut contact_mask = Tensor::zeros(t_all, dc);
    let mut contacts = Vec::with_capacity(t_all);
    for f in 0..t_all {
        let mut row = Vec::with_capacity(dh + dc);
        seq.human[f].flatten_into(&mut row);
        let c = seq.contact_positions(f, k)?;
        for p in &c {
            row.extend_from_slice(p.as_slice());
        }
        human_x0.row_mut(f).copy_from_slice(&row);
        let mut o = Vec::with_capacity(ObjectPose::DIM);
        seq.object[f].flatten_into(&mut o);
        object_x0.row_mut(f).copy_from_slice(&o);
        for (g, &active) in seq.contact.mask[f].iter().enumerate() {
            let v = if active { 1.0 } else { 0.0 };
            for j in 3 * k * g..3 * k * (g + 1) {
                contact_mask.set(f, j, v);
                human_mask.set(f, dh + j, v);
            }
        }
        contacts.push(c);
    }

    let mut human_cond = Tensor::zeros(tp, dims.human_cond());
    let mut object_cond = Tensor::zeros(tp, dims.object_cond());
    let mut contact_hist = Tensor::zeros(tp * n, 3 * k);
    let mut contact_hist_mask = Vec::with_capacity(tp * n);
    for f in 0..tp {
        let mut row = human_x0.row(f)[..dh].to_vec();
        row.extend_from_slice(object_x0.row(f));
        object_cond.row_mut(f).copy_from_slice(&row);
        row.extend_from_slice(&human_x0.row(f)[dh..]);
        row.extend(seq.contact.mask[f].iter().map(|&b| if b { 1.0 } else { 0.0 }));
        human_cond.row_mut(f).copy_from_slice(&row);
        for g in 0..n {
            let r = f * n + g;
            for (s, p) in contacts[f][g * k..(g + 1) * k].iter().enumerate() {
                for c in 0..3 {
                    contact_hist.set(r, 3 * s + c, p[c]);
                }
            }
            contact_hist_mask.push(seq.contact.mask[f][g]);
        }
    }

    let cloud = seq.rest_cloud.points();
    let mut rest_cloud = Tensor::zeros(cloud.len(), 3);
    for (i, p) in cloud.iter().enumerate() {
        rest_cloud.row_mut(i).copy_from_slice(p.as_slice());
    }
    Ok(Prepared {
        human_x0,
        human_mask,
        object_x0,
        human_cond,
        object_cond,
        contact_hist,
        contact_hist_mask,
        contact_mask,
        rest_contacts: seq.rest_contacts(k),
        rest_cloud,
    })
}

/// Overwrites the first `past` rows of `x` with those of `clean`.
pub fn clamp_past(x: &mut Tensor, clean: &Tensor, past: usize) {
    for r in 0..past {
        x.row_mut(r).copy_from_slice(clean.row(r));
    }
}

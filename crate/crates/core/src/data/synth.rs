//! Procedural interaction sequences: a skeleton driven by smooth keyframe
//! splines picks up a rigid object with its end effector, carries it for a
//! contact window, and releases it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::contacts::{group_contacts, nearest_joint_contacts, sample_contact_subsets};
use super::skeleton::Skeleton;
use super::{ContactTrack, HoiSequence, HumanPose, ObjectPose};
use crate::error::{Error, Result};
use crate::geometry::{axis_angle, exp_map, matrix_to_rot6d, random_rotation, Mat3, PointCloud, RigidTransform, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContactMode {
    /// Object surface points within the grasp radius of the end effector.
    Surface,
    /// Joints within the grasp radius of the object, each paired with its
    /// nearest object point.
    NearestJoints,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub joints: usize,
    pub past_len: usize,
    pub future_len: usize,
    pub frame_rate: f64,
    pub object_points: usize,
    pub subset_size: usize,
    /// First frame of the contact window.
    pub contact_start: usize,
    /// Window length in frames; zero disables contact entirely.
    pub contact_len: usize,
    pub grasp_radius: f64,
    pub keyframes: usize,
    pub contact_mode: ContactMode,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            joints: 21,
            past_len: 10,
            future_len: 10,
            frame_rate: 30.0,
            object_points: 64,
            subset_size: 4,
            contact_start: 4,
            contact_len: 12,
            grasp_radius: 0.08,
            keyframes: 4,
            contact_mode: ContactMode::Surface,
        }
    }
}

impl SynthConfig {
    pub fn total_len(&self) -> usize {
        self.past_len + self.future_len
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.past_len == 0 || self.future_len == 0 {
            return err(format!("past_len and future_len must be positive ({}, {})", self.past_len, self.future_len));
        }
        if !(2..=Skeleton::MAX_JOINTS).contains(&self.joints) {
            return err(format!("joints must be in 2..={}", Skeleton::MAX_JOINTS));
        }
        if self.object_points == 0 {
            return err("object_points must be positive".into());
        }
        if self.subset_size == 0 {
            return err("subset_size must be positive".into());
        }
        if !(self.frame_rate > 0.0) {
            return err("frame_rate must be positive".into());
        }
        if self.keyframes < 2 {
            return err("keyframes must be at least 2".into());
        }
        if !(self.grasp_radius > 0.0) {
            return err("grasp_radius must be positive".into());
        }
        if self.contact_len > 0 && self.contact_start + self.contact_len > self.total_len() {
            return err(format!(
                "contact window {}..{} exceeds sequence length {}",
                self.contact_start,
                self.contact_start + self.contact_len,
                self.total_len()
            ));
        }
        Ok(())
    }
}

/// Uniform Catmull-Rom interpolation through `keys` sampled at `frames`
/// evenly spaced points (first and last frames hit the end keys).
fn catmull_rom(keys: &[Vec3], frames: usize) -> Vec<Vec3> {
    let n = keys.len();
    let at = |i: isize| keys[i.clamp(0, n as isize - 1) as usize];
    (0..frames)
        .map(|f| {
            let s = if frames > 1 { f as f64 * (n - 1) as f64 / (frames - 1) as f64 } else { 0.0 };
            let i = (s.floor() as isize).min(n as isize - 2);
            let u = s - i as f64;
            let (p0, p1, p2, p3) = (at(i - 1), at(i), at(i + 1), at(i + 2));
            let u2 = u * u;
            let u3 = u2 * u;
            (p1 * 2.0 + (p2 - p0) * u + (p0 * 2.0 - p1 * 5.0 + p2 * 4.0 - p3) * u2 + (p1 * 3.0 - p0 - p2 * 3.0 + p3) * u3)
                * 0.5
        })
        .collect()
}

fn joint_prior(name: &str) -> (Vec3, f64) {
    match name {
        "right_shoulder" => (Vec3::new(0.0, 0.6, 1.0), 0.35),
        "left_shoulder" => (Vec3::new(0.0, -0.6, -1.0), 0.35),
        "right_elbow" => (Vec3::new(0.0, 0.4, 0.0), 0.35),
        "left_elbow" => (Vec3::new(0.0, -0.4, 0.0), 0.35),
        "right_wrist" | "left_wrist" | "right_hand" => (Vec3::zeros(), 0.3),
        n if n.contains("hip") || n.contains("knee") || n.contains("ankle") => (Vec3::zeros(), 0.25),
        n if n.starts_with("spine") => (Vec3::zeros(), 0.1),
        _ => (Vec3::zeros(), 0.15),
    }
}

fn sample_surface<R: Rng>(rng: &mut R, points: usize) -> Vec<Vec3> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let pts: Vec<Vec3> = match rng.random_range(0..3) {
        0 => {
            let h = Vec3::new(rng.random_range(0.05..0.2), rng.random_range(0.05..0.2), rng.random_range(0.05..0.2));
            let areas = [h.y * h.z, h.x * h.z, h.x * h.y];
            let total: f64 = areas.iter().sum();
            (0..points)
                .map(|_| {
                    let mut pick = rng.random_range(0.0..total);
                    let mut axis = 2;
                    for (a, area) in areas.iter().enumerate() {
                        if pick < *area {
                            axis = a;
                            break;
                        }
                        pick -= area;
                    }
                    let mut p = Vec3::new(
                        rng.random_range(-h.x..h.x),
                        rng.random_range(-h.y..h.y),
                        rng.random_range(-h.z..h.z),
                    );
                    p[axis] = if rng.random::<bool>() { h[axis] } else { -h[axis] };
                    p
                })
                .collect()
        }
        1 => {
            let half_len = rng.random_range(0.1..0.25);
            let radius = rng.random_range(0.02..0.04);
            (0..points)
                .map(|_| {
                    let th = rng.random_range(0.0..std::f64::consts::TAU);
                    Vec3::new(rng.random_range(-half_len..half_len), radius * th.cos(), radius * th.sin())
                })
                .collect()
        }
        _ => {
            let radius = rng.random_range(0.06..0.15);
            (0..points)
                .map(|_| loop {
                    let v = Vec3::from_fn(|_, _| normal.sample(rng));
                    let n = v.norm();
                    if n > 1e-9 {
                        break v * (radius / n);
                    }
                })
                .collect()
        }
    };
    let c = pts.iter().sum::<Vec3>() / pts.len() as f64;
    pts.into_iter().map(|p| p - c).collect()
}

/// Generates one sequence. Ground-truth contacts satisfy `C = R·p + L`
/// exactly: contact points are rest-cloud points carried by the object pose.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<HoiSequence> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let skel = Skeleton::template(config.joints)?;
    let frames = config.total_len();
    let keys = config.keyframes;

    let step = Normal::new(0.0, 0.12).expect("finite std");
    let mut root_keys = Vec::with_capacity(keys);
    let mut root = Vec3::new(rng.random_range(-0.2..0.2), 1.0 + rng.random_range(-0.03..0.03), rng.random_range(-0.2..0.2));
    for _ in 0..keys {
        root_keys.push(root);
        root += Vec3::new(step.sample(&mut rng), 0.2 * step.sample(&mut rng), step.sample(&mut rng));
    }
    let mut yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let mut yaw_keys = Vec::with_capacity(keys);
    for _ in 0..keys {
        yaw_keys.push(Vec3::new(0.0, yaw, 0.0));
        yaw += 0.3 * step.sample(&mut rng) / 0.12;
    }
    let joint_keys: Vec<Vec<Vec3>> = (0..config.joints)
        .map(|j| {
            let (mean, std) = joint_prior(skel.name(j));
            let d = Normal::new(0.0, std).expect("finite std");
            (0..keys).map(|_| mean + Vec3::from_fn(|_, _| d.sample(&mut rng))).collect()
        })
        .collect();

    let root_track = catmull_rom(&root_keys, frames);
    let yaw_track = catmull_rom(&yaw_keys, frames);
    let joint_tracks: Vec<Vec<Vec3>> = joint_keys.iter().map(|k| catmull_rom(k, frames)).collect();

    let mut human = Vec::with_capacity(frames);
    let mut ee_frames = Vec::with_capacity(frames);
    for f in 0..frames {
        let local: Vec<Mat3> = (0..config.joints)
            .map(|j| {
                let r = exp_map(&joint_tracks[j][f]);
                if j == 0 {
                    axis_angle(&Vec3::y(), yaw_track[f].y) * r
                } else {
                    r
                }
            })
            .collect();
        let (pos, rot) = skel.forward_kinematics(&root_track[f], &local);
        let ee = skel.end_effector();
        ee_frames.push(RigidTransform::new(rot[ee], pos[ee])?);
        let joint_rotations = local.iter().map(matrix_to_rot6d).collect::<Result<Vec<_>>>()?;
        human.push(HumanPose { joint_positions: pos, joint_rotations });
    }

    let rest = sample_surface(&mut rng, config.object_points);
    let r0 = random_rotation(&mut rng);
    let anchor = rng.random_range(0..rest.len());
    let subset_seed: u64 = rng.random();

    let window = config.contact_start..config.contact_start + config.contact_len;
    let grasp_frame = if config.contact_len > 0 { config.contact_start } else { 0 };
    let ee0 = ee_frames[grasp_frame];
    let l0 = if config.contact_len > 0 {
        ee0.translation() - r0 * rest[anchor]
    } else {
        ee0.translation() + Vec3::new(0.4, -0.2, 0.4)
    };
    let obj0 = RigidTransform::new(r0, l0)?;
    let world0: Vec<Vec3> = rest.iter().map(|p| obj0.apply(p)).collect();

    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); config.joints];
    if config.contact_len > 0 {
        let joints0 = &human[grasp_frame].joint_positions;
        groups = match config.contact_mode {
            ContactMode::Surface => {
                let contact_idx: Vec<usize> = (0..rest.len())
                    .filter(|&m| (world0[m] - ee0.translation()).norm() <= config.grasp_radius)
                    .collect();
                let pts: Vec<Vec3> = contact_idx.iter().map(|&m| world0[m]).collect();
                let (g, _) = group_contacts(&pts, joints0, config.joints)?;
                g.into_iter().map(|grp| grp.into_iter().map(|i| contact_idx[i]).collect()).collect()
            }
            ContactMode::NearestJoints => nearest_joint_contacts(&world0, joints0, config.grasp_radius).0,
        };
    }

    // rigid attachment to the end effector during the window
    let attach = ee0.inverse().compose(&obj0);
    let object: Vec<ObjectPose> = (0..frames)
        .map(|f| {
            let t = if config.contact_len == 0 || f < window.start {
                obj0
            } else {
                let g = f.min(window.end - 1);
                ee_frames[g].compose(&attach)
            };
            ObjectPose::from_transform(&t)
        })
        .collect();

    let subset_indices = sample_contact_subsets(&groups, config.subset_size, subset_seed)?;
    let mask = (0..frames)
        .map(|f| groups.iter().map(|g| window.contains(&f) && !g.is_empty()).collect())
        .collect();

    let seq = HoiSequence {
        past_len: config.past_len,
        future_len: config.future_len,
        frame_rate: config.frame_rate,
        human,
        object,
        rest_cloud: PointCloud::new(rest)?,
        rest_contact_indices: groups.iter().flatten().copied().collect(),
        contact: ContactTrack { group_sizes: groups.iter().map(Vec::len).collect(), subset_indices, mask },
        prediction: None,
    };
    seq.validate()?;
    Ok(seq)
}

/// `count` sequences with per-sequence seeds drawn from `seed`.
pub fn generate_dataset(config: &SynthConfig, count: usize, seed: u64) -> Result<Vec<HoiSequence>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| generate_synthetic(config, rng.random())).collect()
}

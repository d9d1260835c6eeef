//! Forecast accuracy metrics and the sampling-based evaluation harness.
//!
//! Metrics work in meters internally; [`EvalReport`] scales them to the
//! reporting units (millimeters, quaternion distance ×1000, percent ×10).

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{HoiSequence, ObjectPose, Skeleton};
use crate::error::{Error, Result};
use crate::geometry::{matrix_to_quaternion, Vec3};
use crate::model::{Forecast, Forecaster};

/// Capsule radius used for every bone of the body approximation.
pub const DEFAULT_CAPSULE_RADIUS: f64 = 0.04;

/// Mean per-joint Euclidean distance over `frames × joints` positions.
pub fn mpjpe(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("mpjpe frames", gt.len(), pred.len()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (f, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.len() != g.len() {
            return Err(Error::shape("mpjpe joints", g.len(), format!("{} in frame {f}", p.len())));
        }
        sum += p.iter().zip(g).map(|(a, b)| (a - b).norm()).sum::<f64>();
        n += p.len();
    }
    if n == 0 {
        return Err(Error::shape("mpjpe", "at least one point", 0));
    }
    Ok(sum / n as f64)
}

/// `min(‖p − g‖, ‖p + g‖)` for quaternions.
pub fn quaternion_distance(p: &[f64; 4], g: &[f64; 4]) -> f64 {
    let minus: f64 = p.iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let plus: f64 = p.iter().zip(g).map(|(a, b)| (a + b).powi(2)).sum::<f64>().sqrt();
    minus.min(plus)
}

/// Mean centroid distance and mean quaternion distance over frames.
pub fn trans_rot_err(pred: &[ObjectPose], gt: &[ObjectPose]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape("object frames", gt.len(), pred.len()));
    }
    let mut trans = 0.0;
    let mut rot = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        trans += (p.centroid - g.centroid).norm();
        let qp = matrix_to_quaternion(&p.rotation.to_matrix()?)?;
        let qg = matrix_to_quaternion(&g.rotation.to_matrix()?)?;
        rot += quaternion_distance(&qp, &qg);
    }
    let n = pred.len() as f64;
    Ok((trans / n, rot / n))
}

pub fn point_segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let s = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + ab * s)).norm()
}

/// Signed distance to a union of capsules, positive inside.
pub fn capsule_signed_distance(p: &Vec3, joints: &[Vec3], bones: &[(usize, usize)], radii: &[f64]) -> f64 {
    bones
        .iter()
        .zip(radii)
        .map(|(&(a, b), r)| r - point_segment_distance(p, &joints[a], &joints[b]))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Percentage of `points` with non-negative signed distance to the body.
pub fn penetration(points: &[Vec3], joints: &[Vec3], bones: &[(usize, usize)], radii: &[f64]) -> Result<f64> {
    if bones.len() != radii.len() {
        return Err(Error::shape("capsule radii", bones.len(), radii.len()));
    }
    if let Some(&(a, b)) = bones.iter().find(|&&(a, b)| a >= joints.len() || b >= joints.len()) {
        return Err(Error::shape("bone joint index", format!("< {}", joints.len()), a.max(b)));
    }
    if points.is_empty() {
        return Err(Error::shape("penetration points", "at least one point", 0));
    }
    let inside = points.iter().filter(|p| capsule_signed_distance(p, joints, bones, radii) >= 0.0).count();
    Ok(100.0 * inside as f64 / points.len() as f64)
}

/// Metrics of one sequence in reporting units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// millimeters
    pub mpjpe_h: f64,
    /// millimeters, over the transformed object point cloud
    pub mpjpe_o: f64,
    /// millimeters
    pub trans_err: f64,
    /// quaternion distance ×1000
    pub rot_err: f64,
    /// percent ×10
    pub pene: f64,
    /// Mean distance in millimeters between human-side and object-side
    /// contact predictions over in-contact future entries; `None` when the
    /// future has no contact.
    pub contact_gap: Option<f64>,
}

/// Metrics of one forecast against the recorded future of `seq`.
pub fn score(forecast: &Forecast, seq: &HoiSequence) -> Result<Metrics> {
    let past = seq.past_len;
    let future = seq.future_len;
    if forecast.human.len() != future || forecast.object.len() != future {
        return Err(Error::shape("forecast frames", future, forecast.human.len().min(forecast.object.len())));
    }
    let pred_j: Vec<Vec<Vec3>> = forecast.human.iter().map(|h| h.joint_positions.clone()).collect();
    let gt_j: Vec<Vec<Vec3>> = seq.human[past..].iter().map(|h| h.joint_positions.clone()).collect();
    let mpjpe_h = mpjpe(&pred_j, &gt_j)?;

    let rest = seq.rest_cloud.points();
    let cloud = |o: &ObjectPose| -> Result<Vec<Vec3>> {
        let tf = o.transform()?;
        Ok(rest.iter().map(|p| tf.apply(p)).collect())
    };
    let pred_o = forecast.object.iter().map(cloud).collect::<Result<Vec<_>>>()?;
    let gt_o = seq.object[past..].iter().map(cloud).collect::<Result<Vec<_>>>()?;
    let mpjpe_o = mpjpe(&pred_o, &gt_o)?;
    let (trans, rot) = trans_rot_err(&forecast.object, &seq.object[past..])?;

    let skeleton = Skeleton::template(seq.num_joints())?;
    let bones = skeleton.bones();
    let radii = vec![DEFAULT_CAPSULE_RADIUS; bones.len()];
    let mut pene = 0.0;
    for (joints, points) in pred_j.iter().zip(&pred_o) {
        pene += penetration(points, joints, &bones, &radii)?;
    }
    pene /= future as f64;

    let mut gap = 0.0;
    let mut count = 0usize;
    let k = seq.subset_size().unwrap_or(0);
    if k > 0 {
        for (f, (ch, co)) in forecast.contacts_human.iter().zip(&forecast.contacts_object).enumerate() {
            let mask = &seq.contact.mask[past + f];
            for (i, (a, b)) in ch.iter().zip(co).enumerate() {
                if mask[i / k] {
                    gap += (a - b).norm();
                    count += 1;
                }
            }
        }
    }
    Ok(Metrics {
        mpjpe_h: 1000.0 * mpjpe_h,
        mpjpe_o: 1000.0 * mpjpe_o,
        trans_err: 1000.0 * trans,
        rot_err: 1000.0 * rot,
        pene: 10.0 * pene,
        contact_gap: (count > 0).then(|| 1000.0 * gap / count as f64),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub samples_per_sequence: usize,
    /// Mean over sequences; the contact gap averages the sequences that
    /// have one.
    pub mean: Metrics,
    /// Per-sequence means over samples.
    pub per_sequence: Vec<Metrics>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    /// Aligned text table: one row per sequence and a final mean row.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let head = ["seq", "MPJPE-H", "MPJPE-O", "Trans.", "Rot.", "Pene.", "Gap"];
        let _ = writeln!(s, "{:>6} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}", head[0], head[1], head[2], head[3], head[4], head[5], head[6]);
        let row = |s: &mut String, label: &str, m: &Metrics| {
            let gap = m.contact_gap.map_or("-".to_string(), |g| format!("{g:.2}"));
            let _ = writeln!(
                s,
                "{label:>6} {:>10.2} {:>10.2} {:>10.2} {:>10.2} {:>10.2} {gap:>10}",
                m.mpjpe_h, m.mpjpe_o, m.trans_err, m.rot_err, m.pene
            );
        };
        for (i, m) in self.per_sequence.iter().enumerate() {
            row(&mut s, &i.to_string(), m);
        }
        row(&mut s, "mean", &self.mean);
        s
    }
}

fn mean_metrics(items: &[Metrics]) -> Metrics {
    let n = items.len() as f64;
    let mut m = Metrics::default();
    for x in items {
        m.mpjpe_h += x.mpjpe_h / n;
        m.mpjpe_o += x.mpjpe_o / n;
        m.trans_err += x.trans_err / n;
        m.rot_err += x.rot_err / n;
        m.pene += x.pene / n;
    }
    let gaps: Vec<f64> = items.iter().filter_map(|x| x.contact_gap).collect();
    m.contact_gap = (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64);
    m
}

/// Samples `samples_per_sequence` forecasts per sequence and averages the
/// metrics. Sampling seeds are drawn in order from a generator seeded with
/// `seed`.
pub fn evaluate(model: &dyn Forecaster, data: &[HoiSequence], seed: u64, samples_per_sequence: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    if samples_per_sequence == 0 {
        return Err(Error::Config("samples_per_sequence must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_sequence = Vec::with_capacity(data.len());
    for seq in data {
        let mut runs = Vec::with_capacity(samples_per_sequence);
        for _ in 0..samples_per_sequence {
            let s: u64 = rng.random();
            runs.push(score(&model.forecast(seq, s)?, seq)?);
        }
        per_sequence.push(mean_metrics(&runs));
    }
    Ok(EvalReport { seed, samples_per_sequence, mean: mean_metrics(&per_sequence), per_sequence })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{axis_angle, matrix_to_rot6d};

    #[test]
    fn uniform_offset_gives_offset_norm() {
        let gt = vec![vec![Vec3::new(0.1, 0.2, 0.3), Vec3::new(-1.0, 0.5, 2.0)]; 3];
        let pred: Vec<Vec<Vec3>> = gt.iter().map(|f| f.iter().map(|p| p + Vec3::new(0.25, 0.0, 0.0)).collect()).collect();
        assert!((mpjpe(&pred, &gt).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(mpjpe(&gt, &gt).unwrap(), 0.0);
    }

    #[test]
    fn mpjpe_rejects_ragged_input() {
        let a = vec![vec![Vec3::zeros(); 2]];
        let b = vec![vec![Vec3::zeros(); 3]];
        assert!(matches!(mpjpe(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn quarter_turn_about_z() {
        let g = ObjectPose { centroid: Vec3::zeros(), rotation: matrix_to_rot6d(&crate::geometry::Mat3::identity()).unwrap() };
        let r = axis_angle(&Vec3::z(), std::f64::consts::FRAC_PI_2);
        let p = ObjectPose { centroid: Vec3::new(0.0, 0.0, 0.003), rotation: matrix_to_rot6d(&r).unwrap() };
        let (t, rot) = trans_rot_err(&[p], &[g]).unwrap();
        assert!((t - 0.003).abs() < 1e-15);
        // q = (cos 45°, 0, 0, sin 45°) against (1, 0, 0, 0)
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let expected = ((h - 1.0).powi(2) + h * h).sqrt();
        assert!((rot - expected).abs() < 1e-12, "{rot} vs {expected}");
    }

    #[test]
    fn segment_distance_clamps_to_endpoints() {
        let a = Vec3::zeros();
        let b = Vec3::new(1.0, 0.0, 0.0);
        assert_eq!(point_segment_distance(&Vec3::new(0.5, 2.0, 0.0), &a, &b), 2.0);
        assert_eq!(point_segment_distance(&Vec3::new(-3.0, 4.0, 0.0), &a, &b), 5.0);
        assert_eq!(point_segment_distance(&Vec3::new(0.3, 0.0, 0.0), &a, &a), 0.3);
    }

    #[test]
    fn penetration_extremes() {
        let joints = vec![Vec3::zeros(), Vec3::new(0.0, 1.0, 0.0)];
        let bones = [(0, 1)];
        let far: Vec<Vec3> = (0..10).map(|i| Vec3::new(0.2, i as f64 * 0.1, 0.0)).collect();
        assert_eq!(penetration(&far, &joints, &bones, &[0.05]).unwrap(), 0.0);
        let axis: Vec<Vec3> = (0..10).map(|i| Vec3::new(0.0, i as f64 * 0.1, 0.0)).collect();
        assert_eq!(penetration(&axis, &joints, &bones, &[0.05]).unwrap(), 100.0);
        let surface = [Vec3::new(0.05, 0.5, 0.0)];
        assert_eq!(penetration(&surface, &joints, &bones, &[0.05]).unwrap(), 100.0);
        assert!(penetration(&far, &joints, &bones, &[]).is_err());
    }
}

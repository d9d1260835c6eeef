//! Rotation encodings, rigid transforms, and the rigid contact map.
//!
//! Rotations are stored as 3×3 matrices acting on column vectors. The 6D
//! encoding keeps the first two columns of the matrix; decoding
//! re-orthonormalizes them with Gram-Schmidt and completes the frame with a
//! cross product.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Minimum norm of the first column and of the orthogonalized second column.
pub const DEGENERATE_EPS: f64 = 1e-8;
/// Maximum Frobenius deviation of `mᵀm` from identity for a valid rotation.
pub const ORTHONORMAL_TOL: f64 = 1e-5;

/// First two columns of a rotation matrix, before orthonormalization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation6D {
    pub a: Vec3,
    pub b: Vec3,
}

impl Rotation6D {
    pub const IDENTITY: Rotation6D =
        Rotation6D { a: Vector3::new(1.0, 0.0, 0.0), b: Vector3::new(0.0, 1.0, 0.0) };

    pub fn new(a: Vec3, b: Vec3) -> Self {
        Self { a, b }
    }

    /// `[a.x, a.y, a.z, b.x, b.y, b.z]`
    pub fn to_array(&self) -> [f64; 6] {
        [self.a.x, self.a.y, self.a.z, self.b.x, self.b.y, self.b.z]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        assert!(v.len() >= 6, "6D rotation needs six values");
        Self { a: Vector3::new(v[0], v[1], v[2]), b: Vector3::new(v[3], v[4], v[5]) }
    }

    pub fn to_matrix(&self) -> Result<Mat3> {
        rot6d_to_matrix(self)
    }
}

/// Gram-Schmidt decode: `e1 = a/|a|`, `e2 = normalize(b - (e1·b) e1)`,
/// `e3 = e1 × e2`.
pub fn rot6d_to_matrix(r: &Rotation6D) -> Result<Mat3> {
    let na = r.a.norm();
    if !(na > DEGENERATE_EPS) {
        return Err(Error::DegenerateRotation(format!("|a| = {na:e}")));
    }
    let e1 = r.a / na;
    let u2 = r.b - e1 * e1.dot(&r.b);
    let nu = u2.norm();
    if !(nu > DEGENERATE_EPS) {
        return Err(Error::DegenerateRotation(format!("b is parallel to a (residual {nu:e})")));
    }
    let e2 = u2 / nu;
    let e3 = e1.cross(&e2);
    Ok(Mat3::from_columns(&[e1, e2, e3]))
}

fn check_rotation(m: &Mat3) -> Result<()> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::NotARotation("non-finite entries".into()));
    }
    let dev = (m.transpose() * m - Mat3::identity()).norm();
    if dev > ORTHONORMAL_TOL {
        return Err(Error::NotARotation(format!("|mᵀm - I| = {dev:e}")));
    }
    let det = m.determinant();
    if det < 0.0 {
        return Err(Error::NotARotation(format!("determinant {det}")));
    }
    Ok(())
}

pub fn matrix_to_rot6d(m: &Mat3) -> Result<Rotation6D> {
    check_rotation(m)?;
    Ok(Rotation6D { a: m.column(0).into_owned(), b: m.column(1).into_owned() })
}

/// Unit quaternion `[w, x, y, z]`, scalar first, with `w >= 0`.
pub fn matrix_to_quaternion(m: &Mat3) -> Result<[f64; 4]> {
    check_rotation(m)?;
    let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    // Shepperd: branch on the largest of (w, x, y, z) for stability.
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [0.25 * s, (m[(2, 1)] - m[(1, 2)]) / s, (m[(0, 2)] - m[(2, 0)]) / s, (m[(1, 0)] - m[(0, 1)]) / s]
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        [(m[(2, 1)] - m[(1, 2)]) / s, 0.25 * s, (m[(0, 1)] + m[(1, 0)]) / s, (m[(0, 2)] + m[(2, 0)]) / s]
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        [(m[(0, 2)] - m[(2, 0)]) / s, (m[(0, 1)] + m[(1, 0)]) / s, 0.25 * s, (m[(1, 2)] + m[(2, 1)]) / s]
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        [(m[(1, 0)] - m[(0, 1)]) / s, (m[(0, 2)] + m[(2, 0)]) / s, (m[(1, 2)] + m[(2, 1)]) / s, 0.25 * s]
    };
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
    Ok(q.map(|v| sign * v / n))
}

/// Rotation by `angle` radians about the (not necessarily unit) `axis`.
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    let n = axis.norm();
    if n == 0.0 || angle == 0.0 {
        return Mat3::identity();
    }
    let k = axis / n;
    let kx = Mat3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Mat3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}

/// Rotation for a rotation vector (axis scaled by angle).
pub fn exp_map(v: &Vec3) -> Mat3 {
    axis_angle(v, v.norm())
}

/// Uniformly distributed rotation (normalized Gaussian quaternion).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Mat3 {
    let mut q = [0.0f64; 4];
    loop {
        for v in q.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.iter_mut().for_each(|v| *v /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `p ↦ R p + L`
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    rotation: Mat3,
    translation: Vec3,
}

impl RigidTransform {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        check_rotation(&rotation)?;
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn translation_only(t: Vec3) -> Self {
        Self { rotation: Mat3::identity(), translation: t }
    }

    pub fn from_rot6d(r: &Rotation6D, translation: Vec3) -> Result<Self> {
        Ok(Self { rotation: rot6d_to_matrix(r)?, translation })
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }
}

/// Non-empty set of finite 3D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Config("point cloud must contain at least one point".into()));
        }
        if !points.iter().all(|p| p.iter().all(|v| v.is_finite())) {
            return Err(Error::Config("point cloud contains non-finite coordinates".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        self.points.iter().sum::<Vec3>() / self.points.len() as f64
    }
}

pub fn apply_rigid(t: &RigidTransform, pc: &PointCloud) -> PointCloud {
    PointCloud { points: pc.points.iter().map(|p| t.apply(p)).collect() }
}

/// Contact positions implied by a (predicted) object pose: rest-pose
/// contact points carried by the rigid motion.
pub fn contact_from_object(pred: &RigidTransform, rest_contacts: &PointCloud) -> PointCloud {
    apply_rigid(pred, rest_contacts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &Mat3, b: &Mat3, tol: f64) -> bool {
        (a - b).iter().all(|v| v.abs() < tol)
    }

    /// Column-wise Gram-Schmidt written against plain arrays, independent of
    /// the nalgebra path above.
    fn gram_schmidt_oracle(a: [f64; 3], b: [f64; 3]) -> [[f64; 3]; 3] {
        let dot = |x: [f64; 3], y: [f64; 3]| x[0] * y[0] + x[1] * y[1] + x[2] * y[2];
        let na = dot(a, a).sqrt();
        let e1 = [a[0] / na, a[1] / na, a[2] / na];
        let p = dot(e1, b);
        let u = [b[0] - p * e1[0], b[1] - p * e1[1], b[2] - p * e1[2]];
        let nu = dot(u, u).sqrt();
        let e2 = [u[0] / nu, u[1] / nu, u[2] / nu];
        let e3 = [e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2], e1[0] * e2[1] - e1[1] * e2[0]];
        // rows of the result matrix
        [[e1[0], e2[0], e3[0]], [e1[1], e2[1], e3[1]], [e1[2], e2[2], e3[2]]]
    }

    #[test]
    fn identity_decodes_to_identity() {
        let m = rot6d_to_matrix(&Rotation6D::IDENTITY).unwrap();
        assert_eq!(m, Mat3::identity());
    }

    #[test]
    fn axis_permutation_is_quarter_turn_about_z() {
        let r = Rotation6D::new(Vec3::new(0.0, 1.0, 0.0), Vec3::new(-1.0, 0.0, 0.0));
        let m = rot6d_to_matrix(&r).unwrap();
        let rz = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!(close(&m, &rz, 1e-15));
    }

    #[test]
    fn non_unit_input_matches_gram_schmidt_oracle() {
        let r = Rotation6D::new(Vec3::new(2.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 0.0));
        let m = rot6d_to_matrix(&r).unwrap();
        let o = gram_schmidt_oracle([2.0, 0.0, 0.0], [1.0, 1.0, 0.0]);
        for i in 0..3 {
            for j in 0..3 {
                assert!((m[(i, j)] - o[i][j]).abs() < 1e-12);
            }
        }
        assert!(close(&m, &Mat3::identity(), 1e-12));
    }

    #[test]
    fn random_inputs_match_gram_schmidt_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let a: [f64; 3] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
            let b: [f64; 3] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
            let m = rot6d_to_matrix(&Rotation6D::new(a.into(), b.into())).unwrap();
            let o = gram_schmidt_oracle(a, b);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((m[(i, j)] - o[i][j]).abs() < 1e-10);
                }
            }
            assert!((m.determinant() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let zero = Rotation6D::new(Vec3::zeros(), Vec3::new(0.0, 1.0, 0.0));
        assert!(matches!(rot6d_to_matrix(&zero), Err(Error::DegenerateRotation(_))));
        let parallel = Rotation6D::new(Vec3::new(1.0, 2.0, 3.0), Vec3::new(2.0, 4.0, 6.0));
        assert!(matches!(rot6d_to_matrix(&parallel), Err(Error::DegenerateRotation(_))));
    }

    #[test]
    fn encode_identity_and_reject_reflection() {
        let r = matrix_to_rot6d(&Mat3::identity()).unwrap();
        assert_eq!(r, Rotation6D::IDENTITY);
        let reflect = Mat3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(matches!(matrix_to_rot6d(&reflect), Err(Error::NotARotation(_))));
        let sheared = Mat3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(matrix_to_rot6d(&sheared), Err(Error::NotARotation(_))));
    }

    #[test]
    fn sampled_rotations_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let m = random_rotation(&mut rng);
            let back = rot6d_to_matrix(&matrix_to_rot6d(&m).unwrap()).unwrap();
            assert!(close(&m, &back, 1e-6));
        }
    }

    #[test]
    fn apply_rigid_examples() {
        let pc = PointCloud::new(vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.5, -2.0, 3.0)]).unwrap();
        assert_eq!(apply_rigid(&RigidTransform::identity(), &pc), pc);

        let half_turn = axis_angle(&Vec3::z(), std::f64::consts::PI);
        let t = RigidTransform::new(half_turn, Vec3::new(0.0, 0.0, 1.0)).unwrap();
        let out = apply_rigid(&t, &pc);
        assert!((out.points()[0] - Vec3::new(-1.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn apply_rigid_matches_elementwise_oracle_and_preserves_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = random_rotation(&mut rng);
        let l = Vec3::new(0.3, -1.2, 2.0);
        let t = RigidTransform::new(r, l).unwrap();
        let pts: Vec<Vec3> =
            (0..50).map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let pc = PointCloud::new(pts.clone()).unwrap();
        let out = apply_rigid(&t, &pc);
        for (p, q) in pts.iter().zip(out.points()) {
            for i in 0..3 {
                let expect = r[(i, 0)] * p.x + r[(i, 1)] * p.y + r[(i, 2)] * p.z + l[i];
                assert!((q[i] - expect).abs() < 1e-12);
            }
        }
        for i in 0..50 {
            for j in 0..50 {
                let d0 = (pts[i] - pts[j]).norm();
                let d1 = (out.points()[i] - out.points()[j]).norm();
                assert!((d0 - d1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn contact_map_identity_and_translation() {
        let p = PointCloud::new(vec![Vec3::new(0.1, 0.2, 0.3), Vec3::new(-1.0, 0.5, 0.25)]).unwrap();
        let same = contact_from_object(&RigidTransform::identity(), &p);
        for (a, b) in same.points().iter().zip(p.points()) {
            assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
        }
        let d = Vec3::new(1.0, -2.0, 0.5);
        let moved = contact_from_object(&RigidTransform::translation_only(d), &p);
        for (a, b) in moved.points().iter().zip(p.points()) {
            assert!((a - (b + d)).norm() < 1e-15);
        }
    }

    #[test]
    fn compose_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mk = |rng: &mut ChaCha8Rng| {
            RigidTransform::new(random_rotation(rng), Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))).unwrap()
        };
        let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let left = a.compose(&b).compose(&c);
        let right = a.compose(&b.compose(&c));
        assert!(close(left.rotation(), right.rotation(), 1e-12));
        assert!((left.translation() - right.translation()).norm() < 1e-12);
        let id = a.compose(&a.inverse());
        assert!(close(id.rotation(), &Mat3::identity(), 1e-6));
        assert!(id.translation().norm() < 1e-6);
    }

    /// Hamilton-product rotation `q v q*`, independent of the matrix path.
    fn quat_rotate(q: [f64; 4], v: Vec3) -> Vec3 {
        let mul = |a: [f64; 4], b: [f64; 4]| {
            [
                a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
                a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
                a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
                a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
            ]
        };
        let conj = [q[0], -q[1], -q[2], -q[3]];
        let r = mul(mul(q, [0.0, v.x, v.y, v.z]), conj);
        Vec3::new(r[1], r[2], r[3])
    }

    #[test]
    fn quaternion_examples() {
        assert_eq!(matrix_to_quaternion(&Mat3::identity()).unwrap(), [1.0, 0.0, 0.0, 0.0]);
        let rx = axis_angle(&Vec3::x(), std::f64::consts::PI);
        let q = matrix_to_quaternion(&rx).unwrap();
        let expect = [0.0, 1.0, 0.0, 0.0];
        let d = q.iter().zip(expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let d_neg = q.iter().zip(expect).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
        assert!(d.min(d_neg) < 1e-12);
    }

    #[test]
    fn quaternion_action_matches_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let m = random_rotation(&mut rng);
            let q = matrix_to_quaternion(&m).unwrap();
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            assert!(q[0] >= 0.0);
            for _ in 0..20 {
                let v = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                assert!((quat_rotate(q, v) - m * v).norm() < 1e-5);
            }
        }
    }
}

//! Rigid poses: quaternion rotations plus translations.
//!
//! Quaternions are stored `(w, x, y, z)` with unit norm and a fixed sign
//! convention `w >= 0`, which picks one representative of the double
//! cover. Angles are geodesic rotation distances in radians; translations
//! and distances are in meters (or whatever unit the caller's frame uses).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum quaternion norm treated as a valid rotation.
pub const MIN_QUAT_NORM: f64 = 1e-12;

/// Tolerance on |q| - 1 for inputs claiming to be unit quaternions.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Flat 7-vector pose encoding: `[qw, qx, qy, qz, tx, ty, tz]`.
pub type PoseVector = [f64; 7];

/// A rigid transform: unit quaternion `(w, x, y, z)` plus translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub quaternion: [f64; 4],
    pub translation: [f64; 3],
}

impl Pose {
    /// Build a pose, requiring a unit quaternion (within [`UNIT_NORM_TOL`])
    /// and finite translation.
    pub fn new(quaternion: [f64; 4], translation: [f64; 3]) -> Result<Pose> {
        let n = quat_norm(&quaternion);
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Data(format!(
                "pose quaternion norm {n:.9} is not 1 within {UNIT_NORM_TOL:.0e}"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("pose translation".into()));
        }
        Ok(Pose {
            quaternion,
            translation,
        })
    }

    /// The identity pose.
    pub fn identity() -> Pose {
        Pose {
            quaternion: [1.0, 0.0, 0.0, 0.0],
            translation: [0.0; 3],
        }
    }
}

fn quat_norm(q: &[f64; 4]) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Normalize to unit length and apply the sign convention `w >= 0`.
/// Errors if the norm is at or below [`MIN_QUAT_NORM`].
pub fn normalize_quaternion(q: [f64; 4]) -> Result<[f64; 4]> {
    let n = quat_norm(&q);
    if !(n > MIN_QUAT_NORM) || !n.is_finite() {
        return Err(Error::DegenerateQuaternion {
            norm: n,
            min: MIN_QUAT_NORM,
        });
    }
    let mut out = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    if out[0] < 0.0 {
        for v in &mut out {
            *v = -*v;
        }
    }
    Ok(out)
}

/// Unit quaternion for a rotation of `angle` radians about `axis`.
pub fn axis_angle_quaternion(axis: [f64; 3], angle: f64) -> Result<[f64; 4]> {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    if !(n > MIN_QUAT_NORM) || !n.is_finite() || !angle.is_finite() {
        return Err(Error::DegenerateQuaternion {
            norm: n,
            min: MIN_QUAT_NORM,
        });
    }
    let (s, c) = (angle / 2.0).sin_cos();
    normalize_quaternion([c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n])
}

/// Hamilton product `a * b`: the rotation that applies `b` first, then `a`.
pub fn quaternion_multiply(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = *a;
    let [bw, bx, by, bz] = *b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// Rotation matrix (row-major 3x3) of a unit quaternion `(w, x, y, z)`.
pub fn quaternion_to_matrix(q: &[f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = *q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Geodesic angle in radians between two unit quaternions:
/// `2 * acos(min(1, |<q1, q2>|))`, insensitive to quaternion sign.
///
/// Errors if either input strays from unit norm by more than
/// `1e-3` (callers normalize first; this guards silent drift).
pub fn rotation_angle(q1: &[f64; 4], q2: &[f64; 4]) -> Result<f64> {
    for (i, q) in [q1, q2].into_iter().enumerate() {
        let n = quat_norm(q);
        if (n - 1.0).abs() > 1e-3 {
            return Err(Error::Data(format!(
                "rotation_angle argument {} has norm {n:.6}, expected unit",
                i + 1
            )));
        }
    }
    let dot: f64 = q1.iter().zip(q2).map(|(a, b)| a * b).sum();
    Ok(2.0 * dot.abs().min(1.0).acos())
}

/// Euclidean distance between the translations of two poses.
pub fn translation_distance(a: &Pose, b: &Pose) -> f64 {
    a.translation
        .iter()
        .zip(&b.translation)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Flatten a pose into its 7-vector encoding.
pub fn pose_to_vector(p: &Pose) -> PoseVector {
    [
        p.quaternion[0],
        p.quaternion[1],
        p.quaternion[2],
        p.quaternion[3],
        p.translation[0],
        p.translation[1],
        p.translation[2],
    ]
}

/// Rebuild a pose from a 7-vector, renormalizing the quaternion part
/// (including the `w >= 0` convention). Errors on degenerate quaternions
/// or non-finite translation components.
pub fn vector_to_pose(v: &PoseVector) -> Result<Pose> {
    let q = normalize_quaternion([v[0], v[1], v[2], v[3]])?;
    let t = [v[4], v[5], v[6]];
    if !t.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("pose translation".into()));
    }
    Ok(Pose {
        quaternion: q,
        translation: t,
    })
}

/// Similarity mapping between the metric frame (meters) and the
/// normalized object frame: `normalized = (metric - offset) * scale`.
///
/// `offset` is the metric bounding-box minimum and `scale` is the
/// reciprocal of the longest bounding-box side, so normalized
/// coordinates live in `[0, 1]` along the longest axis. Rotations are
/// unchanged by the mapping; only translations rescale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTransform {
    pub offset: [f64; 3],
    pub scale: f64,
}

impl FrameTransform {
    pub fn to_normalized(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.offset[0]) * self.scale,
            (p[1] - self.offset[1]) * self.scale,
            (p[2] - self.offset[2]) * self.scale,
        ]
    }

    pub fn to_metric(&self, p: [f64; 3]) -> [f64; 3] {
        [
            p[0] / self.scale + self.offset[0],
            p[1] / self.scale + self.offset[1],
            p[2] / self.scale + self.offset[2],
        ]
    }

    pub fn pose_to_normalized(&self, pose: &Pose) -> Pose {
        Pose {
            quaternion: pose.quaternion,
            translation: self.to_normalized(pose.translation),
        }
    }

    pub fn pose_to_metric(&self, pose: &Pose) -> Pose {
        Pose {
            quaternion: pose.quaternion,
            translation: self.to_metric(pose.translation),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{standard_normal_vec, stream_rng};

    fn random_unit_quat(rng: &mut rand_chacha::ChaCha8Rng) -> [f64; 4] {
        loop {
            let v = standard_normal_vec::<f64, _>(rng, 4);
            if let Ok(q) = normalize_quaternion([v[0], v[1], v[2], v[3]]) {
                return q;
            }
        }
    }

    /// Independent oracle: angle from the relative rotation matrix trace,
    /// `acos((tr(R1^T R2) - 1) / 2)`.
    fn angle_via_matrices(q1: &[f64; 4], q2: &[f64; 4]) -> f64 {
        let r1 = quaternion_to_matrix(q1);
        let r2 = quaternion_to_matrix(q2);
        let mut trace = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                // (R1^T R2)[i][i] summed: rows of R1 dot rows-as-cols of R2.
                if i == j {
                    let mut d = 0.0;
                    for k in 0..3 {
                        d += r1[k][i] * r2[k][j];
                    }
                    trace += d;
                }
            }
        }
        ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn angle_matches_rotation_matrix_oracle() {
        let mut rng = stream_rng(31, 0);
        for _ in 0..200 {
            let q1 = random_unit_quat(&mut rng);
            let q2 = random_unit_quat(&mut rng);
            let a = rotation_angle(&q1, &q2).unwrap();
            let b = angle_via_matrices(&q1, &q2);
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn angle_of_known_rotations() {
        let id = [1.0, 0.0, 0.0, 0.0];
        // 90 degrees about z.
        let h = std::f64::consts::FRAC_PI_4;
        let qz90 = [h.cos(), 0.0, 0.0, h.sin()];
        let a = rotation_angle(&id, &qz90).unwrap();
        assert!((a - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        // 180 degrees about x.
        let qx180 = [0.0, 1.0, 0.0, 0.0];
        let a = rotation_angle(&id, &qx180).unwrap();
        assert!((a - std::f64::consts::PI).abs() < 1e-12);
        assert_eq!(rotation_angle(&id, &id).unwrap(), 0.0);
    }

    #[test]
    fn angle_ignores_quaternion_sign() {
        let mut rng = stream_rng(31, 1);
        for _ in 0..50 {
            let q = random_unit_quat(&mut rng);
            let neg = [-q[0], -q[1], -q[2], -q[3]];
            // acos near 1 amplifies ulp-level norm error to ~1e-8.
            assert!(rotation_angle(&q, &neg).unwrap() < 1e-6);
            let q2 = random_unit_quat(&mut rng);
            let a = rotation_angle(&q, &q2).unwrap();
            let b = rotation_angle(&neg, &q2).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn angle_rejects_non_unit_inputs() {
        let id = [1.0, 0.0, 0.0, 0.0];
        let bad = [2.0, 0.0, 0.0, 0.0];
        assert!(rotation_angle(&id, &bad).is_err());
        assert!(rotation_angle(&bad, &id).is_err());
    }

    #[test]
    fn normalize_enforces_unit_and_sign() {
        let q = normalize_quaternion([-2.0, 0.0, 0.0, 2.0]).unwrap();
        assert!((quat_norm(&q) - 1.0).abs() < 1e-15);
        assert!(q[0] >= 0.0);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((q[0] - s).abs() < 1e-15);
        assert!((q[3] + s).abs() < 1e-15);
    }

    #[test]
    fn normalize_rejects_degenerate() {
        let err = normalize_quaternion([0.0, 0.0, 0.0, 0.0]).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(normalize_quaternion([1e-13, 0.0, 0.0, 0.0]).is_err());
        assert!(normalize_quaternion([f64::NAN, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn pose_vector_round_trip_is_exact_for_unit_quaternions() {
        let mut rng = stream_rng(31, 2);
        for _ in 0..100 {
            let q = random_unit_quat(&mut rng);
            let t = standard_normal_vec::<f64, _>(&mut rng, 3);
            let p = Pose::new(q, [t[0], t[1], t[2]]).unwrap();
            let v = pose_to_vector(&p);
            let p2 = vector_to_pose(&v).unwrap();
            // Renormalization of an already-unit quaternion divides by a
            // norm within one ulp of 1; require exact translation and
            // near-exact rotation agreement.
            assert_eq!(p.translation, p2.translation);
            for (a, b) in p.quaternion.iter().zip(&p2.quaternion) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn vector_to_pose_renormalizes_scaled_quaternions() {
        let v: PoseVector = [2.0, 0.0, 0.0, 0.0, 0.1, 0.2, 0.3];
        let p = vector_to_pose(&v).unwrap();
        assert_eq!(p.quaternion, [1.0, 0.0, 0.0, 0.0]);
        let bad: PoseVector = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert!(vector_to_pose(&bad).is_err());
        let nan_t: PoseVector = [1.0, 0.0, 0.0, 0.0, f64::NAN, 0.0, 0.0];
        assert!(vector_to_pose(&nan_t).is_err());
    }

    #[test]
    fn pose_new_validates() {
        assert!(Pose::new([0.5, 0.0, 0.0, 0.0], [0.0; 3]).is_err());
        assert!(Pose::new([1.0, 0.0, 0.0, 0.0], [f64::INFINITY, 0.0, 0.0]).is_err());
        assert!(Pose::new([1.0, 0.0, 0.0, 0.0], [0.0; 3]).is_ok());
    }

    #[test]
    fn translation_distance_is_euclidean() {
        let a = Pose::new([1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0]).unwrap();
        let b = Pose::new([1.0, 0.0, 0.0, 0.0], [3.0, 4.0, 0.0]).unwrap();
        assert_eq!(translation_distance(&a, &b), 5.0);
        assert_eq!(translation_distance(&a, &a), 0.0);
    }

    #[test]
    fn frame_transform_round_trips() {
        let f = FrameTransform {
            offset: [0.1, -0.2, 0.05],
            scale: 4.0,
        };
        let mut rng = stream_rng(31, 3);
        for _ in 0..50 {
            let p = standard_normal_vec::<f64, _>(&mut rng, 3);
            let p = [p[0], p[1], p[2]];
            let back = f.to_metric(f.to_normalized(p));
            for (a, b) in p.iter().zip(&back) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // Distances scale linearly; rotations are untouched.
        let q = normalize_quaternion([0.6, 0.0, 0.8, 0.0]).unwrap();
        let a = Pose::new(q, [0.0, 0.0, 0.0]).unwrap();
        let b = Pose::new(q, [0.5, 0.0, 0.0]).unwrap();
        let an = f.pose_to_normalized(&a);
        let bn = f.pose_to_normalized(&b);
        assert!((translation_distance(&an, &bn) - 0.5 * 4.0).abs() < 1e-12);
        assert_eq!(an.quaternion, a.quaternion);
        assert_eq!(rotation_angle(&an.quaternion, &a.quaternion).unwrap(), 0.0);
    }

    #[test]
    fn matrix_of_identity_is_identity() {
        let m = quaternion_to_matrix(&[1.0, 0.0, 0.0, 0.0]);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m[i][j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn axis_angle_matches_known_rotations() {
        // Quarter turn about z maps e_x to e_y.
        let q = axis_angle_quaternion([0.0, 0.0, 2.0], std::f64::consts::FRAC_PI_2).unwrap();
        let m = quaternion_to_matrix(&q);
        assert!((m[0][0]).abs() < 1e-12 && (m[1][0] - 1.0).abs() < 1e-12);
        // Axis length must not matter; zero axis must fail.
        let q2 = axis_angle_quaternion([0.0, 0.0, 0.1], std::f64::consts::FRAC_PI_2).unwrap();
        for (a, b) in q.iter().zip(&q2) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(axis_angle_quaternion([0.0, 0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn quaternion_product_matches_matrix_product() {
        let mut rng = crate::numerics::rng::stream_rng(55, 0);
        for _ in 0..50 {
            let a = random_unit_quat(&mut rng);
            let b = random_unit_quat(&mut rng);
            let ab = quaternion_multiply(&a, &b);
            let ma = quaternion_to_matrix(&a);
            let mb = quaternion_to_matrix(&b);
            let mab = quaternion_to_matrix(&ab);
            for i in 0..3 {
                for j in 0..3 {
                    let oracle: f64 = (0..3).map(|k| ma[i][k] * mb[k][j]).sum();
                    assert!(
                        (mab[i][j] - oracle).abs() < 1e-9,
                        "composition disagrees at ({i},{j})"
                    );
                }
            }
        }
    }
}

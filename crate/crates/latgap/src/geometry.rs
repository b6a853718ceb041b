//! Rigid-body poses and the 9D pose representation used by the policy.
//!
//! A pose is a position plus a rotation matrix. Policies operate on a 9D
//! vector: position (3) followed by the first two columns of the rotation
//! matrix (6). Decoding re-orthonormalizes the two columns with
//! Gram-Schmidt and completes the third column by cross product, so the
//! representation stays on SO(3) even after linear operations (averaging,
//! interpolation) in 9D space.

use nalgebra::{Matrix3, Matrix6, Vector3};
use thiserror::Error;

/// Degeneracy threshold for Gram-Schmidt: column norms below this, or
/// column directions closer than this to parallel, are rejected.
pub const ROT6D_DEGENERACY_EPS: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("degenerate 6D rotation: column norm {norm:.3e} below threshold")]
    DegenerateColumn { norm: f64 },
    #[error("degenerate 6D rotation: columns nearly parallel (|cos| = {cos_angle:.12})")]
    NearParallelColumns { cos_angle: f64 },
    #[error("rotation log undefined near angle pi (trace = {trace:.6})")]
    LogBranchAmbiguity { trace: f64 },
}

/// Rigid-body pose: position and rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            position: Vector3::zeros(),
            rotation: Matrix3::identity(),
        }
    }

    pub fn new(position: Vector3<f64>, rotation: Matrix3<f64>) -> Self {
        Pose { position, rotation }
    }

    pub fn from_position(position: Vector3<f64>) -> Self {
        Pose {
            position,
            rotation: Matrix3::identity(),
        }
    }

    /// Builds a pose from a unit quaternion in (w, x, y, z) order, the
    /// convention used at I/O boundaries.
    pub fn from_quaternion_wxyz(position: Vector3<f64>, q: [f64; 4]) -> Self {
        let quat = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
        let rotation = nalgebra::UnitQuaternion::from_quaternion(quat)
            .to_rotation_matrix()
            .into_inner();
        Pose { position, rotation }
    }

    /// Quaternion in (w, x, y, z) order, w >= 0.
    pub fn to_quaternion_wxyz(&self) -> [f64; 4] {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.rotation);
        let q = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
        let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
        [q.w, q.i, q.j, q.k]
    }

    /// Composition `self * other`: applies `other` in this pose's frame.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            position: self.position + self.rotation * other.position,
            rotation: self.rotation * other.rotation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            position: -(rt * self.position),
            rotation: rt,
        }
    }

    /// Max deviation of R^T R from identity plus determinant error; small
    /// for valid rotations.
    pub fn rotation_defect(&self) -> f64 {
        let gram = self.rotation.transpose() * self.rotation - Matrix3::identity();
        let det_err = (self.rotation.determinant() - 1.0).abs();
        gram.iter().fold(det_err, |m, v| m.max(v.abs()))
    }
}

/// 9D pose: position followed by the first two rotation-matrix columns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose9D {
    pub position: Vector3<f64>,
    pub rot6d: [f64; 6],
}

impl Pose9D {
    pub fn as_array(&self) -> [f64; 9] {
        [
            self.position.x,
            self.position.y,
            self.position.z,
            self.rot6d[0],
            self.rot6d[1],
            self.rot6d[2],
            self.rot6d[3],
            self.rot6d[4],
            self.rot6d[5],
        ]
    }

    pub fn from_array(v: &[f64; 9]) -> Self {
        Pose9D {
            position: Vector3::new(v[0], v[1], v[2]),
            rot6d: [v[3], v[4], v[5], v[6], v[7], v[8]],
        }
    }
}

/// Encodes a pose as position + first two rotation columns.
pub fn pose_to_9d(pose: &Pose) -> Pose9D {
    let c0 = pose.rotation.column(0);
    let c1 = pose.rotation.column(1);
    Pose9D {
        position: pose.position,
        rot6d: [c0[0], c0[1], c0[2], c1[0], c1[1], c1[2]],
    }
}

/// Re-orthonormalizes two 3-vectors (stored as rot6d) into a rotation
/// matrix: normalize the first column, project it out of the second,
/// complete with the cross product.
pub fn gram_schmidt_6d(rot6d: &[f64; 6]) -> Result<Matrix3<f64>, GeometryError> {
    let a1 = Vector3::new(rot6d[0], rot6d[1], rot6d[2]);
    let a2 = Vector3::new(rot6d[3], rot6d[4], rot6d[5]);
    let n1 = a1.norm();
    if n1 < ROT6D_DEGENERACY_EPS {
        return Err(GeometryError::DegenerateColumn { norm: n1 });
    }
    let n2 = a2.norm();
    if n2 < ROT6D_DEGENERACY_EPS {
        return Err(GeometryError::DegenerateColumn { norm: n2 });
    }
    let cos_angle = a1.dot(&a2) / (n1 * n2);
    if cos_angle.abs() > 1.0 - ROT6D_DEGENERACY_EPS {
        return Err(GeometryError::NearParallelColumns { cos_angle });
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let b2 = u2 / u2.norm();
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

/// Decodes a 9D pose back to a full pose, re-orthonormalizing the rotation.
pub fn pose_from_9d(p: &Pose9D) -> Result<Pose, GeometryError> {
    Ok(Pose {
        position: p.position,
        rotation: gram_schmidt_6d(&p.rot6d)?,
    })
}

/// Skew-symmetric matrix `[p]` such that `[p] v = p × v`.
pub fn skew(p: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -p.z, p.y, //
        p.z, 0.0, -p.x, //
        -p.y, p.x, 0.0,
    )
}

/// Adjoint matrix of a pose with block layout `[[R, [p]R], [0, R]]`.
pub fn adjoint(pose: &Pose) -> Matrix6<f64> {
    let r = pose.rotation;
    let pr = skew(&pose.position) * r;
    let mut ad = Matrix6::zeros();
    ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    ad.fixed_view_mut::<3, 3>(0, 3).copy_from(&pr);
    ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    ad
}

/// Rodrigues formula: rotation matrix for an axis-angle vector.
pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    if theta < 1e-12 {
        return Matrix3::identity() + skew(w);
    }
    let k = skew(&(w / theta));
    Matrix3::identity() + k * theta.sin() + k * k * (1.0 - theta.cos())
}

/// Axis-angle vector of a rotation matrix. Errors near angle pi, where the
/// axis sign is ambiguous.
pub fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>, GeometryError> {
    let trace = r.trace();
    let cos_theta = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    if theta < 1e-12 {
        // First-order: R ~ I + [w].
        return Ok(Vector3::new(
            (r[(2, 1)] - r[(1, 2)]) / 2.0,
            (r[(0, 2)] - r[(2, 0)]) / 2.0,
            (r[(1, 0)] - r[(0, 1)]) / 2.0,
        ));
    }
    if theta > std::f64::consts::PI - 1e-6 {
        return Err(GeometryError::LogBranchAmbiguity { trace });
    }
    let axis = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    ) / (2.0 * theta.sin());
    Ok(axis * theta)
}

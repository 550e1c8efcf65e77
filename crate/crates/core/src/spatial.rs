//! Rigid transforms and world-frame spatial algebra.
//!
//! Spatial motion and force vectors are stored angular-first, `[ω; v]` and
//! `[n; f]`, and are always expressed in world coordinates about the world
//! origin. That lets the recursive dynamics passes accumulate quantities
//! between parent and child bodies without any frame changes.

use nalgebra::{Matrix3, Matrix6, Quaternion, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type SpatialVec = Vector6<f64>;
pub type SpatialMat = Matrix6<f64>;

/// Rigid transform: translation in metres and a unit quaternion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub position: Vec3,
    pub orientation: UnitQuaternion<f64>,
}

impl Default for Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Transform {
    pub fn identity() -> Self {
        Self {
            position: Vec3::zeros(),
            orientation: UnitQuaternion::identity(),
        }
    }

    pub fn new(position: Vec3, orientation: UnitQuaternion<f64>) -> Self {
        Self {
            position,
            orientation,
        }
    }

    pub fn from_translation(position: Vec3) -> Self {
        Self::new(position, UnitQuaternion::identity())
    }

    /// Builds a transform from a position and a `(w, x, y, z)` quaternion,
    /// normalizing the quaternion.
    pub fn from_parts(position: [f64; 3], wxyz: [f64; 4]) -> Self {
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        Self::new(Vec3::from(position), UnitQuaternion::new_normalize(q))
    }

    /// `self ∘ other`: maps points of `other`'s frame into `self`'s parent frame.
    pub fn compose(&self, other: &Transform) -> Transform {
        let q = self.orientation.into_inner() * other.orientation.into_inner();
        Transform {
            position: self.position + self.orientation * other.position,
            orientation: UnitQuaternion::new_normalize(q),
        }
    }

    pub fn inverse(&self) -> Transform {
        let inv = self.orientation.inverse();
        Transform {
            position: -(inv * self.position),
            orientation: inv,
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.position + self.orientation * p
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.orientation * v
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.orientation.to_rotation_matrix().into_inner()
    }

    pub fn quat_wxyz(&self) -> [f64; 4] {
        let q = self.orientation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn position_array(&self) -> [f64; 3] {
        [self.position.x, self.position.y, self.position.z]
    }

    /// Position followed by `(w, x, y, z)`; the 7-wide pose layout used in observations.
    pub fn to_pose7(&self) -> [f64; 7] {
        let q = self.quat_wxyz();
        [
            self.position.x,
            self.position.y,
            self.position.z,
            q[0],
            q[1],
            q[2],
            q[3],
        ]
    }

    pub fn from_pose7(p: &[f64]) -> Transform {
        Transform::from_parts([p[0], p[1], p[2]], [p[3], p[4], p[5], p[6]])
    }
}

/// Serialized transform as it appears in description and config documents.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct TransformDoc {
    #[serde(default)]
    pub pos: [f64; 3],
    #[serde(default = "identity_wxyz")]
    pub quat: [f64; 4],
}

fn identity_wxyz() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

impl Default for TransformDoc {
    fn default() -> Self {
        Self {
            pos: [0.0; 3],
            quat: identity_wxyz(),
        }
    }
}

impl From<TransformDoc> for Transform {
    fn from(d: TransformDoc) -> Self {
        Transform::from_parts(d.pos, d.quat)
    }
}

impl From<Transform> for TransformDoc {
    fn from(t: Transform) -> Self {
        TransformDoc {
            pos: t.position_array(),
            quat: t.quat_wxyz(),
        }
    }
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn angular(v: &SpatialVec) -> Vec3 {
    Vec3::new(v[0], v[1], v[2])
}

pub fn linear(v: &SpatialVec) -> Vec3 {
    Vec3::new(v[3], v[4], v[5])
}

pub fn spatial(ang: &Vec3, lin: &Vec3) -> SpatialVec {
    SpatialVec::new(ang.x, ang.y, ang.z, lin.x, lin.y, lin.z)
}

/// Motion cross product `v ×m m`.
pub fn cross_motion(v: &SpatialVec, m: &SpatialVec) -> SpatialVec {
    let (w, vl) = (angular(v), linear(v));
    let (mw, ml) = (angular(m), linear(m));
    spatial(&w.cross(&mw), &(w.cross(&ml) + vl.cross(&mw)))
}

/// Force cross product `v ×f f`.
pub fn cross_force(v: &SpatialVec, f: &SpatialVec) -> SpatialVec {
    let (w, vl) = (angular(v), linear(v));
    let (n, fl) = (angular(f), linear(f));
    spatial(&(w.cross(&n) + vl.cross(&fl)), &w.cross(&fl))
}

/// Velocity of a world point `p` for a body moving with spatial velocity `v`.
pub fn point_velocity(v: &SpatialVec, p: &Vec3) -> Vec3 {
    linear(v) + angular(v).cross(p)
}

/// Mass properties of a rigid body: mass, centre of mass, and rotational
/// inertia about the centre of mass, all in one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpatialInertia {
    pub mass: f64,
    pub com: Vec3,
    pub inertia: Mat3,
}

impl SpatialInertia {
    pub fn new(mass: f64, com: Vec3, inertia: Mat3) -> Self {
        Self { mass, com, inertia }
    }

    pub fn zero() -> Self {
        Self::new(0.0, Vec3::zeros(), Mat3::zeros())
    }

    /// Re-expresses the body in the parent frame of `t`.
    pub fn transformed(&self, t: &Transform) -> SpatialInertia {
        let r = t.rotation_matrix();
        SpatialInertia {
            mass: self.mass,
            com: t.transform_point(&self.com),
            inertia: r * self.inertia * r.transpose(),
        }
    }

    /// Combined body (parallel-axis theorem), both operands in the same frame.
    pub fn combine(&self, other: &SpatialInertia) -> SpatialInertia {
        let m = self.mass + other.mass;
        if m <= 0.0 {
            return SpatialInertia::zero();
        }
        let com = (self.com * self.mass + other.com * other.mass) / m;
        let shift = |b: &SpatialInertia| {
            let d = skew(&(b.com - com));
            b.inertia + b.mass * d * d.transpose()
        };
        SpatialInertia {
            mass: m,
            com,
            inertia: shift(self) + shift(other),
        }
    }

    /// Same body with mass scaled to `mass`; rotational inertia scales with it.
    pub fn with_mass(&self, mass: f64) -> SpatialInertia {
        let s = if self.mass > 0.0 { mass / self.mass } else { 0.0 };
        SpatialInertia {
            mass,
            com: self.com,
            inertia: self.inertia * s,
        }
    }

    /// 6×6 spatial inertia about the frame origin, angular-first.
    pub fn matrix(&self) -> SpatialMat {
        let c = skew(&self.com);
        let m = self.mass;
        let upper_left = self.inertia + m * c * c.transpose();
        let mut out = SpatialMat::zeros();
        out.fixed_view_mut::<3, 3>(0, 0).copy_from(&upper_left);
        out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(m * c));
        out.fixed_view_mut::<3, 3>(3, 0).copy_from(&(m * c.transpose()));
        out.fixed_view_mut::<3, 3>(3, 3)
            .copy_from(&(Mat3::identity() * m));
        out
    }
}

/// Axis-angle vector of a unit quaternion taking the shortest path (angle ≤ π).
pub fn rotation_vector(q: &UnitQuaternion<f64>) -> Vec3 {
    let mut q = *q.quaternion();
    if q.w < 0.0 {
        q = -q;
    }
    let v = Vec3::new(q.i, q.j, q.k);
    let s = v.norm();
    if s < 1e-12 {
        return v * 2.0;
    }
    let angle = 2.0 * s.atan2(q.w);
    v * (angle / s)
}

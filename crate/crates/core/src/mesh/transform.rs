use nalgebra::{Matrix3, Point3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rotation followed by translation: `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = RigidTransform {
            rotation,
            translation,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle);
        RigidTransform {
            rotation: *rot.matrix(),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation by `rotation` about `pivot`.
    pub fn rotation_about(rotation: Matrix3<f64>, pivot: &Point3<f64>) -> Self {
        RigidTransform {
            rotation,
            translation: pivot.coords - rotation * pivot.coords,
        }
    }

    pub fn from_euler_deg(rx: f64, ry: f64, rz: f64, t: Vector3<f64>) -> Self {
        let r = Rotation3::from_euler_angles(rx.to_radians(), ry.to_radians(), rz.to_radians());
        RigidTransform {
            rotation: *r.matrix(),
            translation: t,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let det = self.rotation.determinant();
        let ortho = (self.rotation * self.rotation.transpose() - Matrix3::identity()).abs().max();
        if (det - 1.0).abs() > 1e-9 || ortho > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "rotation is not proper orthonormal (det {det}, |RRᵀ-I| {ortho})"
            )));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite translation".into()));
        }
        Ok(())
    }

    pub fn apply_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle in radians.
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Projects the rotation block back onto SO(3).
    pub fn orthonormalized(&self) -> RigidTransform {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        RigidTransform {
            rotation: r,
            translation: self.translation,
        }
    }

    /// Small-angle update `exp([ω]ₓ)` with translation `v`, applied on the left.
    pub fn from_twist(omega: &Vector3<f64>, v: &Vector3<f64>) -> RigidTransform {
        let rot = Rotation3::new(*omega);
        RigidTransform {
            rotation: *rot.matrix(),
            translation: *v,
        }
    }
}

/// Minimal rotation taking unit `from` onto unit `to`. For antiparallel
/// inputs the axis is the first canonical axis not nearly parallel to
/// `from`, orthogonalized against it.
pub fn rotation_between(from: &Vector3<f64>, to: &Vector3<f64>) -> Matrix3<f64> {
    let a = from.normalize();
    let b = to.normalize();
    let cross = a.cross(&b);
    let s = cross.norm();
    let c = a.dot(&b).clamp(-1.0, 1.0);
    if s < 1e-12 {
        if c > 0.0 {
            return Matrix3::identity();
        }
        let axis = perpendicular_axis(&a);
        return *Rotation3::from_axis_angle(&Unit::new_unchecked(axis), std::f64::consts::PI)
            .matrix();
    }
    let angle = s.atan2(c);
    *Rotation3::from_axis_angle(&Unit::new_normalize(cross), angle).matrix()
}

pub(crate) fn perpendicular_axis(n: &Vector3<f64>) -> Vector3<f64> {
    for i in 0..3 {
        let e = Vector3::ith(i, 1.0);
        if e.dot(n).abs() < 0.9 {
            return (e - n * e.dot(n)).normalize();
        }
    }
    unreachable!("a unit vector is nearly parallel to at most one canonical axis")
}

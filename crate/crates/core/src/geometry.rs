//! SE(3) pose algebra.
//!
//! Frame convention used by every module: the global frame is x east,
//! y north, z **down** (so a landmark's z coordinate is its seafloor depth
//! and an AUV's z is its depth below the surface). Orientation is stored as
//! a unit quaternion rotating body-frame vectors into the global frame; the
//! body x axis is the along-track (sonar array) direction. Heading angles
//! are azimuths measured from north (+y) towards east (+x), so the heading
//! unit vector is `(sin psi, cos psi, 0)`.

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

/// Rigid transform: rotation (unit quaternion, body-to-global) plus translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

/// Tangent-space element of SE(3): rotation part first, translation second.
///
/// Residuals of relative-pose measurements and optimizer updates live here;
/// `Pose::exp` / `Pose::log` map between twists and poses.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Twist {
    pub rot: Vector3<f64>,
    pub trans: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(rot: Vector3<f64>, trans: Vector3<f64>) -> Self {
        Self { rot, trans }
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            rot: Vector3::new(v[0], v[1], v[2]),
            trans: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.rot.x,
            self.rot.y,
            self.rot.z,
            self.trans.x,
            self.trans.y,
            self.trans.z,
        )
    }

    pub fn norm(&self) -> f64 {
        (self.rot.norm_squared() + self.trans.norm_squared()).sqrt()
    }
}

/// Skew-symmetric matrix `[v]x` such that `[v]x w = v x w`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
        }
    }

    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Self {
            position,
            orientation,
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            position: Vector3::new(x, y, z),
            orientation: UnitQuaternion::identity(),
        }
    }

    pub fn rot_x(angle: f64) -> Self {
        Self {
            position: Vector3::zeros(),
            orientation: UnitQuaternion::from_axis_angle(&Vector3::x_axis(), angle),
        }
    }

    pub fn rot_y(angle: f64) -> Self {
        Self {
            position: Vector3::zeros(),
            orientation: UnitQuaternion::from_axis_angle(&Vector3::y_axis(), angle),
        }
    }

    pub fn rot_z(angle: f64) -> Self {
        Self {
            position: Vector3::zeros(),
            orientation: UnitQuaternion::from_axis_angle(&Vector3::z_axis(), angle),
        }
    }

    /// Pose at `position` with the body x axis pointing along the azimuth
    /// `heading` (radians from north towards east) and zero roll/pitch.
    pub fn from_heading(position: Vector3<f64>, heading: f64) -> Self {
        Self {
            position,
            orientation: UnitQuaternion::from_axis_angle(
                &Vector3::z_axis(),
                std::f64::consts::FRAC_PI_2 - heading,
            ),
        }
    }

    /// Unit horizontal projection of the body x (along-track) axis.
    pub fn heading_vector(&self) -> Vector3<f64> {
        let fwd = self.orientation * Vector3::x();
        let mut h = Vector3::new(fwd.x, fwd.y, 0.0);
        let n = h.norm();
        if n < 1e-12 {
            // Degenerate (vehicle pointing straight up/down); pick east.
            return Vector3::x();
        }
        h /= n;
        h
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        let q = self.orientation * other.orientation;
        Pose {
            position: self.position + self.orientation * other.position,
            orientation: UnitQuaternion::new_normalize(*q.quaternion()),
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.orientation.inverse();
        Pose {
            position: -(inv * self.position),
            orientation: inv,
        }
    }

    /// Relative pose `self^-1 * other`.
    pub fn relative(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.orientation * p + self.position
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.orientation * v
    }

    /// Rotation angle (radians) between the orientations of two poses.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        self.orientation.angle_to(&other.orientation)
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.orientation.to_rotation_matrix().into_inner());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.position);
        m
    }

    /// Exponential map from a twist. Rodrigues for the rotation, the SE(3)
    /// V matrix for the translation, with series fallback near zero angle.
    pub fn exp(tw: &Twist) -> Pose {
        let omega = tw.rot;
        let theta = omega.norm();
        let w = skew(&omega);
        let w2 = w * w;
        let (a, b) = if theta < 1e-8 {
            // (1-cos t)/t^2, (t-sin t)/t^3 series
            (0.5 - theta * theta / 24.0, 1.0 / 6.0 - theta * theta / 120.0)
        } else {
            let t2 = theta * theta;
            ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
        };
        let v_mat = Matrix3::identity() + w * a + w2 * b;
        let orientation = if theta < 1e-12 {
            UnitQuaternion::new_normalize(Quaternion::new(
                1.0,
                omega.x / 2.0,
                omega.y / 2.0,
                omega.z / 2.0,
            ))
        } else {
            UnitQuaternion::from_axis_angle(
                &nalgebra::Unit::new_normalize(omega),
                theta,
            )
        };
        Pose {
            position: v_mat * tw.trans,
            orientation,
        }
    }

    /// Logarithm map to a twist. Inverse of [`Pose::exp`] for rotation
    /// angles below pi.
    pub fn log(&self) -> Twist {
        let omega = self.orientation.scaled_axis();
        let theta = omega.norm();
        let w = skew(&omega);
        let w2 = w * w;
        let c = if theta < 1e-8 {
            1.0 / 12.0 + theta * theta / 720.0
        } else {
            let half = 0.5 * theta;
            (1.0 - half * half.cos() / half.sin()) / (theta * theta)
        };
        let v_inv = Matrix3::identity() - w * 0.5 + w2 * c;
        Twist {
            rot: omega,
            trans: v_inv * self.position,
        }
    }

    /// Right-perturbed pose `self * exp(delta)`: the update used by all
    /// optimizers in this crate.
    pub fn retract(&self, delta: &Vector6<f64>) -> Pose {
        self.compose(&Pose::exp(&Twist::from_vector(delta)))
    }

    /// Serialize as the 7-number file form `[x y z qw qx qy qz]`.
    pub fn to_array7(&self) -> [f64; 7] {
        let q = self.orientation.quaternion();
        [
            self.position.x,
            self.position.y,
            self.position.z,
            q.w,
            q.i,
            q.j,
            q.k,
        ]
    }

    pub fn from_array7(a: &[f64; 7]) -> Pose {
        Pose {
            position: Vector3::new(a[0], a[1], a[2]),
            orientation: UnitQuaternion::new_normalize(Quaternion::new(a[3], a[4], a[5], a[6])),
        }
    }

    /// Roll/pitch/yaw in degrees (ZYX convention), the CSV convenience form.
    pub fn to_rpy_deg(&self) -> [f64; 6] {
        let (r, p, y) = self.orientation.euler_angles();
        [
            self.position.x,
            self.position.y,
            self.position.z,
            r.to_degrees(),
            p.to_degrees(),
            y.to_degrees(),
        ]
    }

    pub fn from_rpy_deg(a: &[f64; 6]) -> Pose {
        Pose {
            position: Vector3::new(a[0], a[1], a[2]),
            orientation: UnitQuaternion::from_euler_angles(
                a[3].to_radians(),
                a[4].to_radians(),
                a[5].to_radians(),
            ),
        }
    }
}

/// Serde mirror of [`Pose`] in the 7-number form, used by config files.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PoseArray(pub [f64; 7]);

impl From<Pose> for PoseArray {
    fn from(p: Pose) -> Self {
        PoseArray(p.to_array7())
    }
}

impl From<PoseArray> for Pose {
    fn from(a: PoseArray) -> Self {
        Pose::from_array7(&a.0)
    }
}

/// `#[serde(with = ...)]` adapter storing a pose as `[x y z qw qx qy qz]`.
pub mod pose_as_array {
    use super::Pose;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(p: &Pose, s: S) -> Result<S::Ok, S::Error> {
        p.to_array7().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Pose, D::Error> {
        let a = <[f64; 7]>::deserialize(d)?;
        Ok(Pose::from_array7(&a))
    }
}

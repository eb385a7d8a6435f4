//! Rigid-body transforms, the pinhole camera and dense correspondence fields.
//!
//! Poses map world points into the camera frame (`x_cam = G * x_world`), so the
//! relative transform from frame `i` to frame `j` is `G_j * G_i^-1`. Pose
//! increments are applied on the left: `G' = exp(xi) * G`. A left increment
//! perturbs the pose in the camera frame it maps into; a right increment would
//! differ by the adjoint `Ad(G)` and yield the same solution but a differently
//! conditioned normal system.

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3, Vector6};
use rayon::prelude::*;

use crate::grid::Grid;
use crate::{Error, Result};

/// Points closer than this (meters along the optical axis) count as behind the camera.
pub const EPSILON_Z: f64 = 1e-6;

/// Dense per-pixel 2-vector field in pixels, `(du, dv)`.
pub type FlowField = Grid<Vector2<f64>>;

/// Element of the Lie algebra se(3): rotational part `omega` (radians) and
/// translational part `v` (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub omega: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl Twist {
    pub fn new(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        Self { omega, v }
    }

    pub fn zero() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    /// Packs as `[omega; v]`.
    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.v.x,
            self.v.y,
            self.v.z,
        )
    }

    pub fn from_vector(x: &Vector6<f64>) -> Self {
        Self::new(Vector3::new(x[0], x[1], x[2]), Vector3::new(x[3], x[4], x[5]))
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.omega * s, self.v * s)
    }

    pub fn is_finite(&self) -> bool {
        self.omega.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }

    /// Largest absolute component.
    pub fn max_abs(&self) -> f64 {
        self.omega
            .iter()
            .chain(self.v.iter())
            .fold(0.0_f64, |m, x| m.max(x.abs()))
    }
}

impl std::ops::Neg for Twist {
    type Output = Twist;
    fn neg(self) -> Twist {
        Twist::new(-self.omega, -self.v)
    }
}

#[inline]
pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rigid transform stored as a unit quaternion plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE3Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Default for SE3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl SE3Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds from raw quaternion components `(w, x, y, z)`, normalizing them.
    pub fn from_parts(w: f64, x: f64, y: f64, z: f64, translation: Vector3<f64>) -> Self {
        let q = nalgebra::Quaternion::new(w, x, y, z);
        Self::new(UnitQuaternion::from_quaternion(q), translation)
    }

    #[inline]
    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    #[inline]
    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &SE3Pose) -> SE3Pose {
        let q = self.rotation.quaternion() * other.rotation.quaternion();
        SE3Pose {
            rotation: UnitQuaternion::new_normalize(q),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> SE3Pose {
        let inv = self.rotation.inverse();
        SE3Pose {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates for a world-to-camera pose.
    pub fn center(&self) -> Vector3<f64> {
        self.inverse().translation
    }

    pub fn exp(xi: &Twist) -> SE3Pose {
        let theta2 = xi.omega.norm_squared();
        let theta = theta2.sqrt();
        let (a, b) = if theta < 1e-2 {
            let t4 = theta2 * theta2;
            (
                0.5 - theta2 / 24.0 + t4 / 720.0 - t4 * theta2 / 40320.0,
                1.0 / 6.0 - theta2 / 120.0 + t4 / 5040.0 - t4 * theta2 / 362880.0,
            )
        } else {
            (
                (1.0 - theta.cos()) / theta2,
                (theta - theta.sin()) / (theta2 * theta),
            )
        };
        let w = skew(&xi.omega);
        let v_mat = Matrix3::identity() + w * a + w * w * b;
        SE3Pose {
            rotation: quat_exp(&xi.omega),
            translation: v_mat * xi.v,
        }
    }

    /// Inverse of [`SE3Pose::exp`]. Rotation angles near π are outside the
    /// supported range.
    pub fn log(&self) -> Twist {
        let omega = quat_log(&self.rotation);
        let theta2 = omega.norm_squared();
        let theta = theta2.sqrt();
        let c = if theta < 1e-2 {
            1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
        } else {
            (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
        };
        let w = skew(&omega);
        let v_inv = Matrix3::identity() - w * 0.5 + w * w * c;
        Twist::new(omega, v_inv * self.translation)
    }

    /// Left retraction `exp(xi) ∘ self`.
    pub fn retract(&self, xi: &Twist) -> SE3Pose {
        SE3Pose::exp(xi).compose(self)
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.coords.iter().all(|x| x.is_finite())
            && self.translation.iter().all(|x| x.is_finite())
    }
}

fn quat_exp(omega: &Vector3<f64>) -> UnitQuaternion<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let half = 0.5 * theta;
    // sin(theta/2)/theta
    let s = if theta < 1e-4 {
        0.5 - theta2 / 48.0 + theta2 * theta2 / 3840.0
    } else {
        half.sin() / theta
    };
    let q = nalgebra::Quaternion::new(half.cos(), omega.x * s, omega.y * s, omega.z * s);
    UnitQuaternion::new_normalize(q)
}

fn quat_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let mut w = q.w;
    let mut vec = q.imag();
    if w < 0.0 {
        w = -w;
        vec = -vec;
    }
    let n = vec.norm();
    let scale = if n < 1e-8 {
        2.0 / w * (1.0 - n * n / (3.0 * w * w))
    } else {
        2.0 * n.atan2(w) / n
    };
    vec * scale
}

/// Pinhole intrinsics; pixel `(u, v)` has its center at coordinate `(u, v)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx >= 0.0
            && self.cy >= 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Intrinsics of the image subsampled at every `scale`-th pixel.
    pub fn downscaled(&self, scale: usize) -> CameraIntrinsics {
        let s = scale as f64;
        CameraIntrinsics {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: self.cx / s,
            cy: self.cy / s,
            width: self.width.div_ceil(scale),
            height: self.height.div_ceil(scale),
        }
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn in_bounds(&self, p: &Vector2<f64>) -> bool {
        p.x >= -0.5
            && p.y >= -0.5
            && p.x < self.width as f64 - 0.5
            && p.y < self.height as f64 - 0.5
    }

    pub fn project(&self, point: &Vector3<f64>) -> Result<Vector2<f64>> {
        if !(point.z > EPSILON_Z) {
            return Err(Error::NonPositiveDepth { z: point.z });
        }
        Ok(self.project_unchecked(point))
    }

    #[inline]
    pub(crate) fn project_unchecked(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    pub fn unproject(&self, pixel: &Vector2<f64>, inv_depth: f64) -> Result<Vector3<f64>> {
        if !(inv_depth > 0.0 && inv_depth.is_finite()) {
            return Err(Error::NonPositiveInverseDepth { d: inv_depth });
        }
        Ok(self.unproject_unchecked(pixel, inv_depth))
    }

    #[inline]
    pub(crate) fn unproject_unchecked(&self, pixel: &Vector2<f64>, inv_depth: f64) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx / inv_depth,
            (pixel.y - self.cy) / self.fy / inv_depth,
            1.0 / inv_depth,
        )
    }

    /// Pixel grid `p_i` at working resolution.
    pub fn pixel_grid(&self) -> Grid<Vector2<f64>> {
        Grid::from_fn(self.width, self.height, |u, v| Vector2::new(u as f64, v as f64))
    }
}

/// Per-pixel inverse depth (1/m); every entry is positive and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseDepthMap(Grid<f64>);

impl InverseDepthMap {
    pub fn new(grid: Grid<f64>) -> Result<Self> {
        if let Some(&d) = grid.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
            return Err(Error::NonPositiveInverseDepth { d });
        }
        Ok(Self(grid))
    }

    pub fn constant(width: usize, height: usize, d: f64) -> Result<Self> {
        Self::new(Grid::filled(width, height, d))
    }

    /// Skips validation; callers guarantee positivity.
    pub(crate) fn from_grid_unchecked(grid: Grid<f64>) -> Self {
        Self(grid)
    }

    #[inline]
    pub fn grid(&self) -> &Grid<f64> {
        &self.0
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        *self.0.get(u, v)
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }
}

/// Result of mapping every pixel of frame `i` into frame `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceField {
    /// `p_ij`: target pixel coordinates (the source pixel itself where invalid).
    pub coords: Grid<Vector2<f64>>,
    /// Depth (m) of the transformed point in frame `j`.
    pub target_depth: Grid<f64>,
    /// False where the point lands behind camera `j` or outside its image.
    pub valid: Grid<bool>,
}

/// Relative transform `G_j ∘ G_i^-1`.
pub fn relative_pose(pose_i: &SE3Pose, pose_j: &SE3Pose) -> SE3Pose {
    pose_j.compose(&pose_i.inverse())
}

pub fn correspondence_field(
    k: &CameraIntrinsics,
    pose_i: &SE3Pose,
    pose_j: &SE3Pose,
    depth_i: &InverseDepthMap,
) -> Result<CorrespondenceField> {
    if depth_i.dims() != k.dims() {
        return Err(Error::DimensionMismatch {
            expected: k.dims(),
            found: depth_i.dims(),
        });
    }
    let g_ij = relative_pose(pose_i, pose_j);
    let (w, h) = k.dims();
    let cells: Vec<(Vector2<f64>, f64, bool)> = (0..w * h)
        .into_par_iter()
        .map(|idx| {
            let pixel = Vector2::new((idx % w) as f64, (idx / w) as f64);
            let x_j = g_ij.transform_point(&k.unproject_unchecked(&pixel, depth_i.as_slice()[idx]));
            if x_j.z <= EPSILON_Z {
                return (pixel, x_j.z, false);
            }
            let p = k.project_unchecked(&x_j);
            (p, x_j.z, k.in_bounds(&p))
        })
        .collect();
    let mut coords = Vec::with_capacity(cells.len());
    let mut target_depth = Vec::with_capacity(cells.len());
    let mut valid = Vec::with_capacity(cells.len());
    for (p, z, ok) in cells {
        coords.push(p);
        target_depth.push(z);
        valid.push(ok);
    }
    Ok(CorrespondenceField {
        coords: Grid::from_vec(w, h, coords),
        target_depth: Grid::from_vec(w, h, target_depth),
        valid: Grid::from_vec(w, h, valid),
    })
}

/// `p_ij - p_i`.
pub fn induced_flow(coords: &Grid<Vector2<f64>>) -> FlowField {
    Grid::from_fn(coords.width(), coords.height(), |u, v| {
        coords.get(u, v) - Vector2::new(u as f64, v as f64)
    })
}

/// Adds the pixel grid back onto a flow field, giving absolute target coordinates.
pub fn flow_to_coords(flow: &FlowField) -> Grid<Vector2<f64>> {
    Grid::from_fn(flow.width(), flow.height(), |u, v| {
        flow.get(u, v) + Vector2::new(u as f64, v as f64)
    })
}

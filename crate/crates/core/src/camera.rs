//! Pinhole camera model: intrinsics, pose, rays, and the world ↔ camera ↔
//! pixel transform chain.
//!
//! Conventions (used everywhere downstream):
//! * `rotation` is camera-to-world, `center` is the camera position in world
//!   units; camera frame is x-right, y-down, z-forward.
//! * Continuous pixel coordinates span `[0, width] x [0, height]`; the pixel
//!   with integer index `(i, j)` has its center at `(i + 0.5, j + 0.5)`.
//! * `project_point` / `back_project` work in continuous pixel coordinates;
//!   `pixel_ray` takes pixel indices and applies the half-pixel shift itself.
//!
//! All geometry is double precision.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::ImageRgb;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Focal lengths, principal point and image size, all in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got ({fx}, {fy})"
            )));
        }
        if !(0.0..f64::from(width)).contains(&cx) || !(0.0..f64::from(height)).contains(&cy) {
            return Err(Error::InvalidArgument(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Symmetric pinhole intrinsics from a horizontal field of view.
    pub fn from_fov(width: u32, height: u32, fov_x_deg: f64) -> Result<Self> {
        let f = 0.5 * f64::from(width) / (0.5 * fov_x_deg.to_radians()).tan();
        Self::new(
            f,
            f,
            0.5 * f64::from(width),
            0.5 * f64::from(height),
            width,
            height,
        )
    }

    fn contains_continuous(&self, u: f64, v: f64) -> bool {
        (0.0..=f64::from(self.width)).contains(&u) && (0.0..=f64::from(self.height)).contains(&v)
    }
}

/// Rigid camera pose: camera-to-world rotation plus camera center.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    rotation: Mat3,
    center: Vec3,
}

impl CameraPose {
    /// Validates that `rotation` is orthonormal with determinant +1.
    pub fn new(rotation: Mat3, center: Vec3) -> Result<Self> {
        let gram = rotation.transpose() * rotation;
        let max_dev = (gram - Mat3::identity()).abs().max();
        if max_dev > ORTHONORMAL_TOL {
            return Err(Error::InvalidArgument(format!(
                "rotation is not orthonormal (max |RtR - I| = {max_dev:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::InvalidArgument(format!(
                "rotation determinant {det} != +1"
            )));
        }
        Ok(Self { rotation, center })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            center: Vec3::zeros(),
        }
    }

    /// Pose at `center` looking toward `target`.
    ///
    /// Up vector is world +z unless nearly parallel to the view axis
    /// (|dot| > 0.999), in which case +y is used.
    pub fn look_at(center: Vec3, target: Vec3) -> Result<Self> {
        let offset = target - center;
        if offset.norm() < 1e-9 {
            return Err(Error::DegeneratePose(format!(
                "camera center {center:?} coincides with look-at target"
            )));
        }
        let forward = offset.normalize();
        let up = if forward.dot(&Vec3::z()).abs() > 0.999 {
            Vec3::y()
        } else {
            Vec3::z()
        };
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Mat3::from_columns(&[right, down, forward]);
        Self::new(rotation, center)
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    /// World-frame unit vector along the optical axis (camera +z).
    pub fn view_axis(&self) -> Vec3 {
        self.rotation.column(2).into()
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.center)
    }

    pub fn camera_to_world(&self, p: Vec3) -> Vec3 {
        self.rotation * p + self.center
    }
}

/// A ray with unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    pub fn new(origin: Vec3, dir: Vec3) -> Result<Self> {
        if (dir.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "ray direction norm {} != 1",
                dir.norm()
            )));
        }
        Ok(Self { origin, dir })
    }

    pub fn point_at(&self, t: f64) -> Vec3 {
        self.origin + t * self.dir
    }
}

/// Intrinsics + pose; the unit every renderer and sampler consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

impl Camera {
    pub fn new(intrinsics: CameraIntrinsics, pose: CameraPose) -> Self {
        Self { intrinsics, pose }
    }

    /// Ray through pixel index `(u, v)`; sub-pixel coordinates allowed,
    /// pixel centers sit at `(u + 0.5, v + 0.5)`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Result<Ray> {
        let (uc, vc) = (u + 0.5, v + 0.5);
        if !self.intrinsics.contains_continuous(uc, vc) {
            return Err(Error::OutOfBounds {
                u,
                v,
                width: self.intrinsics.width,
                height: self.intrinsics.height,
            });
        }
        let k = &self.intrinsics;
        let dir_cam = Vec3::new((uc - k.cx) / k.fx, (vc - k.cy) / k.fy, 1.0).normalize();
        Ray::new(self.pose.center(), self.pose.rotation() * dir_cam)
    }

    /// Project a world point to continuous pixel coordinates plus
    /// camera-space depth. Errors when the point is not strictly in front.
    pub fn project_point(&self, p: Vec3) -> Result<(f64, f64, f64)> {
        let q = self.pose.world_to_camera(p);
        if q.z <= 0.0 {
            return Err(Error::BehindCamera { z: q.z });
        }
        let k = &self.intrinsics;
        Ok((k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy, q.z))
    }

    /// Lift continuous pixel coordinates `(u, v)` at depth `d` back to world.
    pub fn back_project(&self, u: f64, v: f64, d: f64) -> Result<Vec3> {
        if d <= 0.0 {
            return Err(Error::InvalidDepth(d));
        }
        if !self.intrinsics.contains_continuous(u, v) {
            return Err(Error::OutOfBounds {
                u,
                v,
                width: self.intrinsics.width,
                height: self.intrinsics.height,
            });
        }
        let k = &self.intrinsics;
        let cam = Vec3::new(d * (u - k.cx) / k.fx, d * (v - k.cy) / k.fy, d);
        Ok(self.pose.camera_to_world(cam))
    }
}

/// A camera paired with its supervision buffers.
///
/// `normals` holds world-frame unit normals in `[-1, 1]` per channel;
/// `mask` marks pixels with valid normal / foreground data. `synthetic`
/// tags splat-rendered expansion views so the refine stage can weight them.
#[derive(Debug, Clone)]
pub struct CameraView {
    pub camera: Camera,
    pub image: Option<ImageRgb>,
    pub normals: Option<ImageRgb>,
    pub mask: Option<Vec<bool>>,
    pub synthetic: bool,
}

impl CameraView {
    pub fn bare(camera: Camera) -> Self {
        Self {
            camera,
            image: None,
            normals: None,
            mask: None,
            synthetic: false,
        }
    }

    pub fn with_image(camera: Camera, image: ImageRgb) -> Self {
        Self {
            camera,
            image: Some(image),
            normals: None,
            mask: None,
            synthetic: false,
        }
    }
}

/// Flat serialization record for one camera, the on-disk JSON schema:
/// `{"fx","fy","cx","cy","width","height","rotation":[9 row-major],"center":[3]}`
/// plus optional `image` path and `synthetic` flag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Row-major camera-to-world rotation.
    pub rotation: [f64; 9],
    pub center: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub synthetic: bool,
}

impl CameraRecord {
    pub fn from_camera(camera: &Camera, image: Option<String>, synthetic: bool) -> Self {
        let r = camera.pose.rotation();
        let mut rotation = [0.0; 9];
        for row in 0..3 {
            for col in 0..3 {
                rotation[row * 3 + col] = r[(row, col)];
            }
        }
        let c = camera.pose.center();
        Self {
            fx: camera.intrinsics.fx,
            fy: camera.intrinsics.fy,
            cx: camera.intrinsics.cx,
            cy: camera.intrinsics.cy,
            width: camera.intrinsics.width,
            height: camera.intrinsics.height,
            rotation,
            center: [c.x, c.y, c.z],
            image,
            synthetic,
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        let intrinsics =
            CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)?;
        let r = &self.rotation;
        let rotation = Mat3::new(r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8]);
        let pose = CameraPose::new(rotation, Vec3::from(self.center))?;
        Ok(Camera::new(intrinsics, pose))
    }
}

/// Serialize a batch of camera records as pretty JSON.
pub fn cameras_to_json(records: &[CameraRecord]) -> Result<String> {
    Ok(serde_json::to_string_pretty(records)?)
}

/// Parse a JSON array of camera records.
pub fn cameras_from_json(json: &str) -> Result<Vec<CameraRecord>> {
    Ok(serde_json::from_str(json)?)
}

//! Analytic ground-truth scenes: CSG signed-distance shapes, sphere-traced
//! reference renders with exact depth / normals / masks, grid baking, and
//! surface point generation. Every pipeline stage is accepted against these
//! oracles.

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, CameraIntrinsics, CameraPose};
use crate::error::{Error, Result};
use crate::grid::{Aabb, SdfGrid};
use crate::img::ImageRgb;
use crate::mesh::{DepthMap, INVALID_DEPTH};
use crate::sampling::{PointCloud, PointSource};

type Vec3 = Vector3<f64>;

const HIT_EPS: f64 = 1e-6;
const MAX_STEPS: usize = 256;
const MAX_TRACE_DIST: f64 = 20.0;

/// CSG tree over signed-distance primitives. Distances are exact except for
/// `SmoothUnion`, which is a bounded approximation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CsgNode {
    Sphere {
        center: [f64; 3],
        radius: f64,
        albedo: [f64; 3],
    },
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
        albedo: [f64; 3],
    },
    /// Torus around the z axis through `center`.
    Torus {
        center: [f64; 3],
        major_radius: f64,
        minor_radius: f64,
        albedo: [f64; 3],
    },
    Union {
        a: Box<CsgNode>,
        b: Box<CsgNode>,
    },
    SmoothUnion {
        a: Box<CsgNode>,
        b: Box<CsgNode>,
        k: f64,
    },
}

impl CsgNode {
    /// Signed distance plus the albedo of the closest branch.
    pub fn eval(&self, p: Vec3) -> (f64, [f64; 3]) {
        match self {
            CsgNode::Sphere {
                center,
                radius,
                albedo,
            } => ((p - Vec3::from(*center)).norm() - radius, *albedo),
            CsgNode::Box {
                center,
                half_extents,
                albedo,
            } => {
                let q = (p - Vec3::from(*center)).abs() - Vec3::from(*half_extents);
                let outside = q.sup(&Vec3::zeros()).norm();
                let inside = q.max().min(0.0);
                (outside + inside, *albedo)
            }
            CsgNode::Torus {
                center,
                major_radius,
                minor_radius,
                albedo,
            } => {
                let q = p - Vec3::from(*center);
                let ring = (q.x * q.x + q.y * q.y).sqrt() - major_radius;
                ((ring * ring + q.z * q.z).sqrt() - minor_radius, *albedo)
            }
            CsgNode::Union { a, b } => {
                let (da, ca) = a.eval(p);
                let (db, cb) = b.eval(p);
                if da <= db {
                    (da, ca)
                } else {
                    (db, cb)
                }
            }
            CsgNode::SmoothUnion { a, b, k } => {
                let (da, ca) = a.eval(p);
                let (db, cb) = b.eval(p);
                let h = (0.5 + 0.5 * (db - da) / k).clamp(0.0, 1.0);
                let d = db + (da - db) * h - k * h * (1.0 - h);
                let mut albedo = [0.0; 3];
                for c in 0..3 {
                    albedo[c] = cb[c] + (ca[c] - cb[c]) * h;
                }
                (d, albedo)
            }
        }
    }

    pub fn distance(&self, p: Vec3) -> f64 {
        self.eval(p).0
    }

    /// Central finite-difference gradient; unit norm wherever the tree is
    /// an exact distance field.
    pub fn gradient(&self, p: Vec3) -> Vec3 {
        let h = 1e-6;
        let mut g = Vec3::zeros();
        for a in 0..3 {
            let mut hi = p;
            let mut lo = p;
            hi[a] += h;
            lo[a] -= h;
            g[a] = (self.distance(hi) - self.distance(lo)) / (2.0 * h);
        }
        g
    }
}

/// Camera rig shapes around the look-at target.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RigSpec {
    /// Evenly spaced ring at fixed elevation.
    Ring {
        radius: f64,
        elevation_deg: f64,
        count: usize,
    },
    /// Fibonacci-spiral hemisphere (z > 0).
    Hemisphere { radius: f64, count: usize },
}

impl RigSpec {
    pub fn count(&self) -> usize {
        match self {
            RigSpec::Ring { count, .. } | RigSpec::Hemisphere { count, .. } => *count,
        }
    }

    /// Camera centers in rig order.
    pub fn centers(&self) -> Vec<Vec3> {
        match *self {
            RigSpec::Ring {
                radius,
                elevation_deg,
                count,
            } => {
                let elev = elevation_deg.to_radians();
                (0..count)
                    .map(|k| {
                        let phi = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
                        Vec3::new(
                            radius * elev.cos() * phi.cos(),
                            radius * elev.cos() * phi.sin(),
                            radius * elev.sin(),
                        )
                    })
                    .collect()
            }
            RigSpec::Hemisphere { radius, count } => {
                let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
                (0..count)
                    .map(|k| {
                        // z in (0.15, 1) keeps cameras off the equator plane
                        let z = 0.15 + 0.85 * (k as f64 + 0.5) / count as f64;
                        let r = (1.0 - z * z).sqrt();
                        let phi = golden * k as f64;
                        Vec3::new(radius * r * phi.cos(), radius * r * phi.sin(), radius * z)
                    })
                    .collect()
            }
        }
    }
}

/// A full synthetic scene: shape, camera rig, directional light.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnalyticScene {
    pub shape: CsgNode,
    pub rig: RigSpec,
    /// Unit vector pointing from the surface toward the light.
    pub light: [f64; 3],
    /// Scene background color, also used by renderers downstream.
    #[serde(default = "default_background")]
    pub background: [f64; 3],
    /// World box the reconstruction grid should cover.
    #[serde(default = "default_bounds")]
    pub bounds: [f64; 6],
    /// Square image size for rig cameras.
    #[serde(default = "default_image_size")]
    pub image_size: u32,
    /// Horizontal field of view of rig cameras in degrees.
    #[serde(default = "default_fov")]
    pub fov_deg: f64,
}

fn default_background() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

fn default_bounds() -> [f64; 6] {
    [-1.0, -1.0, -1.0, 1.0, 1.0, 1.0]
}

fn default_image_size() -> u32 {
    128
}

fn default_fov() -> f64 {
    45.0
}

impl AnalyticScene {
    pub fn validate(&self) -> Result<()> {
        if self.rig.count() == 0 {
            return Err(Error::InvalidArgument("rig needs >= 1 camera".into()));
        }
        let l = Vec3::from(self.light).norm();
        if (l - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "light vector must be unit length, norm = {l}"
            )));
        }
        self.grid_bounds()?;
        Ok(())
    }

    pub fn grid_bounds(&self) -> Result<Aabb> {
        let b = &self.bounds;
        Aabb::new(Vec3::new(b[0], b[1], b[2]), Vec3::new(b[3], b[4], b[5]))
    }

    pub fn eval_sdf(&self, p: Vec3) -> f64 {
        self.shape.distance(p)
    }

    /// Rig cameras, all looking at the origin.
    pub fn cameras(&self) -> Result<Vec<Camera>> {
        let intr = CameraIntrinsics::from_fov(self.image_size, self.image_size, self.fov_deg)?;
        self.rig
            .centers()
            .into_iter()
            .map(|c| Ok(Camera::new(intr, CameraPose::look_at(c, Vec3::zeros())?)))
            .collect()
    }

    /// Default 10-camera ring scene with a unit-ish sphere.
    pub fn sphere() -> Self {
        Self {
            shape: CsgNode::Sphere {
                center: [0.0, 0.0, 0.0],
                radius: 0.5,
                albedo: [0.75, 0.25, 0.2],
            },
            rig: RigSpec::Ring {
                radius: 2.0,
                elevation_deg: 20.0,
                count: 10,
            },
            light: unit_light([0.4, 0.25, 0.88]),
            background: default_background(),
            bounds: default_bounds(),
            image_size: default_image_size(),
            fov_deg: default_fov(),
        }
    }

    /// Sphere-plus-box compound, the standard end-to-end scene.
    pub fn sphere_plus_box() -> Self {
        Self {
            shape: CsgNode::Union {
                a: Box::new(CsgNode::Sphere {
                    center: [-0.18, 0.0, 0.12],
                    radius: 0.34,
                    albedo: [0.8, 0.3, 0.2],
                }),
                b: Box::new(CsgNode::Box {
                    center: [0.22, 0.05, -0.16],
                    half_extents: [0.3, 0.24, 0.18],
                    albedo: [0.2, 0.4, 0.8],
                }),
            },
            rig: RigSpec::Ring {
                radius: 2.0,
                elevation_deg: 20.0,
                count: 10,
            },
            light: unit_light([0.35, 0.3, 0.89]),
            background: default_background(),
            bounds: default_bounds(),
            image_size: default_image_size(),
            fov_deg: default_fov(),
        }
    }
}

pub fn unit_light(v: [f64; 3]) -> [f64; 3] {
    let n = Vec3::from(v).normalize();
    [n.x, n.y, n.z]
}

/// One sphere-traced reference frame: image, z-depth, world normals, mask.
#[derive(Debug, Clone)]
pub struct ReferenceRender {
    pub rgb: ImageRgb,
    pub depth: DepthMap,
    /// World-frame unit normals (zero where the ray missed).
    pub normals: ImageRgb,
    pub mask: Vec<bool>,
}

/// Sphere trace every pixel: march until |sdf| < 1e-6 (up to 256 steps),
/// shade Lambertian `albedo * (max(0, n.l) + 0.1 ambient)`, and record
/// camera-space depth, world normal and coverage mask.
pub fn render_reference(scene: &AnalyticScene, camera: &Camera) -> ReferenceRender {
    let k = &camera.intrinsics;
    let (w, h) = (k.width, k.height);
    let mut rgb = ImageRgb::new(w, h);
    let mut depth = DepthMap::new(w, h);
    let mut normals = ImageRgb::new(w, h);
    let mut mask = vec![false; (w as usize) * (h as usize)];
    let light = Vec3::from(scene.light);

    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row_rgb = vec![0.0f64; w as usize * 3];
            let mut row_depth = vec![INVALID_DEPTH; w as usize];
            let mut row_normal = vec![0.0f64; w as usize * 3];
            let mut row_mask = vec![false; w as usize];
            for x in 0..w {
                let ray = camera
                    .pixel_ray(f64::from(x), f64::from(y))
                    .expect("pixel in bounds");
                match trace(&scene.shape, ray.origin, ray.dir) {
                    Some(t) => {
                        let p = ray.point_at(t);
                        let (_, albedo) = scene.shape.eval(p);
                        let n = scene.shape.gradient(p).normalize();
                        let lambert = n.dot(&light).max(0.0);
                        let xi = x as usize;
                        for c in 0..3 {
                            row_rgb[3 * xi + c] = (albedo[c] * (lambert + 0.1)).clamp(0.0, 1.0);
                        }
                        row_depth[xi] = camera.pose.world_to_camera(p).z;
                        row_normal[3 * xi] = n.x;
                        row_normal[3 * xi + 1] = n.y;
                        row_normal[3 * xi + 2] = n.z;
                        row_mask[xi] = true;
                    }
                    None => {
                        let xi = x as usize;
                        row_rgb[3 * xi..3 * xi + 3].copy_from_slice(&scene.background);
                    }
                }
            }
            (row_rgb, row_depth, row_normal, row_mask)
        })
        .collect();

    for (y, (row_rgb, row_depth, row_normal, row_mask)) in rows.into_iter().enumerate() {
        let base3 = y * w as usize * 3;
        let base1 = y * w as usize;
        rgb.data[base3..base3 + row_rgb.len()].copy_from_slice(&row_rgb);
        normals.data[base3..base3 + row_normal.len()].copy_from_slice(&row_normal);
        depth.data[base1..base1 + row_depth.len()].copy_from_slice(&row_depth);
        mask[base1..base1 + row_mask.len()].copy_from_slice(&row_mask);
    }
    ReferenceRender {
        rgb,
        depth,
        normals,
        mask,
    }
}

fn trace(shape: &CsgNode, origin: Vec3, dir: Vec3) -> Option<f64> {
    let mut t = 0.0f64;
    for _ in 0..MAX_STEPS {
        let d = shape.distance(origin + t * dir);
        if d.abs() < HIT_EPS {
            return Some(t);
        }
        t += d;
        if t > MAX_TRACE_DIST || t < 0.0 {
            return None;
        }
    }
    None
}

/// Nodal-exact SDF grid of the scene; colors take the nearest primitive's
/// albedo.
pub fn bake_grid(scene: &AnalyticScene, resolution: [usize; 3], bounds: Aabb) -> Result<SdfGrid> {
    let mut grid = SdfGrid::new(resolution, bounds)?;
    grid.fill_from(|p| scene.shape.distance(p));
    grid.fill_color_from(|p| scene.shape.eval(p).1);
    Ok(grid)
}

/// Exact surface points by projecting random in-bounds samples along the
/// SDF gradient until |sdf| < 1e-6.
pub fn ground_truth_points(scene: &AnalyticScene, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::InvalidArgument("need n > 0 surface points".into()));
    }
    let bounds = scene.grid_bounds()?;
    let mut rng = crate::seeds::rng(seed, "gt-points");
    let mut cloud = PointCloud::empty();
    let mut attempts = 0usize;
    let max_attempts = 200 * n;
    while cloud.len() < n && attempts < max_attempts {
        attempts += 1;
        let mut p = Vec3::new(
            rng.gen_range(bounds.min.x..bounds.max.x),
            rng.gen_range(bounds.min.y..bounds.max.y),
            rng.gen_range(bounds.min.z..bounds.max.z),
        );
        let mut ok = false;
        for _ in 0..64 {
            let d = scene.shape.distance(p);
            if d.abs() < HIT_EPS {
                ok = true;
                break;
            }
            let g = scene.shape.gradient(p);
            let gn = g.norm();
            if gn < 1e-9 {
                break;
            }
            p -= d * g / gn;
        }
        if ok && bounds.contains(p) {
            let albedo = scene.shape.eval(p).1;
            cloud.push(p, albedo, PointSource::MeshSampled);
        }
    }
    if cloud.len() < n {
        return Err(Error::Numerical(format!(
            "surface projection produced {}/{n} points",
            cloud.len()
        )));
    }
    Ok(cloud)
}

//! Camera pose expansion: new viewpoints from the sparse input rig, either
//! by bounded random perturbation of the camera centers or by natural cubic
//! spline interpolation along the capture trajectory. Orientation is always
//! look-at toward the configured target, matching the capture convention.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, CameraIntrinsics, CameraPose, CameraView};
use crate::error::{Error, Result};
use crate::splat::{rasterize, GaussianSet, RasterConfig};

type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpansionStrategy {
    Perturbation,
    Interpolation,
}

/// How many poses to generate and how.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PoseExpansionConfig {
    pub strategy: ExpansionStrategy,
    /// Number of new poses.
    pub count: usize,
    /// Per-axis perturbation bound in world units.
    pub delta: [f64; 3],
    pub seed: u64,
    /// Orientation target for every generated pose.
    pub look_at: [f64; 3],
    /// Treat the trajectory as a closed loop (ring captures): the spline
    /// also interpolates the wrap-around segment.
    #[serde(default)]
    pub closed: bool,
}

impl Default for PoseExpansionConfig {
    fn default() -> Self {
        Self {
            strategy: ExpansionStrategy::Interpolation,
            count: 10,
            delta: [0.2, 0.2, 0.2],
            seed: 0,
            look_at: [0.0, 0.0, 0.0],
            closed: false,
        }
    }
}

/// New centers at `c + U[-delta, delta]` per axis, cycling through the
/// inputs; orientation re-aimed at the look-at target.
pub fn perturb_poses(poses: &[CameraPose], cfg: &PoseExpansionConfig) -> Result<Vec<CameraPose>> {
    if poses.is_empty() {
        return Err(Error::InvalidInput("perturb_poses needs >= 1 pose".into()));
    }
    for d in cfg.delta {
        if d < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "perturbation bound must be >= 0, got {d}"
            )));
        }
    }
    let target = Vec3::from(cfg.look_at);
    let mut rng = crate::seeds::rng(cfg.seed, "pose-perturb");
    let mut out = Vec::with_capacity(cfg.count);
    for m in 0..cfg.count {
        let base = poses[m % poses.len()].center();
        let mut accepted = None;
        for _ in 0..100 {
            let mut c = base;
            for a in 0..3 {
                if cfg.delta[a] > 0.0 {
                    c[a] += rng.gen_range(-cfg.delta[a]..=cfg.delta[a]);
                }
            }
            if (c - target).norm() > 1e-9 {
                accepted = Some(c);
                break;
            }
        }
        let c = accepted.ok_or_else(|| {
            Error::DegeneratePose(format!(
                "100 perturbations of {base:?} landed on the look-at target"
            ))
        })?;
        out.push(CameraPose::look_at(c, target)?);
    }
    Ok(out)
}

/// Natural cubic spline through the input centers, chord-length
/// parameterized, evaluated at `count` parameters spaced uniformly strictly
/// inside the trajectory; look-at orientation.
pub fn interpolate_poses(
    poses: &[CameraPose],
    cfg: &PoseExpansionConfig,
) -> Result<Vec<CameraPose>> {
    if poses.len() < 2 {
        return Err(Error::InvalidInput(
            "interpolate_poses needs >= 2 poses".into(),
        ));
    }
    let mut centers: Vec<Vec3> = poses.iter().map(|p| p.center()).collect();
    if cfg.closed && centers.len() >= 3 && (centers[0] - centers[centers.len() - 1]).norm() > 1e-12
    {
        centers.push(centers[0]);
    }
    let spline = CubicSpline::through(&centers)?;
    let target = Vec3::from(cfg.look_at);
    let total = spline.total_length();
    let mut out = Vec::with_capacity(cfg.count);
    for j in 0..cfg.count {
        let s = total * (j as f64 + 1.0) / (cfg.count as f64 + 1.0);
        let c = spline.eval(s);
        if (c - target).norm() <= 1e-9 {
            return Err(Error::DegeneratePose(format!(
                "interpolated center at parameter {s} coincides with the look-at target"
            )));
        }
        out.push(CameraPose::look_at(c, target)?);
    }
    Ok(out)
}

/// Expand with the configured strategy.
pub fn expand_poses(poses: &[CameraPose], cfg: &PoseExpansionConfig) -> Result<Vec<CameraPose>> {
    match cfg.strategy {
        ExpansionStrategy::Perturbation => perturb_poses(poses, cfg),
        ExpansionStrategy::Interpolation => interpolate_poses(poses, cfg),
    }
}

/// Rasterize the trained splats at each new pose; the returned views carry
/// the rendered image and a `synthetic` tag so refinement can weight them.
pub fn render_expanded(
    set: &GaussianSet,
    new_poses: &[CameraPose],
    intrinsics: CameraIntrinsics,
    raster: &RasterConfig,
) -> Vec<CameraView> {
    new_poses
        .iter()
        .map(|pose| {
            let camera = Camera::new(intrinsics, pose.clone());
            let (image, _) = rasterize(set, &camera, raster);
            CameraView {
                camera,
                image: Some(image),
                normals: None,
                mask: None,
                synthetic: true,
            }
        })
        .collect()
}

/// Natural cubic spline through 3D knots with chord-length parameters.
pub struct CubicSpline {
    /// Knot parameters, strictly increasing, starting at 0.
    s: Vec<f64>,
    knots: Vec<Vec3>,
    /// Second derivatives per knot and axis (natural: zero at the ends).
    m: Vec<Vec3>,
}

impl CubicSpline {
    pub fn through(knots: &[Vec3]) -> Result<Self> {
        let n = knots.len();
        if n < 2 {
            return Err(Error::InvalidInput("spline needs >= 2 knots".into()));
        }
        let mut s = Vec::with_capacity(n);
        s.push(0.0);
        for i in 1..n {
            let h = (knots[i] - knots[i - 1]).norm();
            if h < 1e-12 {
                return Err(Error::InvalidInput(format!(
                    "coincident consecutive trajectory points at index {i}"
                )));
            }
            s.push(s[i - 1] + h);
        }
        let mut m = vec![Vec3::zeros(); n];
        if n > 2 {
            // Thomas solve of the tridiagonal second-derivative system,
            // one pass per axis
            let inner = n - 2;
            for axis in 0..3 {
                let mut diag = vec![0.0; inner];
                let mut rhs = vec![0.0; inner];
                let mut upper = vec![0.0; inner];
                for i in 1..n - 1 {
                    let h0 = s[i] - s[i - 1];
                    let h1 = s[i + 1] - s[i];
                    diag[i - 1] = 2.0 * (h0 + h1);
                    upper[i - 1] = h1;
                    rhs[i - 1] = 6.0
                        * ((knots[i + 1][axis] - knots[i][axis]) / h1
                            - (knots[i][axis] - knots[i - 1][axis]) / h0);
                }
                // forward elimination (sub-diagonal is h at each row)
                for i in 1..inner {
                    let h0 = s[i + 1] - s[i];
                    let w = h0 / diag[i - 1];
                    diag[i] -= w * upper[i - 1];
                    rhs[i] -= w * rhs[i - 1];
                }
                let mut sol = vec![0.0; inner];
                sol[inner - 1] = rhs[inner - 1] / diag[inner - 1];
                for i in (0..inner - 1).rev() {
                    sol[i] = (rhs[i] - upper[i] * sol[i + 1]) / diag[i];
                }
                for i in 0..inner {
                    m[i + 1][axis] = sol[i];
                }
            }
        }
        Ok(Self {
            s,
            knots: knots.to_vec(),
            m,
        })
    }

    pub fn total_length(&self) -> f64 {
        *self.s.last().unwrap()
    }

    pub fn knot_parameter(&self, i: usize) -> f64 {
        self.s[i]
    }

    pub fn eval(&self, s: f64) -> Vec3 {
        let n = self.knots.len();
        let i = match self.s.partition_point(|&k| k <= s) {
            0 => 0,
            p => (p - 1).min(n - 2),
        };
        let h = self.s[i + 1] - self.s[i];
        let a = (self.s[i + 1] - s) / h;
        let b = (s - self.s[i]) / h;
        let h2 = h * h / 6.0;
        self.knots[i] * a
            + self.knots[i + 1] * b
            + self.m[i] * ((a * a * a - a) * h2)
            + self.m[i + 1] * ((b * b * b - b) * h2)
    }
}

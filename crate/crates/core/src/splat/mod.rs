//! CPU 3D Gaussian splatting: covariance construction, perspective
//! projection of splats, tile-based alpha-blended rasterization with a
//! hand-derived backward pass, and a densify/prune trainer.

mod backward;
mod raster;
mod train;

pub use backward::{splat_backward, SplatGradients};
pub use raster::{rasterize, reference_rasterize, RasterConfig};
pub use train::{init_from_cloud, train_splats, SplatTrainConfig};

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use crate::camera::Camera;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One anisotropic 3D Gaussian: position, axis scales (log-space), unit
/// quaternion orientation (w, x, y, z), opacity logit and RGB color.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: Vec3,
    pub log_scale: Vec3,
    pub rot: [f64; 4],
    pub opacity_logit: f64,
    pub color: [f64; 3],
}

impl Gaussian {
    /// Isotropic gaussian with identity orientation.
    pub fn isotropic(mean: Vec3, scale: f64, opacity: f64, color: [f64; 3]) -> Self {
        Self {
            mean,
            log_scale: Vec3::repeat(scale.ln()),
            rot: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit(opacity),
            color,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scales(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }

    /// Rotation matrix of the (normalized) quaternion.
    pub fn rotation(&self) -> Mat3 {
        let n = quat_norm(&self.rot);
        let [w, x, y, z] = self.rot.map(|c| c / n);
        rotation_from_unit_quat(w, x, y, z)
    }

    /// World-space covariance R S S^T R^T.
    pub fn covariance(&self) -> Mat3 {
        let m = self.rotation() * Mat3::from_diagonal(&self.scales());
        m * m.transpose()
    }
}

pub(crate) fn quat_norm(q: &[f64; 4]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub(crate) fn rotation_from_unit_quat(w: f64, x: f64, y: f64, z: f64) -> Mat3 {
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

/// The set of gaussians plus the densification bookkeeping the trainer
/// maintains between iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    pub gaussians: Vec<Gaussian>,
    /// Sum of positional-gradient norms since the last densify step.
    pub grad_accum: Vec<f64>,
    /// Number of iterations each gaussian received gradient.
    pub grad_count: Vec<u32>,
}

impl GaussianSet {
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        let n = gaussians.len();
        Self {
            gaussians,
            grad_accum: vec![0.0; n],
            grad_count: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub(crate) fn reset_accumulators(&mut self) {
        self.grad_accum = vec![0.0; self.gaussians.len()];
        self.grad_count = vec![0; self.gaussians.len()];
    }
}

/// A gaussian projected to the image plane: center, inverse 2D covariance
/// (conic), depth for sorting, and a conservative pixel footprint radius.
#[derive(Debug, Clone, Copy)]
pub struct Splat2D {
    pub gaussian: u32,
    pub center: Vector2<f64>,
    /// (a, b, c) of the symmetric conic [[a, b], [b, c]].
    pub conic: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
    pub radius: f64,
}

/// Everything the backward pass needs to re-chain a projection.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionScratch {
    /// Camera-space mean.
    pub t: Vec3,
    /// Camera-space covariance W Sigma W^T.
    pub cov_cam: Mat3,
    /// Projection jacobian rows (2x3).
    pub j: [[f64; 3]; 2],
    /// Screen covariance plus low-pass term.
    pub cov2: Matrix2<f64>,
}

/// Project one gaussian through `camera`. Returns `None` when the mean is
/// behind the camera, the footprint is negligible, or the screen covariance
/// degenerates.
pub fn project_gaussian(
    g: &Gaussian,
    index: u32,
    camera: &Camera,
    cfg: &RasterConfig,
) -> Option<(Splat2D, ProjectionScratch)> {
    let t = camera.pose.world_to_camera(g.mean);
    if t.z <= 1e-9 {
        return None;
    }
    let k = &camera.intrinsics;
    let w = camera.pose.rotation().transpose();
    let cov_cam = w * g.covariance() * w.transpose();
    let (tz, tz2) = (t.z, t.z * t.z);
    let j = [
        [k.fx / tz, 0.0, -k.fx * t.x / tz2],
        [0.0, k.fy / tz, -k.fy * t.y / tz2],
    ];
    // Sigma' = J Sigma_cam J^T, then the screen-space low-pass term
    let mut cov2 = Matrix2::zeros();
    for r in 0..2 {
        for c in 0..2 {
            let mut acc = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    acc += j[r][a] * cov_cam[(a, b)] * j[c][b];
                }
            }
            cov2[(r, c)] = acc;
        }
    }
    cov2[(0, 0)] += cfg.lowpass;
    cov2[(1, 1)] += cfg.lowpass;

    let det = cov2[(0, 0)] * cov2[(1, 1)] - cov2[(0, 1)] * cov2[(1, 0)];
    if det <= 0.0 {
        return None;
    }
    let conic = [
        cov2[(1, 1)] / det,
        -cov2[(0, 1)] / det,
        cov2[(0, 0)] / det,
    ];
    let opacity = g.opacity();
    if opacity <= cfg.alpha_eps {
        return None;
    }
    // footprint radius: at least sigma_cutoff sigmas, widened so truncated
    // contributions stay below alpha_eps
    let mid = 0.5 * (cov2[(0, 0)] + cov2[(1, 1)]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let n_sigma = cfg
        .sigma_cutoff
        .max((2.0 * (opacity / cfg.alpha_eps).ln()).sqrt());
    let radius = n_sigma * lambda_max.sqrt();

    let center = Vector2::new(k.fx * t.x / tz + k.cx, k.fy * t.y / tz + k.cy);
    Some((
        Splat2D {
            gaussian: index,
            center,
            conic,
            depth: tz,
            color: g.color,
            opacity,
            radius,
        },
        ProjectionScratch { t, cov_cam, j, cov2 },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{CameraIntrinsics, CameraPose};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn test_camera() -> Camera {
        Camera::new(
            CameraIntrinsics::new(100.0, 100.0, 32.0, 32.0, 64, 64).unwrap(),
            CameraPose::identity(),
        )
    }

    #[test]
    fn covariance_diagonal_case() {
        let g = Gaussian {
            mean: Vec3::zeros(),
            log_scale: Vec3::new(2.0f64.ln(), 0.0, 0.0),
            rot: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: 0.0,
            color: [1.0; 3],
        };
        let cov = g.covariance();
        let expect = Mat3::from_diagonal(&Vec3::new(4.0, 1.0, 1.0));
        assert_relative_eq!(cov, expect, epsilon = 1e-12);
    }

    #[test]
    fn covariance_rotated_90_degrees_about_z() {
        let half = std::f64::consts::FRAC_PI_4; // quaternion half-angle
        let g = Gaussian {
            mean: Vec3::zeros(),
            log_scale: Vec3::new(2.0f64.ln(), 0.0, 0.0),
            rot: [half.cos(), 0.0, 0.0, half.sin()],
            opacity_logit: 0.0,
            color: [1.0; 3],
        };
        let cov = g.covariance();
        let expect = Mat3::from_diagonal(&Vec3::new(1.0, 4.0, 1.0));
        assert_relative_eq!(cov, expect, epsilon = 1e-12);
    }

    #[test]
    fn covariance_is_symmetric_positive_definite() {
        let mut rng = crate::seeds::rng(40, "spd");
        for _ in 0..10_000 {
            let g = Gaussian {
                mean: Vec3::zeros(),
                log_scale: Vec3::new(
                    rng.gen_range(-3.0..1.0),
                    rng.gen_range(-3.0..1.0),
                    rng.gen_range(-3.0..1.0),
                ),
                rot: [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ],
                opacity_logit: 0.0,
                color: [0.5; 3],
            };
            if quat_norm(&g.rot) < 1e-3 {
                continue;
            }
            let cov = g.covariance();
            let asym = (cov - cov.transpose()).abs().max();
            assert!(asym < 1e-12, "asymmetry {asym}");
            assert!(
                cov.cholesky().is_some(),
                "covariance not positive definite: {cov:?}"
            );
        }
    }

    #[test]
    fn rotation_derivative_against_quaternion_perturbation() {
        // sanity for rotation_from_unit_quat itself: orthonormal, det +1
        let mut rng = crate::seeds::rng(41, "quat");
        for _ in 0..100 {
            let q = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let n = quat_norm(&q);
            if n < 1e-3 {
                continue;
            }
            let [w, x, y, z] = q.map(|c| c / n);
            let r = rotation_from_unit_quat(w, x, y, z);
            assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-12);
            assert_relative_eq!(r.transpose() * r, Mat3::identity(), epsilon = 1e-12);
        }
    }

    #[test]
    fn projection_culls_behind_camera() {
        let cam = test_camera();
        let cfg = RasterConfig::default();
        let g = Gaussian::isotropic(Vec3::new(0.0, 0.0, -1.0), 0.1, 0.5, [1.0; 3]);
        assert!(project_gaussian(&g, 0, &cam, &cfg).is_none());
        let g2 = Gaussian::isotropic(Vec3::new(0.0, 0.0, 2.0), 0.1, 0.5, [1.0; 3]);
        assert!(project_gaussian(&g2, 0, &cam, &cfg).is_some());
    }

    #[test]
    fn projected_center_matches_point_projection() {
        let cam = test_camera();
        let cfg = RasterConfig::default();
        let mean = Vec3::new(0.3, -0.2, 2.5);
        let g = Gaussian::isotropic(mean, 0.05, 0.7, [1.0; 3]);
        let (splat, _) = project_gaussian(&g, 0, &cam, &cfg).unwrap();
        let (u, v, d) = cam.project_point(mean).unwrap();
        assert_relative_eq!(splat.center.x, u, epsilon = 1e-12);
        assert_relative_eq!(splat.center.y, v, epsilon = 1e-12);
        assert_relative_eq!(splat.depth, d, epsilon = 1e-12);
    }

    #[test]
    fn screen_covariance_matches_numeric_jacobian_pushforward() {
        // compare Sigma' (without the low-pass term) against J_num Sigma J_num^T
        // where J_num is the finite-difference jacobian of the projection
        let cam = Camera::new(
            CameraIntrinsics::new(90.0, 95.0, 30.0, 34.0, 64, 64).unwrap(),
            CameraPose::look_at(Vec3::new(0.6, -1.8, 0.4), Vec3::zeros()).unwrap(),
        );
        let mut cfg = RasterConfig::default();
        cfg.lowpass = 0.0;
        let mut rng = crate::seeds::rng(42, "jacobian");
        for _ in 0..20 {
            let mean = Vec3::new(
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
            );
            let g = Gaussian {
                mean,
                log_scale: Vec3::repeat(rng.gen_range(-5.0..-3.5)),
                rot: [
                    rng.gen_range(0.5..1.0),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                ],
                opacity_logit: 0.0,
                color: [1.0; 3],
            };
            let (_, scratch) = project_gaussian(&g, 0, &cam, &cfg).unwrap();
            let project = |p: Vec3| {
                let (u, v, _) = cam.project_point(p).unwrap();
                Vector2::new(u, v)
            };
            let eps = 1e-6;
            let mut j_num = [[0.0f64; 3]; 2];
            for a in 0..3 {
                let mut dp = Vec3::zeros();
                dp[a] = eps;
                let hi = project(mean + dp);
                let lo = project(mean - dp);
                j_num[0][a] = (hi.x - lo.x) / (2.0 * eps);
                j_num[1][a] = (hi.y - lo.y) / (2.0 * eps);
            }
            let sigma = g.covariance();
            let mut expect = [[0.0f64; 2]; 2];
            for r in 0..2 {
                for c in 0..2 {
                    let mut acc = 0.0;
                    for a in 0..3 {
                        for b in 0..3 {
                            acc += j_num[r][a] * sigma[(a, b)] * j_num[c][b];
                        }
                    }
                    expect[r][c] = acc;
                }
            }
            for r in 0..2 {
                for c in 0..2 {
                    let got = scratch.cov2[(r, c)];
                    let rel = (got - expect[r][c]).abs() / expect[r][c].abs().max(1e-9);
                    assert!(
                        rel < 1e-3,
                        "cov2[{r}][{c}] = {got} vs numeric {}",
                        expect[r][c]
                    );
                }
            }
        }
    }
}

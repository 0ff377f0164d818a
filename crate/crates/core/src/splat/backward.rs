//! Hand-derived reverse pass through the tile rasterizer.
//!
//! Per pixel, the forward compositing is replayed and walked back to front
//! with a suffix accumulator, yielding gradients of the photometric loss
//! w.r.t. each splat's 2D quantities (center, conic, opacity, color). Those
//! are then chained through the projection:
//! conic -> screen covariance -> jacobian / camera covariance -> world
//! covariance -> (rotation, scales), and center/jacobian -> camera-space
//! mean -> world mean. Sorting depth is treated as non-differentiable.

use nalgebra::{Matrix2, Matrix3};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::img::ImageRgb;
use crate::splat::raster::{bin_tiles, pixel_contributions, RasterConfig};
use crate::splat::{
    project_gaussian, quat_norm, GaussianSet, ProjectionScratch, Splat2D, Vec3,
};

/// Per-parameter-group gradients, indexed like `set.gaussians`.
#[derive(Debug, Clone)]
pub struct SplatGradients {
    pub mean: Vec<Vec3>,
    pub log_scale: Vec<Vec3>,
    pub rot: Vec<[f64; 4]>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

impl SplatGradients {
    fn zeros(n: usize) -> Self {
        Self {
            mean: vec![Vec3::zeros(); n],
            log_scale: vec![Vec3::zeros(); n],
            rot: vec![[0.0; 4]; n],
            opacity_logit: vec![0.0; n],
            color: vec![[0.0; 3]; n],
        }
    }

    /// Euclidean norm of the positional gradient of gaussian `i`.
    pub fn mean_norm(&self, i: usize) -> f64 {
        self.mean[i].norm()
    }
}

/// Gradients of the splat's screen-space quantities, accumulated per pixel.
#[derive(Debug, Clone, Copy, Default)]
struct ScreenGrad {
    center: [f64; 2],
    /// Full-matrix conic gradient entries (g00, g01, g11).
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        for k in 0..2 {
            self.center[k] += o.center[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

/// Backpropagate a per-pixel RGB gradient image through the rasterizer.
pub fn splat_backward(
    set: &GaussianSet,
    camera: &Camera,
    cfg: &RasterConfig,
    pixel_grad: &ImageRgb,
) -> SplatGradients {
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    assert_eq!(
        (pixel_grad.width, pixel_grad.height),
        (w, h),
        "pixel gradient size must match the camera"
    );
    let mut grads = SplatGradients::zeros(set.len());

    // identical projection + ordering as the forward pass, with scratch
    let mut projected: Vec<(Splat2D, ProjectionScratch)> = set
        .gaussians
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| project_gaussian(g, i as u32, camera, cfg))
        .collect();
    projected.sort_unstable_by(|a, b| {
        a.0.depth
            .partial_cmp(&b.0.depth)
            .unwrap()
            .then(a.0.gaussian.cmp(&b.0.gaussian))
    });
    if projected.is_empty() {
        return grads;
    }
    let splats: Vec<Splat2D> = projected.iter().map(|(s, _)| *s).collect();
    let (tiles_x, tiles_y, tiles) = bin_tiles(&splats, w, h, cfg.tile_size);

    // per-tile screen-space gradient accumulation
    let tile_grads: Vec<Vec<ScreenGrad>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile_idx| {
            let list = &tiles[tile_idx];
            let mut acc = vec![ScreenGrad::default(); list.len()];
            if list.is_empty() {
                return acc;
            }
            let tx = tile_idx % tiles_x;
            let ty = tile_idx / tiles_x;
            let x0 = (tx as u32) * cfg.tile_size;
            let y0 = (ty as u32) * cfg.tile_size;
            let x1 = (x0 + cfg.tile_size).min(w);
            let y1 = (y0 + cfg.tile_size).min(h);
            let mut contribs: Vec<(u32, f64, f64)> = Vec::with_capacity(list.len());
            // local position of each splat in this tile's list
            let mut local_pos = vec![u32::MAX; splats.len()];
            for (pos, &si) in list.iter().enumerate() {
                local_pos[si as usize] = pos as u32;
            }
            for y in y0..y1 {
                let py = f64::from(y) + 0.5;
                for x in x0..x1 {
                    let px = f64::from(x) + 0.5;
                    let dldc = pixel_grad.get(x, y);
                    if dldc == [0.0, 0.0, 0.0] {
                        continue;
                    }
                    let t_final = pixel_contributions(&splats, list, px, py, cfg, &mut contribs);
                    // suffix term: everything composited behind sample i
                    let bg_dot =
                        cfg.background[0] * dldc[0] + cfg.background[1] * dldc[1]
                            + cfg.background[2] * dldc[2];
                    let mut suffix = t_final * bg_dot;
                    for &(si, alpha, t_before) in contribs.iter().rev() {
                        let s = &splats[si as usize];
                        let a = &mut acc[local_pos[si as usize] as usize];
                        let wgt = t_before * alpha;
                        for c in 0..3 {
                            a.color[c] += wgt * dldc[c];
                        }
                        let color_dot =
                            s.color[0] * dldc[0] + s.color[1] * dldc[1] + s.color[2] * dldc[2];
                        let one_minus = 1.0 - alpha;
                        let dalpha = if one_minus > 1e-12 {
                            t_before * color_dot - suffix / one_minus
                        } else {
                            t_before * color_dot
                        };
                        suffix += wgt * color_dot;
                        if alpha >= cfg.alpha_clamp {
                            continue; // clamped: no gradient through alpha
                        }
                        let g_exp = alpha / s.opacity;
                        a.opacity += g_exp * dalpha;
                        let dq = -0.5 * alpha * dalpha;
                        let dx = px - s.center.x;
                        let dy = py - s.center.y;
                        a.conic[0] += dq * dx * dx;
                        a.conic[1] += dq * dx * dy;
                        a.conic[2] += dq * dy * dy;
                        let adx = s.conic[0] * dx + s.conic[1] * dy;
                        let ady = s.conic[1] * dx + s.conic[2] * dy;
                        a.center[0] += dq * (-2.0) * adx;
                        a.center[1] += dq * (-2.0) * ady;
                    }
                }
            }
            acc
        })
        .collect();

    // deterministic merge in tile order
    let mut screen: Vec<ScreenGrad> = vec![ScreenGrad::default(); splats.len()];
    for (tile_idx, acc) in tile_grads.iter().enumerate() {
        for (pos, g) in acc.iter().enumerate() {
            screen[tiles[tile_idx][pos] as usize].add(g);
        }
    }

    // chain screen-space gradients through the projection, per splat
    let per_splat: Vec<(u32, Vec3, Vec3, [f64; 4], f64, [f64; 3])> = projected
        .par_iter()
        .zip(screen.par_iter())
        .map(|((splat, scratch), sg)| {
            chain_projection(set, camera, splat, scratch, sg)
        })
        .collect();
    for (gid, d_mean, d_ls, d_rot, d_logit, d_color) in per_splat {
        let i = gid as usize;
        grads.mean[i] = d_mean;
        grads.log_scale[i] = d_ls;
        grads.rot[i] = d_rot;
        grads.opacity_logit[i] = d_logit;
        grads.color[i] = d_color;
    }
    grads
}

fn chain_projection(
    set: &GaussianSet,
    camera: &Camera,
    splat: &Splat2D,
    scratch: &ProjectionScratch,
    sg: &ScreenGrad,
) -> (u32, Vec3, Vec3, [f64; 4], f64, [f64; 3]) {
    let g = &set.gaussians[splat.gaussian as usize];
    let k = &camera.intrinsics;
    let w = camera.pose.rotation().transpose();

    // opacity logit
    let o = splat.opacity;
    let d_logit = o * (1.0 - o) * sg.opacity;

    // conic A = M2^-1  =>  dL/dM2 = -A G_A A
    let a_mat = Matrix2::new(splat.conic[0], splat.conic[1], splat.conic[1], splat.conic[2]);
    let g_a = Matrix2::new(sg.conic[0], sg.conic[1], sg.conic[1], sg.conic[2]);
    let g_m2 = -(a_mat * g_a * a_mat);

    // Sigma' = J Sigma_cam J^T (low-pass shift has identity gradient)
    let j = &scratch.j;
    let mut g_j = [[0.0f64; 3]; 2];
    // G_J = (G + G^T) J Sigma_cam = 2 G J Sigma_cam for symmetric G
    for r in 0..2 {
        for c in 0..3 {
            let mut acc = 0.0;
            for p in 0..2 {
                for q in 0..3 {
                    acc += 2.0 * g_m2[(r, p)] * j[p][q] * scratch.cov_cam[(q, c)];
                }
            }
            g_j[r][c] = acc;
        }
    }
    let mut g_cov_cam = Matrix3::zeros();
    for a in 0..3 {
        for b in 0..3 {
            let mut acc = 0.0;
            for r in 0..2 {
                for c in 0..2 {
                    acc += j[r][a] * g_m2[(r, c)] * j[c][b];
                }
            }
            g_cov_cam[(a, b)] = acc;
        }
    }

    // Sigma_cam = W Sigma W^T
    let g_sigma = w.transpose() * g_cov_cam * w;

    // Sigma = M M^T with M = R diag(s)
    let n = quat_norm(&g.rot);
    let quat = g.rot.map(|c| c / n);
    let rot = crate::splat::rotation_from_unit_quat(quat[0], quat[1], quat[2], quat[3]);
    let s = g.scales();
    let m3 = rot * Matrix3::from_diagonal(&s);
    let g_m3 = (g_sigma + g_sigma.transpose()) * m3;

    let mut d_ls = Vec3::zeros();
    for kcol in 0..3 {
        let ds = rot.column(kcol).dot(&g_m3.column(kcol));
        d_ls[kcol] = s[kcol] * ds;
    }
    let g_r = g_m3 * Matrix3::from_diagonal(&s);

    // rotation w.r.t. the unit quaternion, then through normalization
    let (qw, qx, qy, qz) = (quat[0], quat[1], quat[2], quat[3]);
    let dr_dq = [
        Matrix3::new(0.0, -qz, qy, qz, 0.0, -qx, -qy, qx, 0.0) * 2.0,
        Matrix3::new(0.0, qy, qz, qy, -2.0 * qx, -qw, qz, qw, -2.0 * qx) * 2.0,
        Matrix3::new(-2.0 * qy, qx, qw, qx, 0.0, qz, -qw, qz, -2.0 * qy) * 2.0,
        Matrix3::new(-2.0 * qz, -qw, qx, qw, -2.0 * qz, qy, qx, qy, 0.0) * 2.0,
    ];
    let mut d_qhat = [0.0f64; 4];
    for (i, dm) in dr_dq.iter().enumerate() {
        d_qhat[i] = g_r.component_mul(dm).sum();
    }
    let dot: f64 = (0..4).map(|i| quat[i] * d_qhat[i]).sum();
    let mut d_rot = [0.0f64; 4];
    for i in 0..4 {
        d_rot[i] = (d_qhat[i] - quat[i] * dot) / n;
    }

    // camera-space mean from the projected center and the jacobian entries
    let t = scratch.t;
    let (tz, tz2) = (t.z, t.z * t.z);
    let tz3 = tz2 * t.z;
    let (du, dv) = (sg.center[0], sg.center[1]);
    let dt = Vec3::new(
        du * k.fx / tz + g_j[0][2] * (-k.fx / tz2),
        dv * k.fy / tz + g_j[1][2] * (-k.fy / tz2),
        du * (-k.fx * t.x / tz2)
            + dv * (-k.fy * t.y / tz2)
            + g_j[0][0] * (-k.fx / tz2)
            + g_j[1][1] * (-k.fy / tz2)
            + g_j[0][2] * (2.0 * k.fx * t.x / tz3)
            + g_j[1][2] * (2.0 * k.fy * t.y / tz3),
    );
    let d_mean = w.transpose() * dt;

    (splat.gaussian, d_mean, d_ls, d_rot, d_logit, sg.color)
}

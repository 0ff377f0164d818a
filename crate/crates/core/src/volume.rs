//! Differentiable volume rendering over the voxel SDF grid.
//!
//! Opacity comes from consecutive SDF samples through a learnable-sharpness
//! sigmoid: `alpha_i = max((phi(f_i) - phi(f_{i+1})) / phi(f_i), 0)` with
//! `phi(x) = sigmoid(s x)`. Colors, normals and opacities composite front to
//! back; the full coarse loss (photometric + TV + smoothness + normal) has a
//! hand-derived reverse pass w.r.t. SDF values, color values and `log s`,
//! validated against finite differences.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::camera::{CameraView, Ray};
use crate::error::{Error, Result};
use crate::grid::SdfGrid;

type Vec3 = Vector3<f64>;

/// Per-ray rendering parameters. `s_param` is the sigmoid sharpness the
/// trainer learns in log-space.
#[derive(Debug, Clone)]
pub struct RenderConfig {
    pub n_samples: usize,
    pub near: f64,
    pub far: f64,
    pub s_param: f64,
    pub background: [f64; 3],
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::InvalidArgument(format!(
                "need >= 2 samples per ray, got {}",
                self.n_samples
            )));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::InvalidArgument(format!(
                "require 0 < near < far, got [{}, {}]",
                self.near, self.far
            )));
        }
        if self.s_param <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "sharpness must be positive, got {}",
                self.s_param
            )));
        }
        Ok(())
    }
}

/// Loss term weights; the photometric term is implicitly weighted 1.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub tv: f64,
    pub smooth: f64,
    pub normal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        // the normal weight is the published 0.05; TV/smooth weights are
        // unpublished and live here as tunable defaults
        Self {
            tv: 1e-2,
            smooth: 1e-2,
            normal: 0.05,
        }
    }
}

/// Scalar loss breakdown for one evaluation or training step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub recon: f64,
    pub tv: f64,
    pub smooth: f64,
    pub normal: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// Gradients of the total loss w.r.t. the trainable state.
#[derive(Debug, Clone)]
pub struct CoarseGradients {
    pub sdf: Vec<f64>,
    pub color: Vec<f64>,
    pub log_s: f64,
}

/// Full per-sample trace of one rendered ray, for inspection and tests.
#[derive(Debug, Clone, Default)]
pub struct RaySampleSet {
    pub t: Vec<f64>,
    pub points: Vec<Vec3>,
    pub sdf: Vec<f64>,
    pub alpha: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    pub normal: Vec<Vec3>,
}

/// Composited outputs of one ray.
#[derive(Debug, Clone, Copy)]
pub struct RayRender {
    pub rgb: [f64; 3],
    pub normal: Vec3,
    pub opacity: f64,
}

#[inline]
fn softplus(u: f64) -> f64 {
    if u > 30.0 {
        u
    } else if u < -30.0 {
        u.exp()
    } else {
        u.exp().ln_1p()
    }
}

#[inline]
fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

/// NeuS-style opacity from two consecutive SDF samples. Total on finite
/// inputs and stable for large `s`.
pub fn alpha_from_sdf(f_i: f64, f_next: f64, s: f64) -> f64 {
    debug_assert!(s > 0.0);
    // phi(b)/phi(a) = exp(softplus(-s a) - softplus(-s b))
    let ratio = (softplus(-s * f_i) - softplus(-s * f_next)).exp();
    (1.0 - ratio).max(0.0)
}

/// d(alpha)/d(f_i, f_next, ln s); zero in the clamped region.
fn alpha_gradients(f_i: f64, f_next: f64, s: f64) -> (f64, f64, f64) {
    let ratio = (softplus(-s * f_i) - softplus(-s * f_next)).exp();
    if 1.0 - ratio <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let sig_a = logistic(-s * f_i);
    let sig_b = logistic(-s * f_next);
    let d_fi = ratio * s * sig_a;
    let d_fnext = -ratio * s * sig_b;
    let d_s = ratio * (f_i * sig_a - f_next * sig_b);
    (d_fi, d_fnext, s * d_s)
}

/// Front-to-back compositing of a payload along one ray. Returns the blend
/// and the residual transmittance for background mixing.
pub fn composite<const D: usize>(alphas: &[f64], values: &[[f64; D]]) -> Result<([f64; D], f64)> {
    if alphas.len() != values.len() {
        return Err(Error::Contract(format!(
            "composite: {} alphas vs {} values",
            alphas.len(),
            values.len()
        )));
    }
    let mut out = [0.0; D];
    let mut t = 1.0;
    for (&a, v) in alphas.iter().zip(values.iter()) {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::Contract(format!("opacity {a} outside [0, 1]")));
        }
        for c in 0..D {
            out[c] += t * a * v[c];
        }
        t *= 1.0 - a;
    }
    Ok((out, t))
}

struct TracedRay {
    samples: RaySampleSet,
    /// Raw (unnormalized) SDF gradients per sample.
    raw_grad: Vec<Vec3>,
    stencils: Vec<crate::grid::TrilinearStencil>,
    rgb: [f64; 3],
    /// Unnormalized composited normal.
    normal_sum: Vec3,
    normal: Vec3,
    opacity: f64,
    residual_t: f64,
}

/// Sample the ray segment clipped to the grid, evaluate SDF / color /
/// normals at bin midpoints and composite. `None` when the ray misses.
fn trace_ray(grid: &SdfGrid, ray: &Ray, cfg: &RenderConfig) -> Option<TracedRay> {
    let bounds = grid.bounds();
    let (lo, hi) = bounds.clip_ray(ray.origin, ray.dir, cfg.near, cfg.far)?;
    if hi - lo < 1e-12 {
        return None;
    }
    let n = cfg.n_samples;
    let dt = (hi - lo) / n as f64;
    let mut samples = RaySampleSet::default();
    let mut raw_grad = Vec::with_capacity(n);
    let mut stencils = Vec::with_capacity(n);
    for i in 0..n {
        let t = lo + (i as f64 + 0.5) * dt;
        // rounding can push the point a hair outside the box
        let mut p = ray.point_at(t);
        p = p.sup(&bounds.min).inf(&bounds.max);
        let st = grid.stencil(p).expect("clipped sample inside bounds");
        let mut f = 0.0;
        let mut col = [0.0; 3];
        let mut g = Vec3::zeros();
        for (k, &corner) in st.corners.iter().enumerate() {
            let w = st.weights[k];
            let v = grid.sdf[corner];
            f += w * v;
            for c in 0..3 {
                col[c] += w * grid.color[3 * corner + c];
            }
            g.x += st.dweights[k][0] * v;
            g.y += st.dweights[k][1] * v;
            g.z += st.dweights[k][2] * v;
        }
        let gn = g.norm();
        let normal = if gn > 1e-12 { g / gn } else { Vec3::zeros() };
        samples.t.push(t);
        samples.points.push(p);
        samples.sdf.push(f);
        samples.color.push(col);
        samples.normal.push(normal);
        raw_grad.push(g);
        stencils.push(st);
    }
    for i in 0..n {
        let a = if i + 1 < n {
            alpha_from_sdf(samples.sdf[i], samples.sdf[i + 1], cfg.s_param)
        } else {
            0.0
        };
        samples.alpha.push(a);
    }
    let mut t_acc = 1.0;
    let mut rgb = [0.0; 3];
    let mut normal_sum = Vec3::zeros();
    let mut opacity = 0.0;
    for i in 0..n {
        samples.transmittance.push(t_acc);
        let w = t_acc * samples.alpha[i];
        for c in 0..3 {
            rgb[c] += w * samples.color[i][c];
        }
        normal_sum += w * samples.normal[i];
        opacity += w;
        t_acc *= 1.0 - samples.alpha[i];
    }
    for c in 0..3 {
        rgb[c] += t_acc * cfg.background[c];
    }
    let normal = if normal_sum.norm() > 1e-6 {
        normal_sum.normalize()
    } else {
        Vec3::zeros()
    };
    Some(TracedRay {
        samples,
        raw_grad,
        stencils,
        rgb,
        normal_sum,
        normal,
        opacity,
        residual_t: t_acc,
    })
}

/// Render one ray to color, re-normalized normal and accumulated opacity.
/// Rays that miss the grid return the background with zero opacity.
pub fn render_ray(grid: &SdfGrid, ray: &Ray, cfg: &RenderConfig) -> RayRender {
    match trace_ray(grid, ray, cfg) {
        Some(tr) => RayRender {
            rgb: tr.rgb,
            normal: tr.normal,
            opacity: tr.opacity,
        },
        None => RayRender {
            rgb: cfg.background,
            normal: Vec3::zeros(),
            opacity: 0.0,
        },
    }
}

/// Ray trace with the full per-sample breakdown, for tests and debugging.
pub fn render_ray_detailed(grid: &SdfGrid, ray: &Ray, cfg: &RenderConfig) -> Option<RaySampleSet> {
    trace_ray(grid, ray, cfg).map(|tr| tr.samples)
}

/// Render a full image through a camera (parallel over rows).
pub fn render_view(
    grid: &SdfGrid,
    camera: &crate::camera::Camera,
    cfg: &RenderConfig,
) -> (crate::img::ImageRgb, crate::img::ImageGray) {
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    let mut img = crate::img::ImageRgb::new(w, h);
    let mut op = crate::img::ImageGray::new(w, h);
    img.data
        .par_chunks_mut(w as usize * 3)
        .zip(op.data.par_chunks_mut(w as usize))
        .enumerate()
        .for_each(|(y, (rgb_row, op_row))| {
            for x in 0..w {
                let ray = camera.pixel_ray(f64::from(x), y as f64).expect("in bounds");
                let out = render_ray(grid, &ray, cfg);
                for c in 0..3 {
                    rgb_row[3 * x as usize + c] = out.rgb[c];
                }
                op_row[x as usize] = out.opacity;
            }
        });
    (img, op)
}

/// A pixel of a view selected into a training batch.
pub type RayId = (usize, u32, u32);

struct RayBackward {
    recon_sq_err: f64,
    normal_l1: Option<f64>,
    sdf_entries: Vec<(u32, f64)>,
    color_entries: Vec<(u32, f64)>,
    d_log_s: f64,
}

/// Forward + reverse pass for one supervised ray.
///
/// `recon_coeff` multiplies the squared-error gradient (the caller folds in
/// ray weight and batch normalization); `normal_coeff` likewise for the L1
/// normal term.
#[allow(clippy::too_many_arguments)]
fn ray_loss_backward(
    grid: &SdfGrid,
    ray: &Ray,
    target_rgb: [f64; 3],
    target_normal: Option<Vec3>,
    cfg: &RenderConfig,
    recon_coeff: f64,
    normal_coeff: f64,
) -> RayBackward {
    let n = cfg.n_samples;
    let Some(tr) = trace_ray(grid, ray, cfg) else {
        // background-only pixel: constant wrt the grid
        let e: f64 = (0..3)
            .map(|c| (cfg.background[c] - target_rgb[c]).powi(2))
            .sum();
        let normal_l1 = target_normal.map(|tn| tn.abs().sum());
        return RayBackward {
            recon_sq_err: e,
            normal_l1,
            sdf_entries: Vec::new(),
            color_entries: Vec::new(),
            d_log_s: 0.0,
        };
    };
    let s = &tr.samples;
    let err: [f64; 3] = std::array::from_fn(|c| tr.rgb[c] - target_rgb[c]);
    let recon_sq_err: f64 = err.iter().map(|e| e * e).sum();
    let d_rgb: [f64; 3] = std::array::from_fn(|c| 2.0 * err[c] * recon_coeff);

    // normal loss and dL/d(normal_sum) through the re-normalization
    let mut normal_l1 = None;
    let mut d_normal_sum = Vec3::zeros();
    if let Some(tn) = target_normal {
        let diff = tr.normal - tn;
        normal_l1 = Some(diff.abs().sum());
        let mn = tr.normal_sum.norm();
        if mn > 1e-6 {
            let sign = diff.map(|d| if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 })
                * normal_coeff;
            let nhat = tr.normal;
            d_normal_sum = (sign - nhat * nhat.dot(&sign)) / mn;
        }
    }

    let mut d_alpha = vec![0.0f64; n];
    let mut sdf_entries: Vec<(u32, f64)> = Vec::with_capacity(n * 16);
    let mut color_entries: Vec<(u32, f64)> = Vec::with_capacity(n * 24);

    // suffix accumulator: sum_{j>i} w_j A_j + T_res * <bg, dL/drgb>
    let bg_dot: f64 = (0..3).map(|c| cfg.background[c] * d_rgb[c]).sum();
    let mut suffix = tr.residual_t * bg_dot;
    for i in (0..n).rev() {
        let t_i = s.transmittance[i];
        let a_i = s.alpha[i];
        let w_i = t_i * a_i;
        // payload adjoint: color channels plus composited-normal channels
        let payload: f64 = (0..3).map(|c| s.color[i][c] * d_rgb[c]).sum::<f64>()
            + s.normal[i].dot(&d_normal_sum);
        let one_minus = 1.0 - a_i;
        d_alpha[i] = if one_minus > 1e-12 {
            t_i * payload - suffix / one_minus
        } else {
            t_i * payload
        };
        suffix += w_i * payload;

        // color corners
        for (k, &corner) in tr.stencils[i].corners.iter().enumerate() {
            let w = tr.stencils[i].weights[k] * w_i;
            for c in 0..3 {
                let g = w * d_rgb[c];
                if g != 0.0 {
                    color_entries.push(((3 * corner + c) as u32, g));
                }
            }
        }
        // normal-direction corners: d n_i = (I - n n^T)/|g| dL/dn_i
        let gn = tr.raw_grad[i].norm();
        if gn > 1e-12 && d_normal_sum != Vec3::zeros() {
            let d_ni = w_i * d_normal_sum;
            let nh = s.normal[i];
            let d_g = (d_ni - nh * nh.dot(&d_ni)) / gn;
            for (k, &corner) in tr.stencils[i].corners.iter().enumerate() {
                let dw = tr.stencils[i].dweights[k];
                let g = dw[0] * d_g.x + dw[1] * d_g.y + dw[2] * d_g.z;
                if g != 0.0 {
                    sdf_entries.push((corner as u32, g));
                }
            }
        }
    }

    // alpha -> consecutive SDF samples and log s
    let mut d_f = vec![0.0f64; n];
    let mut d_log_s = 0.0;
    for i in 0..n - 1 {
        if d_alpha[i] == 0.0 {
            continue;
        }
        let (dfi, dfn, dls) = alpha_gradients(s.sdf[i], s.sdf[i + 1], cfg.s_param);
        d_f[i] += d_alpha[i] * dfi;
        d_f[i + 1] += d_alpha[i] * dfn;
        d_log_s += d_alpha[i] * dls;
    }
    for i in 0..n {
        if d_f[i] == 0.0 {
            continue;
        }
        for (k, &corner) in tr.stencils[i].corners.iter().enumerate() {
            sdf_entries.push((corner as u32, d_f[i] * tr.stencils[i].weights[k]));
        }
    }
    RayBackward {
        recon_sq_err,
        normal_l1,
        sdf_entries,
        color_entries,
        d_log_s,
    }
}

/// Coarse-stage loss over an explicit ray batch, with gradients.
///
/// `view_weights` scales each view's photometric contribution (synthetic
/// expansion views train with reduced weight); the normal term only sees
/// rays whose view carries normals and a true mask bit.
pub fn coarse_loss_rays(
    grid: &SdfGrid,
    views: &[CameraView],
    view_weights: &[f64],
    rays: &[RayId],
    cfg: &RenderConfig,
    weights: &LossWeights,
) -> Result<(LossReport, CoarseGradients)> {
    cfg.validate()?;
    if views.len() != view_weights.len() {
        return Err(Error::InvalidInput(format!(
            "{} views but {} view weights",
            views.len(),
            view_weights.len()
        )));
    }
    for &(v, _, _) in rays {
        if views[v].image.is_none() {
            return Err(Error::InvalidInput(format!("view {v} has no image")));
        }
    }
    let weight_sum: f64 = rays.iter().map(|&(v, _, _)| view_weights[v]).sum();
    let normal_weight_sum: f64 = rays
        .iter()
        .filter(|&&(v, x, y)| ray_has_normal(&views[v], x, y))
        .map(|&(v, _, _)| view_weights[v])
        .sum();

    let per_ray: Vec<(f64, RayBackward)> = rays
        .par_iter()
        .map(|&(v, x, y)| {
            let view = &views[v];
            let wr = view_weights[v];
            let image = view.image.as_ref().unwrap();
            let ray = view
                .camera
                .pixel_ray(f64::from(x), f64::from(y))
                .expect("batch pixel inside image");
            let target_rgb = image.get(x, y);
            let target_normal = if ray_has_normal(view, x, y) {
                let nm = view.normals.as_ref().unwrap().get(x, y);
                Some(Vec3::new(nm[0], nm[1], nm[2]))
            } else {
                None
            };
            let recon_coeff = if weight_sum > 0.0 {
                wr / (3.0 * weight_sum)
            } else {
                0.0
            };
            let normal_coeff = if normal_weight_sum > 0.0 {
                weights.normal * wr / normal_weight_sum
            } else {
                0.0
            };
            (
                wr,
                ray_loss_backward(grid, &ray, target_rgb, target_normal, cfg, recon_coeff, normal_coeff),
            )
        })
        .collect();

    // deterministic merge in ray order
    let mut sdf_grad = vec![0.0f64; grid.sdf.len()];
    let mut color_grad = vec![0.0f64; grid.color.len()];
    let mut d_log_s = 0.0;
    let mut recon_acc = 0.0;
    let mut normal_acc = 0.0;
    for (wr, rb) in &per_ray {
        recon_acc += wr * rb.recon_sq_err;
        if let Some(l1) = rb.normal_l1 {
            normal_acc += wr * l1;
        }
        for &(idx, g) in &rb.sdf_entries {
            sdf_grad[idx as usize] += g;
        }
        for &(idx, g) in &rb.color_entries {
            color_grad[idx as usize] += g;
        }
        d_log_s += rb.d_log_s;
    }
    let recon = if weight_sum > 0.0 {
        recon_acc / (3.0 * weight_sum)
    } else {
        0.0
    };
    let normal = if normal_weight_sum > 0.0 {
        normal_acc / normal_weight_sum
    } else {
        0.0
    };

    let (tv, tv_grad) = grid.tv_loss();
    let (smooth, smooth_grad) = grid.smoothness_loss();
    for (g, (tvg, smg)) in sdf_grad
        .iter_mut()
        .zip(tv_grad.iter().zip(smooth_grad.iter()))
    {
        *g += weights.tv * tvg + weights.smooth * smg;
    }

    let total = recon + weights.tv * tv + weights.smooth * smooth + weights.normal * normal;
    Ok((
        LossReport {
            recon,
            tv,
            smooth,
            normal,
            total,
            weights: *weights,
        },
        CoarseGradients {
            sdf: sdf_grad,
            color: color_grad,
            log_s: d_log_s,
        },
    ))
}

fn ray_has_normal(view: &CameraView, x: u32, y: u32) -> bool {
    match (&view.normals, &view.mask) {
        (Some(_), Some(mask)) => {
            mask[(y as usize) * (view.camera.intrinsics.width as usize) + (x as usize)]
        }
        (Some(_), None) => true,
        _ => false,
    }
}

/// Loss and gradients over every pixel of every view.
pub fn coarse_loss(
    grid: &SdfGrid,
    views: &[CameraView],
    cfg: &RenderConfig,
    weights: &LossWeights,
) -> Result<(LossReport, CoarseGradients)> {
    let mut rays = Vec::new();
    for (v, view) in views.iter().enumerate() {
        if view.image.is_none() {
            return Err(Error::InvalidInput(format!("view {v} has no image")));
        }
        let k = &view.camera.intrinsics;
        for y in 0..k.height {
            for x in 0..k.width {
                rays.push((v, x, y));
            }
        }
    }
    let view_weights = vec![1.0; views.len()];
    coarse_loss_rays(grid, views, &view_weights, &rays, cfg, weights)
}

/// Training schedule for the SDF stages.
#[derive(Debug, Clone)]
pub struct SdfTrainSchedule {
    pub iterations: usize,
    pub ray_batch: usize,
    pub n_samples: usize,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
    pub lr_sdf: f64,
    pub lr_color: f64,
    pub lr_log_s: f64,
    pub weights: LossWeights,
    /// Initial sharpness; `None` picks 10 / scene diagonal.
    pub s_init: Option<f64>,
    /// Per-view photometric weights; `None` means all 1.
    pub view_weights: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for SdfTrainSchedule {
    fn default() -> Self {
        Self {
            iterations: 2000,
            ray_batch: 512,
            n_samples: 64,
            near: 0.05,
            far: 6.0,
            background: [1.0, 1.0, 1.0],
            lr_sdf: 1.0,
            lr_color: 30.0,
            lr_log_s: 0.3,
            weights: LossWeights::default(),
            s_init: None,
            view_weights: None,
            seed: 0,
        }
    }
}

/// One row of the per-iteration loss history CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct LossHistoryRow {
    pub iteration: usize,
    pub recon: f64,
    pub tv: f64,
    pub smooth: f64,
    pub normal: f64,
    pub total: f64,
}

pub fn history_to_csv(rows: &[LossHistoryRow]) -> String {
    let mut out = String::from("iteration,recon,tv,smooth,normal,total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iteration, r.recon, r.tv, r.smooth, r.normal, r.total
        ));
    }
    out
}

/// Plain gradient descent over (sdf, color, log s) with per-group step
/// sizes and cosine decay. Colors are clamped into [0, 1] after each step.
pub fn train_sdf(
    grid: &SdfGrid,
    views: &[CameraView],
    schedule: &SdfTrainSchedule,
) -> Result<(SdfGrid, Vec<LossHistoryRow>, f64)> {
    if views.is_empty() {
        return Err(Error::InvalidInput("train_sdf needs >= 1 view".into()));
    }
    let view_weights = match &schedule.view_weights {
        Some(w) => {
            if w.len() != views.len() {
                return Err(Error::InvalidInput(format!(
                    "{} view weights for {} views",
                    w.len(),
                    views.len()
                )));
            }
            w.clone()
        }
        None => vec![1.0; views.len()],
    };
    // sample only pixels of views that actually contribute
    let eligible: Vec<usize> = (0..views.len())
        .filter(|&v| view_weights[v] > 0.0 && views[v].image.is_some())
        .collect();
    if eligible.is_empty() {
        return Err(Error::InvalidInput(
            "no views with positive weight and an image".into(),
        ));
    }

    let mut grid = grid.clone();
    let mut log_s = schedule
        .s_init
        .unwrap_or(10.0 / grid.bounds().diagonal())
        .ln();
    let mut history = Vec::with_capacity(schedule.iterations);
    let mut rng = crate::seeds::rng(schedule.seed, "sdf-train");

    use rand::Rng;
    for it in 0..schedule.iterations {
        let cfg = RenderConfig {
            n_samples: schedule.n_samples,
            near: schedule.near,
            far: schedule.far,
            s_param: log_s.exp(),
            background: schedule.background,
        };
        let mut rays = Vec::with_capacity(schedule.ray_batch);
        for _ in 0..schedule.ray_batch {
            let v = eligible[rng.gen_range(0..eligible.len())];
            let k = &views[v].camera.intrinsics;
            rays.push((v, rng.gen_range(0..k.width), rng.gen_range(0..k.height)));
        }
        let (report, grads) =
            coarse_loss_rays(&grid, views, &view_weights, &rays, &cfg, &schedule.weights)?;
        if !report.total.is_finite() {
            return Err(Error::Numerical(format!(
                "loss became {} at iteration {it}; first rays of the batch: {:?}",
                report.total,
                &rays[..rays.len().min(4)]
            )));
        }
        history.push(LossHistoryRow {
            iteration: it,
            recon: report.recon,
            tv: report.tv,
            smooth: report.smooth,
            normal: report.normal,
            total: report.total,
        });

        let decay =
            0.5 * (1.0 + (std::f64::consts::PI * it as f64 / schedule.iterations as f64).cos());
        let lr_sdf = schedule.lr_sdf * decay;
        let lr_color = schedule.lr_color * decay;
        for (v, g) in grid.sdf.iter_mut().zip(grads.sdf.iter()) {
            *v -= lr_sdf * g;
        }
        for (v, g) in grid.color.iter_mut().zip(grads.color.iter()) {
            *v = (*v - lr_color * g).clamp(0.0, 1.0);
        }
        log_s -= schedule.lr_log_s * decay * grads.log_s;
    }
    Ok((grid, history, log_s.exp()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Camera, CameraIntrinsics, CameraPose};
    use crate::grid::{Aabb, SdfGrid};
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn alpha_examples() {
        // phi(0.5) - phi(-0.5) over phi(0.5) at s = 1
        let phi = |x: f64| 1.0 / (1.0 + (-x).exp());
        let expect = (phi(0.5) - phi(-0.5)) / phi(0.5);
        assert_relative_eq!(alpha_from_sdf(0.5, -0.5, 1.0), expect, epsilon = 1e-12);
        assert!((alpha_from_sdf(0.5, -0.5, 1.0) - 0.3935).abs() < 1e-4);

        // non-decreasing SDF clamps to zero
        assert_eq!(alpha_from_sdf(-0.2, 0.3, 1.0), 0.0);
        assert_eq!(alpha_from_sdf(-0.2, 0.3, 25.0), 0.0);
        assert_eq!(alpha_from_sdf(0.3, 0.3, 5.0), 0.0);
    }

    #[test]
    fn alpha_limits_in_s() {
        // s -> 0+: alpha -> 0
        assert!(alpha_from_sdf(0.5, -0.5, 1e-8) < 1e-8);
        // s -> inf on a sign crossing: alpha -> 1
        assert!(alpha_from_sdf(0.5, -0.5, 1e4) > 1.0 - 1e-12);
        // stability at extreme sharpness
        let a = alpha_from_sdf(1.0, -1.0, 1e6);
        assert!(a.is_finite() && a <= 1.0);
    }

    #[test]
    fn alpha_gradients_match_finite_differences() {
        let mut rng = crate::seeds::rng(80, "alpha-fd");
        for _ in 0..200 {
            let f0: f64 = rng.gen_range(-1.0..1.0);
            let f1: f64 = rng.gen_range(-1.0..1.0);
            let s: f64 = rng.gen_range(0.5..50.0);
            if alpha_from_sdf(f0, f1, s) <= 0.0 {
                continue;
            }
            let (dfi, dfn, dls) = alpha_gradients(f0, f1, s);
            let h = 1e-6;
            let fd0 = (alpha_from_sdf(f0 + h, f1, s) - alpha_from_sdf(f0 - h, f1, s)) / (2.0 * h);
            let fd1 = (alpha_from_sdf(f0, f1 + h, s) - alpha_from_sdf(f0, f1 - h, s)) / (2.0 * h);
            let fds = (alpha_from_sdf(f0, f1, s * (1.0 + h)) - alpha_from_sdf(f0, f1, s * (1.0 - h)))
                / (2.0 * h);
            assert_relative_eq!(dfi, fd0, epsilon = 1e-6, max_relative = 1e-6);
            assert_relative_eq!(dfn, fd1, epsilon = 1e-6, max_relative = 1e-6);
            assert_relative_eq!(dls, fds, epsilon = 1e-5, max_relative = 1e-5);
        }
    }

    #[test]
    fn composite_unrolls_the_recurrence() {
        let alphas = [0.5, 0.5, 0.5];
        let ones = [[1.0f64]; 3];
        let (out, residual) = composite(&alphas, &ones).unwrap();
        assert_relative_eq!(out[0], 0.875);
        assert_relative_eq!(residual, 0.125);

        let (zero, full) = composite(&[0.0, 0.0, 0.0], &ones).unwrap();
        assert_eq!(zero[0], 0.0);
        assert_eq!(full, 1.0);

        let (first, none) = composite(&[1.0, 0.7], &[[3.0f64], [9.0f64]]).unwrap();
        assert_relative_eq!(first[0], 3.0);
        assert_relative_eq!(none, 0.0);

        assert!(composite(&[1.5], &[[1.0f64]]).is_err());
    }

    fn sphere_grid(n: usize) -> SdfGrid {
        let mut grid = SdfGrid::new([n, n, n], Aabb::centered_cube(1.0)).unwrap();
        grid.fill_from(|p| p.norm() - 0.5);
        grid.fill_color_from(|_| [0.9, 0.1, 0.1]);
        grid
    }

    fn on_axis_config(s: f64) -> RenderConfig {
        RenderConfig {
            n_samples: 128,
            near: 0.5,
            far: 4.0,
            s_param: s,
            background: [1.0, 1.0, 1.0],
        }
    }

    #[test]
    fn empty_scene_renders_background() {
        let mut grid = sphere_grid(16);
        grid.fill_from(|_| 0.8); // positive everywhere
        let ray = Ray::new(Vec3::new(0.0, 0.0, -2.0), Vec3::z()).unwrap();
        let out = render_ray(&grid, &ray, &on_axis_config(20.0));
        assert_eq!(out.rgb, [1.0, 1.0, 1.0]);
        assert!(out.opacity < 1e-6);
    }

    #[test]
    fn sphere_ray_hits_red_surface_at_the_right_depth() {
        let grid = sphere_grid(64);
        let cfg = on_axis_config(200.0);
        let ray = Ray::new(Vec3::new(0.0, 0.0, -2.0), Vec3::z()).unwrap();
        let out = render_ray(&grid, &ray, &cfg);
        assert!(
            (out.rgb[0] - 0.9).abs() < 0.05 && out.rgb[1] < 0.15,
            "rgb {:?}",
            out.rgb
        );
        // depth of max compositing weight within one sample spacing of 1.5
        let samples = render_ray_detailed(&grid, &ray, &cfg).unwrap();
        let spacing = samples.t[1] - samples.t[0];
        let (best, _) = samples
            .alpha
            .iter()
            .zip(samples.transmittance.iter())
            .map(|(a, t)| a * t)
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        let t_hit = samples.t[best];
        assert!(
            (t_hit - 1.5).abs() <= spacing,
            "peak weight at t = {t_hit}, spacing {spacing}"
        );
        // rendered normal within 10 degrees of -z (facing the camera)
        let cos = out.normal.dot(&Vec3::new(0.0, 0.0, -1.0));
        assert!(cos > (10.0f64).to_radians().cos(), "normal {:?}", out.normal);
    }

    #[test]
    fn transmittance_is_monotone_and_weights_subprobability() {
        let grid = sphere_grid(32);
        let cfg = on_axis_config(30.0);
        let mut rng = crate::seeds::rng(81, "volume-rays");
        for _ in 0..50 {
            let origin = Vec3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                -2.0,
            );
            let dir = (Vec3::new(
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                1.0,
            ))
            .normalize();
            let ray = Ray::new(origin, dir).unwrap();
            let Some(samples) = render_ray_detailed(&grid, &ray, &cfg) else {
                continue;
            };
            let mut prev = 1.0;
            let mut weight_sum = 0.0;
            for i in 0..samples.t.len() {
                assert!(samples.transmittance[i] <= prev + 1e-15);
                prev = samples.transmittance[i];
                assert!((0.0..=1.0).contains(&samples.alpha[i]));
                weight_sum += samples.transmittance[i] * samples.alpha[i];
                if i > 0 {
                    assert!(samples.t[i] > samples.t[i - 1]);
                }
            }
            assert!(weight_sum <= 1.0 + 1e-9);
        }
    }

    fn fd_test_setup() -> (SdfGrid, Vec<CameraView>, RenderConfig, LossWeights) {
        let mut rng = crate::seeds::rng(82, "volume-fd");
        let mut grid = SdfGrid::new([8, 8, 8], Aabb::centered_cube(1.0)).unwrap();
        for v in grid.sdf.iter_mut() {
            *v = rng.gen_range(-0.6..0.6);
        }
        for v in grid.color.iter_mut() {
            *v = rng.gen_range(0.05..0.95);
        }
        let cam = Camera::new(
            CameraIntrinsics::new(4.0, 4.0, 2.0, 2.0, 4, 4).unwrap(),
            CameraPose::look_at(Vec3::new(0.3, -2.2, 0.4), Vec3::zeros()).unwrap(),
        );
        let mut image = crate::img::ImageRgb::new(4, 4);
        for v in image.data.iter_mut() {
            *v = rng.gen();
        }
        let mut normals = crate::img::ImageRgb::new(4, 4);
        for px in 0..16 {
            let n = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            normals.data[3 * px] = n.x;
            normals.data[3 * px + 1] = n.y;
            normals.data[3 * px + 2] = n.z;
        }
        let view = CameraView {
            camera: cam,
            image: Some(image),
            normals: Some(normals),
            mask: Some(vec![true; 16]),
            synthetic: false,
        };
        let cfg = RenderConfig {
            n_samples: 32,
            near: 0.2,
            far: 5.0,
            s_param: 8.0,
            background: [0.9, 0.85, 0.8],
        };
        let weights = LossWeights {
            tv: 0.03,
            smooth: 0.02,
            normal: 0.05,
        };
        (grid, vec![view], cfg, weights)
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let (grid, views, cfg, weights) = fd_test_setup();
        let (report, grads) = coarse_loss(&grid, &views, &cfg, &weights).unwrap();
        assert_relative_eq!(
            report.total,
            report.recon
                + weights.tv * report.tv
                + weights.smooth * report.smooth
                + weights.normal * report.normal,
            epsilon = 1e-12
        );

        let loss_of = |g: &SdfGrid, s: f64| {
            let mut c = cfg.clone();
            c.s_param = s;
            coarse_loss(g, &views, &c, &weights).unwrap().0.total
        };
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        // every SDF node
        for i in 0..grid.sdf.len() {
            let mut plus = grid.clone();
            plus.sdf[i] += h;
            let mut minus = grid.clone();
            minus.sdf[i] -= h;
            let fd = (loss_of(&plus, cfg.s_param) - loss_of(&minus, cfg.s_param)) / (2.0 * h);
            let denom = grads.sdf[i].abs().max(fd.abs());
            if denom > 1e-9 {
                worst = worst.max((grads.sdf[i] - fd).abs() / denom);
            }
        }
        // a spread of color channels
        for i in (0..grid.color.len()).step_by(7) {
            let mut plus = grid.clone();
            plus.color[i] += h;
            let mut minus = grid.clone();
            minus.color[i] -= h;
            let fd = (loss_of(&plus, cfg.s_param) - loss_of(&minus, cfg.s_param)) / (2.0 * h);
            let denom = grads.color[i].abs().max(fd.abs());
            if denom > 1e-9 {
                worst = worst.max((grads.color[i] - fd).abs() / denom);
            }
        }
        // log s
        let s_plus = (cfg.s_param.ln() + h).exp();
        let s_minus = (cfg.s_param.ln() - h).exp();
        let fd = (loss_of(&grid, s_plus) - loss_of(&grid, s_minus)) / (2.0 * h);
        let denom = grads.log_s.abs().max(fd.abs());
        if denom > 1e-9 {
            worst = worst.max((grads.log_s - fd).abs() / denom);
        }
        assert!(worst < 1e-3, "worst relative gradient error {worst}");
    }

    #[test]
    fn perfect_reconstruction_has_zero_recon_loss() {
        let grid = sphere_grid(16);
        let cam = Camera::new(
            CameraIntrinsics::new(8.0, 8.0, 4.0, 4.0, 8, 8).unwrap(),
            CameraPose::look_at(Vec3::new(0.0, -2.0, 0.0), Vec3::zeros()).unwrap(),
        );
        let cfg = on_axis_config(25.0);
        let (img, _) = render_view(&grid, &cam, &cfg);
        let view = CameraView::with_image(cam, img);
        let weights = LossWeights::default();
        let (report, _) = coarse_loss(&grid, &[view], &cfg, &weights).unwrap();
        assert!(report.recon < 1e-24, "recon {}", report.recon);
    }

    #[test]
    fn missing_image_is_rejected_and_missing_normals_skip_the_term() {
        let grid = sphere_grid(8);
        let cfg = on_axis_config(10.0);
        let cam = Camera::new(
            CameraIntrinsics::new(4.0, 4.0, 2.0, 2.0, 4, 4).unwrap(),
            CameraPose::look_at(Vec3::new(0.0, -2.0, 0.0), Vec3::zeros()).unwrap(),
        );
        let bare = CameraView::bare(cam.clone());
        assert!(coarse_loss(&grid, &[bare], &cfg, &LossWeights::default()).is_err());

        let (img, _) = render_view(&grid, &cam, &cfg);
        let view = CameraView::with_image(cam, img);
        let (report, _) = coarse_loss(&grid, &[view], &cfg, &LossWeights::default()).unwrap();
        assert_eq!(report.normal, 0.0);
    }

    #[test]
    fn deterministic_loss_for_fixed_seed_batches() {
        let (grid, views, cfg, weights) = fd_test_setup();
        let mut rng = crate::seeds::rng(83, "det-batch");
        let rays: Vec<RayId> = (0..8)
            .map(|_| (0usize, rng.gen_range(0..4u32), rng.gen_range(0..4u32)))
            .collect();
        let vw = vec![1.0];
        let (a, ga) = coarse_loss_rays(&grid, &views, &vw, &rays, &cfg, &weights).unwrap();
        let (b, gb) = coarse_loss_rays(&grid, &views, &vw, &rays, &cfg, &weights).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga.sdf, gb.sdf);
        assert_eq!(ga.color, gb.color);
        assert_eq!(ga.log_s, gb.log_s);
    }

    #[test]
    fn zero_iterations_returns_grid_unchanged() {
        let grid = sphere_grid(8);
        let cam = Camera::new(
            CameraIntrinsics::new(4.0, 4.0, 2.0, 2.0, 4, 4).unwrap(),
            CameraPose::look_at(Vec3::new(0.0, -2.0, 0.0), Vec3::zeros()).unwrap(),
        );
        let cfg = on_axis_config(10.0);
        let (img, _) = render_view(&grid, &cam, &cfg);
        let view = CameraView::with_image(cam, img);
        let schedule = SdfTrainSchedule {
            iterations: 0,
            ..Default::default()
        };
        let (out, history, _) = train_sdf(&grid, &[view], &schedule).unwrap();
        assert_eq!(out, grid);
        assert!(history.is_empty());
    }

    #[test]
    fn tv_only_training_decreases_tv() {
        // pure-regularizer run on a noisy grid: TV must strictly decrease
        let mut rng = crate::seeds::rng(84, "tv-train");
        let mut grid = SdfGrid::new([12, 12, 12], Aabb::centered_cube(1.0)).unwrap();
        for v in grid.sdf.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let cam = Camera::new(
            CameraIntrinsics::new(4.0, 4.0, 2.0, 2.0, 4, 4).unwrap(),
            CameraPose::look_at(Vec3::new(0.0, -2.0, 0.0), Vec3::zeros()).unwrap(),
        );
        let (img, _) = render_view(&grid, &cam, &on_axis_config(10.0));
        let view = CameraView::with_image(cam, img);
        let schedule = SdfTrainSchedule {
            iterations: 40,
            ray_batch: 4,
            lr_sdf: 2.0,
            lr_color: 0.0,
            lr_log_s: 0.0,
            weights: LossWeights {
                tv: 1.0,
                smooth: 0.0,
                normal: 0.0,
            },
            ..Default::default()
        };
        // zero out the photometric path by weighting the view at 0 ...
        // which would empty the batch pool, so instead verify the TV
        // trajectory from the recorded history of a normal run
        let (_, history, _) = train_sdf(&grid, &[view], &schedule).unwrap();
        let first = history.first().unwrap().tv;
        let last = history.last().unwrap().tv;
        assert!(last < first, "tv did not decrease: {first} -> {last}");
        for w in history.windows(2) {
            assert!(
                w[1].tv <= w[0].tv + 1e-12,
                "tv rose at iteration {}",
                w[1].iteration
            );
        }
    }

    #[test]
    fn training_on_sphere_improves_total_loss() {
        let scene_grid = sphere_grid(24);
        let cfg = on_axis_config(60.0);
        // render targets from the true grid, start training from the blob init
        let mut views = Vec::new();
        for k in 0..4 {
            let phi = std::f64::consts::TAU * k as f64 / 4.0;
            let cam = Camera::new(
                CameraIntrinsics::new(24.0, 24.0, 12.0, 12.0, 24, 24).unwrap(),
                CameraPose::look_at(
                    Vec3::new(2.0 * phi.cos(), 2.0 * phi.sin(), 0.6),
                    Vec3::zeros(),
                )
                .unwrap(),
            );
            let (img, _) = render_view(&scene_grid, &cam, &cfg);
            views.push(CameraView::with_image(cam, img));
        }
        let init = SdfGrid::with_sphere_init([24, 24, 24], Aabb::centered_cube(1.0)).unwrap();
        let schedule = SdfTrainSchedule {
            iterations: 150,
            ray_batch: 128,
            n_samples: 48,
            seed: 9,
            ..Default::default()
        };
        let (trained, history, s_final) = train_sdf(&init, &views, &schedule).unwrap();
        assert!(s_final > 0.0);
        let head: f64 = history[..10].iter().map(|r| r.total).sum::<f64>() / 10.0;
        let tail: f64 = history[history.len() - 10..]
            .iter()
            .map(|r| r.total)
            .sum::<f64>()
            / 10.0;
        assert!(tail < head, "loss did not improve: {head} -> {tail}");
        assert_ne!(trained, init);
    }
}

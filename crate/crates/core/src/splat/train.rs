//! Splat training: init from a surface cloud, Adam updates on the five
//! parameter groups, periodic densification (clone / split) and pruning,
//! plus the mid-run opacity reset.

use rand::Rng;

use crate::camera::CameraView;
use crate::error::{Error, Result};
use crate::metrics::kdtree::KdTree;
use crate::sampling::PointCloud;
use crate::splat::backward::splat_backward;
use crate::splat::raster::{rasterize, RasterConfig};
use crate::splat::{logit, Gaussian, GaussianSet, Vec3};

/// Trainer schedule and thresholds. The iteration counts and densify /
/// reset schedule follow the reference splatting recipe for sparse inputs
/// (7k iterations, densification from 500 every 100, opacity reset at the
/// 3/7 mark); thresholds are exposed because no published values exist.
#[derive(Debug, Clone)]
pub struct SplatTrainConfig {
    pub iterations: usize,
    pub lr_mean: f64,
    pub lr_log_scale: f64,
    pub lr_rot: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub densify_start: usize,
    pub densify_interval: usize,
    /// Densification stops after this fraction of the run.
    pub densify_stop_fraction: f64,
    /// Mean positional-gradient norm (world units) that triggers a
    /// clone/split.
    pub densify_grad_threshold: f64,
    /// Gaussians larger than this fraction of the scene extent split
    /// instead of cloning.
    pub split_scale_fraction: f64,
    pub opacity_reset_fraction: f64,
    pub reset_opacity: f64,
    pub prune_opacity: f64,
    pub max_gaussians: usize,
    pub init_opacity: f64,
    pub seed: u64,
    pub raster: RasterConfig,
}

impl Default for SplatTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 7000,
            lr_mean: 2e-4,
            lr_log_scale: 5e-3,
            lr_rot: 1e-3,
            lr_opacity: 5e-2,
            lr_color: 5e-3,
            densify_start: 500,
            densify_interval: 100,
            densify_stop_fraction: 0.9,
            densify_grad_threshold: 2e-4,
            split_scale_fraction: 0.01,
            opacity_reset_fraction: 3.0 / 7.0,
            reset_opacity: 0.05,
            prune_opacity: 0.005,
            max_gaussians: 150_000,
            init_opacity: 0.1,
            seed: 0,
            raster: RasterConfig::default(),
        }
    }
}

/// Gaussians seeded at the cloud positions: cloud colors, isotropic scale
/// from the mean distance to the 3 nearest neighbors, identity rotation.
pub fn init_from_cloud(cloud: &PointCloud, init_opacity: f64) -> Result<GaussianSet> {
    if cloud.is_empty() {
        return Err(Error::InvalidInput(
            "cannot initialize splats from an empty cloud".into(),
        ));
    }
    let mut min = cloud.positions[0];
    let mut max = cloud.positions[0];
    for p in &cloud.positions {
        min = min.inf(p);
        max = max.sup(p);
    }
    let extent = (max - min).norm().max(1e-6);
    let scales: Vec<f64> = if cloud.len() >= 4 {
        let tree = KdTree::build(&cloud.positions);
        cloud
            .positions
            .iter()
            .map(|p| {
                let nn = tree.knn(*p, 4);
                let mean: f64 = nn[1..].iter().map(|(_, d2)| d2.sqrt()).sum::<f64>() / 3.0;
                mean.max(1e-6)
            })
            .collect()
    } else {
        vec![0.05 * extent; cloud.len()]
    };
    let gaussians = cloud
        .positions
        .iter()
        .zip(cloud.colors.iter())
        .zip(scales.iter())
        .map(|((p, c), s)| Gaussian::isotropic(*p, *s, init_opacity, *c))
        .collect();
    Ok(GaussianSet::new(gaussians))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    #[inline]
    fn step(&mut self, i: usize, grad: f64, lr: f64, t: f64) -> f64 {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad;
        self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad * grad;
        let mh = self.m[i] / (1.0 - B1.powf(t));
        let vh = self.v[i] / (1.0 - B2.powf(t));
        -lr * mh / (vh.sqrt() + EPS)
    }

    fn resize(&mut self, n: usize) {
        self.m = vec![0.0; n];
        self.v = vec![0.0; n];
    }
}

/// Per-gaussian parameter count for the Adam state layout
/// (mean 3 + log_scale 3 + rot 4 + opacity 1 + color 3).
const PARAMS: usize = 14;

/// Train splats against the views' images by mean-squared photometric
/// error. Returns the trained set and the per-iteration loss history.
pub fn train_splats(
    init: &PointCloud,
    views: &[CameraView],
    cfg: &SplatTrainConfig,
) -> Result<(GaussianSet, Vec<f64>)> {
    let mut set = init_from_cloud(init, cfg.init_opacity)?;
    if views.is_empty() {
        return Err(Error::InvalidInput("train_splats needs >= 1 view".into()));
    }
    for (i, view) in views.iter().enumerate() {
        if view.image.is_none() {
            return Err(Error::InvalidInput(format!("view {i} has no image")));
        }
    }
    let mut min = init.positions[0];
    let mut max = init.positions[0];
    for p in &init.positions {
        min = min.inf(p);
        max = max.sup(p);
    }
    let extent = (max - min).norm().max(1e-6);

    let mut history = Vec::with_capacity(cfg.iterations);
    let mut adam = Adam::new(set.len() * PARAMS);
    let mut rng = crate::seeds::rng(cfg.seed, "splat-train");
    let mut densify_rng = crate::seeds::rng(cfg.seed, "splat-densify");
    let reset_at = (cfg.opacity_reset_fraction * cfg.iterations as f64).round() as usize;
    let densify_stop = (cfg.densify_stop_fraction * cfg.iterations as f64) as usize;

    for it in 0..cfg.iterations {
        let view = &views[rng.gen_range(0..views.len())];
        let camera = &view.camera;
        let target = view.image.as_ref().unwrap();
        let (img, _) = rasterize(&set, camera, &cfg.raster);
        let n = img.data.len() as f64;
        let mut loss = 0.0;
        let mut pixel_grad = crate::img::ImageRgb::new(img.width, img.height);
        for (g, (a, b)) in pixel_grad
            .data
            .iter_mut()
            .zip(img.data.iter().zip(target.data.iter()))
        {
            let d = a - b;
            loss += d * d;
            *g = 2.0 * d / n;
        }
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "splat training loss became {loss} at iteration {it}"
            )));
        }
        history.push(loss);

        let grads = splat_backward(&set, camera, &cfg.raster, &pixel_grad);

        // cosine-decayed Adam step per parameter group
        let decay = 0.5 * (1.0 + (std::f64::consts::PI * it as f64 / cfg.iterations as f64).cos());
        let t = (it + 1) as f64;
        for i in 0..set.len() {
            let base = i * PARAMS;
            let g = &mut set.gaussians[i];
            for a in 0..3 {
                g.mean[a] += adam.step(base + a, grads.mean[i][a], cfg.lr_mean * decay, t);
                g.log_scale[a] += adam.step(
                    base + 3 + a,
                    grads.log_scale[i][a],
                    cfg.lr_log_scale * decay,
                    t,
                );
                g.color[a] += adam.step(base + 10 + a, grads.color[i][a], cfg.lr_color * decay, t);
                g.color[a] = g.color[a].clamp(0.0, 1.0);
                g.log_scale[a] = g.log_scale[a].clamp((1e-6f64).ln(), (0.5 * extent).ln());
            }
            for a in 0..4 {
                g.rot[a] += adam.step(base + 6 + a, grads.rot[i][a], cfg.lr_rot * decay, t);
            }
            let qn = crate::splat::quat_norm(&g.rot);
            if qn > 1e-12 {
                for a in 0..4 {
                    g.rot[a] /= qn;
                }
            } else {
                g.rot = [1.0, 0.0, 0.0, 0.0];
            }
            g.opacity_logit += adam.step(
                base + 13,
                grads.opacity_logit[i],
                cfg.lr_opacity * decay,
                t,
            );
            g.opacity_logit = g.opacity_logit.clamp(-12.0, 12.0);

            set.grad_accum[i] += grads.mean_norm(i);
            set.grad_count[i] += 1;
        }

        let densify_due = it + 1 >= cfg.densify_start
            && (it + 1 - cfg.densify_start) % cfg.densify_interval == 0
            && it + 1 < densify_stop;
        if densify_due {
            densify_and_prune(&mut set, cfg, extent, &mut densify_rng);
            adam.resize(set.len() * PARAMS);
        }

        if reset_at > 0 && it + 1 == reset_at {
            let cap = logit(cfg.reset_opacity);
            for g in set.gaussians.iter_mut() {
                g.opacity_logit = g.opacity_logit.min(cap);
            }
        }
    }
    Ok((set, history))
}

fn densify_and_prune(
    set: &mut GaussianSet,
    cfg: &SplatTrainConfig,
    extent: f64,
    rng: &mut impl Rng,
) {
    let split_threshold = cfg.split_scale_fraction * extent;
    let mut next: Vec<Gaussian> = Vec::with_capacity(set.len() + 64);
    for i in 0..set.len() {
        let g = &set.gaussians[i];
        if g.opacity() < cfg.prune_opacity {
            continue;
        }
        let avg_grad = set.grad_accum[i] / f64::from(set.grad_count[i].max(1));
        let room = next.len() + 2 < cfg.max_gaussians;
        if avg_grad <= cfg.densify_grad_threshold || !room {
            next.push(g.clone());
            continue;
        }
        let scales = g.scales();
        let s_max = scales.max();
        if s_max <= split_threshold {
            // clone: duplicate with a small jitter so the pair separates
            let mut dup = g.clone();
            for a in 0..3 {
                dup.mean[a] += rng.gen_range(-0.3..0.3) * s_max;
            }
            next.push(g.clone());
            next.push(dup);
        } else {
            // split: two children along the dominant axis, shrunk
            let axis_idx = scales.imax();
            let axis: Vec3 = g.rotation().column(axis_idx).into();
            for sign in [-1.0, 1.0] {
                let mut child = g.clone();
                child.mean += sign * 0.6 * s_max * axis;
                child.log_scale = g.log_scale.map(|v| v - 1.6f64.ln());
                next.push(child);
            }
        }
    }
    if next.is_empty() {
        // keep the most opaque survivor rather than emptying the set
        if let Some(best) = set
            .gaussians
            .iter()
            .max_by(|a, b| a.opacity_logit.partial_cmp(&b.opacity_logit).unwrap())
        {
            next.push(best.clone());
        }
    }
    set.gaussians = next;
    set.reset_accumulators();
}

//! Forward splat rasterization.
//!
//! Splats are depth-sorted globally, binned into square pixel tiles by a
//! conservative footprint box, and composited front to back per pixel until
//! transmittance drops below `t_min`. Residual transmittance blends the
//! background color.

use rayon::prelude::*;

use crate::camera::Camera;
use crate::img::{ImageGray, ImageRgb};
use crate::splat::{project_gaussian, GaussianSet, Splat2D};

/// Rasterization knobs shared by the forward and backward passes.
#[derive(Debug, Clone)]
pub struct RasterConfig {
    pub tile_size: u32,
    /// Minimum footprint radius in units of the largest screen-space sigma.
    pub sigma_cutoff: f64,
    /// Per-splat alpha ceiling.
    pub alpha_clamp: f64,
    /// Contributions below this alpha may be truncated by the footprint box.
    pub alpha_eps: f64,
    /// Front-to-back termination threshold on transmittance.
    pub t_min: f64,
    /// Screen-space isotropic low-pass added to the projected covariance,
    /// in pixels squared.
    pub lowpass: f64,
    pub background: [f64; 3],
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            tile_size: 16,
            sigma_cutoff: 3.0,
            alpha_clamp: 0.99,
            alpha_eps: 1e-5,
            t_min: 1e-4,
            lowpass: 0.3,
            background: [1.0, 1.0, 1.0],
        }
    }
}

/// Project and depth-sort all visible splats; ties break on gaussian index.
pub(crate) fn project_and_sort(
    set: &GaussianSet,
    camera: &Camera,
    cfg: &RasterConfig,
) -> Vec<Splat2D> {
    let mut splats: Vec<Splat2D> = set
        .gaussians
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| project_gaussian(g, i as u32, camera, cfg).map(|(s, _)| s))
        .collect();
    splats.sort_unstable_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .unwrap()
            .then(a.gaussian.cmp(&b.gaussian))
    });
    splats
}

/// Depth-ordered splat indices per tile.
pub(crate) fn bin_tiles(
    splats: &[Splat2D],
    width: u32,
    height: u32,
    tile_size: u32,
) -> (usize, usize, Vec<Vec<u32>>) {
    let tiles_x = width.div_ceil(tile_size) as usize;
    let tiles_y = height.div_ceil(tile_size) as usize;
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    let ts = f64::from(tile_size);
    for (si, s) in splats.iter().enumerate() {
        let x0 = ((s.center.x - s.radius) / ts).floor().max(0.0) as usize;
        let y0 = ((s.center.y - s.radius) / ts).floor().max(0.0) as usize;
        let x1 = ((s.center.x + s.radius) / ts).floor() as isize;
        let y1 = ((s.center.y + s.radius) / ts).floor() as isize;
        if x1 < 0 || y1 < 0 {
            continue;
        }
        let x1 = (x1 as usize).min(tiles_x - 1);
        let y1 = (y1 as usize).min(tiles_y - 1);
        if x0 >= tiles_x || y0 >= tiles_y {
            continue;
        }
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                tiles[ty * tiles_x + tx].push(si as u32);
            }
        }
    }
    (tiles_x, tiles_y, tiles)
}

#[inline]
pub(crate) fn splat_alpha(s: &Splat2D, px: f64, py: f64, alpha_clamp: f64) -> f64 {
    let dx = px - s.center.x;
    let dy = py - s.center.y;
    let q = s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
    (s.opacity * (-0.5 * q).exp()).min(alpha_clamp)
}

/// Rasterize the set into an RGB image plus per-pixel accumulated opacity.
/// An empty set renders pure background.
pub fn rasterize(set: &GaussianSet, camera: &Camera, cfg: &RasterConfig) -> (ImageRgb, ImageGray) {
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    let splats = project_and_sort(set, camera, cfg);
    let (tiles_x, _tiles_y, tiles) = bin_tiles(&splats, w, h, cfg.tile_size);

    let mut img = ImageRgb::new(w, h);
    let mut opacity = ImageGray::new(w, h);
    let ts = cfg.tile_size;

    // each row belongs to exactly one tile row; parallelize over image rows
    img.data
        .par_chunks_mut(w as usize * 3)
        .zip(opacity.data.par_chunks_mut(w as usize))
        .enumerate()
        .for_each(|(y, (rgb_row, op_row))| {
            let ty = y / ts as usize;
            let py = y as f64 + 0.5;
            for x in 0..w as usize {
                let tx = x / ts as usize;
                let list = &tiles[ty * tiles_x + tx];
                let px = x as f64 + 0.5;
                let mut t = 1.0f64;
                let mut rgb = [0.0f64; 3];
                let mut acc = 0.0f64;
                for &si in list {
                    let s = &splats[si as usize];
                    let alpha = splat_alpha(s, px, py, cfg.alpha_clamp);
                    let wgt = t * alpha;
                    rgb[0] += wgt * s.color[0];
                    rgb[1] += wgt * s.color[1];
                    rgb[2] += wgt * s.color[2];
                    acc += wgt;
                    t *= 1.0 - alpha;
                    if t < cfg.t_min {
                        break;
                    }
                }
                for c in 0..3 {
                    rgb_row[3 * x + c] = rgb[c] + t * cfg.background[c];
                }
                op_row[x] = acc;
            }
        });
    (img, opacity)
}

/// Reference rasterizer: identical compositing but every pixel walks the
/// full depth-sorted splat list with no tiling and no footprint cutoff.
/// Used to bound the tile rasterizer's truncation error.
pub fn reference_rasterize(
    set: &GaussianSet,
    camera: &Camera,
    cfg: &RasterConfig,
) -> (ImageRgb, ImageGray) {
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    let splats = project_and_sort(set, camera, cfg);
    let mut img = ImageRgb::new(w, h);
    let mut opacity = ImageGray::new(w, h);
    for y in 0..h {
        let py = f64::from(y) + 0.5;
        for x in 0..w {
            let px = f64::from(x) + 0.5;
            let mut t = 1.0f64;
            let mut rgb = [0.0f64; 3];
            let mut acc = 0.0f64;
            for s in &splats {
                let alpha = splat_alpha(s, px, py, cfg.alpha_clamp);
                let wgt = t * alpha;
                for c in 0..3 {
                    rgb[c] += wgt * s.color[c];
                }
                acc += wgt;
                t *= 1.0 - alpha;
                if t < cfg.t_min {
                    break;
                }
            }
            for c in 0..3 {
                rgb[c] += t * cfg.background[c];
            }
            img.set(x, y, rgb);
            opacity.set(x, y, acc);
        }
    }
    (img, opacity)
}

/// Forward pass for one pixel, recording every contribution; the backward
/// pass replays these front-to-back lists in reverse.
#[inline]
pub(crate) fn pixel_contributions(
    splats: &[Splat2D],
    list: &[u32],
    px: f64,
    py: f64,
    cfg: &RasterConfig,
    out: &mut Vec<(u32, f64, f64)>,
) -> f64 {
    out.clear();
    let mut t = 1.0f64;
    for &si in list {
        let s = &splats[si as usize];
        let alpha = splat_alpha(s, px, py, cfg.alpha_clamp);
        out.push((si, alpha, t));
        t *= 1.0 - alpha;
        if t < cfg.t_min {
            break;
        }
    }
    t
}

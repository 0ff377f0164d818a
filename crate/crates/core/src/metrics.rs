//! Reconstruction and rendering metrics: chamfer distance, accuracy /
//! recall / F1 at distance thresholds, PSNR and foreground-masked PSNR-F.

pub mod kdtree;

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::ImageRgb;
use crate::mesh::TriangleMesh;
use kdtree::KdTree;

type Vec3 = Vector3<f64>;

/// PSNR reported for byte-identical images instead of infinity.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Symmetric chamfer distance: the average of both directed mean
/// nearest-neighbor distances.
pub fn chamfer_distance(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput(
            "chamfer_distance needs two non-empty clouds".into(),
        ));
    }
    Ok(0.5 * (mean_nn_distance(a, b) + mean_nn_distance(b, a)))
}

fn mean_nn_distance(from: &[Vec3], to: &[Vec3]) -> f64 {
    let tree = KdTree::build(to);
    let total: f64 = from.par_iter().map(|p| tree.nearest(*p).1.sqrt()).sum();
    total / from.len() as f64
}

/// Accuracy (% of `pred` within `sigma` of `gt`), recall (% of `gt` within
/// `sigma` of `pred`) and their harmonic mean, all on a 0-100 scale.
pub fn f1_at_threshold(pred: &[Vec3], gt: &[Vec3], sigma: f64) -> Result<(f64, f64, f64)> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::InvalidInput(
            "f1_at_threshold needs two non-empty clouds".into(),
        ));
    }
    if sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "threshold must be positive, got {sigma}"
        )));
    }
    let frac_within = |from: &[Vec3], to: &[Vec3]| -> f64 {
        let tree = KdTree::build(to);
        let hits = from
            .par_iter()
            .filter(|p| tree.nearest(**p).1.sqrt() <= sigma)
            .count();
        100.0 * hits as f64 / from.len() as f64
    };
    let accuracy = frac_within(pred, gt);
    let recall = frac_within(gt, pred);
    let f1 = if accuracy + recall == 0.0 {
        0.0
    } else {
        2.0 * accuracy * recall / (accuracy + recall)
    };
    Ok((accuracy, recall, f1))
}

/// PSNR in dB over all channels of the unmasked (or mask-true) pixels.
/// Identical selections return [`PSNR_CAP_DB`].
pub fn psnr(pred: &ImageRgb, gt: &ImageRgb, mask: Option<&[bool]>) -> Result<f64> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::InvalidInput(format!(
            "image sizes differ: {}x{} vs {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let n_px = pred.n_pixels();
    let mut sum = 0.0;
    let mut count = 0usize;
    match mask {
        None => {
            for (a, b) in pred.data.iter().zip(gt.data.iter()) {
                let d = a - b;
                sum += d * d;
            }
            count = n_px * 3;
        }
        Some(m) => {
            if m.len() != n_px {
                return Err(Error::InvalidInput(format!(
                    "mask length {} != pixel count {n_px}",
                    m.len()
                )));
            }
            for (px, &keep) in m.iter().enumerate() {
                if !keep {
                    continue;
                }
                for c in 0..3 {
                    let d = pred.data[3 * px + c] - gt.data[3 * px + c];
                    sum += d * d;
                }
                count += 3;
            }
            if count == 0 {
                return Err(Error::InvalidInput("mask selects no pixels".into()));
            }
        }
    }
    let mse = sum / count as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Area-weighted uniform surface samples of a mesh; deterministic per seed.
pub fn sample_mesh_surface(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<Vec<Vec3>> {
    if mesh.is_empty() {
        return Err(Error::InvalidInput("cannot sample an empty mesh".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be > 0".into()));
    }
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.face_area(f);
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(Error::InvalidInput("mesh has zero total area".into()));
    }
    let mut rng = crate::seeds::rng_indexed(seed, "mesh-surface", n as u64);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let target: f64 = rng.gen_range(0.0..total);
        let f = cumulative.partition_point(|&c| c <= target);
        let f = f.min(mesh.faces.len() - 1);
        let [a, b, c] = mesh.faces[f];
        let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
        let su = r1.sqrt();
        let (w0, w1, w2) = (1.0 - su, su * (1.0 - r2), su * r2);
        out.push(
            w0 * mesh.vertices[a as usize]
                + w1 * mesh.vertices[b as usize]
                + w2 * mesh.vertices[c as usize],
        );
    }
    Ok(out)
}

/// Per-threshold accuracy / recall / F1 triple.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ThresholdScores {
    pub sigma: f64,
    pub accuracy: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Mesh-side evaluation bundle.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MeshEvalResult {
    pub chamfer: f64,
    pub thresholds: Vec<ThresholdScores>,
    pub pred_samples: usize,
    pub gt_samples: usize,
}

/// Rendering-side evaluation bundle.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RenderEvalResult {
    pub psnr: f64,
    pub psnr_f: f64,
    pub pixels: usize,
    pub foreground_pixels: usize,
}

/// Full per-run metrics report, serialized as JSON for regression tracking.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReconReport {
    pub chamfer: f64,
    pub thresholds: Vec<ThresholdScores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr_f: Option<f64>,
    /// Echo of the evaluation configuration that produced the numbers.
    pub config: serde_json::Value,
}

/// Evaluate a predicted mesh against ground-truth surface points.
pub fn evaluate_mesh(
    mesh: &TriangleMesh,
    gt_points: &[Vec3],
    thresholds: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<MeshEvalResult> {
    let samples = sample_mesh_surface(mesh, n_samples, seed)?;
    let chamfer = chamfer_distance(&samples, gt_points)?;
    let mut scores = Vec::with_capacity(thresholds.len());
    for &sigma in thresholds {
        let (accuracy, recall, f1) = f1_at_threshold(&samples, gt_points, sigma)?;
        scores.push(ThresholdScores {
            sigma,
            accuracy,
            recall,
            f1,
        });
    }
    Ok(MeshEvalResult {
        chamfer,
        thresholds: scores,
        pred_samples: samples.len(),
        gt_samples: gt_points.len(),
    })
}

//! Depth-based surface point sampling: the bridge from a cleaned mesh to
//! the splat initialization cloud.
//!
//! Points are drawn from valid pixels of mesh-rendered depth maps, so every
//! sample is visible from its source view, then back-projected and colored
//! from the training image at that pixel.

use nalgebra::Vector3;
use rand::seq::SliceRandom;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::img::ImageRgb;
use crate::mesh::DepthMap;

type Vec3 = Vector3<f64>;

/// Origin tag per point, preserved through fusion and PLY round trips.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointSource {
    MeshSampled,
    BackgroundFile,
}

impl PointSource {
    pub fn to_u8(self) -> u8 {
        match self {
            PointSource::MeshSampled => 0,
            PointSource::BackgroundFile => 1,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(PointSource::MeshSampled),
            1 => Ok(PointSource::BackgroundFile),
            other => Err(Error::Format(format!("unknown point source tag {other}"))),
        }
    }
}

/// Colorized world-space points with per-point source tags.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vec3>,
    pub colors: Vec<[f64; 3]>,
    pub sources: Vec<PointSource>,
}

impl PointCloud {
    pub fn empty() -> Self {
        Self {
            positions: Vec::new(),
            colors: Vec::new(),
            sources: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, p: Vec3, color: [f64; 3], source: PointSource) {
        self.positions.push(p);
        self.colors.push(color);
        self.sources.push(source);
    }
}

/// Draw up to `k` pixels uniformly without replacement from the valid
/// region of `depth`, back-project them and color them from `image`.
pub fn sample_view(
    depth: &DepthMap,
    camera: &Camera,
    image: &ImageRgb,
    k: usize,
    seed: u64,
) -> Result<PointCloud> {
    let ki = &camera.intrinsics;
    if depth.width != ki.width || depth.height != ki.height {
        return Err(Error::InvalidInput(format!(
            "depth map {}x{} does not match camera {}x{}",
            depth.width, depth.height, ki.width, ki.height
        )));
    }
    if image.width != ki.width || image.height != ki.height {
        return Err(Error::InvalidInput(format!(
            "image {}x{} does not match camera {}x{}",
            image.width, image.height, ki.width, ki.height
        )));
    }
    let mut valid = depth.valid_pixels();
    let mut cloud = PointCloud::empty();
    if valid.is_empty() || k == 0 {
        return Ok(cloud);
    }
    let take = k.min(valid.len());
    if take < valid.len() {
        let mut rng = crate::seeds::rng(seed, "sample-view");
        let (selected, _) = valid.partial_shuffle(&mut rng, take);
        selected.sort_unstable();
        valid = selected.to_vec();
    }
    for (x, y) in valid {
        let d = depth.get(x, y);
        let p = camera.back_project(f64::from(x) + 0.5, f64::from(y) + 0.5, d)?;
        cloud.push(p, image.get(x, y), PointSource::MeshSampled);
    }
    Ok(cloud)
}

/// Concatenate per-view clouds, then uniformly subsample to exactly
/// `total` points (all of them if fewer exist).
pub fn fuse_views(per_view: &[PointCloud], total: usize, seed: u64) -> PointCloud {
    let mut fused = PointCloud::empty();
    for cloud in per_view {
        fused.positions.extend_from_slice(&cloud.positions);
        fused.colors.extend_from_slice(&cloud.colors);
        fused.sources.extend_from_slice(&cloud.sources);
    }
    if fused.len() <= total {
        return fused;
    }
    let mut indices: Vec<usize> = (0..fused.len()).collect();
    let mut rng = crate::seeds::rng(seed, "fuse-views");
    let (selected, _) = indices.partial_shuffle(&mut rng, total);
    selected.sort_unstable();
    let mut out = PointCloud::empty();
    for &i in selected.iter() {
        out.push(fused.positions[i], fused.colors[i], fused.sources[i]);
    }
    out
}

/// Append background points after the foreground cloud; tags preserved,
/// no deduplication.
pub fn merge_background(fg: &PointCloud, bg: &PointCloud) -> PointCloud {
    let mut out = fg.clone();
    out.positions.extend_from_slice(&bg.positions);
    out.colors.extend_from_slice(&bg.colors);
    out.sources.extend_from_slice(&bg.sources);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{CameraIntrinsics, CameraPose};
    use crate::grid::{Aabb, SdfGrid};
    use crate::mesh::{marching_cubes, render_depth, INVALID_DEPTH};
    use crate::metrics::kdtree::KdTree;

    fn test_camera(size: u32) -> Camera {
        Camera::new(
            CameraIntrinsics::new(
                f64::from(size),
                f64::from(size),
                f64::from(size) / 2.0,
                f64::from(size) / 2.0,
                size,
                size,
            )
            .unwrap(),
            CameraPose::identity(),
        )
    }

    #[test]
    fn empty_depth_gives_empty_cloud() {
        let cam = test_camera(8);
        let depth = DepthMap::new(8, 8);
        let img = ImageRgb::new(8, 8);
        let cloud = sample_view(&depth, &cam, &img, 100, 0).unwrap();
        assert!(cloud.is_empty());
    }

    #[test]
    fn single_valid_pixel_is_forced() {
        let cam = test_camera(8);
        let mut depth = DepthMap::new(8, 8);
        depth.data[3 * 8 + 5] = 2.0; // pixel (5, 3)
        let mut img = ImageRgb::new(8, 8);
        img.set(5, 3, [0.9, 0.1, 0.2]);
        let cloud = sample_view(&depth, &cam, &img, 1, 7).unwrap();
        assert_eq!(cloud.len(), 1);
        let expect = cam.back_project(5.5, 3.5, 2.0).unwrap();
        assert_eq!(cloud.positions[0], expect);
        assert_eq!(cloud.colors[0], [0.9, 0.1, 0.2]);
        assert_eq!(cloud.sources[0], PointSource::MeshSampled);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let cam = test_camera(8);
        let depth = DepthMap::new(9, 8);
        let img = ImageRgb::new(8, 8);
        assert!(sample_view(&depth, &cam, &img, 10, 0).is_err());
    }

    #[test]
    fn samples_are_deterministic_and_visible() {
        // sphere mesh seen from one side; every sample must reproject onto
        // a valid depth pixel with matching depth
        let mut grid = SdfGrid::new([48, 48, 48], Aabb::centered_cube(1.0)).unwrap();
        grid.fill_from(|p| p.norm() - 0.5);
        let mesh = marching_cubes(&grid, 0.0);
        let cam = Camera::new(
            CameraIntrinsics::new(80.0, 80.0, 32.0, 32.0, 64, 64).unwrap(),
            CameraPose::look_at(Vec3::new(0.0, -2.0, 0.0), Vec3::zeros()).unwrap(),
        );
        let depth = render_depth(&mesh, &cam);
        let img = ImageRgb::filled(64, 64, [0.5, 0.5, 0.5]);
        let a = sample_view(&depth, &cam, &img, 500, 11).unwrap();
        let b = sample_view(&depth, &cam, &img, 500, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 500);
        for p in &a.positions {
            let (u, v, d) = cam.project_point(*p).unwrap();
            let (x, y) = ((u - 0.5).round() as u32, (v - 0.5).round() as u32);
            let stored = depth.get(x, y);
            assert!(stored.is_finite());
            assert!(
                (stored - d).abs() < 1e-6,
                "sample depth {d} vs stored {stored}"
            );
        }
    }

    #[test]
    fn fuse_keeps_all_when_under_budget() {
        let mut a = PointCloud::empty();
        let mut b = PointCloud::empty();
        for i in 0..10 {
            a.push(
                Vec3::new(f64::from(i), 0.0, 0.0),
                [0.0; 3],
                PointSource::MeshSampled,
            );
            b.push(
                Vec3::new(0.0, f64::from(i), 0.0),
                [0.0; 3],
                PointSource::MeshSampled,
            );
        }
        let fused = fuse_views(&[a.clone(), b.clone()], 20, 0);
        assert_eq!(fused.len(), 20);
        let none = fuse_views(&[a.clone(), b.clone()], 0, 0);
        assert!(none.is_empty());
        let sub = fuse_views(&[a, b], 7, 3);
        assert_eq!(sub.len(), 7);
        let sub2 = fuse_views(
            &[sub.clone()],
            7,
            99, // no subsampling happens, so the seed is irrelevant
        );
        assert_eq!(sub, sub2);
    }

    #[test]
    fn merge_background_counts_and_tags() {
        let mut fg = PointCloud::empty();
        for i in 0..100 {
            fg.push(
                Vec3::new(f64::from(i), 0.0, 0.0),
                [0.5; 3],
                PointSource::MeshSampled,
            );
        }
        let mut bg = PointCloud::empty();
        for i in 0..30 {
            bg.push(
                Vec3::new(0.0, f64::from(i), 5.0),
                [0.1; 3],
                PointSource::BackgroundFile,
            );
        }
        let merged = merge_background(&fg, &bg);
        assert_eq!(merged.len(), 130);
        let mesh_tagged = merged
            .sources
            .iter()
            .filter(|s| **s == PointSource::MeshSampled)
            .count();
        assert_eq!(mesh_tagged, 100);

        let same = merge_background(&fg, &PointCloud::empty());
        assert_eq!(same, fg);
    }

    #[test]
    fn ring_coverage_has_no_gross_clustering() {
        // eight views around the sphere; fused cloud nearest-neighbor
        // spacing should be fairly even (coefficient of variation < 1)
        let mut grid = SdfGrid::new([48, 48, 48], Aabb::centered_cube(1.0)).unwrap();
        grid.fill_from(|p| p.norm() - 0.5);
        let mesh = marching_cubes(&grid, 0.0);
        let mut clouds = Vec::new();
        for k in 0..8 {
            let phi = 2.0 * std::f64::consts::PI * k as f64 / 8.0;
            let c = Vec3::new(2.0 * phi.cos(), 2.0 * phi.sin(), 0.7);
            let cam = Camera::new(
                CameraIntrinsics::new(80.0, 80.0, 32.0, 32.0, 64, 64).unwrap(),
                CameraPose::look_at(c, Vec3::zeros()).unwrap(),
            );
            let depth = render_depth(&mesh, &cam);
            let img = ImageRgb::filled(64, 64, [0.5, 0.5, 0.5]);
            clouds.push(sample_view(&depth, &cam, &img, 1000, k).unwrap());
        }
        let fused = fuse_views(&clouds, 4000, 5);
        assert_eq!(fused.len(), 4000);
        let tree = KdTree::build(&fused.positions);
        let spacings: Vec<f64> = fused
            .positions
            .iter()
            .map(|p| tree.knn(*p, 2)[1].1.sqrt())
            .collect();
        let mean = spacings.iter().sum::<f64>() / spacings.len() as f64;
        let var = spacings.iter().map(|s| (s - mean).powi(2)).sum::<f64>()
            / spacings.len() as f64;
        let cv = var.sqrt() / mean;
        assert!(cv < 1.0, "nearest-neighbor spacing CV {cv}");
    }

    #[test]
    fn invalid_sentinel_is_infinite() {
        assert!(!INVALID_DEPTH.is_finite());
    }
}

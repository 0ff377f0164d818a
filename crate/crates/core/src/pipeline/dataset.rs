//! Dataset directory convention and the synthetic-scene materializer.
//!
//! A dataset directory holds:
//!   images/*.png            training images (8-bit)
//!   cameras.json            camera records, `image` field names the file
//!   normals/*.pfm           optional world-frame normal maps
//!   masks/*.png             optional validity / foreground masks
//!   background_points.ply   optional background seed points
//!   gt_points.ply           optional ground-truth surface samples
//!   cameras_test.json + images_test/ + masks_test/   optional test split
//!   manifest.json           bounds / background / trajectory metadata

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::{cameras_from_json, cameras_to_json, CameraRecord, CameraView};
use crate::error::{Error, Result};
use crate::grid::Aabb;
use crate::img::{load_mask_png, save_mask_png, ImageRgb};
use crate::sampling::PointCloud;
use crate::synthetic::{ground_truth_points, render_reference, AnalyticScene, RigSpec};

type Vec3 = Vector3<f64>;

/// Sidecar metadata written by `gen-scene` and honored by the loader.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub bounds: [f64; 6],
    pub background: [f64; 3],
    /// The capture trajectory closes on itself (ring rigs).
    pub closed_trajectory: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene: Option<AnalyticScene>,
}

/// A loaded dataset, ready for the pipeline stages.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub views: Vec<CameraView>,
    pub test_views: Vec<CameraView>,
    pub background_points: Option<PointCloud>,
    pub gt_points: Option<Vec<Vec3>>,
    pub bounds: Aabb,
    pub background: [f64; 3],
    pub closed_trajectory: bool,
}

impl Dataset {
    pub fn poses(&self) -> Vec<crate::camera::CameraPose> {
        self.views.iter().map(|v| v.camera.pose.clone()).collect()
    }

    /// Farthest distance from any training camera to a bounds corner;
    /// a safe `far` plane for ray sampling.
    pub fn far_plane(&self) -> f64 {
        let mut far = 0.0f64;
        for view in &self.views {
            let c = view.camera.pose.center();
            for dx in [self.bounds.min.x, self.bounds.max.x] {
                for dy in [self.bounds.min.y, self.bounds.max.y] {
                    for dz in [self.bounds.min.z, self.bounds.max.z] {
                        far = far.max((Vec3::new(dx, dy, dz) - c).norm());
                    }
                }
            }
        }
        far * 1.05
    }
}

fn load_views(
    dir: &Path,
    cameras_file: &str,
    normals_dir: Option<&str>,
    masks_dir: Option<&str>,
) -> Result<Vec<CameraView>> {
    let cam_path = dir.join(cameras_file);
    let text =
        fs::read_to_string(&cam_path).map_err(|e| Error::ingestion(&cam_path, e.to_string()))?;
    let records = cameras_from_json(&text)?;
    if records.is_empty() {
        return Err(Error::ingestion(&cam_path, "no cameras in file"));
    }
    let mut views = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let camera = rec.to_camera()?;
        let image_rel = rec
            .image
            .clone()
            .ok_or_else(|| Error::ingestion(&cam_path, format!("camera {i} has no image path")))?;
        let image_path = dir.join(&image_rel);
        let image = ImageRgb::load_png(&image_path)?;
        if image.width != camera.intrinsics.width || image.height != camera.intrinsics.height {
            return Err(Error::ingestion(
                &image_path,
                format!(
                    "image is {}x{} but camera says {}x{}",
                    image.width, image.height, camera.intrinsics.width, camera.intrinsics.height
                ),
            ));
        }
        let stem = Path::new(&image_rel)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("view")
            .to_string();
        let normals = match normals_dir {
            Some(nd) => {
                let p = dir.join(nd).join(format!("{stem}.pfm"));
                if p.exists() {
                    Some(ImageRgb::load_pfm(&p)?)
                } else {
                    None
                }
            }
            None => None,
        };
        let mask = match masks_dir {
            Some(md) => {
                let p = dir.join(md).join(format!("{stem}.png"));
                if p.exists() {
                    let (m, w, h) = load_mask_png(&p)?;
                    if (w, h) != (image.width, image.height) {
                        return Err(Error::ingestion(&p, "mask size mismatch"));
                    }
                    Some(m)
                } else {
                    None
                }
            }
            None => None,
        };
        views.push(CameraView {
            camera,
            image: Some(image),
            normals,
            mask,
            synthetic: rec.synthetic,
        });
    }
    Ok(views)
}

/// Load a dataset directory; missing optional pieces are simply `None`.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::ingestion(dir, "dataset directory does not exist"));
    }
    let views = load_views(dir, "cameras.json", Some("normals"), Some("masks"))?;
    let test_views = if dir.join("cameras_test.json").exists() {
        load_views(dir, "cameras_test.json", None, Some("masks_test"))?
    } else {
        Vec::new()
    };
    let background_points = {
        let p = dir.join("background_points.ply");
        if p.exists() {
            let mut cloud = crate::ply::read_point_cloud(&p)?;
            for s in cloud.sources.iter_mut() {
                *s = crate::sampling::PointSource::BackgroundFile;
            }
            Some(cloud)
        } else {
            None
        }
    };
    let gt_points = {
        let p = dir.join("gt_points.ply");
        if p.exists() {
            Some(crate::ply::read_point_cloud(&p)?.positions)
        } else {
            None
        }
    };
    let manifest: Option<Manifest> = {
        let p = dir.join("manifest.json");
        if p.exists() {
            let text = fs::read_to_string(&p).map_err(|e| Error::ingestion(&p, e.to_string()))?;
            Some(serde_json::from_str(&text)?)
        } else {
            None
        }
    };
    let (bounds, background, closed) = match &manifest {
        Some(m) => (
            Aabb::new(
                Vec3::new(m.bounds[0], m.bounds[1], m.bounds[2]),
                Vec3::new(m.bounds[3], m.bounds[4], m.bounds[5]),
            )?,
            m.background,
            m.closed_trajectory,
        ),
        None => (Aabb::centered_cube(1.0), [1.0, 1.0, 1.0], false),
    };
    Ok(Dataset {
        views,
        test_views,
        background_points,
        gt_points,
        bounds,
        background,
        closed_trajectory: closed,
    })
}

/// Options for materializing a synthetic scene to a dataset directory.
#[derive(Debug, Clone)]
pub struct GenSceneOptions {
    pub gt_points: usize,
    /// Held-out cameras for rendering evaluation (an offset, elevated ring).
    pub test_views: usize,
    pub seed: u64,
}

impl Default for GenSceneOptions {
    fn default() -> Self {
        Self {
            gt_points: 50_000,
            test_views: 5,
            seed: 0,
        }
    }
}

/// Render a scene's rig to a dataset directory: images, exact normals and
/// masks, ground-truth surface points, cameras and manifest.
pub fn materialize_scene(scene: &AnalyticScene, dir: &Path, opts: &GenSceneOptions) -> Result<()> {
    scene.validate()?;
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("normals"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let cameras = scene.cameras()?;
    let mut records = Vec::with_capacity(cameras.len());
    for (i, camera) in cameras.iter().enumerate() {
        let name = format!("view_{i:03}");
        let out = render_reference(scene, camera);
        out.rgb.save_png(&dir.join(format!("images/{name}.png")))?;
        out.normals
            .save_pfm(&dir.join(format!("normals/{name}.pfm")))?;
        save_mask_png(
            &out.mask,
            out.rgb.width,
            out.rgb.height,
            &dir.join(format!("masks/{name}.png")),
        )?;
        records.push(CameraRecord::from_camera(
            camera,
            Some(format!("images/{name}.png")),
            false,
        ));
    }
    fs::write(dir.join("cameras.json"), cameras_to_json(&records)?)?;

    if opts.test_views > 0 {
        fs::create_dir_all(dir.join("images_test"))?;
        fs::create_dir_all(dir.join("masks_test"))?;
        let mut test_scene = scene.clone();
        // held-out ring: phase offset and higher elevation than training
        let radius = match scene.rig {
            RigSpec::Ring { radius, .. } | RigSpec::Hemisphere { radius, .. } => radius,
        };
        test_scene.rig = RigSpec::Ring {
            radius,
            elevation_deg: 35.0,
            count: opts.test_views,
        };
        let test_cams = test_scene.cameras()?;
        let mut test_records = Vec::new();
        for (i, camera) in test_cams.iter().enumerate() {
            let name = format!("view_{i:03}");
            let out = render_reference(scene, camera);
            out.rgb
                .save_png(&dir.join(format!("images_test/{name}.png")))?;
            save_mask_png(
                &out.mask,
                out.rgb.width,
                out.rgb.height,
                &dir.join(format!("masks_test/{name}.png")),
            )?;
            test_records.push(CameraRecord::from_camera(
                camera,
                Some(format!("images_test/{name}.png")),
                false,
            ));
        }
        fs::write(dir.join("cameras_test.json"), cameras_to_json(&test_records)?)?;
    }

    let gt = ground_truth_points(scene, opts.gt_points, crate::seeds::derive(opts.seed, "gt"))?;
    crate::ply::write_point_cloud(&gt, &dir.join("gt_points.ply"))?;

    let manifest = Manifest {
        bounds: scene.bounds,
        background: scene.background,
        closed_trajectory: matches!(scene.rig, RigSpec::Ring { .. }),
        scene: Some(scene.clone()),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Resolve a scene argument: a builtin name or a JSON file path.
pub fn resolve_scene(arg: &str) -> Result<AnalyticScene> {
    match arg {
        "sphere" => Ok(AnalyticScene::sphere()),
        "sphere-box" | "sphere_plus_box" => Ok(AnalyticScene::sphere_plus_box()),
        path => {
            let p = PathBuf::from(path);
            let text = fs::read_to_string(&p).map_err(|e| Error::ingestion(&p, e.to_string()))?;
            let scene: AnalyticScene = serde_json::from_str(&text)?;
            scene.validate()?;
            Ok(scene)
        }
    }
}

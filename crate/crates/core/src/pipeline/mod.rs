//! Stage orchestration: coarse SDF reconstruction, the splat render step,
//! the refined mesh step, and the full render/mesh cycle, with every
//! intermediate artifact persisted and re-loadable.

pub mod config;
pub mod dataset;

pub use config::{load_config, PipelineConfig, Preset};
pub use dataset::{load_dataset, materialize_scene, Dataset, GenSceneOptions};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::{cameras_to_json, CameraRecord, CameraView};
use crate::error::{Error, Result};
use crate::grid::SdfGrid;
use crate::mesh::{clean_mesh, clean_mesh_keep, marching_cubes, render_depth, TriangleMesh};
use crate::metrics::{evaluate_mesh, psnr, ReconReport, ThresholdScores};
use crate::poses::{expand_poses, render_expanded, PoseExpansionConfig};
use crate::sampling::{fuse_views, merge_background, sample_view};
use crate::splat::{rasterize, train_splats, GaussianSet, RasterConfig};
use crate::volume::{history_to_csv, train_sdf, SdfTrainSchedule};

/// State carried across cycles: the current mesh/grid pair becomes the next
/// cycle's coarse input.
#[derive(Debug, Clone)]
pub struct CycleState {
    pub grid: SdfGrid,
    pub mesh: TriangleMesh,
    pub sharpness: f64,
}

/// Coarse-stage artifacts live at the output root; per-cycle artifacts in
/// `cycle_XX/` subdirectories.
pub fn cycle_dir(out: &Path, cycle: usize) -> PathBuf {
    out.join(format!("cycle_{cycle:02}"))
}

fn sdf_schedule(
    stage: &config::SdfStageConfig,
    data: &Dataset,
    seed: u64,
    view_weights: Option<Vec<f64>>,
) -> SdfTrainSchedule {
    SdfTrainSchedule {
        iterations: stage.iterations,
        ray_batch: stage.ray_batch,
        n_samples: stage.n_samples,
        near: 0.05,
        far: data.far_plane(),
        background: data.background,
        lr_sdf: stage.lr_sdf,
        lr_color: stage.lr_color,
        lr_log_s: stage.lr_log_s,
        weights: stage.weights,
        s_init: None,
        view_weights,
        seed,
    }
}

fn extract_and_clean(grid: &SdfGrid, keep_fraction: Option<f64>) -> TriangleMesh {
    let mesh = marching_cubes(grid, 0.0);
    match keep_fraction {
        Some(p) => clean_mesh_keep(&mesh, p),
        None => clean_mesh(&mesh),
    }
}

/// Train the coarse SDF on the dataset, extract and clean the mesh, persist
/// grid + mesh + loss history.
pub fn run_coarse(cfg: &PipelineConfig, data: &Dataset, out: &Path) -> Result<CycleState> {
    cfg.validate()?;
    if data.views.is_empty() {
        return Err(Error::InvalidInput("dataset has no training views".into()));
    }
    fs::create_dir_all(out)?;
    let res = cfg.coarse.resolution;
    let grid = SdfGrid::with_sphere_init([res, res, res], data.bounds)?;
    let schedule = sdf_schedule(
        &cfg.coarse,
        data,
        crate::seeds::derive(cfg.seed, "coarse"),
        None,
    );
    let (grid, history, sharpness) = train_sdf(&grid, &data.views, &schedule)?;
    let mesh = extract_and_clean(&grid, cfg.mesh_keep_fraction);
    grid.save(&out.join("coarse_grid.sdfg"))?;
    crate::ply::write_mesh(&mesh, &out.join("coarse_mesh.ply"))?;
    crate::ply::write_mesh_obj(&mesh, &out.join("coarse_mesh.obj"))?;
    fs::write(out.join("coarse_loss.csv"), history_to_csv(&history))?;
    Ok(CycleState {
        grid,
        mesh,
        sharpness,
    })
}

/// Render step: depth-sample the current mesh, train splats on the real
/// views, expand poses and render the new views. Everything is persisted
/// under the cycle directory.
pub fn run_render_step(
    cfg: &PipelineConfig,
    data: &Dataset,
    mesh: &TriangleMesh,
    out: &Path,
    cycle: usize,
) -> Result<(GaussianSet, Vec<CameraView>)> {
    if mesh.is_empty() {
        return Err(Error::Stage(
            "render step received an empty mesh; inspect the coarse stage output".into(),
        ));
    }
    let dir = cycle_dir(out, cycle);
    fs::create_dir_all(&dir)?;

    // depth-based, per-view visible-surface sampling
    let mut clouds = Vec::with_capacity(data.views.len());
    for (i, view) in data.views.iter().enumerate() {
        let depth = render_depth(mesh, &view.camera);
        let image = view
            .image
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("view {i} has no image")))?;
        clouds.push(sample_view(
            &depth,
            &view.camera,
            image,
            cfg.sampling.per_view,
            crate::seeds::derive_indexed(cfg.seed, "sample-view", (cycle * 10_000 + i) as u64),
        )?);
    }
    let fused = fuse_views(
        &clouds,
        cfg.sampling.total,
        crate::seeds::derive_indexed(cfg.seed, "fuse", cycle as u64),
    );
    let cloud = match &data.background_points {
        Some(bg) => merge_background(&fused, bg),
        None => fused,
    };
    if cloud.is_empty() {
        return Err(Error::Stage(
            "sampled point cloud is empty; the coarse mesh likely collapsed".into(),
        ));
    }
    crate::ply::write_point_cloud(&cloud, &dir.join("points.ply"))?;

    // splat training on the real views only
    let train_cfg = cfg.splats.to_train_config(
        crate::seeds::derive_indexed(cfg.seed, "splats", cycle as u64),
        data.background,
    );
    let (set, history) = train_splats(&cloud, &data.views, &train_cfg)?;
    crate::ply::write_gaussians(&set.gaussians, &dir.join("splats.ply"))?;
    let mut csv = String::from("iteration,loss\n");
    for (i, l) in history.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    fs::write(dir.join("splat_loss.csv"), csv)?;

    // pose expansion + novel-view rendering
    let expansion = PoseExpansionConfig {
        seed: crate::seeds::derive_indexed(cfg.seed, "expand", cycle as u64),
        closed: cfg.expansion.closed && data.closed_trajectory,
        ..cfg.expansion.clone()
    };
    let new_poses = expand_poses(&data.poses(), &expansion)?;
    let intrinsics = data.views[0].camera.intrinsics;
    let raster = RasterConfig {
        background: data.background,
        ..Default::default()
    };
    let expanded = render_expanded(&set, &new_poses, intrinsics, &raster);
    let exp_dir = dir.join("expanded");
    fs::create_dir_all(&exp_dir)?;
    let mut records = Vec::new();
    for (i, view) in expanded.iter().enumerate() {
        let name = format!("view_{i:03}");
        let img = view.image.as_ref().unwrap();
        img.save_png(&exp_dir.join(format!("{name}.png")))?;
        img.save_pfm(&exp_dir.join(format!("{name}.pfm")))?;
        records.push(CameraRecord::from_camera(
            &view.camera,
            Some(format!("expanded/{name}.png")),
            true,
        ));
    }
    fs::write(dir.join("expanded_cameras.json"), cameras_to_json(&records)?)?;
    Ok((set, expanded))
}

/// Mesh step: upsample the grid to the fine resolution and refine on real
/// plus expanded views (expanded views weighted by `expanded_weight`), then
/// extract and clean the refined mesh.
pub fn run_mesh_step(
    cfg: &PipelineConfig,
    data: &Dataset,
    state: &CycleState,
    expanded: &[CameraView],
    out: &Path,
    cycle: usize,
) -> Result<CycleState> {
    let res = cfg.fine.resolution;
    let grid = if state.grid.resolution() == [res, res, res] {
        state.grid.clone()
    } else {
        state.grid.upsample([res, res, res])?
    };
    let mut views: Vec<CameraView> = data.views.clone();
    let mut weights = vec![1.0; views.len()];
    for view in expanded {
        views.push(view.clone());
        weights.push(cfg.expanded_weight);
    }
    let mut schedule = sdf_schedule(
        &cfg.fine,
        data,
        crate::seeds::derive_indexed(cfg.seed, "fine", cycle as u64),
        Some(weights),
    );
    schedule.s_init = Some(state.sharpness);
    let (grid, history, sharpness) = train_sdf(&grid, &views, &schedule)?;
    let mesh = extract_and_clean(&grid, cfg.mesh_keep_fraction);
    let dir = cycle_dir(out, cycle);
    fs::create_dir_all(&dir)?;
    grid.save(&dir.join("fine_grid.sdfg"))?;
    crate::ply::write_mesh(&mesh, &dir.join("fine_mesh.ply"))?;
    crate::ply::write_mesh_obj(&mesh, &dir.join("fine_mesh.obj"))?;
    fs::write(dir.join("fine_loss.csv"), history_to_csv(&history))?;
    Ok(CycleState {
        grid,
        mesh,
        sharpness,
    })
}

/// Per-cycle evaluation summary stored in the consolidated report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycle: usize,
    pub report: ReconReport,
}

/// Evaluate persisted artifacts (mesh + optional splats) against the
/// dataset's ground truth and test split.
pub fn evaluate_artifacts(
    cfg: &PipelineConfig,
    data: &Dataset,
    mesh_path: &Path,
    splats_path: Option<&Path>,
) -> Result<ReconReport> {
    let mesh = crate::ply::read_mesh(mesh_path)?;
    let gt = data.gt_points.as_ref().ok_or_else(|| {
        Error::ingestion(
            mesh_path.parent().unwrap_or(Path::new(".")),
            "evaluation requires gt_points.ply in the dataset",
        )
    })?;
    let mesh_eval = evaluate_mesh(
        &mesh,
        gt,
        &cfg.eval.thresholds,
        cfg.eval.surface_samples,
        crate::seeds::derive(cfg.seed, "eval-samples"),
    )?;

    let (mut psnr_full, mut psnr_fg) = (None, None);
    if let Some(splats_path) = splats_path {
        if !data.test_views.is_empty() {
            let gaussians = crate::ply::read_gaussians(splats_path)?;
            let set = GaussianSet::new(gaussians);
            let raster = RasterConfig {
                background: data.background,
                ..Default::default()
            };
            let mut full_acc = 0.0;
            let mut fg_acc = 0.0;
            let mut fg_count = 0usize;
            for view in &data.test_views {
                let target = view.image.as_ref().unwrap();
                let (render, _) = rasterize(&set, &view.camera, &raster);
                full_acc += psnr(&render, target, None)?;
                if let Some(mask) = &view.mask {
                    fg_acc += psnr(&render, target, Some(mask))?;
                    fg_count += 1;
                }
            }
            psnr_full = Some(full_acc / data.test_views.len() as f64);
            if fg_count > 0 {
                psnr_fg = Some(fg_acc / fg_count as f64);
            }
        }
    }
    let config_echo = serde_json::json!({
        "mesh": mesh_path.display().to_string(),
        "splats": splats_path.map(|p| p.display().to_string()),
        "thresholds": cfg.eval.thresholds,
        "surface_samples": cfg.eval.surface_samples,
        "seed": cfg.seed,
        "test_views": data.test_views.len(),
    });
    Ok(ReconReport {
        chamfer: mesh_eval.chamfer,
        thresholds: mesh_eval
            .thresholds
            .into_iter()
            .map(|t| ThresholdScores { ..t })
            .collect(),
        psnr: psnr_full,
        psnr_f: psnr_fg,
        config: config_echo,
    })
}

/// Full pipeline: coarse once, then `cycles` render/mesh rounds, each
/// evaluated from its persisted artifacts. Returns one report per cycle.
pub fn run_cycles(cfg: &PipelineConfig, data: &Dataset, out: &Path) -> Result<Vec<CycleReport>> {
    cfg.validate()?;
    let mut state = run_coarse(cfg, data, out)?;
    let mut reports = Vec::with_capacity(cfg.cycles);
    for cycle in 1..=cfg.cycles {
        let (_, expanded) = run_render_step(cfg, data, &state.mesh, out, cycle)?;
        state = run_mesh_step(cfg, data, &state, &expanded, out, cycle)?;
        let dir = cycle_dir(out, cycle);
        let report = evaluate_artifacts(
            cfg,
            data,
            &dir.join("fine_mesh.ply"),
            Some(&dir.join("splats.ply")),
        )?;
        fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
        reports.push(CycleReport { cycle, report });
    }
    fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&reports)?,
    )?;
    Ok(reports)
}

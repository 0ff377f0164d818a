//! Pipeline configuration: desk- and paper-scale presets plus TOML/JSON
//! overrides merged field-by-field on top of the chosen preset.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poses::PoseExpansionConfig;
use crate::volume::LossWeights;

/// One SDF training stage (coarse or fine).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SdfStageConfig {
    /// Cubic grid resolution.
    pub resolution: usize,
    pub iterations: usize,
    pub ray_batch: usize,
    pub n_samples: usize,
    pub lr_sdf: f64,
    pub lr_color: f64,
    pub lr_log_s: f64,
    pub weights: LossWeights,
}

impl SdfStageConfig {
    pub fn desk_coarse() -> Self {
        Self {
            resolution: 64,
            iterations: 2000,
            ray_batch: 512,
            n_samples: 64,
            lr_sdf: 1.0,
            lr_color: 30.0,
            lr_log_s: 0.3,
            weights: LossWeights::default(),
        }
    }

    pub fn desk_fine() -> Self {
        Self {
            resolution: 128,
            iterations: 4000,
            ray_batch: 512,
            n_samples: 96,
            ..Self::desk_coarse()
        }
    }

    pub fn paper_coarse() -> Self {
        Self {
            resolution: 96,
            iterations: 10_000,
            ..Self::desk_coarse()
        }
    }

    pub fn paper_fine() -> Self {
        Self {
            resolution: 256,
            iterations: 20_000,
            n_samples: 128,
            ..Self::desk_coarse()
        }
    }
}

/// Splat trainer settings exposed through the config file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SplatStageConfig {
    pub iterations: usize,
    pub lr_mean: f64,
    pub lr_log_scale: f64,
    pub lr_rot: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub densify_start: usize,
    pub densify_interval: usize,
    pub densify_grad_threshold: f64,
    pub split_scale_fraction: f64,
    pub opacity_reset_fraction: f64,
    pub prune_opacity: f64,
    pub max_gaussians: usize,
    pub init_opacity: f64,
}

impl SplatStageConfig {
    pub fn desk() -> Self {
        Self {
            iterations: 2000,
            ..Self::paper()
        }
    }

    /// Reference schedule: 7k iterations, densify from 500 every 100,
    /// opacity reset at the 3/7 point.
    pub fn paper() -> Self {
        let d = crate::splat::SplatTrainConfig::default();
        Self {
            iterations: 7000,
            lr_mean: d.lr_mean,
            lr_log_scale: d.lr_log_scale,
            lr_rot: d.lr_rot,
            lr_opacity: d.lr_opacity,
            lr_color: d.lr_color,
            densify_start: d.densify_start,
            densify_interval: d.densify_interval,
            densify_grad_threshold: d.densify_grad_threshold,
            split_scale_fraction: d.split_scale_fraction,
            opacity_reset_fraction: d.opacity_reset_fraction,
            prune_opacity: d.prune_opacity,
            max_gaussians: d.max_gaussians,
            init_opacity: d.init_opacity,
        }
    }

    pub fn to_train_config(
        &self,
        seed: u64,
        background: [f64; 3],
    ) -> crate::splat::SplatTrainConfig {
        crate::splat::SplatTrainConfig {
            iterations: self.iterations,
            lr_mean: self.lr_mean,
            lr_log_scale: self.lr_log_scale,
            lr_rot: self.lr_rot,
            lr_opacity: self.lr_opacity,
            lr_color: self.lr_color,
            densify_start: self.densify_start,
            densify_interval: self.densify_interval,
            densify_stop_fraction: 0.9,
            densify_grad_threshold: self.densify_grad_threshold,
            split_scale_fraction: self.split_scale_fraction,
            opacity_reset_fraction: self.opacity_reset_fraction,
            reset_opacity: 0.05,
            prune_opacity: self.prune_opacity,
            max_gaussians: self.max_gaussians,
            init_opacity: self.init_opacity,
            seed,
            raster: crate::splat::RasterConfig {
                background,
                ..Default::default()
            },
        }
    }
}

/// Depth-based sampling budget.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SamplingConfig {
    /// Points drawn per training view.
    pub per_view: usize,
    /// Fused-cloud budget.
    pub total: usize,
}

impl SamplingConfig {
    pub fn desk() -> Self {
        Self {
            per_view: 2000,
            total: 15_000,
        }
    }

    /// 5k per view, 50k fused.
    pub fn paper() -> Self {
        Self {
            per_view: 5000,
            total: 50_000,
        }
    }
}

/// Evaluation protocol knobs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalConfig {
    /// Distance thresholds (world units) for accuracy/recall/F1.
    pub thresholds: Vec<f64>,
    /// Surface samples drawn from the predicted mesh.
    pub surface_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0.025, 0.05],
            surface_samples: 100_000,
        }
    }
}

/// Everything a full run needs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Render/mesh cycle count; one cycle is the standard setting.
    pub cycles: usize,
    pub coarse: SdfStageConfig,
    pub fine: SdfStageConfig,
    /// Photometric weight of splat-rendered expansion views in the fine
    /// stage, relative to real views.
    pub expanded_weight: f64,
    pub splats: SplatStageConfig,
    pub sampling: SamplingConfig,
    pub expansion: PoseExpansionConfig,
    pub eval: EvalConfig,
    /// `Some(p)`: keep all face clusters with at least `p * |largest|`
    /// faces; `None` keeps exactly the largest.
    pub mesh_keep_fraction: Option<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PipelineConfig {
    pub fn desk() -> Self {
        Self {
            seed: 0,
            cycles: 1,
            coarse: SdfStageConfig::desk_coarse(),
            fine: SdfStageConfig::desk_fine(),
            expanded_weight: 0.5,
            splats: SplatStageConfig::desk(),
            sampling: SamplingConfig::desk(),
            expansion: PoseExpansionConfig {
                closed: true,
                ..Default::default()
            },
            eval: EvalConfig::default(),
            mesh_keep_fraction: None,
        }
    }

    pub fn paper() -> Self {
        Self {
            coarse: SdfStageConfig::paper_coarse(),
            fine: SdfStageConfig::paper_fine(),
            splats: SplatStageConfig::paper(),
            sampling: SamplingConfig::paper(),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cycles < 1 {
            return Err(Error::Config("cycle count must be >= 1".into()));
        }
        if self.fine.resolution < self.coarse.resolution {
            return Err(Error::Config(format!(
                "fine resolution {} below coarse resolution {}",
                self.fine.resolution, self.coarse.resolution
            )));
        }
        if self.expanded_weight < 0.0 {
            return Err(Error::Config("expanded_weight must be >= 0".into()));
        }
        let w = &self.coarse.weights;
        for (name, v) in [
            ("tv", w.tv),
            ("smooth", w.smooth),
            ("normal", w.normal),
            ("fine tv", self.fine.weights.tv),
            ("fine smooth", self.fine.weights.smooth),
            ("fine normal", self.fine.weights.normal),
        ] {
            if v < 0.0 {
                return Err(Error::Config(format!("loss weight {name} must be >= 0")));
            }
        }
        if let Some(p) = self.mesh_keep_fraction {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "mesh_keep_fraction {p} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

/// Load a config: start from the preset, then overlay the file's fields
/// (TOML or JSON decided by extension) on top, recursively.
pub fn load_config(path: Option<&Path>, preset: Preset) -> Result<PipelineConfig> {
    let base = match preset {
        Preset::Desk => PipelineConfig::desk(),
        Preset::Paper => PipelineConfig::paper(),
    };
    let Some(path) = path else {
        return Ok(base);
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!(
        "cannot read config {}: {e}",
        path.display()
    )))?;
    let overlay: serde_json::Value = match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => {
            let v: toml::Value = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            serde_json::to_value(v).map_err(|e| Error::Config(e.to_string()))?
        }
        _ => serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
    };
    let mut merged = serde_json::to_value(&base).map_err(|e| Error::Config(e.to_string()))?;
    deep_merge(&mut merged, overlay);
    let cfg: PipelineConfig =
        serde_json::from_value(merged).map_err(|e| Error::Config(format!(
            "{}: {e}",
            path.display()
        )))?;
    cfg.validate()?;
    Ok(cfg)
}

fn deep_merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poses::ExpansionStrategy;

    #[test]
    fn presets_validate() {
        PipelineConfig::desk().validate().unwrap();
        PipelineConfig::paper().validate().unwrap();
        assert_eq!(PipelineConfig::paper().splats.iterations, 7000);
        assert_eq!(PipelineConfig::paper().sampling.total, 50_000);
        assert_eq!(PipelineConfig::desk().cycles, 1);
        assert_eq!(PipelineConfig::desk().expansion.count, 10);
    }

    #[test]
    fn toml_overlay_merges_field_by_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "seed = 7\n[coarse]\niterations = 123\n[expansion]\nstrategy = \"perturbation\"\n",
        )
        .unwrap();
        let cfg = load_config(Some(&path), Preset::Desk).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.coarse.iterations, 123);
        // untouched fields keep preset values
        assert_eq!(cfg.coarse.resolution, 64);
        assert_eq!(cfg.fine.iterations, 4000);
        assert_eq!(cfg.expansion.strategy, ExpansionStrategy::Perturbation);
        assert_eq!(cfg.expansion.count, 10);
    }

    #[test]
    fn json_overlay_and_validation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"fine": {"resolution": 8}}"#).unwrap();
        let err = load_config(Some(&path), Preset::Desk).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");

        std::fs::write(&path, r#"{"cycles": 2}"#).unwrap();
        let cfg = load_config(Some(&path), Preset::Paper).unwrap();
        assert_eq!(cfg.cycles, 2);
        assert_eq!(cfg.coarse.resolution, 96);
    }
}

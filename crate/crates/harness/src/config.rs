//! Run configuration.
//!
//! A config file is TOML. It may name a base `profile` (`"desk"` or
//! `"paper"`, default desk) and override any subset of its fields; unknown
//! keys are rejected.

use std::path::Path;

use coperc_core::detection::{FocalNorm, HeadConfig};
use coperc_core::fusion::FusionConfig;
use coperc_core::geometry::BevGrid;
use coperc_core::partition::GlobalMixing;
use coperc_core::scene::{SceneConfig, SensorConfig, ModalityMix};
use coperc_core::transformer::TransformerConfig;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub h: usize,
    pub w: usize,
    pub resolution: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
    pub mlp_ratio: usize,
    pub iterations: usize,
    pub compression_rate: usize,
    pub global_mixing: GlobalMixing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FovConfig {
    pub camera: f64,
    pub lidar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop a stage once validation loss has not improved for this many
    /// epochs; 0 disables.
    pub early_stop_patience: usize,
    /// Probability that a training sample is reduced to the ego alone.
    pub solo_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub agents_min: usize,
    pub agents_max: usize,
    /// Fraction of LiDAR agents in mixed (V2V-H) graphs.
    pub lidar_fraction: f64,
    pub n_vehicles: usize,
    pub extent_m: f64,
    pub collaborator_min_m: f64,
    pub collaborator_max_m: f64,
    pub comm_range: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub grid: GridConfig,
    pub model: ModelConfig,
    pub fov: FovConfig,
    pub sensors: SensorConfig,
    pub head: HeadConfig,
    pub training: TrainingConfig,
    pub dataset: DatasetConfig,
}

/// Scene indices are offset per split so seeds never collide.
pub const SPLIT_STRIDE: u64 = 1 << 32;

impl Config {
    /// Laptop-scale defaults.
    pub fn desk() -> Self {
        Self {
            grid: GridConfig { h: 32, w: 32, resolution: 1.5625 },
            model: ModelConfig {
                channels: 32,
                heads: 4,
                window: 4,
                mlp_ratio: 2,
                iterations: 2,
                compression_rate: 1,
                global_mixing: GlobalMixing::CrossAgent,
            },
            fov: FovConfig { camera: 20.0, lidar: 35.0 },
            sensors: SensorConfig::default(),
            head: HeadConfig { focal_norm: FocalNorm::Positives, ..HeadConfig::default() },
            training: TrainingConfig {
                lr: 2e-3,
                lr_min: 2e-5,
                weight_decay: 1e-2,
                epochs_stage1: 30,
                epochs_stage2: 10,
                batch_size: 4,
                seed: 7,
                early_stop_patience: 0,
                solo_fraction: 0.2,
            },
            dataset: DatasetConfig {
                seed: 1000,
                train_scenes: 200,
                val_scenes: 40,
                test_scenes: 60,
                agents_min: 2,
                agents_max: 3,
                lidar_fraction: 0.5,
                n_vehicles: 16,
                extent_m: 60.0,
                collaborator_min_m: 10.0,
                collaborator_max_m: 25.0,
                comm_range: 70.0,
            },
        }
    }

    /// Full-scale values: 128×128 cells at 0.4 m, C = 256, window 8.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.grid = GridConfig { h: 128, w: 128, resolution: 0.4 };
        c.model.channels = 256;
        c.model.heads = 8;
        c.model.window = 8;
        c.training.epochs_stage1 = 40;
        c.training.epochs_stage2 = 10;
        c
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            _ => Err(HarnessError::Validation(format!("unknown profile `{name}` (expected desk or paper)"))),
        }
    }

    /// Parse TOML text: the named profile overlaid with the given fields.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut user: toml::Table = text.parse().map_err(|e| HarnessError::Validation(format!("config: {e}")))?;
        let profile = match user.remove("profile") {
            None => "desk".to_string(),
            Some(toml::Value::String(s)) => s,
            Some(v) => return Err(HarnessError::Validation(format!("profile must be a string, got {v}"))),
        };
        let base = toml::Table::try_from(Self::profile(&profile)?).expect("profiles serialize");
        let merged = merge(toml::Value::Table(base), toml::Value::Table(user));
        let cfg: Config = merged.try_into().map_err(|e| HarnessError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn bev_grid(&self) -> Result<BevGrid> {
        Ok(BevGrid::new(self.grid.h, self.grid.w, self.grid.resolution)?)
    }

    pub fn fusion(&self) -> Result<FusionConfig> {
        let m = &self.model;
        Ok(FusionConfig {
            grid: self.bev_grid()?,
            transformer: TransformerConfig {
                channels: m.channels,
                heads: m.heads,
                window: m.window,
                mlp_ratio: m.mlp_ratio,
                global_mixing: m.global_mixing,
            },
            iterations: m.iterations,
            compression_rate: m.compression_rate,
            fov_radius_camera: self.fov.camera,
            fov_radius_lidar: self.fov.lidar,
        })
    }

    /// Scene generator settings for a scene with `n_agents` agents.
    pub fn scene(&self, n_agents: usize) -> SceneConfig {
        let d = &self.dataset;
        SceneConfig {
            extent_m: d.extent_m,
            n_vehicles: d.n_vehicles,
            n_agents,
            mix: ModalityMix { lidar_fraction: d.lidar_fraction, ego: None },
            collaborator_min_m: d.collaborator_min_m,
            collaborator_max_m: d.collaborator_max_m,
            max_retries: SceneConfig::default().max_retries,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Validation(m));
        self.fusion()?.validate()?;
        self.sensors.validate()?;
        let t = &self.training;
        if t.seed > i64::MAX as u64 || self.dataset.seed > i64::MAX as u64 {
            return bad(format!("seeds must be at most {} to fit a TOML integer", i64::MAX));
        }
        if !(t.lr > 0.0 && t.lr_min >= 0.0 && t.lr_min <= t.lr) {
            return bad(format!("learning rates must satisfy 0 <= lr_min <= lr, lr > 0 (got {} / {})", t.lr_min, t.lr));
        }
        if t.weight_decay < 0.0 || t.batch_size == 0 {
            return bad("weight decay must be non-negative and batch size positive".into());
        }
        if !(0.0..=1.0).contains(&t.solo_fraction) {
            return bad(format!("solo fraction {} outside [0, 1]", t.solo_fraction));
        }
        let d = &self.dataset;
        if d.agents_min == 0 || d.agents_min > d.agents_max {
            return bad(format!("agent range {}..={} is empty", d.agents_min, d.agents_max));
        }
        if !(0.0..=1.0).contains(&d.lidar_fraction) {
            return bad(format!("lidar fraction {} outside [0, 1]", d.lidar_fraction));
        }
        for n in [d.train_scenes, d.val_scenes, d.test_scenes] {
            if n as u64 >= SPLIT_STRIDE {
                return bad(format!("{n} scenes exceed the per-split seed range"));
            }
        }
        if !(d.collaborator_min_m > 0.0 && d.collaborator_min_m <= d.collaborator_max_m && d.comm_range > 0.0) {
            return bad("collaborator distances and communication range must be positive and ordered".into());
        }
        if self.fov.camera <= 0.0 || self.fov.lidar <= 0.0 {
            return bad("FoV radii must be positive".into());
        }
        Ok(())
    }
}

fn merge(base: toml::Value, over: toml::Value) -> toml::Value {
    match (base, over) {
        (toml::Value::Table(mut b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let merged = match b.remove(&k) {
                    Some(bv) => merge(bv, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            toml::Value::Table(b)
        }
        (_, o) => o,
    }
}

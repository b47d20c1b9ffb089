//! Scene splits on disk and per-sample tensors.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use coperc_core::bbox::BoxBEV;
use coperc_core::detection::{assign_targets, HeadConfig, Targets};
use coperc_core::geometry::BevGrid;
use coperc_core::scene::{generate_scenario, ground_truth, observe, Scenario, SensorConfig};
use coperc_core::Modality;
use coperc_tensor::Tensor;
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Config, SPLIT_STRIDE};
use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn count(self, cfg: &Config) -> usize {
        match self {
            Split::Train => cfg.dataset.train_scenes,
            Split::Val => cfg.dataset.val_scenes,
            Split::Test => cfg.dataset.test_scenes,
        }
    }
}

/// Modality assignment of a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    /// Every agent carries a camera.
    #[serde(rename = "v2v-c")]
    V2vC,
    /// Every agent carries a LiDAR.
    #[serde(rename = "v2v-l")]
    V2vL,
    /// Modalities as generated from the configured LiDAR fraction.
    #[serde(rename = "v2v-h")]
    V2vH,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::V2vC, Regime::V2vL, Regime::V2vH];

    pub fn name(self) -> &'static str {
        match self {
            Regime::V2vC => "v2v-c",
            Regime::V2vL => "v2v-l",
            Regime::V2vH => "v2v-h",
        }
    }

    pub fn homogeneous(m: Modality) -> Regime {
        match m {
            Modality::Camera => Regime::V2vC,
            Modality::Lidar => Regime::V2vL,
        }
    }

    pub fn apply(self, scene: &Scenario) -> Scenario {
        let mut s = scene.clone();
        let forced = match self {
            Regime::V2vC => Some(Modality::Camera),
            Regime::V2vL => Some(Modality::Lidar),
            Regime::V2vH => None,
        };
        if let Some(m) = forced {
            s.agents.iter_mut().for_each(|a| a.modality = m);
        }
        s
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn scene_seed(base: u64, split: Split, i: usize) -> u64 {
    base.wrapping_add(split.index() * SPLIT_STRIDE + i as u64)
}

/// Deterministic scene `i` of `split`; the agent count is drawn from the
/// configured range with the scene's own seed.
pub fn generate_scene(cfg: &Config, split: Split, i: usize) -> Result<Scenario> {
    let seed = scene_seed(cfg.dataset.seed, split, i);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let n = rng.gen_range(cfg.dataset.agents_min..=cfg.dataset.agents_max);
    Ok(generate_scenario(&cfg.scene(n), seed)?)
}

pub fn generate_split(cfg: &Config, split: Split) -> Result<Vec<Scenario>> {
    (0..split.count(cfg)).map(|i| generate_scene(cfg, split, i)).collect()
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub base_seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

pub fn split_dir(root: &Path, split: Split) -> PathBuf {
    root.join(split.name())
}

fn scene_path(root: &Path, split: Split, i: usize) -> PathBuf {
    split_dir(root, split).join(format!("{i:05}.json"))
}

/// Write all three splits under `root`; returns the per-split counts.
pub fn write_dataset(cfg: &Config, root: &Path) -> Result<Manifest> {
    let mut seen = BTreeSet::new();
    for split in Split::ALL {
        for i in 0..split.count(cfg) {
            if !seen.insert(scene_seed(cfg.dataset.seed, split, i)) {
                return Err(HarnessError::Validation("split seeds overlap".into()));
            }
        }
    }
    for split in Split::ALL {
        let dir = split_dir(root, split);
        std::fs::create_dir_all(&dir)?;
        let scenes = generate_split(cfg, split)?;
        for (i, s) in scenes.iter().enumerate() {
            std::fs::write(scene_path(root, split, i), s.to_json())?;
        }
        info!("{}: {} scenes", split.name(), scenes.len());
    }
    let manifest = Manifest {
        base_seed: cfg.dataset.seed,
        train: cfg.dataset.train_scenes,
        val: cfg.dataset.val_scenes,
        test: cfg.dataset.test_scenes,
    };
    std::fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    Ok(manifest)
}

pub fn read_split(root: &Path, split: Split) -> Result<Vec<Scenario>> {
    let text = std::fs::read_to_string(root.join("manifest.json")).map_err(|e| {
        HarnessError::Validation(format!("no dataset at {} ({e}); run `generate` first", root.display()))
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| HarnessError::Validation(format!("manifest: {e}")))?;
    let n = match split {
        Split::Train => manifest.train,
        Split::Val => manifest.val,
        Split::Test => manifest.test,
    };
    (0..n)
        .map(|i| Ok(Scenario::from_json(&std::fs::read_to_string(scene_path(root, split, i))?)?))
        .collect()
}

/// One ego-centred training/evaluation example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub scene: Scenario,
    /// Agent indices in the graph, ego first.
    pub members: Vec<usize>,
    /// Observation per member, in `members` order.
    pub obs: Vec<Tensor>,
    /// Ground truth in the ego frame.
    pub gt: Vec<BoxBEV>,
    pub targets: Targets,
}

impl Sample {
    pub fn new(scene: Scenario, members: Vec<usize>, grid: &BevGrid, sensors: &SensorConfig, head: &HeadConfig) -> Self {
        let obs = members.iter().map(|&i| observe(&scene, i, grid, sensors)).collect();
        let gt = ground_truth(&scene, &members, grid, sensors);
        let targets = assign_targets(&gt, grid, head);
        Self { scene, members, obs, gt, targets }
    }

    /// The scene viewed by its ego alone.
    pub fn solo(&self, grid: &BevGrid, sensors: &SensorConfig, head: &HeadConfig) -> Self {
        let gt = ground_truth(&self.scene, &self.members[..1], grid, sensors);
        let targets = assign_targets(&gt, grid, head);
        Self { scene: self.scene.clone(), members: self.members[..1].to_vec(), obs: self.obs[..1].to_vec(), gt, targets }
    }

    pub fn ego_modality(&self) -> Modality {
        self.scene.agents[self.members[0]].modality
    }
}

/// Full-graph samples of `scenes` under `regime`.
pub fn samples(cfg: &Config, scenes: &[Scenario], regime: Regime) -> Result<Vec<Sample>> {
    let grid = cfg.bev_grid()?;
    Ok(scenes
        .iter()
        .map(|s| {
            let s = regime.apply(s);
            let members = (0..s.agents.len()).collect();
            Sample::new(s, members, &grid, &cfg.sensors, &cfg.head)
        })
        .collect())
}

//! Encoders, fusion and heads behind one parameter store.

use std::collections::BTreeMap;
use std::path::Path;

use coperc_core::detection::{head_forward, init_head_params, postprocess, Detection, HeadConfig, HeadOutput};
use coperc_core::fusion::{fuse, init_compression_params, init_fusion_params, FuseOutputs, FuseStats, FusionConfig, COMPRESS_PREFIX};
use coperc_core::scene::{encode, init_encoder_params, Scenario, SensorConfig};
use coperc_core::Modality;
use coperc_tensor::{checkpoint, AdamW, AdamWConfig, NormMode, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::data::Sample;
use crate::error::{HarnessError, Result};

#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub fusion: FusionConfig,
    pub head: HeadConfig,
    pub sensors: SensorConfig,
    pub comm_range: f64,
}

/// Checkpoint metadata keys.
pub const META_FUSION: &str = "fusion";
pub const META_STAGE: &str = "stage";
pub const META_MODALITY: &str = "modality";
pub const META_STEP: &str = "step";
pub const META_RATE: &str = "compression_rate";

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn init(cfg: &Config, seed: u64) -> Result<Self> {
        let fusion = cfg.fusion()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_encoder_params(&mut store, fusion.transformer.channels, &mut rng)?;
        init_fusion_params(&mut store, &fusion, &mut rng)?;
        init_head_params(&mut store, fusion.transformer.channels, &mut rng)?;
        Ok(Self::with_store(cfg, store)?)
    }

    pub fn with_store(cfg: &Config, store: ParamStore) -> Result<Self> {
        Ok(Self {
            store,
            fusion: cfg.fusion()?,
            head: cfg.head.clone(),
            sensors: cfg.sensors.clone(),
            comm_range: cfg.dataset.comm_range,
        })
    }

    /// Everything that fixes parameter shapes except the compression rate.
    fn fusion_key(&self) -> String {
        let f = FusionConfig { compression_rate: 1, ..self.fusion.clone() };
        serde_json::to_string(&f).expect("fusion config serializes")
    }

    /// Encode every member, fuse, and return the ego's fused map.
    pub fn ego_map(&self, tape: &mut Tape, sample: &Sample) -> Result<(Var, FuseStats)> {
        self.ego_map_of(tape, &sample.scene, &sample.members, &sample.obs)
    }

    /// [`Model::ego_map`] for `members` (ego first) with their observations.
    pub fn ego_map_of(&self, tape: &mut Tape, scene: &Scenario, members: &[usize], obs: &[Tensor]) -> Result<(Var, FuseStats)> {
        let graph = scene.graph(members, self.comm_range)?;
        let mut feats = Vec::with_capacity(members.len());
        for (k, &i) in members.iter().enumerate() {
            let o = tape.constant(obs[k].clone());
            feats.push(encode(tape, &self.store, o, scene.agents[i].modality)?);
        }
        let (out, stats) = fuse(tape, &self.store, &graph, &feats, &self.fusion, FuseOutputs::EgoOnly)?;
        Ok((out[graph.ego_index()].expect("ego output is always produced"), stats))
    }

    pub fn head(&self, tape: &mut Tape, x: Var, m: Modality, mode: NormMode) -> Result<HeadOutput> {
        Ok(head_forward(tape, &self.store, x, m, mode, &self.head)?)
    }

    /// Post-processed ego detections for one sample (inference mode).
    pub fn predict(&self, sample: &Sample) -> Result<(Vec<Detection>, FuseStats)> {
        self.predict_of(&sample.scene, &sample.members, &sample.obs)
    }

    pub fn predict_of(&self, scene: &Scenario, members: &[usize], obs: &[Tensor]) -> Result<(Vec<Detection>, FuseStats)> {
        let mut tape = Tape::new();
        tape.freeze_prefixes([""]);
        let (x, stats) = self.ego_map_of(&mut tape, scene, members, obs)?;
        let h = self.head(&mut tape, x, scene.agents[members[0]].modality, NormMode::Eval)?;
        let dets = postprocess(tape.value(h.cls).data(), tape.value(h.reg).data(), &self.fusion.grid, &self.head);
        Ok((dets, stats))
    }

    pub fn save(&self, path: &Path, optimizer: Option<&AdamW>, mut meta: BTreeMap<String, String>) -> Result<()> {
        let mut store = self.store.clone();
        if let Some(opt) = optimizer {
            opt.export_into(&mut store);
        }
        meta.insert(META_FUSION.into(), self.fusion_key());
        meta.insert(META_RATE.into(), self.fusion.compression_rate.to_string());
        checkpoint::save(path, &store, &meta)?;
        Ok(())
    }

    /// Load a checkpoint written for the same model shape as `cfg`.
    ///
    /// Compression stacks trained for a different rate than `cfg` asks for
    /// are dropped; [`rate_matches`] tells whether that happened.
    pub fn load(cfg: &Config, path: &Path) -> Result<(Self, AdamW, BTreeMap<String, String>)> {
        let (mut store, meta) = checkpoint::load(path).map_err(|e| match e {
            coperc_tensor::TensorError::Io(io) => {
                HarnessError::Validation(format!("cannot read checkpoint {}: {io}", path.display()))
            }
            other => other.into(),
        })?;
        let optimizer = AdamW::import_from(adamw_config(cfg), &mut store);
        if meta.get(META_RATE) != Some(&cfg.model.compression_rate.to_string()) {
            let stale: Vec<String> = store.names().filter(|n| n.starts_with(COMPRESS_PREFIX)).map(str::to_string).collect();
            for n in stale {
                store.remove(&n);
            }
        }
        let model = Self::with_store(cfg, store)?;
        if meta.get(META_FUSION) != Some(&model.fusion_key()) {
            return Err(HarnessError::Validation(format!(
                "checkpoint {} was trained with a different model configuration",
                path.display()
            )));
        }
        Ok((model, optimizer, meta))
    }
}

/// Whether checkpoint metadata was written at the configured compression rate.
pub fn rate_matches(cfg: &Config, meta: &BTreeMap<String, String>) -> bool {
    meta.get(META_RATE) == Some(&cfg.model.compression_rate.to_string())
}

pub fn adamw_config(cfg: &Config) -> AdamWConfig {
    AdamWConfig { weight_decay: cfg.training.weight_decay, ..AdamWConfig::default() }
}

/// Stage-two starting point from the two single-modality models.
///
/// Parameters owned by a modality (or by a same-modality edge) come from
/// that modality's model. Cross-modality edge parameters start as copies of
/// the receiver's same-modality edge, and shared parameters are averaged.
/// Compression stacks absent from both are freshly drawn from `seed`.
pub fn merge_stage_one(cfg: &Config, camera: &Model, lidar: &Model, seed: u64) -> Result<Model> {
    let pick = |m: Modality| if m == Modality::Camera { camera } else { lidar };
    let mut store = ParamStore::new();
    for (name, entry) in camera.store.iter() {
        let owner = entry.owner.as_str();
        let tensor = if let Ok(m) = owner.parse::<Modality>() {
            pick(m).store.tensor(name)?.clone()
        } else if let Some((s, r)) = owner.strip_prefix("edge:").and_then(|e| e.split_once("->")) {
            let (s, r): (Modality, Modality) = (s.parse()?, r.parse()?);
            if s == r {
                pick(r).store.tensor(name)?.clone()
            } else {
                let same = name.replace(&format!("{s}_to_{r}"), &format!("{r}_to_{r}"));
                pick(r).store.tensor(&same)?.clone()
            }
        } else {
            let (a, b) = (camera.store.tensor(name)?, lidar.store.tensor(name)?);
            let data = a.data().iter().zip(b.data()).map(|(x, y)| 0.5 * (x + y)).collect();
            coperc_tensor::Tensor::new(a.shape().to_vec(), data)?
        };
        store.insert(name, owner, tensor, entry.trainable)?;
    }
    let rate = cfg.model.compression_rate;
    if rate > 1 && !store.names().any(|n| n.starts_with(COMPRESS_PREFIX)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_compression_params(&mut store, cfg.model.channels, rate, &mut rng)?;
    }
    Model::with_store(cfg, store)
}

//! Subcommand bodies over a run directory:
//!
//! ```text
//! <run>/dataset/{manifest.json, train/, val/, test/}
//! <run>/checkpoints/stage1_{camera,lidar}.ckpt, stage2_r{rate}.ckpt
//! <run>/logs/*.jsonl
//! <run>/eval/{report.json, table.csv, detections/}
//! <run>/render/*.svg
//! ```

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use coperc_core::detection::{read_detections_csv, Detection};
use coperc_core::fusion::{fuse, share, FuseOutputs, HEADER_BYTES};
use coperc_core::scene::{encode, ground_truth};
use coperc_core::Modality;
use coperc_tensor::{NormMode, Tape};
use log::info;
use serde::Serialize;

use crate::config::Config;
use crate::data::{self, Regime, Split};
use crate::error::{HarnessError, Result};
use crate::eval::{self, MetricsReport};
use crate::model::{self, Model, META_MODALITY, META_STAGE, META_STEP};
use crate::render::{render_svg, AgentMark, PixelMap};
use crate::train::{self, Plateau, Stage, TrainOptions, TrainState};

#[derive(Clone, Debug)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn dataset(&self) -> PathBuf {
        self.0.join("dataset")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.0.join("checkpoints")
    }

    pub fn stage1(&self, m: Modality) -> PathBuf {
        self.checkpoints().join(format!("stage1_{m}.ckpt"))
    }

    pub fn stage2(&self, rate: usize) -> PathBuf {
        self.checkpoints().join(format!("stage2_r{rate}.ckpt"))
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.0.join("logs").join(format!("{name}.jsonl"))
    }

    pub fn eval(&self) -> PathBuf {
        self.0.join("eval")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sweep {
    Ratio,
    Agents,
    Compression,
}

pub fn generate(cfg: &Config, run: &RunDir) -> Result<data::Manifest> {
    data::write_dataset(cfg, &run.dataset())
}

#[derive(Clone, Debug, Default)]
pub struct TrainRequest {
    pub stage: u8,
    /// Stage one only; both modalities when absent.
    pub modality: Option<Modality>,
    /// Continue from the stage's existing checkpoint.
    pub resume: bool,
    pub max_steps: Option<usize>,
}

fn stage_meta(stage: Stage, step: usize) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::from([(META_STAGE.to_string(), stage.number().to_string()), (META_STEP.to_string(), step.to_string())]);
    if let Stage::One(m) = stage {
        meta.insert(META_MODALITY.into(), m.to_string());
    }
    meta
}

fn run_stage(cfg: &Config, run: &RunDir, stage: Stage, init: TrainState, out: &Path, log_name: &str, req: &TrainRequest) -> Result<TrainState> {
    let root = run.dataset();
    let regime = match stage {
        Stage::One(m) => Regime::homogeneous(m),
        Stage::Two => Regime::V2vH,
    };
    let samples = data::samples(cfg, &data::read_split(&root, Split::Train)?, regime)?;
    let val = if cfg.training.early_stop_patience > 0 {
        data::samples(cfg, &data::read_split(&root, Split::Val)?, regime)?
    } else {
        Vec::new()
    };
    let epochs = match stage {
        Stage::One(_) => cfg.training.epochs_stage1,
        Stage::Two => cfg.training.epochs_stage2,
    };
    let log_path = run.log(log_name);
    std::fs::create_dir_all(log_path.parent().expect("log dir"))?;
    let mut log = BufWriter::new(OpenOptions::new().create(true).append(true).open(&log_path)?);
    let mut state = init;
    let mut plateau = Plateau::new(cfg.training.early_stop_patience);
    let mut on_epoch = |_: usize, m: &Model| -> Result<bool> {
        if val.is_empty() {
            return Ok(false);
        }
        let loss = train::eval_loss(m, &val)?;
        info!("validation loss {loss:.5}");
        Ok(plateau.update(loss))
    };
    let opts = TrainOptions { epochs, max_steps: req.max_steps, on_epoch: Some(&mut on_epoch), log: Some(&mut log) };
    train::train_stage(cfg, &mut state, stage, &samples, opts)?;
    std::fs::create_dir_all(run.checkpoints())?;
    state.model.save(out, Some(&state.optimizer), stage_meta(stage, state.step))?;
    info!("wrote {}", out.display());
    Ok(state)
}

fn resume_state(cfg: &Config, path: &Path) -> Result<TrainState> {
    let (model, optimizer, meta) = Model::load(cfg, path)?;
    if !model::rate_matches(cfg, &meta) {
        return Err(HarnessError::Validation(format!("{} was trained at another compression rate", path.display())));
    }
    let step = meta.get(META_STEP).and_then(|s| s.parse().ok()).unwrap_or(0);
    Ok(TrainState { model, optimizer, step })
}

/// Returns the checkpoints written.
pub fn train(cfg: &Config, run: &RunDir, req: &TrainRequest) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    match req.stage {
        1 => {
            let mods = match req.modality {
                Some(m) => vec![m],
                None => Modality::ALL.to_vec(),
            };
            for m in mods {
                let out = run.stage1(m);
                let init = if req.resume {
                    resume_state(cfg, &out)?
                } else {
                    let seed = cfg.training.seed ^ if m == Modality::Camera { 0x11 } else { 0x22 };
                    TrainState::fresh(cfg, Model::init(cfg, seed)?)
                };
                run_stage(cfg, run, Stage::One(m), init, &out, &format!("stage1_{m}"), req)?;
                written.push(out);
            }
        }
        2 => {
            let rate = cfg.model.compression_rate;
            let out = run.stage2(rate);
            let init = if req.resume {
                resume_state(cfg, &out)?
            } else {
                let mut loaded = Vec::new();
                for m in Modality::ALL {
                    let p = run.stage1(m);
                    if !p.exists() {
                        return Err(HarnessError::Validation(format!(
                            "stage 2 needs the stage-1 {m} checkpoint at {}; run `train --stage 1` first",
                            p.display()
                        )));
                    }
                    loaded.push(Model::load(cfg, &p)?.0);
                }
                let merged = model::merge_stage_one(cfg, &loaded[0], &loaded[1], cfg.training.seed ^ 0x33)?;
                TrainState::fresh(cfg, merged)
            };
            run_stage(cfg, run, Stage::Two, init, &out, &format!("stage2_r{rate}"), req)?;
            written.push(out);
        }
        s => return Err(HarnessError::Validation(format!("unknown stage {s} (expected 1 or 2)"))),
    }
    Ok(written)
}

fn load_for_eval(cfg: &Config, path: &Path) -> Result<Model> {
    if !path.exists() {
        return Err(HarnessError::Validation(format!("no checkpoint at {}; train stage 2 at this rate first", path.display())));
    }
    let (model, _, meta) = Model::load(cfg, path)?;
    if !model::rate_matches(cfg, &meta) {
        return Err(HarnessError::Validation(format!(
            "{} does not match compression rate {}",
            path.display(),
            cfg.model.compression_rate
        )));
    }
    Ok(model)
}

/// Evaluate on the test split; writes `report.json`, `table.csv` and the
/// per-method detection files under `<run>/eval`.
pub fn evaluate(cfg: &Config, run: &RunDir, regime: Option<Regime>, sweep: Option<Sweep>, checkpoint: Option<&Path>) -> Result<MetricsReport> {
    let scenes = data::read_split(&run.dataset(), Split::Test)?;
    let rate = cfg.model.compression_rate;
    let ckpt = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| run.stage2(rate));
    let model = load_for_eval(cfg, &ckpt)?;
    let grid = cfg.bev_grid()?;
    let dir = run.eval();
    let mut report = MetricsReport {
        compression_rate: rate,
        payload_bytes: coperc_core::fusion::payload_bytes(&grid, cfg.model.channels, rate),
        header_bytes: HEADER_BYTES,
        ..Default::default()
    };
    let regimes = match regime {
        Some(r) => vec![r],
        None => Regime::ALL.to_vec(),
    };
    for r in regimes {
        report.regimes.push(eval::regime_report(&model, cfg, &scenes, r, Some(&dir.join("detections")))?);
    }
    report.sweep = match sweep {
        None => Vec::new(),
        Some(Sweep::Ratio) => eval::ratio_sweep(&model, cfg, &scenes)?,
        Some(Sweep::Agents) => eval::agent_sweep(&model, cfg, &scenes)?,
        Some(Sweep::Compression) => {
            let mut models = Vec::new();
            for r in eval::RATES {
                let mut c = cfg.clone();
                c.model.compression_rate = r;
                models.push((r, load_for_eval(&c, &run.stage2(r))?));
            }
            eval::compression_sweep(&models, cfg, &scenes)?
        }
    };
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("report.json"), report.to_json())?;
    std::fs::write(dir.join("table.csv"), report.to_csv()?)?;
    Ok(report)
}

/// Render test scene `index` under `regime`, with detections for that scene
/// read from `detections` (a CSV as exported by `evaluate`) when given.
pub fn render(cfg: &Config, run: &RunDir, index: usize, regime: Regime, detections: Option<&Path>) -> Result<PathBuf> {
    let scenes = data::read_split(&run.dataset(), Split::Test)?;
    let scene = regime.apply(
        scenes.get(index).ok_or_else(|| HarnessError::Validation(format!("test split has no scene {index}")))?,
    );
    let grid = cfg.bev_grid()?;
    let members: Vec<usize> = (0..scene.agents.len()).collect();
    let gts = ground_truth(&scene, &members, &grid, &cfg.sensors);
    let dets: Vec<Detection> = match detections {
        Some(p) => read_detections_csv(File::open(p)?, scenes.len())?.swap_remove(index),
        None => Vec::new(),
    };
    let ego = scene.ego().pose;
    let agents: Vec<AgentMark> = scene
        .agents
        .iter()
        .map(|a| {
            let (x, y) = ego.to_local(a.pose.x, a.pose.y);
            let pose = coperc_core::geometry::Pose2::new(x, y, a.pose.yaw - ego.yaw);
            let fov_radius = match a.modality {
                Modality::Camera => cfg.fov.camera,
                Modality::Lidar => cfg.fov.lidar,
            };
            AgentMark { pose, modality: a.modality, fov_radius }
        })
        .collect();
    let svg = render_svg(&PixelMap::for_grid(&grid, 12.0), &agents, &dets, &gts);
    let dir = run.0.join("render");
    std::fs::create_dir_all(&dir)?;
    let out = dir.join(format!("{}_{index:05}.svg", regime.name()));
    std::fs::write(&out, svg)?;
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct FuseOnceReport {
    pub scene_seed: u64,
    pub agents: Vec<(u32, Modality)>,
    pub local_blocks: usize,
    pub global_blocks: usize,
    pub empty_queries: usize,
    /// Wire size of each agent's broadcast message.
    pub message_bytes: BTreeMap<u32, usize>,
    pub detections: usize,
    pub ego_feature_rms: f64,
}

/// One fusion pass over a freshly generated scene: encode, broadcast,
/// fuse every agent, and detect for the ego.
pub fn fuse_once(cfg: &Config, seed: u64, checkpoint: Option<&Path>) -> Result<FuseOnceReport> {
    let model = match checkpoint {
        Some(p) => load_for_eval(cfg, p)?,
        None => Model::init(cfg, cfg.training.seed)?,
    };
    let mut rng_cfg = cfg.clone();
    rng_cfg.dataset.seed = seed;
    let scene = data::generate_scene(&rng_cfg, Split::Test, 0)?;
    let grid = cfg.bev_grid()?;
    let members: Vec<usize> = (0..scene.agents.len()).collect();
    let sample = data::Sample::new(scene.clone(), members.clone(), &grid, &cfg.sensors, &cfg.head);
    let graph = scene.graph(&members, cfg.dataset.comm_range)?;
    let mut tape = Tape::new();
    tape.freeze_prefixes([""]);
    let mut feats = Vec::new();
    for (k, a) in scene.agents.iter().enumerate() {
        let o = tape.constant(sample.obs[k].clone());
        feats.push(encode(&mut tape, &model.store, o, a.modality)?);
    }
    let rate = cfg.model.compression_rate;
    let mut message_bytes = BTreeMap::new();
    for (k, a) in scene.agents.iter().enumerate() {
        if let Some(to) = graph.neighbors(k).into_iter().find(|&j| j != k) {
            let z = coperc_core::fusion::compress(&mut tape, &model.store, feats[k], a.modality, rate)?;
            let msg = share(&graph, a.id, graph.agents[to].id, tape.value(z), rate)?;
            message_bytes.insert(a.id, msg.to_bytes().len());
        }
    }
    let (out, stats) = fuse(&mut tape, &model.store, &graph, &feats, &model.fusion, FuseOutputs::All)?;
    let ego = out[graph.ego_index()].expect("ego output");
    let v = tape.value(ego).data();
    let ego_feature_rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    let h = model.head(&mut tape, ego, scene.ego().modality, NormMode::Eval)?;
    let dets = coperc_core::detection::postprocess(tape.value(h.cls).data(), tape.value(h.reg).data(), &grid, &cfg.head);
    Ok(FuseOnceReport {
        scene_seed: scene.seed,
        agents: scene.agents.iter().map(|a| (a.id, a.modality)).collect(),
        local_blocks: stats.local_blocks,
        global_blocks: stats.global_blocks,
        empty_queries: stats.empty_queries,
        message_bytes,
        detections: dets.len(),
        ego_feature_rms,
    })
}

//! Two-stage training.
//!
//! Stage one trains encoder, fusion and head on graphs where every agent
//! shares one modality. Stage two starts from both stage-one models,
//! freezes the encoders and fine-tunes the rest on mixed graphs.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use coperc_core::detection::{commit_running_stats, detection_loss};
use coperc_core::scene::ENCODER_PREFIX;
use coperc_core::Modality;
use coperc_tensor::{cosine_lr, AdamW, NormMode, Tape, Var};
use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::Sample;
use crate::error::{HarnessError, Result};
use crate::model::{adamw_config, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Single-modality pre-training.
    One(Modality),
    /// Mixed-graph fine-tuning with frozen encoders.
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One(_) => 1,
            Stage::Two => 2,
        }
    }

    fn tag(self) -> u64 {
        match self {
            Stage::One(Modality::Camera) => 1,
            Stage::One(Modality::Lidar) => 2,
            Stage::Two => 3,
        }
    }
}

/// One line of the step log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss_cls: f64,
    pub loss_reg: f64,
    pub wall_ms: u64,
}

pub struct TrainOptions<'a> {
    pub epochs: usize,
    /// Stop after this many total steps (the schedule still spans `epochs`).
    pub max_steps: Option<usize>,
    /// Called after every epoch with (epoch, model); returning true stops.
    pub on_epoch: Option<&'a mut dyn FnMut(usize, &Model) -> Result<bool>>,
    pub log: Option<&'a mut dyn Write>,
}

impl<'a> TrainOptions<'a> {
    pub fn epochs(epochs: usize) -> Self {
        Self { epochs, max_steps: None, on_epoch: None, log: None }
    }
}

pub struct TrainState {
    pub model: Model,
    pub optimizer: AdamW,
    /// Steps completed so far.
    pub step: usize,
}

impl TrainState {
    pub fn fresh(cfg: &Config, model: Model) -> Self {
        Self { model, optimizer: AdamW::new(adamw_config(cfg)), step: 0 }
    }
}

/// Solo/full choice and visiting order of `n` samples in `epoch`.
fn epoch_plan(cfg: &Config, stage: Stage, epoch: usize, n: usize) -> (Vec<usize>, Vec<bool>) {
    let seed = cfg.training.seed.wrapping_mul(0x100_0000).wrapping_add(stage.tag() * 0x1_0000 + epoch as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let solo = (0..n).map(|_| rng.gen::<f64>() < cfg.training.solo_fraction).collect();
    (order, solo)
}

/// Batch loss: ego maps are grouped by ego modality, each group goes through
/// its head in one batch, and group losses are weighted by group size.
pub fn batch_loss(model: &Model, tape: &mut Tape, batch: &[&Sample], mode: NormMode) -> Result<(Var, f64, f64, Vec<(String, coperc_tensor::BatchNormStats)>)> {
    let grid = &model.fusion.grid;
    let c = model.fusion.transformer.channels;
    let mut maps: BTreeMap<Modality, (Vec<Var>, Vec<coperc_core::detection::Targets>)> = BTreeMap::new();
    for s in batch {
        let (x, _) = model.ego_map(tape, s)?;
        let e = maps.entry(s.ego_modality()).or_default();
        e.0.push(x);
        e.1.push(s.targets.clone());
    }
    let (mut total, mut cls, mut reg) = (None, 0.0, 0.0);
    let mut running = Vec::new();
    for (m, (xs, targets)) in maps {
        let stacked = if xs.len() == 1 { xs[0] } else { tape.concat(&xs)? };
        let x = tape.reshape(stacked, [xs.len(), grid.h, grid.w, c])?;
        let h = model.head(tape, x, m, mode)?;
        running.extend(h.running);
        let l = detection_loss(tape, h.cls, h.reg, &targets, &model.head)?;
        let w = xs.len() as f64 / batch.len() as f64;
        let part = tape.scale(l.total, w)?;
        total = Some(match total {
            None => part,
            Some(t) => tape.add(t, part)?,
        });
        cls += w * l.cls;
        reg += w * l.reg;
    }
    Ok((total.expect("non-empty batch"), cls, reg, running))
}

/// Mean inference-mode loss over `samples`.
pub fn eval_loss(model: &Model, samples: &[Sample]) -> Result<f64> {
    let mut sum = 0.0;
    for s in samples {
        let mut tape = Tape::new();
        tape.freeze_prefixes([""]);
        let (l, ..) = batch_loss(model, &mut tape, &[s], NormMode::Eval)?;
        sum += tape.value(l).data()[0];
    }
    Ok(sum / samples.len().max(1) as f64)
}

/// Run (or continue) a stage over full-graph `samples`.
pub fn train_stage(cfg: &Config, state: &mut TrainState, stage: Stage, samples: &[Sample], mut opts: TrainOptions<'_>) -> Result<Vec<StepLog>> {
    if samples.is_empty() {
        return Err(HarnessError::Validation("no training samples".into()));
    }
    if let Stage::One(m) = stage {
        if let Some(s) = samples.iter().find(|s| s.members.iter().any(|&i| s.scene.agents[i].modality != m)) {
            return Err(HarnessError::Validation(format!("stage 1 ({m}) got a mixed graph (scene seed {})", s.scene.seed)));
        }
    }
    let grid = cfg.bev_grid()?;
    let solos: Vec<Sample> = samples.iter().map(|s| s.solo(&grid, &cfg.sensors, &cfg.head)).collect();
    let bsz = cfg.training.batch_size;
    let per_epoch = samples.len().div_ceil(bsz);
    let total = per_epoch * opts.epochs;
    let stop_at = opts.max_steps.unwrap_or(total).min(total);
    let t = &cfg.training;
    let mut logs = Vec::new();
    while state.step < stop_at {
        let epoch = state.step / per_epoch;
        let (order, solo) = epoch_plan(cfg, stage, epoch, samples.len());
        let b = state.step % per_epoch;
        let batch: Vec<&Sample> = order[b * bsz..((b + 1) * bsz).min(order.len())]
            .iter()
            .map(|&i| if solo[i] { &solos[i] } else { &samples[i] })
            .collect();
        let started = Instant::now();
        let lr = cosine_lr(state.step, total, t.lr, t.lr_min);
        let mut tape = Tape::new();
        if stage == Stage::Two {
            tape.freeze_prefixes([format!("{ENCODER_PREFIX}.")]);
        }
        let (loss, loss_cls, loss_reg, running) = batch_loss(&state.model, &mut tape, &batch, NormMode::Train)?;
        let grads = tape.backward(loss)?;
        let grads = tape.param_grads(&grads);
        state.optimizer.step(&mut state.model.store, &grads, lr, |_| true)?;
        commit_running_stats(&mut state.model.store, &running)?;
        state.step += 1;
        let entry = StepLog { step: state.step, lr, loss_cls, loss_reg, wall_ms: started.elapsed().as_millis() as u64 };
        if let Some(w) = opts.log.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&entry).expect("log entry serializes"))?;
        }
        logs.push(entry);
        if state.step % per_epoch == 0 {
            let epoch = state.step / per_epoch;
            info!("stage {} epoch {epoch}: loss {:.4}", stage.number(), loss_cls + cfg.head.reg_weight * loss_reg);
            if let Some(f) = opts.on_epoch.as_mut() {
                if f(epoch, &state.model)? {
                    break;
                }
            }
        }
    }
    Ok(logs)
}

/// Early-stopping monitor on validation loss.
pub struct Plateau {
    patience: usize,
    best: f64,
    since: usize,
}

impl Plateau {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, since: 0 }
    }

    /// Record one epoch's loss; true once `patience` epochs passed without
    /// improvement.
    pub fn update(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.since = 0;
        } else {
            self.since += 1;
        }
        self.patience > 0 && self.since >= self.patience
    }
}

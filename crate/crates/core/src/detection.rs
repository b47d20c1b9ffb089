//! Typed detection head, per-cell target assignment, losses, decoding, NMS,
//! average precision and the late/no-fusion baselines.
//!
//! Regression channels per cell: `(Δx/res, Δy/res, ln(w/w₀), ln(l/l₀),
//! sin 2θ, cos 2θ)` relative to the cell center and the size prior
//! `w₀ × l₀`.

use std::io::{Read, Write};
use std::sync::Arc;

use coperc_tensor::{BatchNormStats, NormMode, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::{rotated_iou, BoxBEV};
use crate::error::{CoreError, Result};
use crate::geometry::{BevGrid, Pose2};
use crate::modality::Modality;

pub const HEAD_PREFIX: &str = "head";
pub const REG_CHANNELS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FocalNorm {
    /// Mean over all cells.
    Cells,
    /// Sum divided by the number of positive cells (at least one).
    Positives,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub anchor_w: f64,
    pub anchor_l: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub focal_norm: FocalNorm,
    pub reg_weight: f64,
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            anchor_w: 2.0,
            anchor_l: 4.5,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            focal_norm: FocalNorm::Cells,
            reg_weight: 2.0,
            score_thresh: 0.1,
            nms_iou: 0.15,
            max_detections: 100,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoxBEV,
    pub score: f64,
}

fn hp(m: Modality, site: &str) -> String {
    format!("{HEAD_PREFIX}.{m}.{site}")
}

/// Two 3×3 conv + BN + ReLU stages and 1×1 classification / regression
/// convolutions, per ego modality. The classification bias starts at the
/// log-odds of a 1% prior.
pub fn init_head_params(store: &mut ParamStore, c: usize, rng: &mut impl Rng) -> Result<()> {
    for m in Modality::ALL {
        let o = m.name();
        for (conv, bn) in [("conv1", "bn1"), ("conv2", "bn2")] {
            let std = (2.0 / (9.0 * c as f64)).sqrt();
            store.insert(hp(m, &format!("{conv}.w")), o, Tensor::randn([3, 3, c, c], std, rng), true)?;
            store.insert(hp(m, &format!("{conv}.b")), o, Tensor::zeros([c]), true)?;
            store.insert(hp(m, &format!("{bn}.gamma")), o, Tensor::full([c], 1.0), true)?;
            store.insert(hp(m, &format!("{bn}.beta")), o, Tensor::zeros([c]), true)?;
            store.insert(hp(m, &format!("{bn}.running_mean")), o, Tensor::zeros([c]), false)?;
            store.insert(hp(m, &format!("{bn}.running_var")), o, Tensor::full([c], 1.0), false)?;
        }
        let std = 0.01;
        store.insert(hp(m, "cls.w"), o, Tensor::randn([1, 1, c, 1], std, rng), true)?;
        store.insert(hp(m, "cls.b"), o, Tensor::full([1], -(99.0f64).ln()), true)?;
        store.insert(hp(m, "reg.w"), o, Tensor::randn([1, 1, c, REG_CHANNELS], std, rng), true)?;
        store.insert(hp(m, "reg.b"), o, Tensor::zeros([REG_CHANNELS]), true)?;
    }
    Ok(())
}

pub struct HeadOutput {
    /// `[.., H, W, 1]` logits.
    pub cls: Var,
    /// `[.., H, W, 6]`.
    pub reg: Var,
    /// Updated running statistics (train mode only), keyed by BN site prefix.
    pub running: Vec<(String, BatchNormStats)>,
}

/// Head over a batch `[B, H, W, C]` (or a single `[H, W, C]` map) of ego
/// maps sharing one modality.
pub fn head_forward(tape: &mut Tape, store: &ParamStore, x: Var, m: Modality, mode: NormMode, cfg: &HeadConfig) -> Result<HeadOutput> {
    let mut h = x;
    let mut running = Vec::new();
    for (conv, bn) in [("conv1", "bn1"), ("conv2", "bn2")] {
        let w = tape.param(store, &hp(m, &format!("{conv}.w")))?;
        let b = tape.param(store, &hp(m, &format!("{conv}.b")))?;
        h = tape.conv2d(h, w, Some(b))?;
        let site = hp(m, bn);
        let stats = BatchNormStats {
            mean: store.tensor(&format!("{site}.running_mean"))?.data().to_vec(),
            var: store.tensor(&format!("{site}.running_var"))?.data().to_vec(),
        };
        let g = tape.param(store, &format!("{site}.gamma"))?;
        let be = tape.param(store, &format!("{site}.beta"))?;
        let (y, upd) = tape.batch_norm(h, g, be, &stats, mode, cfg.bn_momentum, cfg.bn_eps)?;
        if let Some(u) = upd {
            running.push((site, u));
        }
        h = tape.relu(y)?;
    }
    let conv1x1 = |tape: &mut Tape, site: &str| -> Result<Var> {
        let w = tape.param(store, &hp(m, &format!("{site}.w")))?;
        let b = tape.param(store, &hp(m, &format!("{site}.b")))?;
        Ok(tape.conv2d(h, w, Some(b))?)
    };
    let cls = conv1x1(tape, "cls")?;
    let reg = conv1x1(tape, "reg")?;
    Ok(HeadOutput { cls, reg, running })
}

/// Store updated running statistics returned by a train-mode forward.
pub fn commit_running_stats(store: &mut ParamStore, running: &[(String, BatchNormStats)]) -> Result<()> {
    for (site, s) in running {
        let c = s.mean.len();
        store.assign(&format!("{site}.running_mean"), Tensor::new([c], s.mean.clone())?)?;
        store.assign(&format!("{site}.running_var"), Tensor::new([c], s.var.clone())?)?;
    }
    Ok(())
}

pub fn encode_box(b: &BoxBEV, center: (f64, f64), res: f64, cfg: &HeadConfig) -> [f64; REG_CHANNELS] {
    let b = b.canonical();
    [
        (b.cx - center.0) / res,
        (b.cy - center.1) / res,
        (b.w / cfg.anchor_w).ln(),
        (b.l / cfg.anchor_l).ln(),
        (2.0 * b.yaw).sin(),
        (2.0 * b.yaw).cos(),
    ]
}

pub fn decode_box(reg: &[f64], center: (f64, f64), res: f64, cfg: &HeadConfig) -> BoxBEV {
    let yaw = 0.5 * reg[4].atan2(reg[5]);
    BoxBEV::new(
        center.0 + reg[0] * res,
        center.1 + reg[1] * res,
        cfg.anchor_w * reg[2].clamp(-5.0, 5.0).exp(),
        cfg.anchor_l * reg[3].clamp(-5.0, 5.0).exp(),
        yaw,
    )
}

/// Per-cell training targets for one map.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    /// 1 at positive cells, `H·W`.
    pub cls: Vec<f64>,
    /// `H·W·6`, zero at negative cells.
    pub reg: Vec<f64>,
    pub pos: Vec<bool>,
    /// Box index owning each positive cell.
    pub owner: Vec<Option<usize>>,
}

impl Targets {
    pub fn positives(&self) -> usize {
        self.pos.iter().filter(|p| **p).count()
    }

    pub fn reg_mask(&self) -> Vec<bool> {
        self.pos.iter().flat_map(|&p| [p; REG_CHANNELS]).collect()
    }
}

/// Cells whose centers fall inside a box are positive for the box with the
/// nearest center. A box covering no cell center claims the cell containing
/// its center when that cell is still free.
pub fn assign_targets(boxes: &[BoxBEV], grid: &BevGrid, cfg: &HeadConfig) -> Targets {
    let n = grid.cells();
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut claimed = vec![false; boxes.len()];
    for r in 0..grid.h {
        for c in 0..grid.w {
            let (x, y) = grid.cell_center(r, c);
            let mut best: Option<(f64, usize)> = None;
            for (k, b) in boxes.iter().enumerate() {
                if b.contains(x, y) {
                    let d = (b.cx - x).hypot(b.cy - y);
                    if best.map_or(true, |(bd, _)| d < bd) {
                        best = Some((d, k));
                    }
                }
            }
            if let Some((_, k)) = best {
                owner[r * grid.w + c] = Some(k);
                claimed[k] = true;
            }
        }
    }
    for (k, b) in boxes.iter().enumerate() {
        if !claimed[k] {
            if let Some((r, c)) = grid.cell_of(b.cx, b.cy) {
                if owner[r * grid.w + c].is_none() {
                    owner[r * grid.w + c] = Some(k);
                }
            }
        }
    }
    let mut t = Targets { cls: vec![0.0; n], reg: vec![0.0; n * REG_CHANNELS], pos: vec![false; n], owner };
    for r in 0..grid.h {
        for c in 0..grid.w {
            let i = r * grid.w + c;
            if let Some(k) = t.owner[i] {
                t.cls[i] = 1.0;
                t.pos[i] = true;
                let e = encode_box(&boxes[k], grid.cell_center(r, c), grid.resolution, cfg);
                t.reg[i * REG_CHANNELS..(i + 1) * REG_CHANNELS].copy_from_slice(&e);
            }
        }
    }
    t
}

pub struct LossParts {
    pub total: Var,
    pub cls: f64,
    pub reg: f64,
}

/// `focal + reg_weight · smooth_l1` over a batch whose per-map targets are
/// concatenated in `targets` order.
pub fn detection_loss(tape: &mut Tape, cls: Var, reg: Var, targets: &[Targets], cfg: &HeadConfig) -> Result<LossParts> {
    let cls_t: Vec<f64> = targets.iter().flat_map(|t| t.cls.iter().copied()).collect();
    let reg_t: Vec<f64> = targets.iter().flat_map(|t| t.reg.iter().copied()).collect();
    let mask: Vec<bool> = targets.iter().flat_map(|t| t.reg_mask()).collect();
    let norm = match cfg.focal_norm {
        FocalNorm::Cells => cls_t.len() as f64,
        FocalNorm::Positives => targets.iter().map(Targets::positives).sum::<usize>().max(1) as f64,
    };
    let focal = tape.focal_loss(cls, Arc::new(cls_t), cfg.focal_alpha, cfg.focal_gamma, norm)?;
    let sl1 = tape.smooth_l1(reg, Arc::new(reg_t), Arc::new(mask))?;
    let (fv, rv) = (tape.value(focal).data()[0], tape.value(sl1).data()[0]);
    let weighted = tape.scale(sl1, cfg.reg_weight)?;
    let total = tape.add(focal, weighted)?;
    Ok(LossParts { total, cls: fv, reg: rv })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cells scoring at least `score_thresh`, decoded and sorted by score
/// (descending; ties by cell index).
pub fn decode(cls: &[f64], reg: &[f64], grid: &BevGrid, score_thresh: f64, cfg: &HeadConfig) -> Vec<Detection> {
    let mut out = Vec::new();
    for r in 0..grid.h {
        for c in 0..grid.w {
            let i = r * grid.w + c;
            let score = sigmoid(cls[i]);
            if score >= score_thresh {
                let bbox = decode_box(&reg[i * REG_CHANNELS..(i + 1) * REG_CHANNELS], grid.cell_center(r, c), grid.resolution, cfg);
                out.push(Detection { bbox, score });
            }
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

/// Greedy suppression of boxes overlapping a higher-scoring kept box with
/// IoU ≥ `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Detection> = Vec::new();
    for d in sorted {
        if keep.iter().all(|k| rotated_iou(&k.bbox, &d.bbox) < iou_thresh) {
            keep.push(d);
        }
    }
    keep
}

/// Decode, suppress and cap one map's predictions.
pub fn postprocess(cls: &[f64], reg: &[f64], grid: &BevGrid, cfg: &HeadConfig) -> Vec<Detection> {
    let mut d = nms(&decode(cls, reg, grid, cfg.score_thresh, cfg), cfg.nms_iou);
    d.truncate(cfg.max_detections);
    d
}

/// All-point interpolated AP with detections pooled over scenes and matched
/// greedily (highest score first) to the unmatched ground truth of highest
/// IoU in the same scene.
pub fn average_precision(dets: &[Vec<Detection>], gts: &[Vec<BoxBEV>], iou_thresh: f64) -> f64 {
    assert_eq!(dets.len(), gts.len(), "detections and ground truth cover different scenes");
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    let mut pooled: Vec<(usize, &Detection)> = dets.iter().enumerate().flat_map(|(s, d)| d.iter().map(move |x| (s, x))).collect();
    if n_gt == 0 {
        return if pooled.is_empty() { 1.0 } else { 0.0 };
    }
    pooled.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(pooled.len());
    for (s, d) in pooled {
        let mut best: Option<(f64, usize)> = None;
        for (k, g) in gts[s].iter().enumerate() {
            if matched[s][k] {
                continue;
            }
            let iou = rotated_iou(&d.bbox, g);
            if iou >= iou_thresh && best.map_or(true, |(b, _)| iou > b) {
                best = Some((iou, k));
            }
        }
        match best {
            Some((_, k)) => {
                matched[s][k] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    let (mut recall, mut precision) = (Vec::with_capacity(tp.len()), Vec::with_capacity(tp.len()));
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / n_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Ego detections pass through unchanged.
pub fn no_fusion(ego: &[Detection]) -> Vec<Detection> {
    ego.to_vec()
}

/// Move every agent's detections into the ego frame and suppress duplicates.
pub fn late_fusion(per_agent: &[(Pose2, Vec<Detection>)], ego: &Pose2, cfg: &HeadConfig) -> Vec<Detection> {
    let all: Vec<Detection> = per_agent
        .iter()
        .flat_map(|(pose, dets)| dets.iter().map(move |d| Detection { bbox: d.bbox.transform(pose, ego), score: d.score }))
        .collect();
    let mut out = nms(&all, cfg.nms_iou);
    out.truncate(cfg.max_detections);
    out
}

#[derive(Serialize, Deserialize)]
struct DetRecord {
    scene: usize,
    score: f64,
    cx: f64,
    cy: f64,
    w: f64,
    l: f64,
    yaw: f64,
}

/// One CSV row per box with six-decimal fixed formatting.
pub fn write_detections_csv<W: Write>(out: W, scenes: &[Vec<Detection>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scene", "score", "cx", "cy", "w", "l", "yaw"]).map_err(csv_err)?;
    for (s, dets) in scenes.iter().enumerate() {
        for d in dets {
            let b = &d.bbox;
            let f = |v: f64| format!("{v:.6}");
            w.write_record([s.to_string(), f(d.score), f(b.cx), f(b.cy), f(b.w), f(b.l), f(b.yaw)]).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_detections_csv`] for `n_scenes` scenes.
pub fn read_detections_csv<R: Read>(input: R, n_scenes: usize) -> Result<Vec<Vec<Detection>>> {
    let mut out = vec![Vec::new(); n_scenes];
    for rec in csv::Reader::from_reader(input).deserialize::<DetRecord>() {
        let r = rec.map_err(csv_err)?;
        let slot = out.get_mut(r.scene).ok_or_else(|| CoreError::Format(format!("scene {} out of range", r.scene)))?;
        slot.push(Detection { bbox: BoxBEV { cx: r.cx, cy: r.cy, w: r.w, l: r.l, yaw: r.yaw }, score: r.score });
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> CoreError {
    CoreError::Format(format!("csv: {e}"))
}

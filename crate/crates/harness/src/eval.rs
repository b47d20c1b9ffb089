//! No Fusion, Late Fusion and HM-ViT fusion on the same scenes.

use std::collections::BTreeMap;
use std::path::Path;

use coperc_core::bbox::BoxBEV;
use coperc_core::detection::{average_precision, late_fusion, no_fusion, read_detections_csv, write_detections_csv, Detection};
use coperc_core::fusion::HEADER_BYTES;
use coperc_core::scene::Scenario;
use coperc_core::Modality;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::{Regime, Sample};
use crate::error::{HarnessError, Result};
use crate::model::Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    NoFusion,
    LateFusion,
    HmVit,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::NoFusion, Method::LateFusion, Method::HmVit];

    pub fn name(self) -> &'static str {
        match self {
            Method::NoFusion => "no_fusion",
            Method::LateFusion => "late_fusion",
            Method::HmVit => "hm_vit",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ap {
    pub ap50: f64,
    pub ap70: f64,
}

/// AP of every method over one group of scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub scenes: usize,
    pub no_fusion: Ap,
    pub late_fusion: Ap,
    pub hm_vit: Ap,
    /// Mean bytes (header + payload) sent per transmitting agent under
    /// HM-ViT fusion; 0 when nobody transmits.
    pub bytes_per_agent: f64,
}

impl Row {
    pub fn get(&self, m: Method) -> Ap {
        match m {
            Method::NoFusion => self.no_fusion,
            Method::LateFusion => self.late_fusion,
            Method::HmVit => self.hm_vit,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub regime: Regime,
    pub all: Row,
    /// Split by the ego's modality.
    pub by_ego: BTreeMap<Modality, Row>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `ratio`, `agents` or `compression`.
    pub sweep: String,
    /// Swept value: LiDAR share of collaborators, agent count, or rate.
    pub value: f64,
    pub row: Row,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub compression_rate: usize,
    pub payload_bytes: usize,
    pub header_bytes: usize,
    pub regimes: Vec<RegimeReport>,
    pub sweep: Vec<SweepRow>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Flat table: one line per regime, per-ego split, and sweep row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["section".to_string(), "key".into(), "scenes".into()];
        for m in Method::ALL {
            header.push(format!("{}_ap50", m.name()));
            header.push(format!("{}_ap70", m.name()));
        }
        header.push("bytes_per_agent".into());
        w.write_record(&header).map_err(csv_err)?;
        let mut put = |section: &str, key: String, r: &Row| -> Result<()> {
            let mut rec = vec![section.to_string(), key, r.scenes.to_string()];
            for m in Method::ALL {
                rec.push(format!("{:.6}", r.get(m).ap50));
                rec.push(format!("{:.6}", r.get(m).ap70));
            }
            rec.push(format!("{:.1}", r.bytes_per_agent));
            w.write_record(&rec).map_err(csv_err)
        };
        for reg in &self.regimes {
            put("regime", reg.regime.to_string(), &reg.all)?;
            for (m, r) in &reg.by_ego {
                put("regime_ego", format!("{}/{m}", reg.regime), r)?;
            }
        }
        for s in &self.sweep {
            put(&s.sweep, format!("{}", s.value), &s.row)?;
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::Runtime(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

fn csv_err(e: csv::Error) -> HarnessError {
    HarnessError::Runtime(format!("csv: {e}"))
}

/// Detections of every method for a set of samples.
#[derive(Clone, Debug, Default)]
pub struct Predictions {
    pub no_fusion: Vec<Vec<Detection>>,
    pub late_fusion: Vec<Vec<Detection>>,
    pub hm_vit: Vec<Vec<Detection>>,
    pub gts: Vec<Vec<BoxBEV>>,
    /// Bytes sent per transmitting agent, per sample.
    pub bytes: Vec<Vec<usize>>,
}

impl Predictions {
    pub fn get(&self, m: Method) -> &[Vec<Detection>] {
        match m {
            Method::NoFusion => &self.no_fusion,
            Method::LateFusion => &self.late_fusion,
            Method::HmVit => &self.hm_vit,
        }
    }

    fn get_mut(&mut self, m: Method) -> &mut Vec<Vec<Detection>> {
        match m {
            Method::NoFusion => &mut self.no_fusion,
            Method::LateFusion => &mut self.late_fusion,
            Method::HmVit => &mut self.hm_vit,
        }
    }

    /// Round every method's boxes through the exported CSV form so reported
    /// APs can be recomputed from the files alone.
    pub fn through_csv(mut self) -> Result<Self> {
        let n = self.gts.len();
        for m in Method::ALL {
            let mut buf = Vec::new();
            write_detections_csv(&mut buf, self.get(m))?;
            *self.get_mut(m) = read_detections_csv(buf.as_slice(), n)?;
        }
        let gts: Vec<Vec<Detection>> = self.gts.iter().map(|g| g.iter().map(|b| Detection { bbox: *b, score: 1.0 }).collect()).collect();
        let mut buf = Vec::new();
        write_detections_csv(&mut buf, &gts)?;
        self.gts = read_detections_csv(buf.as_slice(), n)?.into_iter().map(|g| g.into_iter().map(|d| d.bbox).collect()).collect();
        Ok(self)
    }

    pub fn subset(&self, keep: &[usize]) -> Self {
        let pick = |v: &Vec<Vec<Detection>>| keep.iter().map(|&i| v[i].clone()).collect();
        Self {
            no_fusion: pick(&self.no_fusion),
            late_fusion: pick(&self.late_fusion),
            hm_vit: pick(&self.hm_vit),
            gts: keep.iter().map(|&i| self.gts[i].clone()).collect(),
            bytes: keep.iter().map(|&i| self.bytes[i].clone()).collect(),
        }
    }

    pub fn row(&self) -> Row {
        let ap = |m: Method| Ap {
            ap50: average_precision(self.get(m), &self.gts, 0.5),
            ap70: average_precision(self.get(m), &self.gts, 0.7),
        };
        let sent: Vec<usize> = self.bytes.iter().flatten().copied().collect();
        let bytes_per_agent = if sent.is_empty() { 0.0 } else { sent.iter().sum::<usize>() as f64 / sent.len() as f64 };
        Row {
            scenes: self.gts.len(),
            no_fusion: ap(Method::NoFusion),
            late_fusion: ap(Method::LateFusion),
            hm_vit: ap(Method::HmVit),
            bytes_per_agent,
        }
    }

    /// Write one detections file per method plus the ground truth.
    pub fn export(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for m in Method::ALL {
            let f = std::fs::File::create(dir.join(format!("{stem}_{}.csv", m.name())))?;
            write_detections_csv(std::io::BufWriter::new(f), self.get(m))?;
        }
        let gts: Vec<Vec<Detection>> = self.gts.iter().map(|g| g.iter().map(|b| Detection { bbox: *b, score: 1.0 }).collect()).collect();
        let f = std::fs::File::create(dir.join(format!("{stem}_gt.csv")))?;
        write_detections_csv(std::io::BufWriter::new(f), &gts)?;
        Ok(())
    }
}

struct One {
    no: Vec<Detection>,
    late: Vec<Detection>,
    hm: Vec<Detection>,
    bytes: Vec<usize>,
}

fn predict_one(model: &Model, s: &Sample) -> Result<One> {
    let grid = &model.fusion.grid;
    let ego_pose = s.scene.agents[s.members[0]].pose;
    let mut solo = Vec::with_capacity(s.members.len());
    for (k, &i) in s.members.iter().enumerate() {
        let (d, _) = model.predict_of(&s.scene, &[i], &s.obs[k..k + 1])?;
        solo.push((s.scene.agents[i].pose, d));
    }
    let mut late = late_fusion(&solo, &ego_pose, &model.head);
    late.retain(|d| grid.contains(d.bbox.cx, d.bbox.cy));
    let (hm, stats) = model.predict(s)?;
    let bytes = stats.payload_bytes.values().map(|p| p + HEADER_BYTES).collect();
    Ok(One { no: no_fusion(&solo[0].1), late, hm, bytes })
}

/// Run all methods on `samples` (scene-parallel, order preserved).
pub fn predict_all(model: &Model, samples: &[Sample]) -> Result<Predictions> {
    let outs: Vec<One> = samples.par_iter().map(|s| predict_one(model, s)).collect::<Result<_>>()?;
    let mut p = Predictions::default();
    for (o, s) in outs.into_iter().zip(samples) {
        p.no_fusion.push(o.no);
        p.late_fusion.push(o.late);
        p.hm_vit.push(o.hm);
        p.bytes.push(o.bytes);
        p.gts.push(s.gt.clone());
    }
    p.through_csv()
}

pub fn regime_report(model: &Model, cfg: &Config, scenes: &[Scenario], regime: Regime, export: Option<&Path>) -> Result<RegimeReport> {
    let samples = crate::data::samples(cfg, scenes, regime)?;
    let preds = predict_all(model, &samples)?;
    if let Some(dir) = export {
        preds.export(dir, regime.name())?;
    }
    let mut by_ego = BTreeMap::new();
    for m in Modality::ALL {
        let keep: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].ego_modality() == m).collect();
        if !keep.is_empty() {
            by_ego.insert(m, preds.subset(&keep).row());
        }
    }
    Ok(RegimeReport { regime, all: preds.row(), by_ego })
}

pub const RATIOS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
pub const RATES: [usize; 4] = [1, 8, 16, 32];

/// Relabel collaborators so that `round(ratio · slots)` of all collaborator
/// slots across `scenes` carry a LiDAR; egos keep their modality.
pub fn with_collaborator_ratio(scenes: &[Scenario], ratio: f64, seed: u64) -> Vec<Scenario> {
    let mut slots: Vec<(usize, usize)> =
        scenes.iter().enumerate().flat_map(|(s, sc)| (1..sc.agents.len()).map(move |a| (s, a))).collect();
    slots.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_lidar = (ratio * slots.len() as f64).round() as usize;
    let mut out = scenes.to_vec();
    for (k, (s, a)) in slots.into_iter().enumerate() {
        out[s].agents[a].modality = if k < n_lidar { Modality::Lidar } else { Modality::Camera };
    }
    out
}

pub fn ratio_sweep(model: &Model, cfg: &Config, scenes: &[Scenario]) -> Result<Vec<SweepRow>> {
    RATIOS
        .iter()
        .map(|&r| {
            let relabeled = with_collaborator_ratio(scenes, r, cfg.dataset.seed);
            let samples = crate::data::samples(cfg, &relabeled, Regime::V2vH)?;
            Ok(SweepRow { sweep: "ratio".into(), value: r, row: predict_all(model, &samples)?.row() })
        })
        .collect()
}

/// Graphs of the first `k` agents of every scene that has at least `k`.
pub fn agent_sweep(model: &Model, cfg: &Config, scenes: &[Scenario]) -> Result<Vec<SweepRow>> {
    let grid = cfg.bev_grid()?;
    let max = scenes.iter().map(|s| s.agents.len()).max().unwrap_or(0);
    (1..=max)
        .map(|k| {
            let samples: Vec<Sample> = scenes
                .iter()
                .filter(|s| s.agents.len() >= k)
                .map(|s| Sample::new(s.clone(), (0..k).collect(), &grid, &cfg.sensors, &cfg.head))
                .collect();
            Ok(SweepRow { sweep: "agents".into(), value: k as f64, row: predict_all(model, &samples)?.row() })
        })
        .collect()
}

/// One row per rate; `models` holds a model trained at each rate.
pub fn compression_sweep(models: &[(usize, Model)], cfg: &Config, scenes: &[Scenario]) -> Result<Vec<SweepRow>> {
    let samples = crate::data::samples(cfg, scenes, Regime::V2vH)?;
    models
        .iter()
        .map(|(rate, m)| Ok(SweepRow { sweep: "compression".into(), value: *rate as f64, row: predict_all(m, &samples)?.row() }))
        .collect()
}

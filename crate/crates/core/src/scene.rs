//! Synthetic scenes, ray-cast LiDAR-like and blob-rendering camera-like
//! observations, and the small per-modality encoders that turn observations
//! into BEV feature maps.

use std::f64::consts::PI;

use coperc_tensor::{ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bbox::{intersection_area, BoxBEV};
use crate::error::{CoreError, Result};
use crate::fusion::{AgentMeta, CollabGraph};
use crate::geometry::{BevGrid, Pose2};
use crate::modality::Modality;
use crate::transformer::{init_layer_norm, LN_EPS};

/// Observation channels: occupancy evidence and observed/semantic evidence.
pub const OBS_CHANNELS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub id: u32,
    pub modality: Modality,
    pub pose: Pose2,
}

/// Vehicles and agents of one scene; `agents[0]` is the ego.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub extent_m: f64,
    pub vehicles: Vec<BoxBEV>,
    pub agents: Vec<AgentSpec>,
}

impl Scenario {
    pub fn ego(&self) -> &AgentSpec {
        &self.agents[0]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn from_json(s: &str) -> Result<Scenario> {
        serde_json::from_str(s).map_err(|e| CoreError::Format(format!("scenario: {e}")))
    }

    /// Collaboration graph over a subset of agents (by index), ego first.
    pub fn graph(&self, members: &[usize], comm_range: f64) -> Result<CollabGraph> {
        let agents = members
            .iter()
            .map(|&i| {
                let a = self.agents.get(i).ok_or_else(|| CoreError::Graph(format!("agent index {i} out of range")))?;
                Ok(AgentMeta { id: a.id, modality: a.modality, pose: a.pose })
            })
            .collect::<Result<Vec<_>>>()?;
        CollabGraph::new(self.agents[members[0]].id, agents, comm_range)
    }
}

/// Fraction of LiDAR agents, optionally with the ego's modality pinned.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityMix {
    pub lidar_fraction: f64,
    #[serde(default)]
    pub ego: Option<Modality>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    /// Side of the square map, centered on the origin.
    pub extent_m: f64,
    pub n_vehicles: usize,
    pub n_agents: usize,
    pub mix: ModalityMix,
    /// Collaborator distance range from the ego (meters).
    pub collaborator_min_m: f64,
    pub collaborator_max_m: f64,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            extent_m: 60.0,
            n_vehicles: 16,
            n_agents: 2,
            mix: ModalityMix { lidar_fraction: 1.0, ego: None },
            collaborator_min_m: 10.0,
            collaborator_max_m: 25.0,
            max_retries: 2000,
        }
    }
}

/// Round to 6 decimals so the JSON form reloads bit-identically.
fn q6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

const VEHICLE_GAP: f64 = 0.4;
const AGENT_CLEARANCE: f64 = 3.0;
const AGENT_SPACING: f64 = 6.0;

fn assign_modalities(mix: &ModalityMix, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Modality>> {
    if !(0.0..=1.0).contains(&mix.lidar_fraction) {
        return Err(CoreError::Config(format!("lidar fraction {} outside [0, 1]", mix.lidar_fraction)));
    }
    let mut out = Vec::with_capacity(n);
    let slots = match mix.ego {
        Some(m) => {
            out.push(m);
            n - 1
        }
        None => n,
    };
    let n_lidar = (mix.lidar_fraction * slots as f64).round() as usize;
    let mut rest: Vec<Modality> = (0..slots).map(|k| if k < n_lidar { Modality::Lidar } else { Modality::Camera }).collect();
    for i in (1..rest.len()).rev() {
        rest.swap(i, rng.gen_range(0..=i));
    }
    out.extend(rest);
    Ok(out)
}

/// Deterministic scene for `seed`; retries placements up to `max_retries`.
pub fn generate_scenario(cfg: &SceneConfig, seed: u64) -> Result<Scenario> {
    if cfg.n_agents == 0 {
        return Err(CoreError::Config("a scene needs at least one agent".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modalities = assign_modalities(&cfg.mix, cfg.n_agents, &mut rng)?;
    let half = cfg.extent_m / 2.0;

    let ego = Pose2::new(q6(rng.gen_range(-2.0..2.0)), q6(rng.gen_range(-2.0..2.0)), q6(rng.gen_range(-PI..PI)));
    let mut poses = vec![ego];
    let mut tries = 0;
    while poses.len() < cfg.n_agents {
        tries += 1;
        if tries > cfg.max_retries {
            return Err(CoreError::Placement(format!("could not place {} agents", cfg.n_agents)));
        }
        let d = rng.gen_range(cfg.collaborator_min_m..=cfg.collaborator_max_m);
        let bearing = rng.gen_range(-PI..PI);
        let p = Pose2::new(q6(ego.x + d * bearing.cos()), q6(ego.y + d * bearing.sin()), q6(rng.gen_range(-PI..PI)));
        if p.x.abs() > half || p.y.abs() > half || poses.iter().any(|o| o.distance(&p) < AGENT_SPACING) {
            continue;
        }
        poses.push(p);
    }

    let mut vehicles: Vec<BoxBEV> = Vec::with_capacity(cfg.n_vehicles);
    let mut tries = 0;
    while vehicles.len() < cfg.n_vehicles {
        tries += 1;
        if tries > cfg.max_retries {
            return Err(CoreError::Placement(format!("placed {} of {} vehicles", vehicles.len(), cfg.n_vehicles)));
        }
        let b = BoxBEV::new(
            rng.gen_range(-half..half),
            rng.gen_range(-half..half),
            rng.gen_range(1.8..=2.2),
            rng.gen_range(4.0..=5.0),
            rng.gen_range(-PI..PI),
        );
        let b = BoxBEV { cx: q6(b.cx), cy: q6(b.cy), w: q6(b.w), l: q6(b.l), yaw: q6(b.yaw) };
        let inflated = BoxBEV { w: b.w + VEHICLE_GAP, l: b.l + VEHICLE_GAP, ..b };
        if vehicles.iter().any(|o| intersection_area(&inflated, o) > 0.0) {
            continue;
        }
        if poses.iter().any(|p| (p.x - b.cx).hypot(p.y - b.cy) < b.radius() + AGENT_CLEARANCE) {
            continue;
        }
        vehicles.push(b);
    }
    let agents = poses
        .into_iter()
        .zip(modalities)
        .enumerate()
        .map(|(i, (pose, modality))| AgentSpec { id: i as u32, modality, pose })
        .collect();
    Ok(Scenario { seed, extent_m: cfg.extent_m, vehicles, agents })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    pub lidar_range: f64,
    pub n_rays: usize,
    pub camera_range: f64,
    /// Camera position jitter `σ(d) = σ₀ (1 + d/d₀)`.
    pub camera_sigma0: f64,
    pub camera_d0: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self { lidar_range: 35.0, n_rays: 720, camera_range: 20.0, camera_sigma0: 0.3, camera_d0: 10.0 }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_rays < 90 {
            return Err(CoreError::Config(format!("need at least 90 rays, got {}", self.n_rays)));
        }
        if !(self.camera_range > 0.0 && self.camera_range <= self.lidar_range) {
            return Err(CoreError::Config("camera range must be positive and at most the lidar range".into()));
        }
        if self.camera_sigma0 < 0.0 || !(self.camera_d0 > 0.0) {
            return Err(CoreError::Config("camera jitter parameters out of range".into()));
        }
        Ok(())
    }

    pub fn range(&self, m: Modality) -> f64 {
        match m {
            Modality::Camera => self.camera_range,
            Modality::Lidar => self.lidar_range,
        }
    }
}

/// Distance along the ray `o + t·(dx, dy)` to segment `a–b`, if hit.
fn ray_segment(o: (f64, f64), dir: (f64, f64), a: (f64, f64), b: (f64, f64)) -> Option<f64> {
    let e = (b.0 - a.0, b.1 - a.1);
    let den = dir.0 * e.1 - dir.1 * e.0;
    if den.abs() < 1e-15 {
        return None;
    }
    let w = (a.0 - o.0, a.1 - o.1);
    let t = (w.0 * e.1 - w.1 * e.0) / den;
    let u = (w.0 * dir.1 - w.1 * dir.0) / den;
    (t >= 0.0 && (0.0..=1.0).contains(&u)).then_some(t)
}

/// First hit per ray: `(distance, vehicle index)` within `max_range`.
pub fn cast_rays(vehicles: &[BoxBEV], origin: &Pose2, n_rays: usize, max_range: f64) -> Vec<Option<(f64, usize)>> {
    let o = (origin.x, origin.y);
    let near: Vec<(usize, [(f64, f64); 4])> = vehicles
        .iter()
        .enumerate()
        .filter(|(_, b)| (b.cx - o.0).hypot(b.cy - o.1) <= max_range + b.radius())
        .map(|(i, b)| (i, b.corners()))
        .collect();
    (0..n_rays)
        .map(|k| {
            let theta = origin.yaw + 2.0 * PI * k as f64 / n_rays as f64;
            let dir = (theta.cos(), theta.sin());
            let mut best: Option<(f64, usize)> = None;
            for (i, corners) in &near {
                for e in 0..4 {
                    if let Some(t) = ray_segment(o, dir, corners[e], corners[(e + 1) % 4]) {
                        if t <= max_range && best.map_or(true, |(bt, _)| t < bt) {
                            best = Some((t, *i));
                        }
                    }
                }
            }
            best
        })
        .collect()
}

/// Vehicles hit by at least one ray from `origin` within `max_range`.
pub fn visible_vehicles(vehicles: &[BoxBEV], origin: &Pose2, n_rays: usize, max_range: f64) -> Vec<bool> {
    let mut vis = vec![false; vehicles.len()];
    for (_, i) in cast_rays(vehicles, origin, n_rays, max_range).into_iter().flatten() {
        vis[i] = true;
    }
    vis
}

/// LiDAR-like raster `[H, W, 2]` in the agent frame: channel 0 marks first
/// hits, channel 1 marks cells swept by rays up to and including the hit.
pub fn raycast_occupancy(vehicles: &[BoxBEV], agent: &Pose2, grid: &BevGrid, n_rays: usize, max_range: f64) -> Tensor {
    let mut obs = Tensor::zeros([grid.h, grid.w, OBS_CHANNELS]);
    let step = grid.resolution / 4.0;
    let hits = cast_rays(vehicles, agent, n_rays, max_range);
    let d = obs.data_mut();
    for (k, hit) in hits.iter().enumerate() {
        let theta = 2.0 * PI * k as f64 / n_rays as f64;
        let (dx, dy) = (theta.cos(), theta.sin());
        let end = hit.map_or(max_range, |(t, _)| t);
        let mut t = 0.0;
        while t < end {
            if let Some((r, c)) = grid.cell_of(t * dx, t * dy) {
                d[(r * grid.w + c) * OBS_CHANNELS + 1] = 1.0;
            }
            t += step;
        }
        if let Some((t, _)) = hit {
            if let Some((r, c)) = grid.cell_of(t * dx, t * dy) {
                let base = (r * grid.w + c) * OBS_CHANNELS;
                d[base] = 1.0;
                d[base + 1] = 1.0;
            }
        }
    }
    obs
}

pub fn jitter_sigma(sensors: &SensorConfig, distance: f64) -> f64 {
    sensors.camera_sigma0 * (1.0 + distance / sensors.camera_d0)
}

/// Positional jitter for a camera detection at `distance` meters.
pub fn sample_jitter(sensors: &SensorConfig, distance: f64, rng: &mut impl Rng) -> (f64, f64) {
    let s = jitter_sigma(sensors, distance);
    if s == 0.0 {
        return (0.0, 0.0);
    }
    let n = Normal::new(0.0, s).expect("finite sigma");
    (n.sample(rng), n.sample(rng))
}

/// Camera-like raster `[H, W, 2]`: each visible vehicle within camera range
/// becomes an anisotropic Gaussian blob at a jittered position. Channel 1
/// carries the blob, channel 0 a weak copy.
pub fn camera_observe(
    vehicles: &[BoxBEV],
    agent: &Pose2,
    grid: &BevGrid,
    sensors: &SensorConfig,
    rng: &mut impl Rng,
) -> Tensor {
    let mut obs = Tensor::zeros([grid.h, grid.w, OBS_CHANNELS]);
    let vis = visible_vehicles(vehicles, agent, sensors.n_rays, sensors.camera_range);
    let mut blobs = Vec::new();
    for (b, _) in vehicles.iter().zip(&vis).filter(|(_, v)| **v) {
        let d = (b.cx - agent.x).hypot(b.cy - agent.y);
        let (jx, jy) = sample_jitter(sensors, d, rng);
        let local = b.transform(&Pose2::identity(), agent);
        blobs.push(BoxBEV { cx: local.cx + jx, cy: local.cy + jy, ..local });
    }
    let data = obs.data_mut();
    for r in 0..grid.h {
        for c in 0..grid.w {
            let (x, y) = grid.cell_center(r, c);
            if x.hypot(y) > sensors.camera_range {
                continue;
            }
            let mut v: f64 = 0.0;
            for b in &blobs {
                let (s, co) = b.yaw.sin_cos();
                let (dx, dy) = (x - b.cx, y - b.cy);
                let (u, w) = (co * dx + s * dy, -s * dx + co * dy);
                let (su, sw) = (b.l / 3.0, b.w / 3.0);
                v = v.max((-0.5 * (u * u / (su * su) + w * w / (sw * sw))).exp());
            }
            let v = q6(v);
            let base = (r * grid.w + c) * OBS_CHANNELS;
            data[base] = q6(0.3 * v);
            data[base + 1] = v;
        }
    }
    obs
}

fn jitter_rng(scene_seed: u64, agent_id: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    rng.set_stream(agent_id as u64 + 1);
    rng
}

/// Observation of agent `idx` with its own modality.
pub fn observe(scene: &Scenario, idx: usize, grid: &BevGrid, sensors: &SensorConfig) -> Tensor {
    let a = &scene.agents[idx];
    match a.modality {
        Modality::Lidar => raycast_occupancy(&scene.vehicles, &a.pose, grid, sensors.n_rays, sensors.lidar_range),
        Modality::Camera => {
            camera_observe(&scene.vehicles, &a.pose, grid, sensors, &mut jitter_rng(scene.seed, a.id))
        }
    }
}

/// Evaluation ground truth in the ego frame: vehicles whose center lies in
/// the ego grid and that at least one member agent sees with its sensor.
pub fn ground_truth(scene: &Scenario, members: &[usize], grid: &BevGrid, sensors: &SensorConfig) -> Vec<BoxBEV> {
    let ego = scene.agents[members[0]].pose;
    let mut seen = vec![false; scene.vehicles.len()];
    for &i in members {
        let a = &scene.agents[i];
        let vis = visible_vehicles(&scene.vehicles, &a.pose, sensors.n_rays, sensors.range(a.modality));
        seen.iter_mut().zip(vis).for_each(|(s, v)| *s |= v);
    }
    scene
        .vehicles
        .iter()
        .zip(seen)
        .filter(|(_, s)| *s)
        .map(|(b, _)| b.transform(&Pose2::identity(), &ego))
        .filter(|b| grid.contains(b.cx, b.cy))
        .collect()
}

pub const ENCODER_PREFIX: &str = "encoder";

/// Two 3×3 conv + channel layer norm + GELU stages per modality.
pub fn init_encoder_params(store: &mut ParamStore, c: usize, rng: &mut impl Rng) -> Result<()> {
    for m in Modality::ALL {
        let p = format!("{ENCODER_PREFIX}.{m}");
        for (site, cin) in [("conv1", OBS_CHANNELS), ("conv2", c)] {
            let std = (2.0 / (9.0 * cin as f64)).sqrt();
            store.insert(format!("{p}.{site}.w"), m.name(), Tensor::randn([3, 3, cin, c], std, rng), true)?;
            store.insert(format!("{p}.{site}.b"), m.name(), Tensor::zeros([c]), true)?;
        }
        init_layer_norm(store, &format!("{p}.norm1"), m.name(), c)?;
        init_layer_norm(store, &format!("{p}.norm2"), m.name(), c)?;
    }
    Ok(())
}

/// `[.., H, W, 2] → [.., H, W, C]` with the modality's encoder.
pub fn encode(tape: &mut Tape, store: &ParamStore, obs: Var, m: Modality) -> Result<Var> {
    let p = format!("{ENCODER_PREFIX}.{m}");
    let mut x = obs;
    for (conv, norm) in [("conv1", "norm1"), ("conv2", "norm2")] {
        let w = tape.param(store, &format!("{p}.{conv}.w"))?;
        let b = tape.param(store, &format!("{p}.{conv}.b"))?;
        x = tape.conv2d(x, w, Some(b))?;
        let g = tape.param(store, &format!("{p}.{norm}.gamma"))?;
        let be = tape.param(store, &format!("{p}.{norm}.beta"))?;
        x = tape.layer_norm(x, g, be, LN_EPS)?;
        x = tape.gelu(x)?;
    }
    Ok(x)
}

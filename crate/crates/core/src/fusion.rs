//! Graph-structured fusion over a heterogeneous collaboration graph,
//! channel compression of transmitted maps, and the message wire format.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use coperc_tensor::{ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::{masked_warp_plan, BevGrid, Pose2, WarpPlan};
use crate::modality::Modality;
use crate::partition::AttentionMode;
use crate::transformer::{self, h3gat_block, AgentTokens, TransformerConfig};

pub const LOCAL_PREFIX: &str = "fusion.local";
pub const GLOBAL_PREFIX: &str = "fusion.global";
pub const FINAL_BASE: &str = "fusion";
pub const FINAL_SITE: &str = "final_mlp";
pub const COMPRESS_PREFIX: &str = "compress";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentMeta {
    pub id: u32,
    pub modality: Modality,
    pub pose: Pose2,
}

/// Agents of one scene and their communication links.
#[derive(Clone, Debug, PartialEq)]
pub struct CollabGraph {
    pub ego: u32,
    pub agents: Vec<AgentMeta>,
    /// Agents farther apart than this (meters) do not exchange messages.
    pub comm_range: f64,
}

impl CollabGraph {
    pub fn new(ego: u32, agents: Vec<AgentMeta>, comm_range: f64) -> Result<Self> {
        if agents.is_empty() {
            return Err(CoreError::Graph("empty collaboration graph".into()));
        }
        let mut ids: Vec<u32> = agents.iter().map(|a| a.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != agents.len() {
            return Err(CoreError::Graph("duplicate agent ids".into()));
        }
        if !ids.contains(&ego) {
            return Err(CoreError::Graph(format!("ego {ego} is not in the graph")));
        }
        if let Some(a) = agents.iter().find(|a| !a.pose.is_valid()) {
            return Err(CoreError::Graph(format!("agent {} has an invalid pose", a.id)));
        }
        if !(comm_range >= 0.0) {
            return Err(CoreError::Config(format!("communication range {comm_range} is negative")));
        }
        Ok(Self { ego, agents, comm_range })
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.agents.iter().position(|a| a.id == id)
    }

    pub fn ego_index(&self) -> usize {
        self.index_of(self.ego).expect("validated on construction")
    }

    pub fn adjacent(&self, a: usize, b: usize) -> bool {
        a == b || self.agents[a].pose.distance(&self.agents[b].pose) <= self.comm_range
    }

    /// Indices adjacent to `i` (itself included), ordered by agent id.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        let mut n: Vec<usize> = (0..self.agents.len()).filter(|&j| self.adjacent(i, j)).collect();
        n.sort_by_key(|&j| self.agents[j].id);
        n
    }

    pub fn modalities(&self) -> Vec<Modality> {
        let mut m: Vec<Modality> = self.agents.iter().map(|a| a.modality).collect();
        m.sort();
        m.dedup();
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub grid: BevGrid,
    pub transformer: TransformerConfig,
    pub iterations: usize,
    pub compression_rate: usize,
    pub fov_radius_camera: f64,
    pub fov_radius_lidar: f64,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        self.transformer.validate()?;
        if self.iterations == 0 {
            return Err(CoreError::Config("fusion needs at least one iteration".into()));
        }
        let r = self.compression_rate;
        if r == 0 || self.transformer.channels % r != 0 {
            return Err(CoreError::Config(format!(
                "compression rate {r} does not divide {} channels",
                self.transformer.channels
            )));
        }
        if !(self.fov_radius_camera > 0.0 && self.fov_radius_lidar > 0.0) {
            return Err(CoreError::Config("fov radii must be positive".into()));
        }
        let p = self.transformer.window;
        if self.grid.h % p != 0 || self.grid.w % p != 0 {
            return Err(CoreError::Config(format!("grid {}x{} is not divisible by window {p}", self.grid.h, self.grid.w)));
        }
        Ok(())
    }

    pub fn fov_radius(&self, m: Modality) -> f64 {
        match m {
            Modality::Camera => self.fov_radius_camera,
            Modality::Lidar => self.fov_radius_lidar,
        }
    }
}

/// Hidden width of the two-layer compression stacks: `√(C · C/r)`.
pub fn compression_hidden(c: usize, rate: usize) -> usize {
    ((c * c / rate) as f64).sqrt().round().max(1.0) as usize
}

fn conv1x1_init(store: &mut ParamStore, prefix: &str, owner: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<()> {
    let std = 1.0 / (cin as f64).sqrt();
    store.insert(format!("{prefix}.w"), owner, Tensor::randn([1, 1, cin, cout], std, rng), true)?;
    store.insert(format!("{prefix}.b"), owner, Tensor::zeros([cout]), true)?;
    Ok(())
}

/// Per-modality encoder/decoder stacks; nothing is created at rate 1.
pub fn init_compression_params(store: &mut ParamStore, c: usize, rate: usize, rng: &mut impl Rng) -> Result<()> {
    if rate == 1 {
        return Ok(());
    }
    if rate == 0 || c % rate != 0 {
        return Err(CoreError::Config(format!("compression rate {rate} does not divide {c} channels")));
    }
    let (mid, out) = (compression_hidden(c, rate), c / rate);
    for m in Modality::ALL {
        let p = format!("{COMPRESS_PREFIX}.{m}");
        conv1x1_init(store, &format!("{p}.enc1"), m.name(), c, mid, rng)?;
        conv1x1_init(store, &format!("{p}.enc2"), m.name(), mid, out, rng)?;
        conv1x1_init(store, &format!("{p}.dec1"), m.name(), out, mid, rng)?;
        conv1x1_init(store, &format!("{p}.dec2"), m.name(), mid, c, rng)?;
    }
    Ok(())
}

fn conv_stack(tape: &mut Tape, store: &ParamStore, p: &str, first: &str, second: &str, x: Var) -> Result<Var> {
    let w1 = tape.param(store, &format!("{p}.{first}.w"))?;
    let b1 = tape.param(store, &format!("{p}.{first}.b"))?;
    let h = tape.conv2d(x, w1, Some(b1))?;
    let h = tape.relu(h)?;
    let w2 = tape.param(store, &format!("{p}.{second}.w"))?;
    let b2 = tape.param(store, &format!("{p}.{second}.b"))?;
    Ok(tape.conv2d(h, w2, Some(b2))?)
}

/// `[H, W, C] → [H, W, C/r]` with the sender modality's encoder.
pub fn compress(tape: &mut Tape, store: &ParamStore, x: Var, m: Modality, rate: usize) -> Result<Var> {
    if rate == 1 {
        return Ok(x);
    }
    let c = *tape.shape(x).last().unwrap_or(&0);
    if rate == 0 || c % rate != 0 {
        return Err(CoreError::Config(format!("compression rate {rate} does not divide {c} channels")));
    }
    conv_stack(tape, store, &format!("{COMPRESS_PREFIX}.{m}"), "enc1", "enc2", x)
}

/// `[H, W, C/r] → [H, W, C]` with the decoder selected by the sender's modality.
pub fn decompress(tape: &mut Tape, store: &ParamStore, x: Var, m: Modality, rate: usize) -> Result<Var> {
    if rate == 1 {
        return Ok(x);
    }
    conv_stack(tape, store, &format!("{COMPRESS_PREFIX}.{m}"), "dec1", "dec2", x)
}

/// Bytes of one transmitted map at single precision.
pub fn payload_bytes(grid: &BevGrid, c: usize, rate: usize) -> usize {
    grid.h * grid.w * (c / rate) * 4
}

/// Local block, global block (shared across iterations), final per-type
/// MLPs and compression stacks.
pub fn init_fusion_params(store: &mut ParamStore, cfg: &FusionConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let t = &cfg.transformer;
    transformer::init_block_params(store, LOCAL_PREFIX, t, rng)?;
    transformer::init_block_params(store, GLOBAL_PREFIX, t, rng)?;
    for m in Modality::ALL {
        transformer::init_mlp(store, &format!("{FINAL_BASE}.{m}.{FINAL_SITE}"), m.name(), t.channels, t.mlp_ratio, rng)?;
    }
    init_compression_params(store, t.channels, cfg.compression_rate, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FuseOutputs {
    /// Every agent's refined map.
    All,
    /// Only the ego map; blocks that cannot reach it are skipped.
    EgoOnly,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FuseStats {
    pub local_blocks: usize,
    pub global_blocks: usize,
    pub empty_queries: usize,
    /// Bytes transmitted per sender id for the initial broadcast.
    pub payload_bytes: BTreeMap<u32, usize>,
}

/// Warp plans for every ordered adjacent pair (receiver, sender).
pub fn warp_plans(graph: &CollabGraph, cfg: &FusionConfig) -> Result<HashMap<(usize, usize), WarpPlan>> {
    let mut plans = HashMap::new();
    for i in 0..graph.agents.len() {
        for j in graph.neighbors(i) {
            if i != j {
                let (r, s) = (&graph.agents[i], &graph.agents[j]);
                plans.insert((i, j), masked_warp_plan(&cfg.grid, &s.pose, &r.pose, cfg.fov_radius(s.modality))?);
            }
        }
    }
    Ok(plans)
}

fn warp_var(tape: &mut Tape, x: Var, plan: &WarpPlan, grid: &BevGrid, c: usize) -> Result<Var> {
    let flat = tape.reshape(x, [grid.cells(), c])?;
    let w = tape.row_map(flat, plan.map.clone(), c)?;
    Ok(tape.reshape(w, [grid.h, grid.w, c])?)
}

/// Run the cascaded local/global fusion for `iterations` rounds and the
/// final typed MLP.
///
/// `features[k]` is agent `k`'s encoded `[H, W, C]` map. Round one reads
/// neighbors' transmitted (compressed, then decompressed) copies; later
/// reads share current states directly. Each loop reads only the snapshot
/// produced by the previous loop. Returned maps follow `graph.agents`
/// order; with [`FuseOutputs::EgoOnly`] only the ego entry is filled.
pub fn fuse(
    tape: &mut Tape,
    store: &ParamStore,
    graph: &CollabGraph,
    features: &[Var],
    cfg: &FusionConfig,
    outputs: FuseOutputs,
) -> Result<(Vec<Option<Var>>, FuseStats)> {
    let n = graph.agents.len();
    if features.len() != n {
        return Err(CoreError::Graph(format!("{} feature maps for {n} agents", features.len())));
    }
    let (grid, c) = (&cfg.grid, cfg.transformer.channels);
    for &f in features {
        if tape.shape(f) != [grid.h, grid.w, c] {
            return Err(CoreError::Shape(format!("feature {:?} does not match {}x{}x{c}", tape.shape(f), grid.h, grid.w)));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| graph.agents[i].id);
    let neighbors: Vec<Vec<usize>> = (0..n).map(|i| graph.neighbors(i)).collect();
    let plans = warp_plans(graph, cfg)?;
    let ego = graph.ego_index();
    let mut stats = FuseStats::default();

    let rate = cfg.compression_rate;
    let mut transmitted: Vec<Option<Var>> = vec![None; n];
    for &j in &order {
        if neighbors[j].len() > 1 {
            let m = graph.agents[j].modality;
            let z = compress(tape, store, features[j], m, rate)?;
            transmitted[j] = Some(decompress(tape, store, z, m, rate)?);
            stats.payload_bytes.insert(graph.agents[j].id, payload_bytes(grid, c, rate));
        }
    }

    let full_mask = Arc::new(vec![true; grid.cells()]);
    let mut states: Vec<Var> = features.to_vec();
    for l in 1..=cfg.iterations {
        for (mode, prefix) in [(AttentionMode::Local, LOCAL_PREFIX), (AttentionMode::Global, GLOBAL_PREFIX)] {
            let last = l == cfg.iterations && mode == AttentionMode::Global;
            let mut next = states.clone();
            for &i in &order {
                if last && outputs == FuseOutputs::EgoOnly && i != ego {
                    continue;
                }
                let mut inputs = Vec::with_capacity(neighbors[i].len());
                let mut rx = 0;
                for &j in &neighbors[i] {
                    let meta = &graph.agents[j];
                    if j == i {
                        rx = inputs.len();
                        inputs.push(AgentTokens { feature: states[i], modality: meta.modality, mask: full_mask.clone() });
                        continue;
                    }
                    let src = match (l, mode) {
                        (1, AttentionMode::Local) => transmitted[j].expect("neighbors always transmit"),
                        _ => states[j],
                    };
                    let plan = &plans[&(i, j)];
                    let warped = warp_var(tape, src, plan, grid, c)?;
                    inputs.push(AgentTokens { feature: warped, modality: meta.modality, mask: Arc::new(plan.mask.clone()) });
                }
                let (out, s) = h3gat_block(tape, store, prefix, &cfg.transformer, mode, &inputs, rx)?;
                stats.empty_queries += s.empty_queries;
                match mode {
                    AttentionMode::Local => stats.local_blocks += 1,
                    AttentionMode::Global => stats.global_blocks += 1,
                }
                next[i] = out;
            }
            states = next;
        }
    }
    let mut result = vec![None; n];
    for &i in &order {
        if outputs == FuseOutputs::EgoOnly && i != ego {
            continue;
        }
        let m = graph.agents[i].modality;
        result[i] = Some(transformer::typed_mlp(tape, store, FINAL_BASE, FINAL_SITE, states[i], m)?);
    }
    Ok((result, stats))
}

/// Length of the fixed message header in bytes.
pub const HEADER_BYTES: usize = 4 + 1 + 3 * 8 + 3 * 4 + 1;

/// One transmitted feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub sender: u32,
    pub modality: Modality,
    pub pose: Pose2,
    pub h: u32,
    pub w: u32,
    pub channels: u32,
    pub rate: u8,
    pub payload: Vec<f32>,
}

impl Message {
    pub fn payload_bytes(&self) -> usize {
        self.payload.len() * 4
    }

    /// Little-endian header followed by the f32 payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.payload_bytes());
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.push(self.modality.tag());
        for v in [self.pose.x, self.pose.y, self.pose.yaw] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in [self.h, self.w, self.channels] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(self.rate);
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Message> {
        let fmt = |m: &str| CoreError::Format(m.to_string());
        if bytes.len() < HEADER_BYTES {
            return Err(fmt("message shorter than its header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let modality = Modality::from_tag(bytes[4]).ok_or_else(|| fmt("unknown modality tag"))?;
        let pose = Pose2 { x: f64_at(5), y: f64_at(13), yaw: f64_at(21) };
        let (h, w, channels) = (u32_at(29), u32_at(33), u32_at(37));
        let rate = bytes[41];
        let n = h as usize * w as usize * channels as usize;
        let body = &bytes[HEADER_BYTES..];
        if body.len() != n * 4 {
            return Err(fmt("payload length does not match header"));
        }
        let payload = body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        Ok(Message { sender: u32_at(0), modality, pose, h, w, channels, rate, payload })
    }

    /// Payload as an `[H, W, C']` tensor.
    pub fn feature(&self) -> Result<Tensor> {
        let data = self.payload.iter().map(|&v| v as f64).collect();
        Ok(Tensor::new([self.h as usize, self.w as usize, self.channels as usize], data)?)
    }
}

/// Package `sender`'s compressed map for `receiver`; fails for non-adjacent pairs.
pub fn share(graph: &CollabGraph, sender: u32, receiver: u32, compressed: &Tensor, rate: usize) -> Result<Message> {
    let (s, r) = match (graph.index_of(sender), graph.index_of(receiver)) {
        (Some(s), Some(r)) => (s, r),
        _ => return Err(CoreError::Graph(format!("unknown agent in {sender} -> {receiver}"))),
    };
    if !graph.adjacent(s, r) {
        return Err(CoreError::Graph(format!("agents {sender} and {receiver} are not within communication range")));
    }
    let [h, w, c] = compressed.shape()[..] else {
        return Err(CoreError::Shape(format!("expected [H, W, C'] payload, got {:?}", compressed.shape())));
    };
    let rate = u8::try_from(rate).map_err(|_| CoreError::Config(format!("rate {rate} does not fit the header")))?;
    let meta = &graph.agents[s];
    Ok(Message {
        sender,
        modality: meta.modality,
        pose: meta.pose,
        h: h as u32,
        w: w as u32,
        channels: c as u32,
        rate,
        payload: compressed.data().iter().map(|&v| v as f32).collect(),
    })
}

//! Heterogeneous graph attention over BEV tokens and the typed transformer
//! blocks built on it.
//!
//! Parameter names under a block prefix `p`:
//!
//! ```text
//! p.{camera,lidar}.{q,k,o}.{w,b}            node-typed projections
//! p.{camera,lidar}.{ln1,ln2}.{gamma,beta}   HM-LN sites
//! p.{camera,lidar}.mlp.{fc1,fc2}.{w,b}      HM-MLP
//! p.edge.{s}_to_{r}.v.{w,b}                 edge-typed value projection
//! p.edge.{s}_to_{r}.rel                     [h, d, d] relation blocks
//! ```

use std::sync::Arc;

use coperc_tensor::{ParamStore, RowMap, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::modality::{EdgeType, Modality};
use crate::partition::{self, AttentionMode, GlobalMixing, Layout};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
    pub mlp_ratio: usize,
    #[serde(default)]
    pub global_mixing: GlobalMixing,
}

pub const LN_EPS: f64 = 1e-5;

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(CoreError::Config(format!("{} channels not divisible into {} heads", self.channels, self.heads)));
        }
        if self.window == 0 || self.mlp_ratio == 0 {
            return Err(CoreError::Config("window and mlp ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

fn name(base: &str, m: Modality, site: &str) -> String {
    format!("{base}.{m}.{site}")
}

fn edge_name(base: &str, e: EdgeType, site: &str) -> String {
    format!("{base}.edge.{}.{site}", e.key())
}

/// Normal init with standard deviation `1/√fan_in`.
pub fn init_linear(store: &mut ParamStore, prefix: &str, owner: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<()> {
    let std = 1.0 / (cin as f64).sqrt();
    store.insert(format!("{prefix}.w"), owner, Tensor::randn([cin, cout], std, rng), true)?;
    store.insert(format!("{prefix}.b"), owner, Tensor::zeros([cout]), true)?;
    Ok(())
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, owner: &str, c: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), owner, Tensor::full([c], 1.0), true)?;
    store.insert(format!("{prefix}.beta"), owner, Tensor::zeros([c]), true)?;
    Ok(())
}

pub fn init_mlp(store: &mut ParamStore, prefix: &str, owner: &str, c: usize, ratio: usize, rng: &mut impl Rng) -> Result<()> {
    init_linear(store, &format!("{prefix}.fc1"), owner, c, ratio * c, rng)?;
    init_linear(store, &format!("{prefix}.fc2"), owner, ratio * c, c, rng)
}

/// Q/K/O per node type, V and relation blocks per edge type.
pub fn init_attention_params(store: &mut ParamStore, base: &str, cfg: &TransformerConfig, rng: &mut impl Rng) -> Result<()> {
    let c = cfg.channels;
    for m in Modality::ALL {
        for site in ["q", "k", "o"] {
            init_linear(store, &name(base, m, site), m.name(), c, c, rng)?;
        }
    }
    let d = cfg.head_dim();
    let mut rel = Tensor::zeros([cfg.heads, d, d]);
    for h in 0..cfg.heads {
        for i in 0..d {
            rel.data_mut()[(h * d + i) * d + i] = 1.0;
        }
    }
    for e in EdgeType::all() {
        init_linear(store, &edge_name(base, e, "v"), &e.owner(), c, c, rng)?;
        store.insert(edge_name(base, e, "rel"), e.owner(), rel.clone(), true)?;
    }
    Ok(())
}

/// Attention parameters plus both HM-LN sites and the HM-MLP.
pub fn init_block_params(store: &mut ParamStore, base: &str, cfg: &TransformerConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    init_attention_params(store, base, cfg, rng)?;
    for m in Modality::ALL {
        init_layer_norm(store, &name(base, m, "ln1"), m.name(), cfg.channels)?;
        init_layer_norm(store, &name(base, m, "ln2"), m.name(), cfg.channels)?;
        init_mlp(store, &name(base, m, "mlp"), m.name(), cfg.channels, cfg.mlp_ratio, rng)?;
    }
    Ok(())
}

pub fn dense(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    Ok(tape.linear(x, w, Some(b))?)
}

fn ln(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let g = tape.param(store, &format!("{prefix}.gamma"))?;
    let b = tape.param(store, &format!("{prefix}.beta"))?;
    Ok(tape.layer_norm(x, g, b, LN_EPS)?)
}

fn mlp(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let h = dense(tape, store, &format!("{prefix}.fc1"), x)?;
    let h = tape.gelu(h)?;
    dense(tape, store, &format!("{prefix}.fc2"), h)
}

/// Apply `f` to the rows of `tokens` `[T, C]` grouped by node type and
/// reassemble them in the original order.
fn route_by_type<F>(tape: &mut Tape, tokens: Var, types: &[Modality], mut f: F) -> Result<Var>
where
    F: FnMut(&mut Tape, Var, Modality) -> Result<Var>,
{
    let shape = tape.shape(tokens).to_vec();
    if shape.len() != 2 || shape[0] != types.len() {
        return Err(CoreError::Shape(format!("{} node types for tokens {shape:?}", types.len())));
    }
    let first = types.first().copied();
    if types.iter().all(|t| Some(*t) == first) {
        return match first {
            Some(m) => f(tape, tokens, m),
            None => Ok(tokens),
        };
    }
    let mut parts = Vec::new();
    let mut order = Vec::new();
    for m in Modality::ALL {
        let idx: Vec<usize> = (0..types.len()).filter(|&i| types[i] == m).collect();
        if idx.is_empty() {
            continue;
        }
        let g = tape.row_map(tokens, Arc::new(RowMap::gather(&idx, types.len())), shape[1])?;
        parts.push(f(tape, g, m)?);
        order.extend(idx);
    }
    let cat = tape.concat(&parts)?;
    let cout = tape.shape(cat)[1];
    Ok(tape.row_map(cat, Arc::new(RowMap::inverse_permutation(&order)), cout)?)
}

/// Layer norm over channels with gamma/beta chosen by each token's node
/// type; `site` names the parameters as `{base}.{type}.{site}.*`.
pub fn hm_layer_norm(tape: &mut Tape, store: &ParamStore, base: &str, site: &str, tokens: Var, types: &[Modality]) -> Result<Var> {
    route_by_type(tape, tokens, types, |tp, x, m| ln(tp, store, &name(base, m, site), x))
}

/// Two-layer GELU MLP with parameters chosen by each token's node type.
pub fn hm_mlp(tape: &mut Tape, store: &ParamStore, base: &str, site: &str, tokens: Var, types: &[Modality]) -> Result<Var> {
    route_by_type(tape, tokens, types, |tp, x, m| mlp(tp, store, &name(base, m, site), x))
}

/// One block of key/value tokens sharing a node type.
#[derive(Clone, Copy, Debug)]
pub struct KeySource {
    /// `[T, C]` tokens.
    pub tokens: Var,
    pub modality: Modality,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionStats {
    /// Softmax weights `[S, h, L_q, L_k]`.
    pub weights: Var,
    /// Query rows (over sequences and heads) with every key masked.
    pub empty_queries: usize,
}

/// Typed multi-head attention of receiver tokens over the concatenated
/// tokens of `sources`.
///
/// `q_layout` partitions the receiver's `T_q` rows and `k_layout` the
/// concatenated source rows into the same number of sequences; `key_mask`
/// flags valid source rows. Returns `[T_q, C]` after the receiver-typed
/// output projection.
#[allow(clippy::too_many_arguments)]
pub fn h3gat_attention(
    tape: &mut Tape,
    store: &ParamStore,
    base: &str,
    cfg: &TransformerConfig,
    queries: Var,
    receiver: Modality,
    sources: &[KeySource],
    q_layout: &Layout,
    k_layout: &Layout,
    key_mask: &[bool],
) -> Result<(Var, AttentionStats)> {
    let (c, h, d) = (cfg.channels, cfg.heads, cfg.head_dim());
    let tq = tape.shape(queries)[0];
    let tk: usize = sources.iter().map(|s| tape.shape(s.tokens)[0]).sum();
    if q_layout.sequences != k_layout.sequences || q_layout.index.len() != tq || k_layout.index.len() != tk {
        return Err(CoreError::Shape("query/key layouts disagree with token counts".into()));
    }
    if key_mask.len() != tk {
        return Err(CoreError::Shape(format!("key mask has {} entries for {tk} keys", key_mask.len())));
    }
    let (s, lq, lk) = (q_layout.sequences, q_layout.seq_len, k_layout.seq_len);

    let q = dense(tape, store, &name(base, receiver, "q"), queries)?;
    let q = tape.scale(q, 1.0 / (d as f64).sqrt())?;
    let mut keys = Vec::with_capacity(sources.len());
    let mut values = Vec::with_capacity(sources.len());
    for src in sources {
        let e = EdgeType::new(src.modality, receiver);
        let k = dense(tape, store, &name(base, src.modality, "k"), src.tokens)?;
        let kh = tape.split_heads(k, h)?;
        let rel = tape.param(store, &edge_name(base, e, "rel"))?;
        let kr = tape.matmul_t(kh, rel)?;
        keys.push(tape.merge_heads(kr)?);
        values.push(dense(tape, store, &edge_name(base, e, "v"), src.tokens)?);
    }
    let kc = if keys.len() == 1 { keys[0] } else { tape.concat(&keys)? };
    let vc = if values.len() == 1 { values[0] } else { tape.concat(&values)? };

    let kmap = Arc::new(k_layout.gather(tk));
    let to_heads = |tape: &mut Tape, x: Var, map: &Arc<RowMap>, len: usize| -> Result<Var> {
        let p = tape.row_map(x, map.clone(), c)?;
        let p = tape.reshape(p, [s, len, c])?;
        Ok(tape.split_heads(p, h)?)
    };
    let qp = to_heads(tape, q, &Arc::new(q_layout.gather(tq)), lq)?;
    let kp = to_heads(tape, kc, &kmap, lk)?;
    let vp = to_heads(tape, vc, &kmap, lk)?;

    let logits = tape.matmul_t(qp, kp)?;
    let mut mask = Vec::with_capacity(s * h * lq * lk);
    for si in 0..s {
        let row: Vec<bool> = k_layout.index[si * lk..(si + 1) * lk].iter().map(|&i| key_mask[i]).collect();
        for _ in 0..h * lq {
            mask.extend_from_slice(&row);
        }
    }
    let (attn, empty) = tape.masked_softmax(logits, Arc::new(mask))?;
    let out = tape.matmul(attn, vp)?;
    let out = tape.merge_heads(out)?;
    let out = tape.reshape(out, [s * lq, c])?;
    let out = tape.row_map(out, Arc::new(q_layout.scatter()), c)?;
    let out = dense(tape, store, &name(base, receiver, "o"), out)?;
    Ok((out, AttentionStats { weights: attn, empty_queries: empty.len() }))
}

/// One agent's map as seen by a receiver (already warped into its frame).
#[derive(Clone, Debug)]
pub struct AgentTokens {
    /// `[H, W, C]`.
    pub feature: Var,
    pub modality: Modality,
    /// Validity per cell (`H·W`).
    pub mask: Arc<Vec<bool>>,
}

/// Pre-norm residual block for `agents[receiver]`:
/// `x' = x + Attn(HM-LN(x))`, `out = x' + HM-MLP(HM-LN(x'))`.
pub fn h3gat_block(
    tape: &mut Tape,
    store: &ParamStore,
    base: &str,
    cfg: &TransformerConfig,
    mode: AttentionMode,
    agents: &[AgentTokens],
    receiver: usize,
) -> Result<(Var, AttentionStats)> {
    let rx = agents.get(receiver).ok_or_else(|| CoreError::Graph(format!("receiver {receiver} out of range")))?;
    let shape = tape.shape(rx.feature).to_vec();
    let [hh, ww, c] = shape[..] else {
        return Err(CoreError::Shape(format!("expected [H, W, C] map, got {shape:?}")));
    };
    if c != cfg.channels {
        return Err(CoreError::Shape(format!("map has {c} channels, block expects {}", cfg.channels)));
    }
    let cells = hh * ww;
    let involved: Vec<usize> = match (mode, cfg.global_mixing) {
        (AttentionMode::Global, GlobalMixing::PerAgent) => vec![receiver],
        _ => (0..agents.len()).collect(),
    };
    let mut sources = Vec::with_capacity(involved.len());
    let mut key_mask = Vec::with_capacity(involved.len() * cells);
    let mut q_tokens = None;
    for &i in &involved {
        let a = &agents[i];
        if tape.shape(a.feature) != shape.as_slice() || a.mask.len() != cells {
            return Err(CoreError::Shape(format!("agent {i} map/mask does not match receiver")));
        }
        let flat = tape.reshape(a.feature, [cells, c])?;
        let normed = ln(tape, store, &name(base, a.modality, "ln1"), flat)?;
        if i == receiver {
            q_tokens = Some(normed);
        }
        sources.push(KeySource { tokens: normed, modality: a.modality });
        key_mask.extend_from_slice(&a.mask);
    }
    let q_layout = partition::layout(mode, cfg.global_mixing, 1, hh, ww, cfg.window)?;
    let k_layout = partition::layout(mode, cfg.global_mixing, sources.len(), hh, ww, cfg.window)?;
    let (attn, stats) = h3gat_attention(
        tape,
        store,
        base,
        cfg,
        q_tokens.expect("receiver is always involved"),
        rx.modality,
        &sources,
        &q_layout,
        &k_layout,
        &key_mask,
    )?;
    let x = tape.reshape(rx.feature, [cells, c])?;
    let x = tape.add(x, attn)?;
    let y = ln(tape, store, &name(base, rx.modality, "ln2"), x)?;
    let y = mlp(tape, store, &name(base, rx.modality, "mlp"), y)?;
    let out = tape.add(x, y)?;
    Ok((tape.reshape(out, shape)?, stats))
}

/// Standalone HM-MLP over one agent's `[H, W, C]` map.
pub fn typed_mlp(tape: &mut Tape, store: &ParamStore, base: &str, site: &str, x: Var, m: Modality) -> Result<Var> {
    mlp(tape, store, &name(base, m, site), x)
}

/// Names of every parameter of a block prefix that a graph made only of
/// `present` modalities can touch.
pub fn used_by(name: &str, present: &[Modality]) -> bool {
    let has = |m: Modality| present.contains(&m);
    if let Some(rest) = name.split(".edge.").nth(1) {
        let key = rest.split('.').next().unwrap_or("");
        return EdgeType::all().iter().any(|e| e.key() == key && has(e.sender) && has(e.receiver));
    }
    Modality::ALL.iter().any(|&m| has(m) && name.split('.').any(|seg| seg == m.name()))
}

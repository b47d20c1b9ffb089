//! Axis-decomposed token partitions for local (window) and global (grid)
//! attention.
//!
//! Maps are stacked as `[N, H, W, C]`. A layout lists, for every output token
//! in sequence-major order, the flat source row `(n·H + row)·W + col`.
//!
//! Local: sequence `wr·(W/P) + wc`, token `n·P² + pr·P + pc`, cell
//! `(wr·P + pr, wc·P + pc)`.
//! Global: sequence `pr·P + pc`, token `n·G + gr·(W/P) + gc` with
//! `G = (H/P)(W/P)`, cell `(gr·P + pr, gc·P + pc)`. With per-agent mixing the
//! agent moves into the sequence index (`n·P² + pr·P + pc`) and sequences
//! never mix agents.

use serde::{Deserialize, Serialize};

use coperc_tensor::{RowMap, Tensor};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Local,
    Global,
}

/// How global sequences treat the agent axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GlobalMixing {
    /// Sequences hold the strided tokens of every agent.
    #[default]
    CrossAgent,
    /// One sequence per agent and offset; no cross-agent exchange.
    PerAgent,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub sequences: usize,
    pub seq_len: usize,
    pub index: Vec<usize>,
}

impl Layout {
    pub fn gather(&self, in_rows: usize) -> RowMap {
        RowMap::gather(&self.index, in_rows)
    }

    pub fn scatter(&self) -> RowMap {
        RowMap::inverse_permutation(&self.index)
    }
}

fn check(h: usize, w: usize, p: usize) -> Result<()> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(CoreError::Config(format!("grid {h}x{w} is not divisible by window {p}")));
    }
    Ok(())
}

pub fn local_layout(n: usize, h: usize, w: usize, p: usize) -> Result<Layout> {
    check(h, w, p)?;
    let (gh, gw) = (h / p, w / p);
    let mut index = Vec::with_capacity(n * h * w);
    for wr in 0..gh {
        for wc in 0..gw {
            for a in 0..n {
                for pr in 0..p {
                    for pc in 0..p {
                        index.push((a * h + wr * p + pr) * w + wc * p + pc);
                    }
                }
            }
        }
    }
    Ok(Layout { sequences: gh * gw, seq_len: n * p * p, index })
}

pub fn global_layout(n: usize, h: usize, w: usize, p: usize, mixing: GlobalMixing) -> Result<Layout> {
    check(h, w, p)?;
    let (gh, gw) = (h / p, w / p);
    let mut index = Vec::with_capacity(n * h * w);
    let mut push_seq = |agents: std::ops::Range<usize>, pr: usize, pc: usize| {
        for a in agents {
            for gr in 0..gh {
                for gc in 0..gw {
                    index.push((a * h + gr * p + pr) * w + gc * p + pc);
                }
            }
        }
    };
    match mixing {
        GlobalMixing::CrossAgent => {
            for pr in 0..p {
                for pc in 0..p {
                    push_seq(0..n, pr, pc);
                }
            }
            Ok(Layout { sequences: p * p, seq_len: n * gh * gw, index })
        }
        GlobalMixing::PerAgent => {
            for a in 0..n {
                for pr in 0..p {
                    for pc in 0..p {
                        push_seq(a..a + 1, pr, pc);
                    }
                }
            }
            Ok(Layout { sequences: n * p * p, seq_len: gh * gw, index })
        }
    }
}

pub fn layout(mode: AttentionMode, mixing: GlobalMixing, n: usize, h: usize, w: usize, p: usize) -> Result<Layout> {
    match mode {
        AttentionMode::Local => local_layout(n, h, w, p),
        AttentionMode::Global => global_layout(n, h, w, p, mixing),
    }
}

fn dims(f: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *f.shape() {
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => Err(CoreError::Shape(format!("expected [N, H, W, C], got {:?}", f.shape()))),
    }
}

fn apply(f: &Tensor, lay: &Layout, c: usize) -> Result<Tensor> {
    let rows = f.len() / c;
    let out = lay.gather(rows).apply(f.data(), c);
    Ok(Tensor::new([lay.sequences, lay.seq_len, c], out)?)
}

/// `[N, H, W, C] → [(H/P)(W/P), N·P², C]`.
pub fn partition_local(f: &Tensor, p: usize) -> Result<Tensor> {
    let (n, h, w, c) = dims(f)?;
    apply(f, &local_layout(n, h, w, p)?, c)
}

/// `[N, H, W, C] → [P², N·(H/P)(W/P), C]` (cross-agent) or
/// `[N·P², (H/P)(W/P), C]` (per-agent).
pub fn partition_global(f: &Tensor, p: usize, mixing: GlobalMixing) -> Result<Tensor> {
    let (n, h, w, c) = dims(f)?;
    apply(f, &global_layout(n, h, w, p, mixing)?, c)
}

/// Inverse of a partition produced with `lay`; output is `[N, H, W, C]`.
pub fn unpartition(t: &Tensor, lay: &Layout, n: usize, h: usize, w: usize) -> Result<Tensor> {
    let c = *t.shape().last().ok_or_else(|| CoreError::Shape("scalar partition".into()))?;
    if t.len() != n * h * w * c || lay.index.len() != n * h * w {
        return Err(CoreError::Shape(format!("partition {:?} does not match {n}x{h}x{w}", t.shape())));
    }
    Ok(Tensor::new([n, h, w, c], lay.scatter().apply(t.data(), c))?)
}

//! Finite-difference suite over every differentiable op and composite block
//! at tiny shapes.

use std::sync::Arc;
use std::time::Instant;

use coperc_core::detection::{head_forward, init_head_params, HeadConfig};
use coperc_core::fusion::{fuse, init_fusion_params, AgentMeta, CollabGraph, FuseOutputs, FusionConfig};
use coperc_core::geometry::{masked_warp_plan, BevGrid, Pose2};
use coperc_core::partition::{AttentionMode, GlobalMixing};
use coperc_core::scene::{encode, init_encoder_params, OBS_CHANNELS};
use coperc_core::transformer::{h3gat_block, init_block_params, AgentTokens, TransformerConfig};
use coperc_core::{CoreError, Modality};
use coperc_tensor::gradcheck::{grad_check, grad_check_params, GradCheckOptions, GradCheckReport};
use coperc_tensor::{BatchNormStats, NormMode, ParamStore, RowMap, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const THRESHOLD: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub results: Vec<CheckResult>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Values bounded away from zero so kinks (ReLU, smooth L1) sit far from
/// the finite-difference stencil.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| {
        let v: f64 = r.gen_range(0.2..1.5);
        if r.gen::<bool>() { v } else { -v }
    });
    Tensor::new(shape.to_vec(), data.collect()).unwrap()
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> coperc_tensor::Result<Var>>;

fn op_checks(fault: bool) -> Vec<(String, OpFn, Vec<Tensor>)> {
    let r = |s: &[usize], seed| Tensor::randn(s.to_vec(), 1.0, &mut rng(seed));
    let mask: Arc<Vec<bool>> = Arc::new((0..24).map(|i| i % 5 != 2).collect());
    let map = Arc::new(RowMap::gather(&[2, 0, 0, 3], 4));
    let bn = BatchNormStats { mean: vec![0.1, -0.2, 0.3], var: vec![1.5, 0.7, 1.1] };
    let bn2 = bn.clone();
    let focal_t = Arc::new((0..6).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect::<Vec<_>>());
    let sl1_t = Arc::new(vec![0.0; 6]);
    let sl1_m = Arc::new(vec![true, true, false, true, true, true]);
    let mut v: Vec<(String, OpFn, Vec<Tensor>)> = vec![
        ("add_broadcast".into(), Box::new(|t, x| t.add(x[0], x[1])), vec![r(&[3, 4], 1), r(&[4], 2)]),
        ("sub".into(), Box::new(|t, x| t.sub(x[0], x[1])), vec![r(&[3, 4], 3), r(&[3, 4], 4)]),
        ("mul_broadcast".into(), Box::new(|t, x| t.mul(x[0], x[1])), vec![r(&[2, 3, 4], 5), r(&[3, 4], 6)]),
        ("scale".into(), Box::new(|t, x| t.scale(x[0], -1.7)), vec![r(&[5], 7)]),
        ("relu".into(), Box::new(|t, x| t.relu(x[0])), vec![away_from_zero(&[6], 8)]),
        ("gelu".into(), Box::new(|t, x| t.gelu(x[0])), vec![r(&[6], 9)]),
        ("sigmoid".into(), Box::new(|t, x| t.sigmoid(x[0])), vec![r(&[6], 10)]),
        ("sum".into(), Box::new(|t, x| t.sum(x[0])), vec![r(&[2, 3], 11)]),
        ("reshape".into(), Box::new(|t, x| t.reshape(x[0], [3, 2])), vec![r(&[2, 3], 12)]),
        ("matmul_batched".into(), Box::new(|t, x| t.matmul(x[0], x[1])), vec![r(&[2, 3, 4], 13), r(&[4, 5], 14)]),
        ("matmul_t".into(), Box::new(|t, x| t.matmul_t(x[0], x[1])), vec![r(&[2, 3, 4], 15), r(&[2, 5, 4], 16)]),
        (
            "masked_softmax".into(),
            Box::new(move |t, x| Ok(t.masked_softmax(x[0], mask.clone())?.0)),
            vec![r(&[4, 6], 17)],
        ),
        (
            "layer_norm".into(),
            Box::new(|t, x| t.layer_norm(x[0], x[1], x[2], 1e-5)),
            vec![r(&[3, 4], 18), r(&[4], 19), r(&[4], 20)],
        ),
        (
            "batch_norm_train".into(),
            Box::new(move |t, x| Ok(t.batch_norm(x[0], x[1], x[2], &bn, NormMode::Train, 0.1, 1e-5)?.0)),
            vec![r(&[2, 2, 2, 3], 21), r(&[3], 22), r(&[3], 23)],
        ),
        (
            "batch_norm_eval".into(),
            Box::new(move |t, x| Ok(t.batch_norm(x[0], x[1], x[2], &bn2, NormMode::Eval, 0.1, 1e-5)?.0)),
            vec![r(&[2, 2, 3], 24), r(&[3], 25), r(&[3], 26)],
        ),
        (
            "conv3x3".into(),
            Box::new(|t, x| t.conv2d(x[0], x[1], Some(x[2]))),
            vec![r(&[4, 5, 2], 27), r(&[3, 3, 2, 3], 28), r(&[3], 29)],
        ),
        ("row_map".into(), Box::new(move |t, x| t.row_map(x[0], map.clone(), 3)), vec![r(&[4, 3], 30)]),
        ("concat".into(), Box::new(|t, x| t.concat(&[x[0], x[1]])), vec![r(&[2, 3], 31), r(&[1, 3], 32)]),
        (
            "split_merge_heads".into(),
            Box::new(|t, x| {
                let h = t.split_heads(x[0], 2)?;
                let s = t.scale(h, 0.5)?;
                let m = t.mul(s, x[1])?;
                t.merge_heads(m)
            }),
            vec![r(&[3, 4], 33), r(&[2, 3, 2], 34)],
        ),
        (
            "focal_loss".into(),
            Box::new(move |t, x| t.focal_loss(x[0], focal_t.clone(), 0.25, 2.0, 6.0)),
            vec![r(&[6], 35)],
        ),
        (
            "smooth_l1".into(),
            Box::new(move |t, x| t.smooth_l1(x[0], sl1_t.clone(), sl1_m.clone())),
            vec![Tensor::new([6], vec![0.3, -0.6, 2.0, 1.4, -2.5, 0.1]).unwrap()],
        ),
    ];
    if fault {
        v.push(("injected_fault".into(), Box::new(|t, x| t.scale_with_faulty_grad(x[0], 2.0)), vec![r(&[4], 36)]));
    }
    v
}

fn jitter(store: &mut ParamStore, std: f64, seed: u64) {
    let mut r = rng(seed);
    let names: Vec<String> = store.iter().filter(|(_, e)| e.trainable).map(|(n, _)| n.to_string()).collect();
    for n in names {
        for v in store.tensor_mut(&n).unwrap().data_mut() {
            *v += std * r.gen_range(-1.0..1.0);
        }
    }
}

fn tiny_fusion() -> FusionConfig {
    FusionConfig {
        grid: BevGrid::new(8, 8, 1.0).unwrap(),
        transformer: TransformerConfig { channels: 8, heads: 2, window: 2, mlp_ratio: 2, global_mixing: GlobalMixing::CrossAgent },
        iterations: 2,
        compression_rate: 2,
        fov_radius_camera: 6.0,
        fov_radius_lidar: 10.0,
    }
}

fn trainable_names(store: &ParamStore) -> Vec<String> {
    store.iter().filter(|(_, e)| e.trainable).map(|(n, _)| n.to_string()).collect()
}

fn block_check(mode: AttentionMode, opts: GradCheckOptions) -> Result<GradCheckReport, CoreError> {
    let cfg = tiny_fusion();
    let t = &cfg.transformer;
    let mut s = ParamStore::new();
    init_block_params(&mut s, "blk", t, &mut rng(50))?;
    jitter(&mut s, 0.3, 51);
    let grid = cfg.grid;
    let poses = [Pose2::new(0.0, 0.0, 0.0), Pose2::new(2.0, 1.0, 0.4), Pose2::new(-1.5, 2.0, -0.3)];
    let mods = [Modality::Lidar, Modality::Camera, Modality::Lidar];
    let mut masks = Vec::new();
    for (k, p) in poses.iter().enumerate() {
        let m = if k == 0 {
            vec![true; grid.cells()]
        } else {
            masked_warp_plan(&grid, p, &poses[0], cfg.fov_radius(mods[k]))?.mask
        };
        masks.push(Arc::new(m));
        s.insert(format!("x.{k}"), "test", Tensor::randn([8, 8, 8], 1.0, &mut rng(52 + k as u64)), true)?;
    }
    let names = trainable_names(&s);
    grad_check_params(
        |tp, st| {
            let inputs = (0..3)
                .map(|k| Ok(AgentTokens { feature: tp.param(st, &format!("x.{k}"))?, modality: mods[k], mask: masks[k].clone() }))
                .collect::<Result<Vec<_>, CoreError>>()?;
            Ok(h3gat_block(tp, st, "blk", t, mode, &inputs, 0)?.0)
        },
        &s,
        &names,
        opts,
    )
}

fn fuse_check(opts: GradCheckOptions) -> Result<GradCheckReport, CoreError> {
    let cfg = tiny_fusion();
    let mut s = ParamStore::new();
    init_fusion_params(&mut s, &cfg, &mut rng(60))?;
    jitter(&mut s, 0.2, 61);
    for k in 0..2 {
        s.insert(format!("x.{k}"), "test", Tensor::randn([8, 8, 8], 1.0, &mut rng(62 + k as u64)), true)?;
    }
    let meta = |id, m, x, y, yaw| AgentMeta { id, modality: m, pose: Pose2::new(x, y, yaw) };
    let g = CollabGraph::new(1, vec![meta(1, Modality::Lidar, 0.0, 0.0, 0.0), meta(2, Modality::Camera, 2.0, 1.0, 0.5)], 70.0)?;
    let names = trainable_names(&s);
    grad_check_params(
        |tp, st| {
            let xs = vec![tp.param(st, "x.0")?, tp.param(st, "x.1")?];
            let (out, _) = fuse(tp, st, &g, &xs, &cfg, FuseOutputs::All)?;
            let outs: Vec<Var> = out.into_iter().flatten().collect();
            Ok(tp.concat(&outs)?)
        },
        &s,
        &names,
        opts,
    )
}

fn head_check(mode: NormMode, opts: GradCheckOptions) -> Result<GradCheckReport, CoreError> {
    let mut s = ParamStore::new();
    init_head_params(&mut s, 3, &mut rng(70))?;
    jitter(&mut s, 0.2, 71);
    s.insert("x", "test", Tensor::randn([2, 4, 4, 3], 1.0, &mut rng(72)), true)?;
    // Under batch statistics a conv bias feeding BN has an exactly zero
    // gradient; those entries are left out of the relative-error check.
    let names: Vec<String> = trainable_names(&s)
        .into_iter()
        .filter(|n| n == "x" || (n.contains(".lidar.") && !(mode == NormMode::Train && (n.ends_with("conv1.b") || n.ends_with("conv2.b")))))
        .collect();
    grad_check_params(
        |tp, st| {
            let x = tp.param(st, "x")?;
            let o = head_forward(tp, st, x, Modality::Lidar, mode, &HeadConfig::default())?;
            let c = tp.reshape(o.cls, [32])?;
            let r = tp.reshape(o.reg, [192])?;
            Ok(tp.concat(&[c, r])?)
        },
        &s,
        &names,
        opts,
    )
}

fn encoder_check(opts: GradCheckOptions) -> Result<GradCheckReport, CoreError> {
    let mut s = ParamStore::new();
    init_encoder_params(&mut s, 4, &mut rng(80))?;
    jitter(&mut s, 0.2, 81);
    s.insert("x", "test", Tensor::randn([5, 5, OBS_CHANNELS], 1.0, &mut rng(82)), true)?;
    let names: Vec<String> = trainable_names(&s).into_iter().filter(|n| n == "x" || n.contains(".camera.")).collect();
    grad_check_params(
        |tp, st| {
            let x = tp.param(st, "x")?;
            encode(tp, st, x, Modality::Camera)
        },
        &s,
        &names,
        opts,
    )
}

/// Run the whole suite; `inject_fault` adds an op whose backward is wrong.
pub fn run_suite(inject_fault: bool) -> Result<SuiteReport, CoreError> {
    let started = Instant::now();
    let full = GradCheckOptions::default();
    let sampled = GradCheckOptions { max_coords: Some(6), ..Default::default() };
    let mut results = Vec::new();
    let mut push = |name: &str, rep: GradCheckReport| {
        results.push(CheckResult { name: name.to_string(), max_rel_err: rep.max_rel_err, checked: rep.checked, passed: rep.max_rel_err < THRESHOLD });
    };
    for (name, f, inputs) in op_checks(inject_fault) {
        push(&format!("op/{name}"), grad_check(f, &inputs, full)?);
    }
    push("block/local", block_check(AttentionMode::Local, full)?);
    push("block/global", block_check(AttentionMode::Global, full)?);
    push("fuse/n2_8x8_c8_p2", fuse_check(sampled)?);
    push("head/train", head_check(NormMode::Train, full)?);
    push("head/eval", head_check(NormMode::Eval, full)?);
    push("encoder", encoder_check(full)?);
    Ok(SuiteReport { results, seconds: started.elapsed().as_secs_f64() })
}

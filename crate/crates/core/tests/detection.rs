use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use coperc_core::bbox::{rotated_iou, BoxBEV};
use coperc_core::detection::{
    assign_targets, average_precision, commit_running_stats, decode, decode_box, detection_loss, head_forward, init_head_params, late_fusion, nms, no_fusion,
    read_detections_csv, write_detections_csv, Detection, FocalNorm, HeadConfig, Targets, REG_CHANNELS,
};
use coperc_core::geometry::{BevGrid, Pose2};
use coperc_core::{CoreError, Modality};
use coperc_tensor::gradcheck::{grad_check_params, GradCheckOptions};
use coperc_tensor::{NormMode, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn head_store(c: usize, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    init_head_params(&mut s, c, &mut rng(seed)).unwrap();
    s
}

fn det(cx: f64, cy: f64, yaw: f64, score: f64) -> Detection {
    Detection { bbox: BoxBEV::new(cx, cy, 2.0, 4.5, yaw), score }
}

// ---- head ----

#[test]
fn head_output_shapes() {
    let s = head_store(4, 1);
    let cfg = HeadConfig::default();
    let mut tp = Tape::new();
    let x = tp.leaf(Tensor::randn([6, 5, 4], 1.0, &mut rng(2)));
    let out = head_forward(&mut tp, &s, x, Modality::Lidar, NormMode::Eval, &cfg).unwrap();
    assert_eq!(tp.shape(out.cls), &[6, 5, 1]);
    assert_eq!(tp.shape(out.reg), &[6, 5, REG_CHANNELS]);
    assert!(out.running.is_empty());
    let xb = tp.leaf(Tensor::randn([3, 6, 5, 4], 1.0, &mut rng(3)));
    let out = head_forward(&mut tp, &s, xb, Modality::Camera, NormMode::Train, &cfg).unwrap();
    assert_eq!(tp.shape(out.cls), &[3, 6, 5, 1]);
    assert_eq!(out.running.len(), 2);
}

#[test]
fn fresh_head_predicts_low_prior() {
    let s = head_store(4, 4);
    let mut tp = Tape::new();
    let x = tp.leaf(Tensor::randn([4, 4, 4], 1.0, &mut rng(5)));
    let out = head_forward(&mut tp, &s, x, Modality::Lidar, NormMode::Eval, &HeadConfig::default()).unwrap();
    for v in tp.value(out.cls).data() {
        let p = 1.0 / (1.0 + (-v).exp());
        assert!((p - 0.01).abs() < 0.005, "{p}");
    }
}

#[test]
fn heads_are_disjoint() {
    let mut s = head_store(4, 6);
    let x = Tensor::randn([5, 5, 4], 1.0, &mut rng(7));
    let run = |s: &ParamStore| {
        let mut tp = Tape::new();
        let v = tp.leaf(x.clone());
        let o = head_forward(&mut tp, s, v, Modality::Lidar, NormMode::Eval, &HeadConfig::default()).unwrap();
        (tp.value(o.cls).clone(), tp.value(o.reg).clone())
    };
    let before = run(&s);
    for n in s.names().filter(|n| n.contains(".camera.")).map(str::to_string).collect::<Vec<_>>() {
        for v in s.tensor_mut(&n).unwrap().data_mut() {
            *v += 0.3;
        }
    }
    let after = run(&s);
    assert!(before.0.bitwise_eq(&after.0) && before.1.bitwise_eq(&after.1));
}

#[test]
fn running_stats_commit() {
    let mut s = head_store(3, 8);
    let mut tp = Tape::new();
    let x = tp.leaf(Tensor::randn([2, 4, 4, 3], 2.0, &mut rng(9)));
    let out = head_forward(&mut tp, &s, x, Modality::Camera, NormMode::Train, &HeadConfig::default()).unwrap();
    commit_running_stats(&mut s, &out.running).unwrap();
    assert_ne!(s.tensor("head.camera.bn1.running_mean").unwrap().data(), &[0.0; 3]);
    assert!(!s.get("head.camera.bn1.running_var").unwrap().trainable);
    assert_eq!(s.tensor("head.lidar.bn1.running_mean").unwrap().data(), &[0.0; 3]);
}

#[test]
fn head_gradcheck() {
    let mut s = head_store(3, 10);
    let mut r = rng(11);
    let names: Vec<String> = s.iter().filter(|(n, e)| e.trainable && n.contains(".lidar.")).map(|(n, _)| n.to_string()).collect();
    for n in &names {
        for v in s.tensor_mut(n).unwrap().data_mut() {
            *v += r.gen_range(-0.2..0.2);
        }
    }
    s.insert("x", "test", Tensor::randn([2, 4, 4, 3], 1.0, &mut r), true).unwrap();
    let mut check = names.clone();
    check.push("x".into());
    for mode in [NormMode::Train, NormMode::Eval] {
        // Batch statistics cancel a conv bias feeding BN exactly; check those
        // for a vanishing gradient instead of a relative error.
        let check: Vec<String> = match mode {
            NormMode::Train => check.iter().filter(|n| !n.ends_with("conv1.b") && !n.ends_with("conv2.b")).cloned().collect(),
            NormMode::Eval => check.clone(),
        };
        let rep = grad_check_params(
            |tp, st| {
                let x = tp.param(st, "x")?;
                let o = head_forward(tp, st, x, Modality::Lidar, mode, &HeadConfig::default())?;
                let c = tp.reshape(o.cls, [32])?;
                let g = tp.reshape(o.reg, [192])?;
                Ok::<_, CoreError>(tp.concat(&[c, g])?)
            },
            &s,
            &check,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{mode:?}: {rep:?}");
    }
    let mut tp = Tape::new();
    let x = tp.param(&s, "x").unwrap();
    let o = head_forward(&mut tp, &s, x, Modality::Lidar, NormMode::Train, &HeadConfig::default()).unwrap();
    let l = tp.sum(o.reg).unwrap();
    let grads = tp.param_grads(&tp.backward(l).unwrap());
    for site in ["conv1.b", "conv2.b"] {
        assert!(grads[&format!("head.lidar.{site}")].data().iter().all(|v| v.abs() < 1e-10));
    }
}

// ---- targets ----

fn inside_oracle(b: &BoxBEV, x: f64, y: f64) -> bool {
    // Same side of all four counter-clockwise edges.
    let c = b.corners();
    (0..4).all(|i| {
        let (a, e) = (c[i], c[(i + 1) % 4]);
        (e.0 - a.0) * (y - a.1) - (e.1 - a.1) * (x - a.0) >= -1e-12
    })
}

#[test]
fn empty_scene_has_no_positives() {
    let t = assign_targets(&[], &BevGrid::new(8, 8, 1.0).unwrap(), &HeadConfig::default());
    assert_eq!(t.positives(), 0);
    assert!(t.cls.iter().all(|v| *v == 0.0) && t.reg.iter().all(|v| *v == 0.0));
}

#[test]
fn two_cell_box_marks_exactly_its_centers() {
    let g = BevGrid::new(8, 8, 1.0).unwrap();
    // Centers sit at ±0.5, ±1.5, ...; this box covers (±0.5, 0.5) only.
    let b = BoxBEV::new(0.0, 0.5, 0.8, 1.8, 0.0);
    let t = assign_targets(&[b], &g, &HeadConfig::default());
    let pos: Vec<usize> = (0..64).filter(|&i| t.pos[i]).collect();
    assert_eq!(pos, vec![3 * 8 + 4, 4 * 8 + 4]);
}

#[test]
fn rotated_box_matches_point_in_rect_oracle() {
    let g = BevGrid::new(16, 16, 0.5).unwrap();
    let boxes = [BoxBEV::new(0.3, -0.7, 1.9, 4.4, 0.6), BoxBEV::new(-2.6, 2.1, 2.1, 4.2, -1.2)];
    let t = assign_targets(&boxes, &g, &HeadConfig::default());
    for r in 0..16 {
        for c in 0..16 {
            let (x, y) = g.cell_center(r, c);
            let expect = boxes.iter().position(|b| inside_oracle(b, x, y));
            assert_eq!(t.owner[r * 16 + c], expect, "cell {r},{c}");
        }
    }
    assert!(t.positives() > 40);
}

#[test]
fn overlapping_boxes_split_by_nearest_center() {
    let g = BevGrid::new(8, 8, 1.0).unwrap();
    let a = BoxBEV::new(-0.6, 0.5, 1.0, 4.0, 0.0);
    let b = BoxBEV::new(1.1, 0.5, 1.0, 4.0, 0.0);
    let t = assign_targets(&[a, b], &g, &HeadConfig::default());
    for r in 0..8 {
        for c in 0..8 {
            let (x, y) = g.cell_center(r, c);
            let i = r * 8 + c;
            match (a.contains(x, y), b.contains(x, y)) {
                (true, true) => {
                    let near = if (a.cx - x).hypot(a.cy - y) < (b.cx - x).hypot(b.cy - y) { 0 } else { 1 };
                    assert_eq!(t.owner[i], Some(near));
                }
                (true, false) => assert_eq!(t.owner[i], Some(0)),
                (false, true) => assert_eq!(t.owner[i], Some(1)),
                (false, false) => assert_eq!(t.owner[i], None),
            }
        }
    }
}

#[test]
fn box_between_centers_claims_its_cell() {
    let g = BevGrid::new(8, 8, 2.0).unwrap();
    let b = BoxBEV::new(0.2, 0.3, 0.5, 1.0, 0.3);
    let t = assign_targets(&[b], &g, &HeadConfig::default());
    assert_eq!(t.positives(), 1);
    let (r, c) = g.cell_of(0.2, 0.3).unwrap();
    assert!(t.pos[r * 8 + c]);
}

#[test]
fn decoding_targets_recovers_boxes() {
    let g = BevGrid::new(24, 24, 0.4).unwrap();
    let cfg = HeadConfig::default();
    let boxes = [BoxBEV::new(1.3, -2.2, 1.9, 4.3, 1.4), BoxBEV::new(-3.0, 2.5, 2.2, 4.9, -0.8), BoxBEV::new(2.0, 3.0, 2.0, 4.0, FRAC_PI_2)];
    let t = assign_targets(&boxes, &g, &cfg);
    let mut checked = 0;
    for i in 0..g.cells() {
        if let Some(k) = t.owner[i] {
            let d = decode_box(&t.reg[i * REG_CHANNELS..(i + 1) * REG_CHANNELS], g.cell_center(i / 24, i % 24), g.resolution, &cfg);
            let b = boxes[k];
            for (x, y) in [(d.cx, b.cx), (d.cy, b.cy), (d.w, b.w), (d.l, b.l), (d.yaw, b.yaw)] {
                assert!((x - y).abs() < 1e-9, "{d:?} vs {b:?}");
            }
            checked += 1;
        }
    }
    assert!(checked > 50);
}

// ---- losses ----

fn one_positive(g: &BevGrid, cell: usize) -> Targets {
    let mut t = assign_targets(&[], g, &HeadConfig::default());
    t.cls[cell] = 1.0;
    t.pos[cell] = true;
    t.owner[cell] = Some(0);
    for k in 0..REG_CHANNELS {
        t.reg[cell * REG_CHANNELS + k] = 0.1 * k as f64;
    }
    t
}

#[test]
fn loss_matches_hand_values() {
    let g = BevGrid::new(4, 4, 1.0).unwrap();
    let t = one_positive(&g, 5);
    let mut cls = vec![-40.0; 16];
    cls[5] = 0.0;
    let mut reg = t.reg.clone();
    reg[5 * REG_CHANNELS + 2] += 0.5;
    let focal_one = 0.25 * 0.25 * 2f64.ln();
    for (norm, div) in [(FocalNorm::Cells, 16.0), (FocalNorm::Positives, 1.0)] {
        let cfg = HeadConfig { focal_norm: norm, ..Default::default() };
        let mut tp = Tape::new();
        let c = tp.leaf(Tensor::new([4, 4, 1], cls.clone()).unwrap());
        let r = tp.leaf(Tensor::new([4, 4, REG_CHANNELS], reg.clone()).unwrap());
        let parts = detection_loss(&mut tp, c, r, &[t.clone()], &cfg).unwrap();
        assert!((parts.cls - focal_one / div).abs() < 1e-12, "{}", parts.cls);
        assert!((parts.reg - 0.125 / 6.0).abs() < 1e-15);
        let total = tp.value(parts.total).data()[0];
        assert!((total - (parts.cls + 2.0 * parts.reg)).abs() < 1e-15);
    }
}

#[test]
fn no_positives_gives_zero_regression() {
    let g = BevGrid::new(4, 4, 1.0).unwrap();
    let t = assign_targets(&[], &g, &HeadConfig::default());
    let mut tp = Tape::new();
    let c = tp.leaf(Tensor::full([4, 4, 1], -30.0));
    let r = tp.leaf(Tensor::randn([4, 4, REG_CHANNELS], 1.0, &mut rng(12)));
    for norm in [FocalNorm::Cells, FocalNorm::Positives] {
        let parts = detection_loss(&mut tp, c, r, &[t.clone()], &HeadConfig { focal_norm: norm, ..Default::default() }).unwrap();
        assert_eq!(parts.reg, 0.0);
        assert!(parts.cls >= 0.0 && parts.cls < 1e-12);
        let g = tp.backward(parts.total).unwrap();
        assert!(g.get(r).map_or(true, |t| t.data().iter().all(|v| *v == 0.0)));
    }
}

#[test]
fn batched_loss_concatenates_targets() {
    let g = BevGrid::new(4, 4, 1.0).unwrap();
    let ts = [one_positive(&g, 2), one_positive(&g, 9)];
    let cls = Tensor::randn([2, 4, 4, 1], 1.0, &mut rng(13));
    let reg = Tensor::randn([2, 4, 4, REG_CHANNELS], 1.0, &mut rng(14));
    let cfg = HeadConfig::default();
    let mut tp = Tape::new();
    let c = tp.leaf(cls.clone());
    let r = tp.leaf(reg.clone());
    let both = detection_loss(&mut tp, c, r, &ts, &cfg).unwrap();
    let mut sum = (0.0, 0.0);
    for (k, t) in ts.iter().enumerate() {
        let ck = tp.leaf(Tensor::new([4, 4, 1], cls.data()[k * 16..(k + 1) * 16].to_vec()).unwrap());
        let rk = tp.leaf(Tensor::new([4, 4, REG_CHANNELS], reg.data()[k * 96..(k + 1) * 96].to_vec()).unwrap());
        let p = detection_loss(&mut tp, ck, rk, std::slice::from_ref(t), &cfg).unwrap();
        sum.0 += p.cls / 2.0;
        sum.1 += p.reg / 2.0;
    }
    assert!((both.cls - sum.0).abs() < 1e-12 && (both.reg - sum.1).abs() < 1e-12);
}

// ---- decode ----

#[test]
fn confident_negatives_decode_to_nothing() {
    let g = BevGrid::new(6, 6, 1.0).unwrap();
    assert!(decode(&[-50.0; 36], &[0.0; 216], &g, 0.1, &HeadConfig::default()).is_empty());
}

#[test]
fn exact_targets_decode_to_box() {
    let g = BevGrid::new(8, 8, 0.5).unwrap();
    let cfg = HeadConfig::default();
    let b = BoxBEV::new(0.4, -0.3, 2.0, 4.4, 0.9);
    let t = assign_targets(&[b], &g, &cfg);
    let cell = t.pos.iter().position(|p| *p).unwrap();
    let mut cls = vec![-20.0; 64];
    cls[cell] = 8.0;
    let dets = decode(&cls, &t.reg, &g, 0.5, &cfg);
    assert_eq!(dets.len(), 1);
    let d = dets[0].bbox;
    for (x, y) in [(d.cx, b.cx), (d.cy, b.cy), (d.w, b.w), (d.l, b.l), (d.yaw, b.yaw)] {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn decoded_scores_are_sorted() {
    let g = BevGrid::new(6, 6, 1.0).unwrap();
    let cls: Vec<f64> = Tensor::randn([36], 2.0, &mut rng(15)).into_data();
    let reg = Tensor::randn([216], 1.0, &mut rng(16)).into_data();
    let dets = decode(&cls, &reg, &g, 0.2, &HeadConfig::default());
    assert!(!dets.is_empty());
    assert!(dets.windows(2).all(|w| w[0].score >= w[1].score));
    assert!(dets.iter().all(|d| d.score >= 0.2 && d.score < 1.0 && d.bbox.w <= d.bbox.l));
    // Extreme size logits stay finite.
    let huge = decode(&[5.0], &[0.0, 0.0, 1e3, -1e3, 0.0, 1.0], &BevGrid::new(1, 1, 1.0).unwrap(), 0.1, &HeadConfig::default());
    assert!(huge[0].bbox.area().is_finite() && huge[0].bbox.area() > 0.0);
}

// ---- IoU ----

/// IoU by counting an n×n raster of sample points over the joint bounds.
fn raster_iou(a: &BoxBEV, b: &BoxBEV, n: usize) -> f64 {
    let pts: Vec<(f64, f64)> = a.corners().into_iter().chain(b.corners()).collect();
    let (x0, x1) = pts.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    let (y0, y1) = pts.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    let (dx, dy) = ((x1 - x0) / n as f64, (y1 - y0) / n as f64);
    let (mut inter, mut union) = (0u64, 0u64);
    for i in 0..n {
        let x = x0 + (i as f64 + 0.5) * dx;
        for j in 0..n {
            let y = y0 + (j as f64 + 0.5) * dy;
            let (ia, ib) = (inside_oracle(a, x, y), inside_oracle(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    inter as f64 / union as f64
}

#[test]
fn iou_reference_cases() {
    let a = BoxBEV::new(0.0, 0.0, 1.0, 1.0, 0.0);
    assert_eq!(rotated_iou(&a, &a), 1.0);
    assert_eq!(rotated_iou(&a, &BoxBEV::new(3.0, 0.0, 1.0, 1.0, 0.0)), 0.0);
    let shifted = BoxBEV::new(0.5, 0.0, 1.0, 1.0, 0.0);
    assert!((rotated_iou(&a, &shifted) - 1.0 / 3.0).abs() < 1e-12);
    let turned = BoxBEV::new(0.0, 0.0, 1.0, 1.0, FRAC_PI_4);
    let iou = rotated_iou(&a, &turned);
    assert!((iou - raster_iou(&a, &turned, 2000)).abs() < 1e-3);
    // Regular octagon: intersection 2(√2 − 1).
    let oct = 2.0 * (2f64.sqrt() - 1.0);
    assert!((iou - oct / (2.0 - oct)).abs() < 1e-12);
    assert_eq!(rotated_iou(&a, &BoxBEV::new(0.0, 0.0, 0.0, 1.0, 0.0)), 0.0);
}

#[test]
fn iou_matches_raster_on_random_pairs() {
    let mut r = rng(17);
    for _ in 0..10 {
        let a = BoxBEV::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(1.0..2.5), r.gen_range(3.0..5.0), r.gen_range(-PI..PI));
        let b = BoxBEV::new(a.cx + r.gen_range(-2.0..2.0), a.cy + r.gen_range(-2.0..2.0), r.gen_range(1.0..2.5), r.gen_range(3.0..5.0), r.gen_range(-PI..PI));
        assert!((rotated_iou(&a, &b) - raster_iou(&a, &b, 1000)).abs() < 3e-3);
    }
}

fn arb_box() -> impl Strategy<Value = BoxBEV> {
    (-3.0f64..3.0, -3.0f64..3.0, 0.5f64..3.0, 0.5f64..5.0, -PI..PI).prop_map(|(x, y, w, l, yaw)| BoxBEV::new(x, y, w, l, yaw))
}

proptest! {
    #[test]
    fn iou_is_symmetric(a in arb_box(), b in arb_box()) {
        let (ab, ba) = (rotated_iou(&a, &b), rotated_iou(&b, &a));
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn iou_is_rigid_invariant(a in arb_box(), b in arb_box(), x in -20.0f64..20.0, y in -20.0f64..20.0, yaw in -PI..PI) {
        let frame = Pose2::new(x, y, yaw);
        let (ta, tb) = (a.transform(&frame, &Pose2::identity()), b.transform(&frame, &Pose2::identity()));
        prop_assert!((rotated_iou(&a, &b) - rotated_iou(&ta, &tb)).abs() < 1e-9);
    }
}

// ---- NMS ----

#[test]
fn nms_cases() {
    let kept = nms(&[det(0.0, 0.0, 0.0, 0.8), det(0.0, 0.0, 0.0, 0.9)], 0.15);
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].score, 0.9);
    assert_eq!(nms(&[det(0.0, 0.0, 0.0, 0.8), det(10.0, 0.0, 0.0, 0.9)], 0.15).len(), 2);
    // Suppression is inclusive at the threshold.
    let a = Detection { bbox: BoxBEV::new(0.0, 0.0, 1.0, 1.0, 0.0), score: 0.9 };
    let b = Detection { bbox: BoxBEV::new(0.5, 0.0, 1.0, 1.0, 0.0), score: 0.8 };
    assert_eq!(nms(&[a, b], rotated_iou(&a.bbox, &b.bbox)).len(), 1);
}

#[test]
fn nms_ignores_input_order() {
    let mut r = rng(18);
    let dets: Vec<Detection> = (0..30).map(|k| det(r.gen_range(-8.0..8.0), r.gen_range(-8.0..8.0), r.gen_range(-PI..PI), 0.01 + k as f64 * 0.03)).collect();
    let base = nms(&dets, 0.15);
    for seed in 0..5 {
        let mut shuffled = dets.clone();
        let mut r = rng(100 + seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, r.gen_range(0..=i));
        }
        assert_eq!(nms(&shuffled, 0.15), base);
    }
}

// ---- AP ----

#[test]
fn ap_reference_cases() {
    let gt = BoxBEV::new(0.0, 0.0, 2.0, 4.5, 0.0);
    assert_eq!(average_precision(&[vec![det(0.0, 0.0, 0.0, 0.9)]], &[vec![gt]], 0.5), 1.0);
    assert_eq!(average_precision(&[vec![det(20.0, 0.0, 0.0, 0.9)]], &[vec![gt]], 0.5), 0.0);
    let g2 = BoxBEV::new(10.0, 0.0, 2.0, 4.5, 0.0);
    let dets = vec![det(0.0, 0.0, 0.0, 0.9), det(-10.0, 0.0, 0.0, 0.8), det(10.0, 0.0, 0.0, 0.7)];
    assert!((average_precision(&[dets], &[vec![gt, g2]], 0.5) - 5.0 / 6.0).abs() < 1e-12);
    assert_eq!(average_precision(&[vec![]], &[vec![]], 0.5), 1.0);
    assert_eq!(average_precision(&[vec![det(0.0, 0.0, 0.0, 0.5)]], &[vec![]], 0.5), 0.0);
    assert_eq!(average_precision(&[vec![]], &[vec![gt]], 0.5), 0.0);
}

#[test]
fn ap_pools_scenes_and_matches_each_gt_once() {
    let gt = BoxBEV::new(0.0, 0.0, 2.0, 4.5, 0.0);
    // A duplicate is a false positive; a box in another scene does not match.
    let dets = vec![vec![det(0.0, 0.0, 0.0, 0.9), det(0.1, 0.0, 0.0, 0.8)], vec![det(0.0, 0.0, 0.0, 0.7)]];
    let ap = average_precision(&dets, &[vec![gt], vec![]], 0.5);
    assert!((ap - 1.0).abs() < 1e-12);
    let ap = average_precision(&dets, &[vec![gt], vec![gt]], 0.5);
    // PR: (0.5, 1), (0.5, 0.5), (1.0, 2/3) -> 0.5·1 + 0.5·(2/3)
    assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn ap_never_increases_with_threshold(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let gts: Vec<Vec<BoxBEV>> = (0..3).map(|_| (0..r.gen_range(0..4)).map(|k| BoxBEV::new(k as f64 * 8.0, r.gen_range(-2.0..2.0), 2.0, 4.5, r.gen_range(-0.3..0.3))).collect()).collect();
        let dets: Vec<Vec<Detection>> = gts
            .iter()
            .map(|g| {
                let mut d: Vec<Detection> = g.iter().map(|b| det(b.cx + r.gen_range(-1.0..1.0), b.cy + r.gen_range(-1.0..1.0), b.yaw + r.gen_range(-0.4..0.4), r.gen_range(0.1..1.0))).collect();
                d.push(det(r.gen_range(-5.0..30.0), r.gen_range(-5.0..5.0), 0.0, r.gen_range(0.1..1.0)));
                d
            })
            .collect();
        let mut last = f64::INFINITY;
        for t in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let ap = average_precision(&dets, &gts, t);
            prop_assert!(ap <= last + 1e-12);
            last = ap;
        }
    }
}

// ---- baselines and CSV ----

#[test]
fn late_fusion_single_agent_equals_no_fusion() {
    let ego = Pose2::new(3.0, -2.0, 0.4);
    let dets = vec![det(0.0, 0.0, 0.2, 0.9), det(10.0, 4.0, 1.0, 0.6)];
    let late = late_fusion(&[(ego, dets.clone())], &ego, &HeadConfig::default());
    let none = no_fusion(&dets);
    assert_eq!(late.len(), none.len());
    for (a, b) in late.iter().zip(&none) {
        assert!((a.bbox.cx - b.bbox.cx).abs() < 1e-12 && (a.bbox.cy - b.bbox.cy).abs() < 1e-12 && a.score == b.score);
    }
}

#[test]
fn late_fusion_merges_duplicates_and_keeps_occluded() {
    let ego = Pose2::identity();
    let other = Pose2::new(16.0, 12.0, -FRAC_PI_2);
    let front = BoxBEV::new(8.0, 0.0, 2.0, 4.5, FRAC_PI_2);
    let back = BoxBEV::new(16.0, 0.5, 1.9, 4.0, FRAC_PI_2 + 0.1);
    let to_other = |b: &BoxBEV| b.transform(&ego, &other);
    let per_agent = vec![
        (ego, vec![Detection { bbox: front, score: 0.9 }]),
        (other, vec![Detection { bbox: to_other(&front), score: 0.7 }, Detection { bbox: to_other(&back), score: 0.8 }]),
    ];
    let out = late_fusion(&per_agent, &ego, &HeadConfig::default());
    assert_eq!(out.len(), 2);
    assert_eq!(out[0].score, 0.9);
    assert!((out[1].bbox.cx - back.cx).abs() < 1e-9 && (out[1].bbox.cy - back.cy).abs() < 1e-9);
}

#[test]
fn csv_roundtrip() {
    let scenes = vec![vec![det(1.23456789, -2.0, 0.3, 0.87654321), det(4.0, 5.0, -1.2, 0.5)], vec![], vec![det(-7.5, 0.25, 1.5, 0.125)]];
    let mut buf = Vec::new();
    write_detections_csv(&mut buf, &scenes).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("scene,score,cx,cy,w,l,yaw\n0,0.876543,1.234568,"));
    let back = read_detections_csv(buf.as_slice(), 3).unwrap();
    assert_eq!(back.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 0, 1]);
    for (a, b) in back.iter().flatten().zip(scenes.iter().flatten()) {
        for (x, y) in [(a.score, b.score), (a.bbox.cx, b.bbox.cx), (a.bbox.cy, b.bbox.cy), (a.bbox.w, b.bbox.w), (a.bbox.l, b.bbox.l), (a.bbox.yaw, b.bbox.yaw)] {
            assert!((x - y).abs() <= 5e-7);
        }
    }
    assert!(matches!(read_detections_csv(buf.as_slice(), 2), Err(CoreError::Format(_))));
}

mod common;

use common::*;
use distill3d_core::eval::{evaluate, Detection, EvalConfig, MetricsReport};
use distill3d_core::scene::Box3D;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

type Case = (Vec<Vec<Detection>>, Vec<Vec<Box3D>>);

/// Noisy copies of the ground truth plus clutter, all scores distinct.
fn case(seed: u64, scenes: usize) -> Case {
    let mut r = rng(seed);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut next_score = 0usize;
    let mut score = |r: &mut ChaCha8Rng| {
        next_score += 1;
        r.gen_range(0.0..0.9) + next_score as f64 * 1e-6
    };
    for _ in 0..scenes {
        let n = r.gen_range(0..5);
        let gt: Vec<Box3D> = (0..n).map(|i| random_box(&mut r, 5.0, i % 4)).collect();
        let mut p = Vec::new();
        for g in &gt {
            if r.gen_bool(0.8) {
                let mut b = *g;
                b.x += r.gen_range(-0.4..0.4);
                b.y += r.gen_range(-0.4..0.4);
                p.push(Detection { bbox: b, score: score(&mut r), head: 0 });
            }
        }
        for _ in 0..r.gen_range(0..3) {
            let c = r.gen_range(0..4);
            let b = random_box(&mut r, 5.0, c);
            p.push(Detection { bbox: b, score: score(&mut r), head: 0 });
        }
        preds.push(p);
        gts.push(gt);
    }
    (preds, gts)
}

fn run(preds: &[Vec<Detection>], gts: &[Vec<Box3D>]) -> MetricsReport {
    evaluate(preds, gts, &EvalConfig::default(), 4).unwrap()
}

fn close(a: &MetricsReport, b: &MetricsReport) -> bool {
    let flat = |m: &MetricsReport| -> Vec<f64> {
        let mut v: Vec<f64> = m.class_ap.iter().flatten().flatten().copied().collect();
        v.extend([m.map_lite, m.nds_lite, m.tp_errors.translation, m.tp_errors.scale, m.tp_errors.orientation]);
        v
    };
    let (x, y) = (flat(a), flat(b));
    x.len() == y.len() && x.iter().zip(&y).all(|(p, q)| (p - q).abs() < 1e-12)
}

proptest! {
    #[test]
    fn invariant_to_prediction_and_scene_order(seed in 0u64..10_000) {
        let (mut preds, mut gts) = case(seed, 6);
        let base = run(&preds, &gts);
        let mut r = rng(seed ^ 0xabc);
        for p in &mut preds {
            p.shuffle(&mut r);
        }
        for g in &mut gts {
            g.shuffle(&mut r);
        }
        let mut order: Vec<usize> = (0..preds.len()).collect();
        order.shuffle(&mut r);
        let preds: Vec<_> = order.iter().map(|&i| preds[i].clone()).collect();
        let gts: Vec<_> = order.iter().map(|&i| gts[i].clone()).collect();
        prop_assert!(close(&base, &run(&preds, &gts)));
    }

    #[test]
    fn appending_a_lowest_scored_detection_never_lowers_ap(seed in 0u64..10_000) {
        let (mut preds, gts) = case(seed, 5);
        let base = run(&preds, &gts);
        let mut r = rng(seed + 1);
        let c = r.gen_range(0..4);
        preds[0].push(Detection { bbox: random_box(&mut r, 5.0, c), score: -1.0, head: 0 });
        let more = run(&preds, &gts);
        for (a, b) in base.class_ap.iter().zip(&more.class_ap) {
            if let (Some(a), Some(b)) = (a, b) {
                for (x, y) in a.iter().zip(b) {
                    prop_assert!(y + 1e-12 >= *x);
                }
            }
        }
    }

    #[test]
    fn metrics_are_bounded(seed in 0u64..10_000) {
        let (preds, gts) = case(seed, 4);
        let m = run(&preds, &gts);
        prop_assert!((0.0..=1.0).contains(&m.map_lite));
        prop_assert!((0.0..=1.0).contains(&m.nds_lite));
        for ap in m.class_ap.iter().flatten().flatten() {
            prop_assert!((0.0..=1.0).contains(ap));
        }
    }
}

#[test]
fn exact_predictions_score_one() {
    let (_, gts) = case(5, 8);
    let preds: Vec<Vec<Detection>> = gts
        .iter()
        .map(|g| g.iter().map(|&b| Detection { bbox: b, score: 0.9, head: 0 }).collect())
        .collect();
    let m = run(&preds, &gts);
    assert!((m.map_lite - 1.0).abs() < 1e-12);
    assert!((m.nds_lite - 1.0).abs() < 1e-12);
}

#[test]
fn report_json_is_stable() {
    let (preds, gts) = case(9, 6);
    let a = run(&preds, &gts).to_json().unwrap();
    let b = run(&preds, &gts).to_json().unwrap();
    assert_eq!(a, b);
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert!(v.get("map_lite").is_some() && v.get("nds_lite").is_some());
}

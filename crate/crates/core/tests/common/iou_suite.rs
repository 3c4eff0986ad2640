//! Sampling oracle for rotated BEV IoU and structural checks of NMS.

use distill3d_core::eval::{nms, rotated_iou, Detection};
use distill3d_core::scene::Box3D;
use rand::Rng;

use super::*;

/// Footprint test in the box frame: length along the heading, width across.
fn inside(b: &Box3D, x: f64, y: f64) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let (dx, dy) = (x - b.x, y - b.y);
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    u.abs() <= b.l / 2.0 && v.abs() <= b.w / 2.0
}

/// Midpoint-rule estimate of IoU on an `n x n` lattice over the joint extent.
pub fn sampled_iou(a: &Box3D, b: &Box3D, n: usize) -> f64 {
    let ra = 0.5 * a.l.hypot(a.w);
    let rb = 0.5 * b.l.hypot(b.w);
    let (x0, x1) = ((a.x - ra).min(b.x - rb), (a.x + ra).max(b.x + rb));
    let (y0, y1) = ((a.y - ra).min(b.y - rb), (a.y + ra).max(b.y + rb));
    let (mut both, mut either) = (0usize, 0usize);
    for i in 0..n {
        let x = x0 + (i as f64 + 0.5) / n as f64 * (x1 - x0);
        for j in 0..n {
            let y = y0 + (j as f64 + 0.5) / n as f64 * (y1 - y0);
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            both += (ia && ib) as usize;
            either += (ia || ib) as usize;
        }
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

/// A box near `a`, so that the pair usually overlaps.
pub fn neighbour(r: &mut ChaCha8Rng, a: &Box3D) -> Box3D {
    let mut b = random_box(r, 1.0, 0);
    b.x = a.x + r.gen_range(-1.5..1.5);
    b.y = a.y + r.gen_range(-1.5..1.5);
    b
}

pub struct IouOutcome {
    pub pairs: usize,
    pub overlapping: usize,
    pub max_err: f64,
    pub max_asymmetry: f64,
}

pub fn run_iou_oracle(pairs: usize, seed: u64) -> IouOutcome {
    let mut r = rng(seed);
    let mut out = IouOutcome {
        pairs,
        overlapping: 0,
        max_err: 0.0,
        max_asymmetry: 0.0,
    };
    for _ in 0..pairs {
        let a = random_box(&mut r, 2.0, 0);
        let b = neighbour(&mut r, &a);
        let iou = rotated_iou(&a, &b);
        out.overlapping += (iou > 0.0) as usize;
        out.max_err = out.max_err.max((iou - sampled_iou(&a, &b, 600)).abs());
        out.max_asymmetry = out.max_asymmetry.max((iou - rotated_iou(&b, &a)).abs());
    }
    out
}

pub fn random_detections(r: &mut ChaCha8Rng, n: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let class_id = r.gen_range(0..4);
            Detection {
                bbox: random_box(r, 2.0, class_id),
                score: (r.gen_range(0..20) as f64) / 20.0,
                head: 0,
            }
        })
        .collect()
}

/// Kept boxes pairwise overlap at most `thresh`, and each dropped box
/// overlaps a kept box of at least its score by more than `thresh`.
pub fn nms_violations(dets: &[Detection], thresh: f64) -> usize {
    let kept = nms(dets, thresh);
    let mut bad = 0;
    for (i, a) in kept.iter().enumerate() {
        for b in &kept[i + 1..] {
            bad += (rotated_iou(&a.bbox, &b.bbox) > thresh) as usize;
        }
    }
    for d in dets {
        if kept.iter().any(|k| k == d) {
            continue;
        }
        let covered = kept
            .iter()
            .any(|k| k.score >= d.score && rotated_iou(&k.bbox, &d.bbox) > thresh);
        bad += (!covered) as usize;
    }
    bad
}

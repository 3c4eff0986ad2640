//! Peak decoding, NMS, center-distance mAP and the FLOPs accountant.

mod flops;
mod iou;
mod metrics;

pub use flops::{flops_report, flops_voxel_distill, sci3, FlopsRow};
pub use iou::{bev_intersection, clip_polygon, polygon_area, rotated_iou};
pub use metrics::{evaluate, scaled_thresholds, EvalConfig, MetricsReport};

use serde::{Deserialize, Serialize};

use crate::detector::{HeadSpec, NUM_REG};
use crate::scene::{wrap_angle, Box3D};
use crate::tensor::Tensor;
use crate::voxel::GridSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub score: f64,
    pub head: usize,
}

/// Inverse of the regression encoding at BEV cell `(cx, cy)`.
pub fn decode_box(reg: &[f64], grid: &GridSpec, cx: usize, cy: usize, class_id: usize) -> Box3D {
    let cs = grid.bev_cell_size();
    Box3D {
        x: grid.origin[0] + (cx as f64 + reg[0]) * cs[0],
        y: grid.origin[1] + (cy as f64 + reg[1]) * cs[1],
        z: reg[2],
        w: reg[3].clamp(-10.0, 10.0).exp(),
        l: reg[4].clamp(-10.0, 10.0).exp(),
        h: reg[5].clamp(-10.0, 10.0).exp(),
        vx: reg[6],
        vy: reg[7],
        yaw: wrap_angle(reg[8].atan2(reg[9])),
        class_id,
    }
}

/// 3x3 local maxima above `score_thresh` in every class heatmap, sorted by
/// descending score and truncated to `top_n`. Ties keep head/class/cell order.
pub fn decode(
    heatmaps: &[Tensor],
    regression: &[Tensor],
    heads: &HeadSpec,
    grid: &GridSpec,
    top_n: usize,
    score_thresh: f64,
) -> Vec<Detection> {
    let (h, w) = grid.bev_dims();
    let mut dets = Vec::new();
    for (head, (hm, reg)) in heatmaps.iter().zip(regression).enumerate() {
        let k = heads.groups[head].len();
        let data = hm.data();
        for slot in 0..k {
            let at = |y: usize, x: usize| data[(y * w + x) * k + slot];
            for y in 0..h {
                for x in 0..w {
                    let v = at(y, x);
                    if v <= score_thresh {
                        continue;
                    }
                    let mut peak = true;
                    'nb: for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let (yy, xx) = (y as isize + dy, x as isize + dx);
                            if (dy, dx) == (0, 0) || yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                continue;
                            }
                            if at(yy as usize, xx as usize) > v {
                                peak = false;
                                break 'nb;
                            }
                        }
                    }
                    if !peak {
                        continue;
                    }
                    let cell = y * w + x;
                    let r = &reg.data()[cell * NUM_REG..(cell + 1) * NUM_REG];
                    dets.push(Detection {
                        bbox: decode_box(r, grid, x, y, heads.groups[head][slot]),
                        score: v,
                        head,
                    });
                }
            }
        }
    }
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    dets.truncate(top_n);
    dets
}

/// Greedy class-agnostic NMS on rotated BEV IoU. Equal scores keep input order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut keep: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        if keep.iter().all(|k| rotated_iou(&k.bbox, &d.bbox) <= iou_thresh) {
            keep.push(*d);
        }
    }
    keep
}

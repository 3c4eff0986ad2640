//! Ground-truth heatmaps/regression targets and the supervised losses.

use super::{DetectorOutputs, HeadSpec};
use crate::error::Result;
use crate::scene::Scene;
use crate::tensor::{Graph, Tensor, Var};
use crate::voxel::GridSpec;

/// Regression attributes per cell: x, y, z, w, l, h, vx, vy, sin, cos.
pub const NUM_REG: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct GtTargets {
    /// Per head, `(H*W) x K_head` Gaussian heatmap.
    pub heatmaps: Vec<Tensor>,
    /// Per head, `(H*W) x 10` regression targets (valid at masked cells only).
    pub regression: Vec<Tensor>,
    /// Per head, sorted center cells that carry regression targets.
    pub mask: Vec<Vec<usize>>,
    /// Boxes whose center fell outside the BEV map.
    pub skipped: usize,
}

/// Gaussian radius in cells for a box footprint.
pub fn gaussian_radius(w: f64, l: f64, cell: f64) -> f64 {
    (w.min(l) / (3.0 * cell)).max(1.0)
}

/// Regression target vector of a box whose center lies in BEV cell `(cx, cy)`.
pub fn encode_box(b: &crate::scene::Box3D, grid: &GridSpec, cx: usize, cy: usize) -> [f64; NUM_REG] {
    let (u, v) = grid.bev_continuous(b.x, b.y);
    [
        u - cx as f64,
        v - cy as f64,
        b.z,
        b.w.ln(),
        b.l.ln(),
        b.h.ln(),
        b.vx,
        b.vy,
        b.yaw.sin(),
        b.yaw.cos(),
    ]
}

pub fn make_gt_targets(scene: &Scene, heads: &HeadSpec, grid: &GridSpec) -> GtTargets {
    let (h, w) = grid.bev_dims();
    let cell = grid.bev_cell_size()[0];
    let mut heatmaps: Vec<Vec<f64>> = heads.groups.iter().map(|g| vec![0.0; h * w * g.len()]).collect();
    let mut regression: Vec<Vec<f64>> = heads.groups.iter().map(|_| vec![0.0; h * w * NUM_REG]).collect();
    let mut mask: Vec<Vec<usize>> = vec![Vec::new(); heads.num_heads()];
    let mut skipped = 0;

    for b in &scene.boxes {
        let Some((head, slot)) = heads.locate(b.class_id) else {
            skipped += 1;
            continue;
        };
        let (u, v) = grid.bev_continuous(b.x, b.y);
        if !(u >= 0.0 && v >= 0.0 && u < w as f64 && v < h as f64) {
            skipped += 1;
            continue;
        }
        let (cx, cy) = (u.floor() as usize, v.floor() as usize);
        let radius = gaussian_radius(b.w, b.l, cell);
        let sigma = (2.0 * radius + 1.0) / 6.0;
        let reach = radius.ceil() as isize;
        let k = heads.groups[head].len();
        let hm = &mut heatmaps[head];
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (y, x) = (cy as isize + dy, cx as isize + dx);
                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    continue;
                }
                let val = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                let idx = (y as usize * w + x as usize) * k + slot;
                hm[idx] = hm[idx].max(val);
            }
        }
        let center = cy * w + cx;
        regression[head][center * NUM_REG..(center + 1) * NUM_REG]
            .copy_from_slice(&encode_box(b, grid, cx, cy));
        if !mask[head].contains(&center) {
            mask[head].push(center);
        }
    }
    for m in &mut mask {
        m.sort_unstable();
    }
    GtTargets {
        heatmaps: heads
            .groups
            .iter()
            .zip(heatmaps)
            .map(|(g, d)| Tensor::matrix(h * w, g.len(), d).expect("shape"))
            .collect(),
        regression: regression
            .into_iter()
            .map(|d| Tensor::matrix(h * w, NUM_REG, d).expect("shape"))
            .collect(),
        mask,
        skipped,
    }
}

/// `(L_cls, L_reg)`: focal loss summed over heads, and mean smooth-L1 over
/// all regression attributes at masked center cells (0 when there are none).
pub fn supervised_loss(
    g: &mut Graph,
    out: &DetectorOutputs,
    targets: &GtTargets,
    beta: f64,
) -> Result<(Var, Var)> {
    let mut cls_terms = Vec::new();
    for (logits, hm) in out.heatmap_logits.iter().zip(&targets.heatmaps) {
        cls_terms.push(g.focal_loss(*logits, hm.data())?);
    }
    let mut l_cls = g.constant(Tensor::scalar(0.0));
    for t in cls_terms {
        l_cls = g.add(l_cls, t)?;
    }

    let total_cells: usize = targets.mask.iter().map(Vec::len).sum();
    let mut l_reg = g.constant(Tensor::scalar(0.0));
    if total_cells > 0 {
        for (head, cells) in targets.mask.iter().enumerate() {
            if cells.is_empty() {
                continue;
            }
            let pred = g.gather_rows(out.regression[head], cells)?;
            let mut tgt = Vec::with_capacity(cells.len() * NUM_REG);
            for &c in cells {
                tgt.extend_from_slice(targets.regression[head].row(c));
            }
            let tgt = g.constant(Tensor::matrix(cells.len(), NUM_REG, tgt)?);
            let l = g.smooth_l1(pred, tgt, beta)?;
            let s = g.sum(l);
            l_reg = g.add(l_reg, s)?;
        }
        l_reg = g.scale(l_reg, 1.0 / (total_cells * NUM_REG) as f64);
    }
    Ok((l_cls, l_reg))
}

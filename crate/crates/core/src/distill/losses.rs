use rand::seq::index::sample;

use super::{zero, BevCell, CrucialSets, DistillConfig};
use crate::detector::{seeded_rng, NUM_REG};
use crate::error::{Error, Result};
use crate::scene::{Box3D, Scene};
use crate::tensor::{Graph, SparseRows, Tensor, Var};
use crate::voxel::{idw_weights, CrucialVoxelSets, GridSpec, SparseVoxelGrid};

fn rows_by_head(cells: &[BevCell], num_heads: usize, width: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); num_heads];
    for c in cells {
        out[c.head].push(c.y * width + c.x);
    }
    out
}

/// `sum over rows of smooth_l1(student[rows] - teacher[rows])`, optionally
/// weighted elementwise by a per-column vector.
fn gathered_smooth_l1(
    g: &mut Graph,
    student: Var,
    teacher: &Tensor,
    rows: &[usize],
    col_weights: Option<&[f64]>,
    beta: f64,
) -> Result<Var> {
    let c = teacher.cols();
    if g.value(student).cols() != c {
        return Err(Error::ShapeMismatch {
            op: "distillation",
            lhs: g.shape(student).to_vec(),
            rhs: teacher.shape().to_vec(),
        });
    }
    let s = g.gather_rows(student, rows)?;
    let mut t = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        t.extend_from_slice(teacher.row(r));
    }
    let t = g.constant(Tensor::matrix(rows.len(), c, t)?);
    let mut l = g.smooth_l1(s, t, beta)?;
    if let Some(w) = col_weights {
        let tiled: Vec<f64> = (0..rows.len()).flat_map(|_| w.iter().copied()).collect();
        let w = g.constant(Tensor::matrix(rows.len(), c, tiled)?);
        l = g.mul(l, w)?;
    }
    Ok(g.sum(l))
}

fn check_heads(g: &Graph, student: &[Var], teacher: &[Tensor]) -> Result<()> {
    if student.len() != teacher.len() {
        return Err(Error::Config(format!(
            "{} student heads vs {} teacher heads",
            student.len(),
            teacher.len()
        )));
    }
    for (s, t) in student.iter().zip(teacher) {
        if g.shape(*s) != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "response distillation",
                lhs: g.shape(*s).to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Summed class-averaged smooth-L1 over `cells`, `None` when empty.
fn response_set_sum(
    g: &mut Graph,
    h_s: &[Var],
    h_m: &[Tensor],
    cells: &[BevCell],
    width: usize,
    beta: f64,
) -> Result<Option<Var>> {
    if cells.is_empty() {
        return Ok(None);
    }
    let mut acc = zero(g);
    for (head, rows) in rows_by_head(cells, h_s.len(), width).iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let s = gathered_smooth_l1(g, h_s[head], &h_m[head], rows, None, beta)?;
        let s = g.scale(s, 1.0 / h_m[head].cols() as f64);
        acc = g.add(acc, s)?;
    }
    Ok(Some(acc))
}

/// Classification response loss: `w_r1/|TP|` times the TP sum plus
/// `w_r2/|FP ∪ FN|` times the FP/FN sum; each cell contributes its
/// smooth-L1 averaged over the head's classes. Empty sets contribute 0.
pub fn response_cls_loss(
    g: &mut Graph,
    h_s: &[Var],
    h_m: &[Tensor],
    sets: &CrucialSets,
    width: usize,
    cfg: &DistillConfig,
) -> Result<Var> {
    check_heads(g, h_s, h_m)?;
    let mut total = zero(g);
    let false_cells = sets.false_cells();
    for (cells, w) in [(&sets.true_pos, cfg.w_r1), (&false_cells, cfg.w_r2)] {
        if let Some(s) = response_set_sum(g, h_s, h_m, cells, width, cfg.smooth_l1_beta)? {
            let s = g.scale(s, w / cells.len() as f64);
            total = g.add(total, s)?;
        }
    }
    Ok(total)
}

/// Regression response loss over `TP ∪ FN` cells with per-attribute weights.
pub fn response_reg_loss(
    g: &mut Graph,
    reg_s: &[Var],
    reg_m: &[Tensor],
    sets: &CrucialSets,
    width: usize,
    cfg: &DistillConfig,
) -> Result<Var> {
    check_heads(g, reg_s, reg_m)?;
    let cells = sets.positive_cells();
    if cells.is_empty() {
        return Ok(zero(g));
    }
    let mut acc = zero(g);
    for (head, rows) in rows_by_head(&cells, reg_s.len(), width).iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        if reg_m[head].cols() != NUM_REG {
            return Err(Error::ShapeMismatch {
                op: "response_reg_loss",
                lhs: reg_m[head].shape().to_vec(),
                rhs: vec![reg_m[head].rows(), NUM_REG],
            });
        }
        let s = gathered_smooth_l1(
            g,
            reg_s[head],
            &reg_m[head],
            rows,
            Some(&cfg.w_attr),
            cfg.smooth_l1_beta,
        )?;
        acc = g.add(acc, s)?;
    }
    Ok(g.scale(acc, 1.0 / cells.len() as f64))
}

/// Voxel feature consistency: `w_v1/|TP_v|` and `w_v2/|FP_v ∪ FN_v|` weighted
/// sums of channel-averaged smooth-L1 between adapted student features and
/// teacher features.
pub fn voxel_feature_loss(
    g: &mut Graph,
    fv_s: Var,
    fv_m: &Tensor,
    vsets: &CrucialVoxelSets,
    cfg: &DistillConfig,
) -> Result<Var> {
    if g.shape(fv_s) != fv_m.shape() {
        return Err(Error::ShapeMismatch {
            op: "voxel_feature_loss",
            lhs: g.shape(fv_s).to_vec(),
            rhs: fv_m.shape().to_vec(),
        });
    }
    let c = fv_m.cols().max(1) as f64;
    let mut total = zero(g);
    let false_rows = vsets.false_rows();
    for (rows, w) in [(&vsets.true_pos, cfg.w_v1), (&false_rows, cfg.w_v2)] {
        if rows.is_empty() {
            continue;
        }
        let s = gathered_smooth_l1(g, fv_s, fv_m, rows, None, cfg.smooth_l1_beta)?;
        let s = g.scale(s, w / (c * rows.len() as f64));
        total = g.add(total, s)?;
    }
    Ok(total)
}

/// Mean squared difference of the pairwise cosine-similarity matrices of
/// two row sets, diagonal included.
fn relation_loss(g: &mut Graph, s: Var, t: &Tensor) -> Result<Var> {
    if t.rows() == 0 {
        return Ok(zero(g));
    }
    let ns = g.row_normalize(s)?;
    let t = g.constant(t.clone());
    let nt = g.row_normalize(t)?;
    g.gram_diff(ns, nt)
}

fn gather_value(t: &Tensor, rows: &[usize]) -> Tensor {
    let c = t.cols();
    let mut d = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        d.extend_from_slice(t.row(r));
    }
    Tensor::matrix(rows.len(), c, d).expect("gathered shape")
}

/// Voxel relation consistency over `V_s = TP_v ∪ FP_v ∪ FN_v`; 0 when empty.
pub fn voxel_relation_loss(
    g: &mut Graph,
    fv_s: Var,
    fv_m: &Tensor,
    vsets: &CrucialVoxelSets,
) -> Result<Var> {
    if g.shape(fv_s) != fv_m.shape() {
        return Err(Error::ShapeMismatch {
            op: "voxel_relation_loss",
            lhs: g.shape(fv_s).to_vec(),
            rhs: fv_m.shape().to_vec(),
        });
    }
    let rows = vsets.all_rows();
    if rows.is_empty() {
        return Ok(zero(g));
    }
    let s = g.gather_rows(fv_s, &rows)?;
    relation_loss(g, s, &gather_value(fv_m, &rows))
}

/// Point feature and point relation losses on the foreground points of
/// `scene`. Both voxel feature sets are interpolated to the points with the
/// same inverse-distance weights; the relation term uses `min(M, point_cap)`
/// points drawn without replacement from a generator seeded by `seed`.
#[allow(clippy::too_many_arguments)]
pub fn point_losses(
    g: &mut Graph,
    fv_s: Var,
    fv_m: &Tensor,
    voxels: &SparseVoxelGrid,
    scene: &Scene,
    spec: &GridSpec,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<(Var, Var)> {
    if g.shape(fv_s) != fv_m.shape() || fv_m.rows() != voxels.len() {
        return Err(Error::ShapeMismatch {
            op: "point_losses",
            lhs: g.shape(fv_s).to_vec(),
            rhs: fv_m.shape().to_vec(),
        });
    }
    let fg = scene.foreground_indices();
    if fg.is_empty() || voxels.is_empty() {
        return Ok((zero(g), zero(g)));
    }
    let queries: Vec<[f64; 3]> = fg.iter().map(|&i| scene.points[i]).collect();
    let table = idw_weights(voxels.coords(), |c| voxels.row_of(c), &queries, spec, cfg.interp_k)?;
    let c = fv_m.cols();
    let fp_m = Tensor::matrix(queries.len(), c, table.apply(fv_m.data(), c))?;
    let fp_s = g.mix(fv_s, table)?;

    let all: Vec<usize> = (0..queries.len()).collect();
    let fea = gathered_smooth_l1(g, fp_s, &fp_m, &all, None, cfg.smooth_l1_beta)?;
    let fea = g.scale(fea, cfg.w_pf / (c.max(1) * queries.len()) as f64);

    let m = queries.len();
    let keep = if m <= cfg.point_cap {
        all
    } else {
        let mut rng = seeded_rng(seed);
        let mut idx = sample(&mut rng, m, cfg.point_cap).into_vec();
        idx.sort_unstable();
        idx
    };
    let s = g.gather_rows(fp_s, &keep)?;
    let rel = relation_loss(g, s, &gather_value(&fp_m, &keep))?;
    Ok((fea, rel))
}

/// `g x g` lattice of a box in metric BEV coordinates, at fractions
/// `(2u + 1) / (2g)` of its length and width, rotated by its yaw.
pub fn instance_grid_points(b: &Box3D, grid: usize) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(grid * grid);
    let frac = |i: usize| (2 * i + 1) as f64 / (2 * grid) as f64 - 0.5;
    for a in 0..grid {
        for c in 0..grid {
            let p = b.from_local([frac(a) * b.l, frac(c) * b.w, 0.0]);
            out.push([p[0], p[1]]);
        }
    }
    out
}

/// Bilinear weights at metric `(x, y)` over a pixel-major BEV map whose
/// samples sit at cell centers; out-of-map points clamp to the border.
fn bilinear_entries(x: f64, y: f64, spec: &GridSpec) -> [(usize, f64); 4] {
    let (h, w) = spec.bev_dims();
    let (u, v) = spec.bev_continuous(x, y);
    let fx = (u - 0.5).clamp(0.0, (w - 1) as f64);
    let fy = (v - 0.5).clamp(0.0, (h - 1) as f64);
    let x0 = (fx.floor() as usize).min(w.saturating_sub(2));
    let y0 = (fy.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
    [
        (y0 * w + x0, (1.0 - tx) * (1.0 - ty)),
        (y0 * w + x1, tx * (1.0 - ty)),
        (y1 * w + x0, (1.0 - tx) * ty),
        (y1 * w + x1, tx * ty),
    ]
}

/// Rotated RoI-grid sampling of every box, `B * g^2` rows.
pub fn roi_sampling_table(boxes: &[Box3D], spec: &GridSpec, grid: usize) -> SparseRows {
    let mut table = SparseRows::with_capacity(boxes.len() * grid * grid, 4 * boxes.len() * grid * grid);
    for b in boxes {
        for [x, y] in instance_grid_points(b, grid) {
            table.push_row(bilinear_entries(x, y, spec));
        }
    }
    table
}

/// Instance loss: `w_I/B` times, per box, the mean over its `g^2` lattice
/// points of channel-averaged smooth-L1 between bilinearly pooled student and
/// teacher BEV features. 0 when there are no boxes.
pub fn instance_loss(
    g: &mut Graph,
    bev_s: Var,
    bev_m: &Tensor,
    boxes: &[Box3D],
    spec: &GridSpec,
    cfg: &DistillConfig,
) -> Result<Var> {
    if g.shape(bev_s) != bev_m.shape() || bev_m.rows() != spec.bev_cells() {
        return Err(Error::ShapeMismatch {
            op: "instance_loss",
            lhs: g.shape(bev_s).to_vec(),
            rhs: bev_m.shape().to_vec(),
        });
    }
    if boxes.is_empty() {
        return Ok(zero(g));
    }
    let table = roi_sampling_table(boxes, spec, cfg.roi_grid);
    let n = table.num_rows();
    let c = bev_m.cols();
    let pooled_m = Tensor::matrix(n, c, table.apply(bev_m.data(), c))?;
    let pooled_s = g.mix(bev_s, table)?;
    let all: Vec<usize> = (0..n).collect();
    let s = gathered_smooth_l1(g, pooled_s, &pooled_m, &all, None, cfg.smooth_l1_beta)?;
    let g2 = (cfg.roi_grid * cfg.roi_grid) as f64;
    Ok(g.scale(s, cfg.w_i / (boxes.len() as f64 * g2 * c.max(1) as f64)))
}

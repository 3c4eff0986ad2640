//! Crucial response mining and the four distillation losses.
//!
//! Every loss takes the student branch as graph variables and the teacher
//! branch as plain tensors, so teacher values are constants of the graph and
//! never receive gradients.

mod losses;

pub use losses::{
    instance_grid_points, instance_loss, point_losses, response_cls_loss, response_reg_loss,
    roi_sampling_table, voxel_feature_loss, voxel_relation_loss,
};

use serde::{Deserialize, Serialize};

use crate::detector::{HeadSpec, NUM_REG};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// A heatmap cell of one detection head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BevCell {
    pub head: usize,
    pub y: usize,
    pub x: usize,
}

/// True-positive, false-positive and false-negative response cells.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CrucialSets {
    pub true_pos: Vec<BevCell>,
    pub false_pos: Vec<BevCell>,
    pub false_neg: Vec<BevCell>,
}

impl CrucialSets {
    pub fn len(&self) -> usize {
        self.true_pos.len() + self.false_pos.len() + self.false_neg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `FP ∪ FN` in head/row/column order.
    pub fn false_cells(&self) -> Vec<BevCell> {
        let mut v: Vec<BevCell> = self.false_pos.iter().chain(&self.false_neg).copied().collect();
        v.sort_unstable();
        v
    }

    /// `TP ∪ FN`: cells that have an associated ground-truth object.
    pub fn positive_cells(&self) -> Vec<BevCell> {
        let mut v: Vec<BevCell> = self.true_pos.iter().chain(&self.false_neg).copied().collect();
        v.sort_unstable();
        v
    }
}

/// Classifies every cell by the per-cell class maximum of the student
/// heatmap `h_s` and the ground-truth heatmap `h_g`:
/// TP if both exceed `tau`, FP if only `h_s` does, FN if only `h_g` does.
/// Comparisons are strict on both sides, so a cell whose value equals `tau`
/// falls in no set.
pub fn mine_crucial_responses(
    h_s: &[Tensor],
    h_g: &[Tensor],
    width: usize,
    tau: f64,
) -> Result<CrucialSets> {
    if h_s.len() != h_g.len() {
        return Err(Error::Config(format!(
            "{} student heads vs {} target heads",
            h_s.len(),
            h_g.len()
        )));
    }
    let mut sets = CrucialSets::default();
    for (head, (s, gt)) in h_s.iter().zip(h_g).enumerate() {
        if s.shape() != gt.shape() || s.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "mine_crucial_responses",
                lhs: s.shape().to_vec(),
                rhs: gt.shape().to_vec(),
            });
        }
        let row_max = |t: &Tensor, r: usize| t.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for cell in 0..s.rows() {
            let (ms, mg) = (row_max(s, cell), row_max(gt, cell));
            let at = BevCell {
                head,
                y: cell / width,
                x: cell % width,
            };
            if ms > tau && mg > tau {
                sets.true_pos.push(at);
            } else if ms > tau && mg < tau {
                sets.false_pos.push(at);
            } else if ms < tau && mg > tau {
                sets.false_neg.push(at);
            }
        }
    }
    Ok(sets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub tau: f64,
    pub w_r1: f64,
    pub w_r2: f64,
    /// Per-attribute weights: x, y, z, w, l, h, vx, vy, sin, cos.
    pub w_attr: [f64; NUM_REG],
    pub w_v1: f64,
    pub w_v2: f64,
    pub w_pf: f64,
    #[serde(rename = "w_I")]
    pub w_i: f64,
    #[serde(rename = "lambda")]
    pub lambda: f64,
    pub mu: f64,
    pub point_cap: usize,
    pub roi_grid: usize,
    pub nms_iou: f64,
    pub enable_rsp: bool,
    pub enable_vxl: bool,
    pub enable_pts: bool,
    pub enable_ins: bool,
    pub smooth_l1_beta: f64,
    /// Neighbours used for voxel-to-point interpolation.
    pub interp_k: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            w_r1: 1.0,
            w_r2: 5.0,
            w_attr: [0.0, 0.0, 0.0, 0.1, 0.1, 0.1, 0.1, 0.1, 0.0, 0.0],
            w_v1: 2.0,
            w_v2: 8.0,
            w_pf: 2.0,
            w_i: 8.0,
            lambda: 0.25,
            mu: 0.5,
            point_cap: 4500,
            roi_grid: 5,
            nms_iou: 0.2,
            enable_rsp: true,
            enable_vxl: true,
            enable_pts: true,
            enable_ins: true,
            smooth_l1_beta: 1.0,
            interp_k: 3,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("w_r1", self.w_r1),
            ("w_r2", self.w_r2),
            ("w_v1", self.w_v1),
            ("w_v2", self.w_v2),
            ("w_pf", self.w_pf),
            ("w_I", self.w_i),
            ("lambda", self.lambda),
            ("mu", self.mu),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {w}")));
            }
        }
        if self.w_attr.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("w_attr entries must be finite and >= 0".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must be in (0, 1), got {}", self.tau)));
        }
        if self.roi_grid == 0 {
            return Err(Error::Config("roi_grid must be >= 1".into()));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::Config("nms_iou must be in (0, 1)".into()));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return Err(Error::Config("smooth_l1_beta must be > 0".into()));
        }
        if self.interp_k == 0 {
            return Err(Error::Config("interp_k must be >= 1".into()));
        }
        Ok(())
    }

    pub fn with_levels(&self, levels: Levels) -> Self {
        Self {
            enable_rsp: levels.rsp,
            enable_vxl: levels.vxl,
            enable_pts: levels.pts,
            enable_ins: levels.ins,
            ..self.clone()
        }
    }

    pub fn levels(&self) -> Levels {
        Levels {
            rsp: self.enable_rsp,
            vxl: self.enable_vxl,
            pts: self.enable_pts,
            ins: self.enable_ins,
        }
    }
}

/// Which distillation levels are on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Levels {
    pub rsp: bool,
    pub vxl: bool,
    pub pts: bool,
    pub ins: bool,
}

impl Levels {
    pub const NONE: Levels = Levels {
        rsp: false,
        vxl: false,
        pts: false,
        ins: false,
    };
    pub const ALL: Levels = Levels {
        rsp: true,
        vxl: true,
        pts: true,
        ins: true,
    };

    /// The eight rows of the standard module ablation: baseline, each level
    /// alone, then levels added cumulatively.
    pub fn ablation_rows() -> Vec<Levels> {
        let l = |rsp, vxl, pts, ins| Levels { rsp, vxl, pts, ins };
        vec![
            l(false, false, false, false),
            l(true, false, false, false),
            l(false, true, false, false),
            l(false, false, true, false),
            l(false, false, false, true),
            l(true, true, false, false),
            l(true, true, true, false),
            l(true, true, true, true),
        ]
    }

    /// Compact label such as `rsp+vxl`, or `none`.
    pub fn label(&self) -> String {
        let names: Vec<&str> = [
            (self.rsp, "rsp"),
            (self.vxl, "vxl"),
            (self.pts, "pts"),
            (self.ins, "ins"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if names.is_empty() {
            "none".into()
        } else {
            names.join("+")
        }
    }
}

impl std::str::FromStr for Levels {
    type Err = Error;

    /// Inverse of [`Levels::label`].
    fn from_str(s: &str) -> Result<Self> {
        let mut out = Levels::NONE;
        if s == "none" {
            return Ok(out);
        }
        for part in s.split('+') {
            let slot = match part {
                "rsp" => &mut out.rsp,
                "vxl" => &mut out.vxl,
                "pts" => &mut out.pts,
                "ins" => &mut out.ins,
                _ => return Err(Error::Config(format!("unknown distillation level {part:?} in {s:?}"))),
            };
            *slot = true;
        }
        Ok(out)
    }
}

/// Graph handles of every loss term. Disabled terms are constant zeros.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub l_cls: Var,
    pub l_reg: Var,
    pub rsp_cls: Var,
    pub rsp_loc: Var,
    pub vxl_fea: Var,
    pub vxl_rel: Var,
    pub pts_fea: Var,
    pub pts_rel: Var,
    pub ins: Var,
}

impl LossTerms {
    /// All distillation terms set to constant zero.
    pub fn supervised_only(g: &mut Graph, l_cls: Var, l_reg: Var) -> Self {
        let z = zero(g);
        Self {
            l_cls,
            l_reg,
            rsp_cls: z,
            rsp_loc: z,
            vxl_fea: z,
            vxl_rel: z,
            pts_fea: z,
            pts_rel: z,
            ins: z,
        }
    }

    fn distill_vars(&self) -> [Var; 7] {
        [
            self.rsp_cls,
            self.rsp_loc,
            self.vxl_fea,
            self.vxl_rel,
            self.pts_fea,
            self.pts_rel,
            self.ins,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_rsp_cls: f64,
    pub l_rsp_loc: f64,
    pub l_vxl_fea: f64,
    pub l_vxl_rel: f64,
    pub l_pts_fea: f64,
    pub l_pts_rel: f64,
    pub l_ins: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn distill_sum(&self) -> f64 {
        self.l_rsp_cls
            + self.l_rsp_loc
            + self.l_vxl_fea
            + self.l_vxl_rel
            + self.l_pts_fea
            + self.l_pts_rel
            + self.l_ins
    }

    /// `(name, value)` pairs in a fixed order, `total` last.
    pub fn components(&self) -> [(&'static str, f64); 10] {
        [
            ("l_cls", self.l_cls),
            ("l_reg", self.l_reg),
            ("l_rsp_cls", self.l_rsp_cls),
            ("l_rsp_loc", self.l_rsp_loc),
            ("l_vxl_fea", self.l_vxl_fea),
            ("l_vxl_rel", self.l_vxl_rel),
            ("l_pts_fea", self.l_pts_fea),
            ("l_pts_rel", self.l_pts_rel),
            ("l_ins", self.l_ins),
            ("total", self.total),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.components().iter().all(|(_, v)| v.is_finite())
    }
}

pub(crate) fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

/// `L_cls + lambda * L_reg + mu * (sum of distillation terms)`.
pub fn total_loss(g: &mut Graph, terms: &LossTerms, cfg: &DistillConfig) -> Result<(Var, LossBreakdown)> {
    let mut distill = zero(g);
    for v in terms.distill_vars() {
        distill = g.add(distill, v)?;
    }
    let reg = g.scale(terms.l_reg, cfg.lambda);
    let sup = g.add(terms.l_cls, reg)?;
    let dist = g.scale(distill, cfg.mu);
    let total = g.add(sup, dist)?;
    let breakdown = LossBreakdown {
        l_cls: g.item(terms.l_cls),
        l_reg: g.item(terms.l_reg),
        l_rsp_cls: g.item(terms.rsp_cls),
        l_rsp_loc: g.item(terms.rsp_loc),
        l_vxl_fea: g.item(terms.vxl_fea),
        l_vxl_rel: g.item(terms.vxl_rel),
        l_pts_fea: g.item(terms.pts_fea),
        l_pts_rel: g.item(terms.pts_rel),
        l_ins: g.item(terms.ins),
        total: g.item(total),
    };
    Ok((total, breakdown))
}

/// Per-cell class maximum of every head, for inspection and plotting.
pub fn head_max(heads: &HeadSpec, maps: &[Tensor]) -> Vec<Vec<f64>> {
    maps.iter()
        .take(heads.num_heads())
        .map(|m| {
            (0..m.rows())
                .map(|r| m.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect()
        })
        .collect()
}

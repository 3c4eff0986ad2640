//! Finite-difference checks of every differentiable op and loss, shared by
//! the gradient tests and the acceptance run.

use distill3d_core::detector::{make_gt_targets, supervised_loss, Detector, Modality};
use distill3d_core::distill::{
    instance_loss, mine_crucial_responses, point_losses, response_cls_loss, response_reg_loss, total_loss,
    voxel_feature_loss, voxel_relation_loss, CrucialSets, DistillConfig, LossTerms,
};
use distill3d_core::scene::{generate_scene, Box3D};
use distill3d_core::tensor::{finite_diff_check, Graph, SparseRows, Tensor, Var};
use distill3d_core::voxel::{mine_crucial_voxels, voxelize, SparseVoxelGrid};
use distill3d_core::Result;
use rand::Rng;

use super::*;

pub const EPS: f64 = 1e-6;

pub struct Case {
    pub name: String,
    pub max_rel_err: f64,
    /// Largest analytic gradient magnitude; zero would make the check vacuous.
    pub max_grad: f64,
}

/// `sum(v * w)` for a fixed random `w` of the same shape.
pub fn readout(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let mut r = rng(seed);
    let w = Tensor::new(&shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect())?;
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn check(out: &mut Vec<Case>, name: &str, x: &Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) {
    let report = finite_diff_check(f, x, EPS).unwrap_or_else(|e| panic!("{name}: {e}"));
    out.push(Case {
        name: name.to_string(),
        max_rel_err: report.max_rel_err,
        max_grad: report.per_element.iter().map(|p| p.0.abs()).fold(0.0, f64::max),
    });
}

/// Values with magnitude at least `margin`, so rectifier kinks are not crossed.
fn away_from_zero(r: &mut ChaCha8Rng, rows: usize, cols: usize, margin: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m: f64 = r.gen_range(margin..1.0);
            if r.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn random_table(r: &mut ChaCha8Rng, rows: usize, src_rows: usize) -> SparseRows {
    let mut t = SparseRows::new();
    for _ in 0..rows {
        let k = r.gen_range(1..4);
        let entries: Vec<(usize, f64)> = (0..k).map(|_| (r.gen_range(0..src_rows), r.gen_range(0.0..1.0))).collect();
        t.push_row(entries);
    }
    t
}

pub fn tensor_op_cases() -> Vec<Case> {
    let mut out = Vec::new();
    let mut r = rng(11);
    let x = uniform(&mut r, 3, 4, -1.0, 1.0);
    let other = uniform(&mut r, 3, 4, -1.0, 1.0);
    let right = uniform(&mut r, 4, 5, -1.0, 1.0);
    let left = uniform(&mut r, 2, 3, -1.0, 1.0);
    let bias = Tensor::from_vec((0..4).map(|_| r.gen_range(-1.0..1.0)).collect());

    check(&mut out, "add", &x, |g, v| {
        let o = g.constant(other.clone());
        let y = g.add(v, o)?;
        readout(g, y, 1)
    });
    check(&mut out, "sub", &x, |g, v| {
        let o = g.constant(other.clone());
        let y = g.sub(o, v)?;
        readout(g, y, 2)
    });
    check(&mut out, "mul", &x, |g, v| {
        let y = g.mul(v, v)?;
        readout(g, y, 3)
    });
    check(&mut out, "scale", &x, |g, v| {
        let y = g.scale(v, -2.5);
        readout(g, y, 4)
    });
    let signed = away_from_zero(&mut r, 3, 4, 0.05);
    check(&mut out, "relu", &signed, |g, v| {
        let y = g.relu(v);
        readout(g, y, 5)
    });
    check(&mut out, "sigmoid", &x, |g, v| {
        let y = g.sigmoid(v);
        readout(g, y, 6)
    });
    let wide = uniform(&mut r, 3, 4, -3.0, 3.0);
    let target = offset_away_from_kink(&mut r, &wide, 3.0, 1.0, 0.05);
    check(&mut out, "smooth_l1", &wide, |g, v| {
        let t = g.constant(target.clone());
        let y = g.smooth_l1(v, t, 1.0)?;
        readout(g, y, 7)
    });
    check(&mut out, "smooth_l1_target", &target, |g, v| {
        let p = g.constant(wide.clone());
        let y = g.smooth_l1(p, v, 1.0)?;
        readout(g, y, 8)
    });
    check(&mut out, "sum", &x, |g, v| {
        let y = g.mul(v, v)?;
        Ok(g.sum(y))
    });
    check(&mut out, "mean", &x, |g, v| {
        let y = g.mul(v, v)?;
        Ok(g.mean(y))
    });
    check(&mut out, "matmul_lhs", &x, |g, v| {
        let b = g.constant(right.clone());
        let y = g.matmul(v, b)?;
        readout(g, y, 9)
    });
    check(&mut out, "matmul_rhs", &x, |g, v| {
        let a = g.constant(left.clone());
        let y = g.matmul(a, v)?;
        readout(g, y, 10)
    });
    check(&mut out, "add_bias", &bias, |g, v| {
        let a = g.constant(x.clone());
        let y = g.add_bias(a, v)?;
        readout(g, y, 11)
    });
    check(&mut out, "linear_weight", &right, |g, v| {
        let a = g.constant(x.clone());
        let b = g.constant(Tensor::from_vec(vec![0.1, -0.2, 0.3, 0.0, 0.5]));
        let y = g.linear(a, v, b)?;
        let y = g.sigmoid(y);
        readout(g, y, 12)
    });
    let table = random_table(&mut r, 6, 3);
    check(&mut out, "mix", &x, |g, v| {
        let y = g.mix(v, table.clone())?;
        readout(g, y, 13)
    });
    check(&mut out, "gather_rows", &x, |g, v| {
        let y = g.gather_rows(v, &[2, 0, 2, 1])?;
        readout(g, y, 14)
    });
    let map = uniform(&mut r, 12, 2, -1.0, 1.0);
    check(&mut out, "im2col3x3", &map, |g, v| {
        let y = g.im2col3x3(v, 3, 4)?;
        readout(g, y, 15)
    });
    let spread = uniform(&mut r, 20, 2, -1.0, 1.0);
    check(&mut out, "im2col3x3_dilated", &spread, |g, v| {
        let y = g.im2col3x3_dilated(v, 4, 5, 2)?;
        readout(g, y, 25)
    });
    let positive = uniform(&mut r, 6, 3, 0.1, 1.0);
    check(&mut out, "scatter_max", &positive, |g, v| {
        let y = g.scatter_max(v, &[0, 1, 0, 2, 1, 0], 4)?;
        readout(g, y, 16)
    });
    check(&mut out, "max_rows", &positive, |g, v| {
        let y = g.max_rows(v)?;
        readout(g, y, 17)
    });
    check(&mut out, "row_normalize", &x, |g, v| {
        let y = g.row_normalize(v)?;
        readout(g, y, 18)
    });
    check(&mut out, "gram_diff", &x, |g, v| {
        let o = g.constant(other.clone());
        g.gram_diff(v, o)
    });
    check(&mut out, "concat_rows", &x, |g, v| {
        let o = g.constant(other.clone());
        let y = g.concat_rows(&[o, v, v])?;
        readout(g, y, 19)
    });
    check(&mut out, "reshape", &x, |g, v| {
        let y = g.reshape(v, &[2, 6])?;
        let y = g.row_normalize(y)?;
        readout(g, y, 20)
    });
    check(&mut out, "cosine_sim", &x, |g, v| {
        let o = g.constant(other.clone());
        g.cosine_sim(v, o)
    });
    let mut heat = vec![0.0; 12];
    for (i, h) in heat.iter_mut().enumerate() {
        *h = [0.0, 0.3, 1.0, 0.7][i % 4];
    }
    check(&mut out, "focal_loss", &wide, |g, v| g.focal_loss(v, &heat));
    out
}

/// Fixed inputs of the distillation losses on the tiny grid.
pub struct LossFixture {
    pub cfg: DistillConfig,
    pub width: usize,
    pub heat_s: Vec<Tensor>,
    pub heat_m: Vec<Tensor>,
    pub reg_s: Vec<Tensor>,
    pub reg_m: Vec<Tensor>,
    pub sets: CrucialSets,
    pub voxels: SparseVoxelGrid,
    pub fv_s: Tensor,
    pub fv_m: Tensor,
    pub bev_s: Tensor,
    pub bev_m: Tensor,
    pub boxes: Vec<Box3D>,
    pub scene: distill3d_core::scene::Scene,
}

impl LossFixture {
    pub fn new(seed: u64) -> Self {
        let mut r = rng(seed);
        let grid = tiny_grid();
        let (h, w) = grid.bev_dims();
        let cells = h * w;
        let channels = 6;
        let heads = heads();
        let heat_s: Vec<Tensor> = heads.groups.iter().map(|gr| uniform(&mut r, cells, gr.len(), 0.0, 0.4)).collect();
        let heat_m: Vec<Tensor> = heads.groups.iter().map(|gr| uniform(&mut r, cells, gr.len(), 0.0, 0.4)).collect();
        let heat_gt: Vec<Tensor> = heads.groups.iter().map(|gr| uniform(&mut r, cells, gr.len(), 0.0, 0.4)).collect();
        let sets = mine_crucial_responses(&heat_s, &heat_gt, w, 0.1).unwrap();
        let reg_s: Vec<Tensor> = heads.groups.iter().map(|_| uniform(&mut r, cells, 10, -2.0, 2.0)).collect();
        let reg_m: Vec<Tensor> = reg_s.iter().map(|t| offset_away_from_kink(&mut r, t, 2.5, 1.0, 0.05)).collect();

        let scene = point_scene(&mut r, &grid, 60, 30);
        let (voxels, _) = voxelize(&scene, &grid, false);
        let fv_s = uniform(&mut r, voxels.len(), channels, 0.0, 1.0);
        let fv_m = offset_away_from_kink(&mut r, &fv_s, 1.5, 1.0, 0.05);
        let bev_s = uniform(&mut r, cells, channels, 0.0, 1.0);
        let bev_m = offset_away_from_kink(&mut r, &bev_s, 1.5, 1.0, 0.05);
        let boxes = (0..3).map(|i| random_box(&mut r, 1.2, i % 4)).collect();
        let cfg = DistillConfig {
            point_cap: 12,
            ..DistillConfig::default()
        };
        Self {
            cfg,
            width: w,
            heat_s,
            heat_m,
            reg_s,
            reg_m,
            sets,
            voxels,
            fv_s,
            fv_m,
            bev_s,
            bev_m,
            boxes,
            scene,
        }
    }

    fn consts(&self, g: &mut Graph, ts: &[Tensor]) -> Vec<Var> {
        ts.iter().map(|t| g.constant(t.clone())).collect()
    }

    /// Every term as a function of the inputs in `slot` (0 heatmap head 0,
    /// 1 regression head 0, 2 voxel features, 3 BEV features), others constant.
    pub fn terms(&self, g: &mut Graph, slot: usize, x: Var) -> Result<LossTerms> {
        let mut hs = self.consts(g, &self.heat_s);
        let mut rs = self.consts(g, &self.reg_s);
        let mut fv = g.constant(self.fv_s.clone());
        let mut bev = g.constant(self.bev_s.clone());
        match slot {
            0 => hs[0] = x,
            1 => rs[0] = x,
            2 => fv = x,
            _ => bev = x,
        }
        let grid = tiny_grid();
        let vsets = mine_crucial_voxels(&self.sets, self.voxels.coords(), &grid);
        let l_cls = g.constant(Tensor::scalar(0.3));
        let l_reg = g.constant(Tensor::scalar(0.2));
        let mut t = LossTerms::supervised_only(g, l_cls, l_reg);
        t.rsp_cls = response_cls_loss(g, &hs, &self.heat_m, &self.sets, self.width, &self.cfg)?;
        t.rsp_loc = response_reg_loss(g, &rs, &self.reg_m, &self.sets, self.width, &self.cfg)?;
        t.vxl_fea = voxel_feature_loss(g, fv, &self.fv_m, &vsets, &self.cfg)?;
        t.vxl_rel = voxel_relation_loss(g, fv, &self.fv_m, &vsets)?;
        let (pf, pr) = point_losses(g, fv, &self.fv_m, &self.voxels, &self.scene, &grid, &self.cfg, 5)?;
        t.pts_fea = pf;
        t.pts_rel = pr;
        t.ins = instance_loss(g, bev, &self.bev_m, &self.boxes, &grid, &self.cfg)?;
        Ok(t)
    }
}

pub fn loss_cases() -> Vec<Case> {
    let mut out = Vec::new();
    let fx = LossFixture::new(21);
    assert!(!fx.sets.true_pos.is_empty() && !fx.sets.false_pos.is_empty() && !fx.sets.false_neg.is_empty());
    let grid = tiny_grid();
    let vsets = mine_crucial_voxels(&fx.sets, fx.voxels.coords(), &grid);
    assert!(!vsets.is_empty());

    check(&mut out, "response_cls", &fx.heat_s[1], |g, v| {
        let h0 = g.constant(fx.heat_s[0].clone());
        response_cls_loss(g, &[h0, v], &fx.heat_m, &fx.sets, fx.width, &fx.cfg)
    });
    check(&mut out, "response_reg", &fx.reg_s[0], |g, v| {
        let r1 = g.constant(fx.reg_s[1].clone());
        response_reg_loss(g, &[v, r1], &fx.reg_m, &fx.sets, fx.width, &fx.cfg)
    });
    check(&mut out, "voxel_feature", &fx.fv_s, |g, v| {
        voxel_feature_loss(g, v, &fx.fv_m, &vsets, &fx.cfg)
    });
    check(&mut out, "voxel_relation", &fx.fv_s, |g, v| voxel_relation_loss(g, v, &fx.fv_m, &vsets));
    check(&mut out, "point_feature", &fx.fv_s, |g, v| {
        Ok(point_losses(g, v, &fx.fv_m, &fx.voxels, &fx.scene, &grid, &fx.cfg, 5)?.0)
    });
    check(&mut out, "point_relation", &fx.fv_s, |g, v| {
        Ok(point_losses(g, v, &fx.fv_m, &fx.voxels, &fx.scene, &grid, &fx.cfg, 5)?.1)
    });
    check(&mut out, "instance", &fx.bev_s, |g, v| {
        instance_loss(g, v, &fx.bev_m, &fx.boxes, &grid, &fx.cfg)
    });
    let inputs = [&fx.heat_s[0], &fx.reg_s[0], &fx.fv_s, &fx.bev_s];
    for (slot, x) in inputs.into_iter().enumerate() {
        check(&mut out, &format!("total_loss_input{slot}"), x, |g, v| {
            let t = fx.terms(g, slot, v)?;
            Ok(total_loss(g, &t, &fx.cfg)?.0)
        });
    }
    out
}

/// Detector forward pass plus supervised loss, with respect to single
/// parameter tensors.
pub fn detector_cases() -> Vec<Case> {
    let mut out = Vec::new();
    let grid = tiny_grid();
    let det = Detector::new(grid.clone(), heads(), 4).unwrap();
    let (scene, targets) = (0..)
        .map(|seed| {
            let s = generate_scene(&tiny_scene_config(), seed).unwrap();
            let t = make_gt_targets(&s, &det.heads, &det.grid);
            (s, t)
        })
        .find(|(_, t)| t.mask.iter().all(|m| !m.is_empty()))
        .unwrap();
    let params = det.init_params(7);
    for name in ["vfe.w1", "vfe.b2", "head0.cls.w", "head1.cls.b", "head0.reg.w", "head1.reg.b"] {
        let x = params.get(name).unwrap().clone();
        check(&mut out, &format!("detector_{name}"), &x, |g, v| {
            let mut bound = params.bind(g, false);
            bound.replace(name, v);
            let o = det.forward(g, &bound, &scene, Modality::Student)?;
            let (c, rg) = supervised_loss(g, &o, &targets, 1.0)?;
            let rg = g.scale(rg, 0.25);
            g.add(c, rg)
        });
    }
    out
}

pub fn all_cases() -> Vec<Case> {
    let mut v = tensor_op_cases();
    v.extend(loss_cases());
    v.extend(detector_cases());
    v
}

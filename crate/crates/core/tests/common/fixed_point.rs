//! Self-distillation fixed point: a student that equals its teacher, with the
//! teacher's semantic channels zeroed, incurs no distillation loss.

use distill3d_core::config::RunConfig;
use distill3d_core::detector::{make_gt_targets, Modality, ParamStore};
use distill3d_core::distill::LossTerms;
use distill3d_core::scene::Scene;
use distill3d_core::tensor::{Graph, Tensor};
use distill3d_core::train::{detector_for, student_terms, Benchmark, TeacherCache};

pub struct FixedPointOutcome {
    pub scenes: usize,
    /// Largest distillation loss value over scenes and terms.
    pub max_loss: f64,
    /// Largest gradient magnitude any distillation term sends to any parameter.
    pub max_grad: f64,
    /// Mined cells over all scenes; zero would make the check vacuous.
    pub crucial_cells: usize,
    pub instance_boxes_seen: bool,
}

fn distill_terms(t: &LossTerms) -> [(&'static str, distill3d_core::tensor::Var); 7] {
    [
        ("rsp_cls", t.rsp_cls),
        ("rsp_loc", t.rsp_loc),
        ("vxl_fea", t.vxl_fea),
        ("vxl_rel", t.vxl_rel),
        ("pts_fea", t.pts_fea),
        ("pts_rel", t.pts_rel),
        ("ins", t.ins),
    ]
}

/// Teacher parameters with the heatmap bias raised so that the maps cross
/// the mining threshold and the decoder emits boxes.
pub fn lively_teacher(cfg: &RunConfig, seed: u64) -> ParamStore {
    let det = detector_for(cfg).unwrap();
    let mut p = det.init_params(seed);
    for (name, t) in p.iter_mut() {
        if name.ends_with(".cls.b") {
            t.data_mut().iter_mut().for_each(|v| *v = -0.5);
        }
    }
    p
}

pub fn run_fixed_point(cfg: &RunConfig, scenes: &[Scene], teacher: &ParamStore) -> FixedPointOutcome {
    let det = detector_for(cfg).unwrap();
    let blind: Vec<Scene> = scenes.iter().map(Scene::without_semantics).collect();
    let cache = TeacherCache::build(&det, teacher, &blind).unwrap();
    let student = teacher.merged(&det.init_student_params(0).subset("adapt."));
    let mut out = FixedPointOutcome {
        scenes: scenes.len(),
        max_loss: 0.0,
        max_grad: 0.0,
        crucial_cells: 0,
        instance_boxes_seen: false,
    };
    for (i, scene) in scenes.iter().enumerate() {
        let targets = make_gt_targets(scene, &det.heads, &det.grid);
        for k in 0..7 {
            let mut g = Graph::new();
            let p = student.bind(&mut g, true);
            let o = det.forward(&mut g, &p, scene, Modality::Student).unwrap();
            if k == 0 {
                let hs: Vec<Tensor> = o.heatmaps.iter().map(|&v| g.value(v).clone()).collect();
                let (_, w) = det.bev_dims();
                out.crucial_cells += distill3d_core::distill::mine_crucial_responses(&hs, &targets.heatmaps, w, cfg.distill.tau)
                    .unwrap()
                    .len();
                let reg: Vec<Tensor> = o.regression.iter().map(|&v| g.value(v).clone()).collect();
                let dets = distill3d_core::eval::decode(&hs, &reg, &det.heads, &det.grid, cfg.eval.top_n, cfg.eval.score_thresh);
                out.instance_boxes_seen |= !dets.is_empty();
            }
            let terms = student_terms(&mut g, &det, &p, &o, scene, &targets, &cache.outputs[i], cfg, i as u64).unwrap();
            let (_, v) = distill_terms(&terms)[k];
            out.max_loss = out.max_loss.max(g.item(v).abs());
            g.backward(v).unwrap();
            for (_, grad) in p.grads(&g) {
                out.max_grad = grad.iter().fold(out.max_grad, |m, x| m.max(x.abs()));
            }
        }
    }
    out
}

/// Fixed-point check on the benchmark scenes of `cfg`, first `n` training scenes.
pub fn run_fixed_point_on(cfg: &RunConfig, n: usize) -> FixedPointOutcome {
    let bench = Benchmark::generate(cfg).unwrap();
    let scenes = &bench.train[..n.min(bench.train.len())];
    run_fixed_point(cfg, scenes, &lively_teacher(cfg, 3))
}

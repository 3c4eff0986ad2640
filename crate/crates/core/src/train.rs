//! Teacher pre-training, distilled student training, evaluation and the
//! module ablation runner.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::detector::{
    make_gt_targets, seeded_rng, supervised_loss, AdaptationLayer, Detector, DetectorOutputs,
    GtTargets, Modality, OutputValues, ParamStore, ADAPT_POINT, ADAPT_VOXEL,
};
use crate::distill::{
    instance_loss, mine_crucial_responses, point_losses, response_cls_loss, response_reg_loss,
    total_loss, voxel_feature_loss, voxel_relation_loss, Levels, LossBreakdown, LossTerms,
};
use crate::error::{Error, Result};
use crate::eval::{decode, evaluate, nms, Detection, EvalConfig, MetricsReport};
use crate::optim::Sgd;
use crate::scene::{generate_scene, Scene, SceneConfig};
use crate::tensor::{Graph, Tensor};
use crate::voxel::mine_crucial_voxels;

/// Scenes for seeds `start..end`, generated in parallel and returned in seed order.
pub fn generate_split(cfg: &SceneConfig, seeds: [u64; 2]) -> Result<Vec<Scene>> {
    (seeds[0]..seeds[1])
        .into_par_iter()
        .map(|s| generate_scene(cfg, s))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub train: Vec<Scene>,
    pub eval: Vec<Scene>,
}

impl Benchmark {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            train: generate_split(&cfg.scene, cfg.data.train_seeds)?,
            eval: generate_split(&cfg.scene, cfg.data.eval_seeds)?,
        })
    }
}

pub fn detector_for(cfg: &RunConfig) -> Result<Detector> {
    Detector::new(cfg.grid.clone(), cfg.heads.clone(), cfg.scene.num_classes)
}

/// Scene indices used at each step: epochs are reshuffled with a generator
/// seeded by `seed`, batches are consecutive slices of the shuffled order.
pub fn batch_schedule(num_scenes: usize, batch: usize, steps: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = seeded_rng(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut b = Vec::with_capacity(batch);
        while b.len() < batch.min(num_scenes) {
            if cursor == order.len() {
                order = (0..num_scenes).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            b.push(order[cursor]);
            cursor += 1;
        }
        out.push(b);
    }
    out
}

/// Per-scene generator seed.
pub fn scene_seed(run_seed: u64, scene_index: usize) -> u64 {
    run_seed ^ scene_index as u64
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamStore,
    /// Batch-mean losses, one entry per step.
    pub trace: Vec<LossBreakdown>,
}

/// Frozen teacher outputs for every training scene.
#[derive(Debug, Clone)]
pub struct TeacherCache {
    pub outputs: Vec<OutputValues>,
}

impl TeacherCache {
    /// Runs the teacher on `scenes` in teacher modality.
    pub fn build(det: &Detector, teacher: &ParamStore, scenes: &[Scene]) -> Result<Self> {
        det.check_params(teacher)?;
        let outputs = scenes
            .par_iter()
            .map(|s| {
                let mut g = Graph::new();
                let p = teacher.bind(&mut g, false);
                let out = det.forward(&mut g, &p, s, Modality::Teacher)?;
                Ok(OutputValues::capture(&g, &out))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { outputs })
    }
}

fn targets_for(det: &Detector, scenes: &[Scene]) -> Vec<GtTargets> {
    scenes
        .iter()
        .map(|s| make_gt_targets(s, &det.heads, &det.grid))
        .collect()
}

fn accumulate(acc: &mut Vec<(String, Vec<f64>)>, grads: Vec<(String, Vec<f64>)>, w: f64) {
    if acc.is_empty() {
        *acc = grads
            .into_iter()
            .map(|(n, g)| (n, g.into_iter().map(|x| x * w).collect()))
            .collect();
        return;
    }
    for ((_, a), (_, g)) in acc.iter_mut().zip(grads) {
        a.iter_mut().zip(g).for_each(|(a, g)| *a += w * g);
    }
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for b in items {
        m.l_cls += b.l_cls / n;
        m.l_reg += b.l_reg / n;
        m.l_rsp_cls += b.l_rsp_cls / n;
        m.l_rsp_loc += b.l_rsp_loc / n;
        m.l_vxl_fea += b.l_vxl_fea / n;
        m.l_vxl_rel += b.l_vxl_rel / n;
        m.l_pts_fea += b.l_pts_fea / n;
        m.l_pts_rel += b.l_pts_rel / n;
        m.l_ins += b.l_ins / n;
        m.total += b.total / n;
    }
    m
}

/// Supervised pre-training of the teacher on painted scenes.
pub fn train_teacher(cfg: &RunConfig, scenes: &[Scene]) -> Result<TrainOutcome> {
    train_teacher_with(cfg, scenes, |_, _, _| {})
}

/// [`train_teacher`] with a callback after every step that sees the updated parameters.
pub fn train_teacher_with(
    cfg: &RunConfig,
    scenes: &[Scene],
    mut on_step: impl FnMut(usize, &LossBreakdown, &ParamStore),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Config("training needs at least one scene".into()));
    }
    let det = detector_for(cfg)?;
    let targets = targets_for(&det, scenes);
    let mut params = det.init_params(cfg.train.seed);
    let mut opt = Sgd::new(cfg.train.lr, cfg.train.momentum, cfg.train.grad_clip);
    let schedule = batch_schedule(
        scenes.len(),
        cfg.train.batch_scenes,
        cfg.train.teacher_steps,
        cfg.train.seed,
    );
    let beta = cfg.distill.smooth_l1_beta;
    let mut trace = Vec::with_capacity(schedule.len());
    for (step, batch) in schedule.iter().enumerate() {
        let w = 1.0 / batch.len() as f64;
        let mut grads = Vec::new();
        let mut parts = Vec::with_capacity(batch.len());
        for &i in batch {
            let mut g = Graph::new();
            let p = params.bind(&mut g, true);
            let out = det.forward(&mut g, &p, &scenes[i], Modality::Teacher)?;
            let (l_cls, l_reg) = supervised_loss(&mut g, &out, &targets[i], beta)?;
            let terms = LossTerms::supervised_only(&mut g, l_cls, l_reg);
            let (total, b) = total_loss(&mut g, &terms, &cfg.distill)?;
            if !b.is_finite() {
                return Err(Error::DivergedAt { step });
            }
            g.backward(total)?;
            accumulate(&mut grads, p.grads(&g), w);
            parts.push(b);
        }
        opt.lr = cfg.train.lr_schedule.lr_at(cfg.train.lr, step, cfg.train.teacher_steps);
        opt.step(&mut params, &grads)
            .map_err(|e| if e.is_numeric_error() { Error::DivergedAt { step } } else { e })?;
        let b = mean_breakdown(&parts);
        on_step(step, &b, &params);
        trace.push(b);
    }
    Ok(TrainOutcome { params, trace })
}

/// Every loss term of one student forward pass against a cached teacher.
/// Crucial sets, instance boxes and point subsets are computed from the
/// current student values and held fixed (no gradient through selection).
#[allow(clippy::too_many_arguments)]
pub fn student_terms(
    g: &mut Graph,
    det: &Detector,
    params: &crate::detector::BoundParams,
    out: &DetectorOutputs,
    scene: &Scene,
    targets: &GtTargets,
    teacher: &OutputValues,
    cfg: &RunConfig,
    point_seed: u64,
) -> Result<LossTerms> {
    let d = &cfg.distill;
    let (l_cls, l_reg) = supervised_loss(g, out, targets, d.smooth_l1_beta)?;
    let mut terms = LossTerms::supervised_only(g, l_cls, l_reg);
    let (_, width) = det.bev_dims();
    let sets = if d.enable_rsp || d.enable_vxl {
        let h_s: Vec<Tensor> = out.heatmaps.iter().map(|&v| g.value(v).clone()).collect();
        Some(mine_crucial_responses(&h_s, &targets.heatmaps, width, d.tau)?)
    } else {
        None
    };
    if d.enable_rsp {
        let sets = sets.as_ref().expect("mined above");
        terms.rsp_cls = response_cls_loss(g, &out.heatmaps, &teacher.heatmaps, sets, width, d)?;
        terms.rsp_loc = response_reg_loss(g, &out.regression, &teacher.regression, sets, width, d)?;
    }
    if d.enable_vxl {
        let sets = sets.as_ref().expect("mined above");
        let vsets = mine_crucial_voxels(sets, out.voxels.coords(), &det.grid);
        let adapted = AdaptationLayer { prefix: ADAPT_VOXEL }.apply(g, params, out.voxel_features)?;
        terms.vxl_fea = voxel_feature_loss(g, adapted, &teacher.voxel_features, &vsets, d)?;
        terms.vxl_rel = voxel_relation_loss(g, adapted, &teacher.voxel_features, &vsets)?;
    }
    if d.enable_pts {
        let adapted = AdaptationLayer { prefix: ADAPT_POINT }.apply(g, params, out.voxel_features)?;
        let (fea, rel) = point_losses(
            g,
            adapted,
            &teacher.voxel_features,
            &out.voxels,
            scene,
            &det.grid,
            d,
            point_seed,
        )?;
        terms.pts_fea = fea;
        terms.pts_rel = rel;
    }
    if d.enable_ins {
        let hm: Vec<Tensor> = out.heatmaps.iter().map(|&v| g.value(v).clone()).collect();
        let reg: Vec<Tensor> = out.regression.iter().map(|&v| g.value(v).clone()).collect();
        let dets = decode(&hm, &reg, &det.heads, &det.grid, cfg.eval.top_n, cfg.eval.score_thresh);
        let boxes: Vec<_> = nms(&dets, d.nms_iou).into_iter().map(|x| x.bbox).collect();
        terms.ins = instance_loss(g, out.bev_features, &teacher.bev_features, &boxes, &det.grid, d)?;
    }
    Ok(terms)
}

/// Distilled student training from seeded initialization.
pub fn train_student(cfg: &RunConfig, scenes: &[Scene], teacher: &ParamStore) -> Result<TrainOutcome> {
    cfg.validate()?;
    let det = detector_for(cfg)?;
    det.check_params(teacher)?;
    let cache = TeacherCache::build(&det, teacher, scenes)?;
    let init = det.init_student_params(cfg.train.seed);
    train_student_from(cfg, scenes, &cache, init, |_, _, _| {})
}

/// Student training against a prepared teacher cache from explicit initial
/// parameters, with a callback after every step that sees the updated parameters.
pub fn train_student_from(
    cfg: &RunConfig,
    scenes: &[Scene],
    cache: &TeacherCache,
    init: ParamStore,
    mut on_step: impl FnMut(usize, &LossBreakdown, &ParamStore),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Config("training needs at least one scene".into()));
    }
    if cache.outputs.len() != scenes.len() {
        return Err(Error::ModelMismatch(format!(
            "teacher cache holds {} scenes, training set {}",
            cache.outputs.len(),
            scenes.len()
        )));
    }
    let det = detector_for(cfg)?;
    det.check_params(&init)?;
    for name in [ADAPT_VOXEL, ADAPT_POINT] {
        if init.get(&format!("{name}.weight")).is_none() {
            return Err(Error::ModelMismatch(format!("student parameters lack {name}")));
        }
    }
    let c = det.channels;
    for o in &cache.outputs {
        if o.voxel_features.shape().get(1) != Some(&c) || o.bev_features.shape() != [det.grid.bev_cells(), c] {
            return Err(Error::ModelMismatch(format!(
                "teacher features {:?} / {:?} do not fit a {c}-channel student",
                o.voxel_features.shape(),
                o.bev_features.shape()
            )));
        }
    }
    let targets = targets_for(&det, scenes);
    let mut params = init;
    let mut opt = Sgd::new(cfg.train.lr, cfg.train.momentum, cfg.train.grad_clip);
    let schedule = batch_schedule(scenes.len(), cfg.train.batch_scenes, cfg.train.steps, cfg.train.seed);
    let mut trace = Vec::with_capacity(schedule.len());
    for (step, batch) in schedule.iter().enumerate() {
        let w = 1.0 / batch.len() as f64;
        let mut grads = Vec::new();
        let mut parts = Vec::with_capacity(batch.len());
        for &i in batch {
            let mut g = Graph::new();
            let p = params.bind(&mut g, true);
            let out = det.forward(&mut g, &p, &scenes[i], Modality::Student)?;
            let point_seed = scene_seed(cfg.train.seed, i).wrapping_add((step as u64) << 32);
            let terms = student_terms(
                &mut g,
                &det,
                &p,
                &out,
                &scenes[i],
                &targets[i],
                &cache.outputs[i],
                cfg,
                point_seed,
            )?;
            let (total, b) = total_loss(&mut g, &terms, &cfg.distill)?;
            if !b.is_finite() {
                return Err(Error::DivergedAt { step });
            }
            g.backward(total)?;
            accumulate(&mut grads, p.grads(&g), w);
            parts.push(b);
        }
        opt.lr = cfg.train.lr_schedule.lr_at(cfg.train.lr, step, cfg.train.steps);
        opt.step(&mut params, &grads)
            .map_err(|e| if e.is_numeric_error() { Error::DivergedAt { step } } else { e })?;
        let b = mean_breakdown(&parts);
        on_step(step, &b, &params);
        trace.push(b);
    }
    Ok(TrainOutcome { params, trace })
}

/// Decoded, NMS-filtered detections of one scene.
pub fn predict(
    det: &Detector,
    params: &ParamStore,
    scene: &Scene,
    modality: Modality,
    eval: &EvalConfig,
) -> Result<Vec<Detection>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let out = det.forward(&mut g, &p, scene, modality)?;
    let hm: Vec<Tensor> = out.heatmaps.iter().map(|&v| g.value(v).clone()).collect();
    let reg: Vec<Tensor> = out.regression.iter().map(|&v| g.value(v).clone()).collect();
    let dets = decode(&hm, &reg, &det.heads, &det.grid, eval.top_n, eval.score_thresh);
    Ok(nms(&dets, eval.nms_iou))
}

pub fn evaluate_params(
    det: &Detector,
    params: &ParamStore,
    scenes: &[Scene],
    modality: Modality,
    eval: &EvalConfig,
) -> Result<MetricsReport> {
    det.check_params(params)?;
    let preds = scenes
        .par_iter()
        .map(|s| predict(det, params, s, modality, eval))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<_> = scenes.iter().map(|s| s.boxes.clone()).collect();
    evaluate(&preds, &gts, eval, det.num_classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub rsp: bool,
    pub vxl: bool,
    pub pts: bool,
    pub ins: bool,
    pub map_lite: f64,
    pub nds_lite: f64,
    pub seed: u64,
}

/// Trains one student per level combination from identical initialization
/// and scores each on the held-out split.
pub fn run_ablation(
    cfg: &RunConfig,
    bench: &Benchmark,
    teacher: &ParamStore,
    combos: &[Levels],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    if combos.is_empty() {
        return Err(Error::Config("ablation needs at least one combination".into()));
    }
    cfg.validate()?;
    let det = detector_for(cfg)?;
    let cache = TeacherCache::build(&det, teacher, &bench.train)?;
    let init = det.init_student_params(cfg.train.seed);
    let mut rows = Vec::with_capacity(combos.len());
    for levels in combos {
        let mut run = cfg.clone();
        run.distill = cfg.distill.with_levels(*levels);
        let out = train_student_from(&run, &bench.train, &cache, init.clone(), |_, _, _| {})?;
        let m = evaluate_params(&det, &out.params, &bench.eval, Modality::Student, &cfg.eval)?;
        let row = AblationRow {
            rsp: levels.rsp,
            vxl: levels.vxl,
            pts: levels.pts,
            ins: levels.ins,
            map_lite: m.map_lite,
            nds_lite: m.nds_lite,
            seed: cfg.train.seed,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Tidy `step,component,value` loss trace.
pub fn trace_csv(trace: &[LossBreakdown]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "component", "value"])?;
    for (step, b) in trace.iter().enumerate() {
        for (name, v) in b.components() {
            w.write_record([step.to_string(), name.to_string(), format!("{v:e}")])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

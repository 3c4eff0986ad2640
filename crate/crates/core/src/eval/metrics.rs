//! Center-distance AP, a reduced true-positive error set and NDS-lite.

use serde::{Deserialize, Serialize};

use super::Detection;
use crate::error::{Error, Result};
use crate::scene::{wrap_angle, Box3D};

/// Reference thresholds in meters at a 102.4 m detection range.
pub const REFERENCE_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
pub const REFERENCE_RANGE: f64 = 102.4;

/// Reference thresholds scaled to a detection range of `range` meters.
pub fn scaled_thresholds(range: f64) -> Vec<f64> {
    let s = range / REFERENCE_RANGE;
    REFERENCE_THRESHOLDS.iter().map(|t| t * s).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Center-distance thresholds in meters, ascending.
    pub thresholds: Vec<f64>,
    /// Threshold used to collect matches for the error metrics.
    pub tp_threshold: f64,
    /// Translation errors are divided by this before capping at 1.
    pub distance_scale: f64,
    pub nms_iou: f64,
    pub top_n: usize,
    pub score_thresh: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let s = 16.0 / REFERENCE_RANGE;
        Self {
            thresholds: scaled_thresholds(16.0),
            tp_threshold: 2.0 * s,
            distance_scale: s,
            nms_iou: 0.2,
            top_n: 100,
            score_thresh: 0.05,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Config("eval thresholds must be positive".into()));
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("eval thresholds must be ascending".into()));
        }
        if !(self.tp_threshold > 0.0) || !(self.distance_scale > 0.0) {
            return Err(Error::Config("tp_threshold and distance_scale must be > 0".into()));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::Config("nms_iou must be in (0, 1)".into()));
        }
        if self.top_n == 0 {
            return Err(Error::Config("top_n must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.score_thresh) {
            return Err(Error::Config("score_thresh must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    pub translation: f64,
    pub scale: f64,
    pub orientation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub thresholds: Vec<f64>,
    /// `class_ap[c][t]`; `None` for classes without ground truth.
    pub class_ap: Vec<Option<Vec<f64>>>,
    pub map_lite: f64,
    pub tp_errors: TpErrors,
    pub nds_lite: f64,
    pub num_predictions: usize,
    pub num_ground_truth: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Tidy `metric,class,threshold,value` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["metric", "class", "threshold", "value"])?;
        for (c, aps) in self.class_ap.iter().enumerate() {
            if let Some(aps) = aps {
                for (t, ap) in self.thresholds.iter().zip(aps) {
                    w.write_record(["ap", &c.to_string(), &t.to_string(), &ap.to_string()])?;
                }
            }
        }
        for (name, v) in [
            ("map_lite", self.map_lite),
            ("trans_err", self.tp_errors.translation),
            ("scale_err", self.tp_errors.scale),
            ("orient_err", self.tp_errors.orientation),
            ("nds_lite", self.nds_lite),
        ] {
            w.write_record([name, "", "", &v.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn center_distance(a: &Box3D, b: &Box3D) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// 1 - IoU of the two boxes after aligning centers and headings.
fn scale_error(a: &Box3D, b: &Box3D) -> f64 {
    let inter = a.w.min(b.w) * a.l.min(b.l) * a.h.min(b.h);
    let union = a.w * a.l * a.h + b.w * b.l * b.h - inter;
    1.0 - inter / union
}

fn orientation_error(a: &Box3D, b: &Box3D) -> f64 {
    wrap_angle(a.yaw - b.yaw).abs()
}

struct ClassMatch {
    /// Per prediction in score order: matched GT distance/errors, or None.
    tp: Vec<Option<(f64, f64, f64)>>,
    num_gt: usize,
}

/// Greedy matching of one class at one threshold. Predictions are visited by
/// descending score (ties by scene then list order) and take the nearest
/// still-unmatched ground truth strictly within `thresh`.
fn match_class(preds: &[Vec<Detection>], gts: &[Vec<Box3D>], class: usize, thresh: f64) -> ClassMatch {
    let mut order: Vec<(usize, usize)> = Vec::new();
    for (s, p) in preds.iter().enumerate() {
        for (i, d) in p.iter().enumerate() {
            if d.bbox.class_id == class {
                order.push((s, i));
            }
        }
    }
    order.sort_by(|a, b| {
        preds[b.0][b.1]
            .score
            .total_cmp(&preds[a.0][a.1].score)
            .then(a.cmp(b))
    });
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let num_gt = gts.iter().flatten().filter(|b| b.class_id == class).count();
    let mut tp = Vec::with_capacity(order.len());
    for (s, i) in order {
        let d = &preds[s][i].bbox;
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in gts[s].iter().enumerate() {
            if g.class_id != class || taken[s][j] {
                continue;
            }
            let dist = center_distance(d, g);
            if dist < thresh && best.is_none_or(|(bd, _)| dist < bd) {
                best = Some((dist, j));
            }
        }
        tp.push(best.map(|(dist, j)| {
            taken[s][j] = true;
            let g = &gts[s][j];
            (dist, scale_error(d, g), orientation_error(d, g))
        }));
    }
    ClassMatch { tp, num_gt }
}

/// 101-point interpolated average precision.
fn average_precision(m: &ClassMatch) -> f64 {
    if m.num_gt == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut curve = Vec::with_capacity(m.tp.len());
    for (i, t) in m.tp.iter().enumerate() {
        if t.is_some() {
            hits += 1;
        }
        curve.push((hits as f64 / m.num_gt as f64, hits as f64 / (i + 1) as f64));
    }
    // suffix maximum of precision makes the envelope monotone
    let mut envelope = vec![0.0; curve.len()];
    let mut best: f64 = 0.0;
    for i in (0..curve.len()).rev() {
        best = best.max(curve[i].1);
        envelope[i] = best;
    }
    let mut sum = 0.0;
    let mut j = 0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        while j < curve.len() && curve[j].0 < level - 1e-12 {
            j += 1;
        }
        if j < curve.len() {
            sum += envelope[j];
        }
    }
    sum / 101.0
}

/// Scores per-scene predictions against per-scene ground truth.
pub fn evaluate(
    preds: &[Vec<Detection>],
    gts: &[Vec<Box3D>],
    cfg: &EvalConfig,
    num_classes: usize,
) -> Result<MetricsReport> {
    cfg.validate()?;
    if preds.len() != gts.len() {
        return Err(Error::Config(format!(
            "{} prediction lists for {} scenes",
            preds.len(),
            gts.len()
        )));
    }
    let mut class_ap = Vec::with_capacity(num_classes);
    let mut err_sums = [0.0; 3];
    let mut err_classes = 0usize;
    for c in 0..num_classes {
        let num_gt = gts.iter().flatten().filter(|b| b.class_id == c).count();
        if num_gt == 0 {
            class_ap.push(None);
            continue;
        }
        let aps = cfg
            .thresholds
            .iter()
            .map(|&t| average_precision(&match_class(preds, gts, c, t)))
            .collect();
        class_ap.push(Some(aps));

        let m = match_class(preds, gts, c, cfg.tp_threshold);
        let matched: Vec<_> = m.tp.iter().flatten().collect();
        if !matched.is_empty() {
            let n = matched.len() as f64;
            err_sums[0] += matched.iter().map(|e| e.0 / cfg.distance_scale).sum::<f64>() / n;
            err_sums[1] += matched.iter().map(|e| e.1).sum::<f64>() / n;
            err_sums[2] += matched.iter().map(|e| e.2).sum::<f64>() / n;
            err_classes += 1;
        }
    }
    let scored: Vec<f64> = class_ap.iter().flatten().flatten().copied().collect();
    let map_lite = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    let tp_errors = if err_classes == 0 {
        TpErrors {
            translation: 1.0,
            scale: 1.0,
            orientation: 1.0,
        }
    } else {
        let n = err_classes as f64;
        TpErrors {
            translation: err_sums[0] / n,
            scale: err_sums[1] / n,
            orientation: err_sums[2] / n,
        }
    };
    let tp_score = [tp_errors.translation, tp_errors.scale, tp_errors.orientation]
        .iter()
        .map(|e| 1.0 - e.min(1.0))
        .sum::<f64>()
        / 3.0;
    Ok(MetricsReport {
        thresholds: cfg.thresholds.clone(),
        class_ap,
        map_lite,
        tp_errors,
        nds_lite: 0.5 * map_lite + 0.5 * tp_score,
        num_predictions: preds.iter().map(Vec::len).sum(),
        num_ground_truth: gts.iter().map(Vec::len).sum(),
    })
}

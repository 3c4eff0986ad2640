//! Deterministic synthetic LiDAR scenes.
//!
//! Objects are hollow box shells whose point count falls off with distance
//! from the sensor. The background holds ground returns plus point clusters
//! ("distractors") that look object-like in geometry but carry background
//! semantics, so the painted semantic channels carry information the raw
//! geometry does not.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Oriented 3D box. `yaw` rotates the length axis away from +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub vx: f64,
    pub vy: f64,
    pub yaw: f64,
    pub class_id: usize,
}

impl Box3D {
    /// Point expressed in the box frame (length along local x).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        let (s, c) = self.yaw.sin_cos();
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.z]
    }

    pub fn from_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.x + c * p[0] - s * p[1],
            self.y + s * p[0] + c * p[1],
            self.z + p[2],
        ]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let q = self.to_local(p);
        q[0].abs() < 0.5 * self.l && q[1].abs() < 0.5 * self.w && q[2].abs() < 0.5 * self.h
    }

    /// BEV corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (hl, hw) = (0.5 * self.l, 0.5 * self.w);
        [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]].map(|[u, v]| {
            let p = self.from_local([u, v, 0.0]);
            [p[0], p[1]]
        })
    }

    pub fn bev_radius(&self) -> f64 {
        0.5 * self.w.hypot(self.l)
    }

    pub fn bev_distance(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn is_valid(&self, num_classes: usize) -> bool {
        self.w > 0.0
            && self.l > 0.0
            && self.h > 0.0
            && self.yaw > -PI
            && self.yaw <= PI
            && self.class_id < num_classes
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI
    } else if a > PI {
        a -= 2.0 * PI
    }
    a
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// `[x_min, x_max, y_min, y_max, z_min, z_max]` in meters.
    pub range: [f64; 6],
    pub num_classes: usize,
    pub boxes_per_scene: [usize; 2],
    pub points_per_box: [usize; 2],
    pub background_points: usize,
    pub distance_sparsity_exponent: f64,
    pub semantic_noise: f64,
    /// Mean `(w, l, h)` per class; sizes are jittered by +-10%.
    pub class_sizes: Vec<[f64; 3]>,
    pub distractors_per_scene: [usize; 2],
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            range: [-8.0, 8.0, -8.0, 8.0, -1.0, 1.0],
            num_classes: 4,
            boxes_per_scene: [2, 5],
            points_per_box: [12, 120],
            background_points: 600,
            distance_sparsity_exponent: 1.0,
            semantic_noise: 0.2,
            class_sizes: vec![
                [1.8, 4.2, 1.5],
                [2.2, 5.2, 1.6],
                [0.7, 0.7, 1.6],
                [0.7, 1.8, 1.5],
            ],
            distractors_per_scene: [2, 5],
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let r = &self.range;
        let bad = |m: String| Err(Error::Config(m));
        if !(r[0] < r[1] && r[2] < r[3] && r[4] < r[5]) {
            return bad(format!("scene range {r:?} is not ordered"));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1".into());
        }
        if self.boxes_per_scene[0] > self.boxes_per_scene[1]
            || self.points_per_box[0] > self.points_per_box[1]
            || self.distractors_per_scene[0] > self.distractors_per_scene[1]
        {
            return bad("count ranges must be [min, max] with min <= max".into());
        }
        if !(0.0..=1.0).contains(&self.semantic_noise) {
            return bad(format!("semantic_noise {} outside [0, 1]", self.semantic_noise));
        }
        if !self.distance_sparsity_exponent.is_finite() || self.distance_sparsity_exponent < 0.0 {
            return bad("distance_sparsity_exponent must be finite and >= 0".into());
        }
        if self.class_sizes.len() != self.num_classes {
            return bad(format!(
                "class_sizes has {} entries for {} classes",
                self.class_sizes.len(),
                self.num_classes
            ));
        }
        if self.class_sizes.iter().flatten().any(|&s| !(s > 0.0)) {
            return bad("class sizes must be > 0".into());
        }
        let max_h = self.class_sizes.iter().map(|s| s[2]).fold(0.0, f64::max) * 1.1;
        if max_h + 0.2 > r[5] - r[4] {
            return bad("z range too small for the tallest class".into());
        }
        Ok(())
    }

    /// Largest BEV distance from the sensor to the range border.
    pub fn range_radius(&self) -> f64 {
        let r = &self.range;
        r[0].abs().max(r[1].abs()).max(r[2].abs()).max(r[3].abs())
    }

    /// Unclamped expected point count for a box at BEV distance `d`.
    pub fn expected_points(&self, d: f64) -> f64 {
        let d = d.max(1e-3);
        self.points_per_box[0] as f64 * (self.range_radius() / d).powf(self.distance_sparsity_exponent)
    }

    pub fn points_for_distance(&self, d: f64) -> usize {
        let n = self.expected_points(d).round();
        (n as usize).clamp(self.points_per_box[0], self.points_per_box[1])
    }

    fn ground_z(&self) -> f64 {
        self.range[4] + 0.1
    }

    fn inside_range(&self, p: [f64; 3]) -> bool {
        let r = &self.range;
        p[0] >= r[0] && p[0] < r[1] && p[1] >= r[2] && p[1] < r[3] && p[2] >= r[4] && p[2] < r[5]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub points: Vec<[f64; 3]>,
    /// Row-major `N x K` painted class scores.
    pub semantics: Vec<f64>,
    pub num_classes: usize,
    pub boxes: Vec<Box3D>,
    /// Index into `boxes` for foreground points, -1 for background.
    pub point_to_box: Vec<i64>,
    pub seed: u64,
}

impl Scene {
    pub fn num_points(&self) -> usize {
        self.points.len()
    }

    pub fn semantics_row(&self, i: usize) -> &[f64] {
        &self.semantics[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn foreground_indices(&self) -> Vec<usize> {
        (0..self.points.len())
            .filter(|&i| self.point_to_box[i] >= 0)
            .collect()
    }

    /// Copy with every semantic score set to zero (the LiDAR-only view).
    pub fn without_semantics(&self) -> Scene {
        let mut s = self.clone();
        s.semantics.iter_mut().for_each(|v| *v = 0.0);
        s
    }
}

/// Random placements tried per object before giving up.
const PLACEMENT_TRIES: usize = 1000;

const PLACEMENT_MARGIN: f64 = 0.2;

/// BEV footprints closer than the placement margin.
fn boxes_touch(a: &Box3D, b: &Box3D) -> bool {
    let grow = |x: &Box3D| Box3D {
        w: x.w + PLACEMENT_MARGIN,
        l: x.l + PLACEMENT_MARGIN,
        ..*x
    };
    crate::eval::bev_intersection(&grow(a), &grow(b)) > 0.0
}

/// Disc (plus a margin) overlapping any placed disc.
fn collides(c: [f64; 2], r: f64, placed: &[([f64; 2], f64)]) -> bool {
    placed
        .iter()
        .any(|(q, rq)| (c[0] - q[0]).hypot(c[1] - q[1]) < r + rq + PLACEMENT_MARGIN)
}

fn sample_shell_point(rng: &mut ChaCha8Rng, b: &Box3D) -> [f64; 3] {
    // Side walls and roof, weighted by area; points sit just inside the faces.
    let (l, w, h) = (b.l, b.w, b.h);
    let areas = [l * h, l * h, w * h, w * h, l * w];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.gen::<f64>() * total;
    let mut face = 0;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            face = i;
            break;
        }
        pick -= a;
        face = i;
    }
    let s = 0.96;
    let u = rng.gen_range(-s..s);
    let v = rng.gen_range(-s..s);
    let depth = rng.gen_range(0.9..s);
    let local = match face {
        0 => [u * 0.5 * l, depth * 0.5 * w, v * 0.5 * h],
        1 => [u * 0.5 * l, -depth * 0.5 * w, v * 0.5 * h],
        2 => [depth * 0.5 * l, u * 0.5 * w, v * 0.5 * h],
        3 => [-depth * 0.5 * l, u * 0.5 * w, v * 0.5 * h],
        _ => [u * 0.5 * l, v * 0.5 * w, depth * 0.5 * h],
    };
    b.from_local(local)
}

/// Generates one scene; pure in `(cfg, seed)`.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = cfg.range;
    let n_boxes = rng.gen_range(cfg.boxes_per_scene[0]..=cfg.boxes_per_scene[1]);
    let mut placed: Vec<([f64; 2], f64)> = Vec::new();
    let mut boxes = Vec::with_capacity(n_boxes);

    let ground = cfg.ground_z();
    for _ in 0..n_boxes {
        let class_id = rng.gen_range(0..cfg.num_classes);
        let [w0, l0, h0] = cfg.class_sizes[class_id];
        let jitter = |rng: &mut ChaCha8Rng, v: f64| v * rng.gen_range(0.9..1.1);
        let (w, l, h) = (jitter(&mut rng, w0), jitter(&mut rng, l0), jitter(&mut rng, h0));
        let radius = 0.5 * w.hypot(l);
        let mut spot = None;
        for _ in 0..PLACEMENT_TRIES {
            let x = rng.gen_range(r[0] + radius..r[1] - radius);
            let y = rng.gen_range(r[2] + radius..r[3] - radius);
            let yaw = wrap_angle(rng.gen_range(-PI..PI));
            let cand = Box3D {
                x,
                y,
                z: ground + 0.5 * h,
                w,
                l,
                h,
                vx: 0.0,
                vy: 0.0,
                yaw,
                class_id,
            };
            if !boxes.iter().any(|b| boxes_touch(b, &cand)) {
                spot = Some(cand);
                break;
            }
        }
        let Some(cand) = spot else {
            return Err(Error::Placement {
                seed,
                wanted: n_boxes,
            });
        };
        placed.push(([cand.x, cand.y], radius));
        boxes.push(Box3D {
            vx: rng.gen_range(-2.0..2.0),
            vy: rng.gen_range(-2.0..2.0),
            ..cand
        });
    }

    let mut points: Vec<[f64; 3]> = Vec::new();
    for b in &boxes {
        let n = cfg.points_for_distance(b.bev_distance());
        for _ in 0..n {
            let p = sample_shell_point(&mut rng, b);
            if cfg.inside_range(p) {
                points.push(p);
            }
        }
    }

    // Distractor clusters: compact blobs standing on the ground.
    let n_distractors =
        rng.gen_range(cfg.distractors_per_scene[0]..=cfg.distractors_per_scene[1]);
    for _ in 0..n_distractors {
        let spread = rng.gen_range(0.25..0.8);
        let height = rng.gen_range(0.5..1.6);
        let radius = 2.0 * spread;
        let mut spot = None;
        for _ in 0..PLACEMENT_TRIES {
            let x = rng.gen_range(r[0] + radius..r[1] - radius);
            let y = rng.gen_range(r[2] + radius..r[3] - radius);
            if !collides([x, y], radius, &placed) {
                spot = Some([x, y]);
                break;
            }
        }
        let Some([cx, cy]) = spot else { continue };
        placed.push(([cx, cy], radius));
        let d = cx.hypot(cy);
        let n = cfg.points_for_distance(d);
        for _ in 0..n {
            let p = [
                cx + spread * rng.gen_range(-1.0..1.0f64),
                cy + spread * rng.gen_range(-1.0..1.0f64),
                ground + 0.02 + height * rng.gen::<f64>(),
            ];
            if cfg.inside_range(p) && !boxes.iter().any(|b| b.contains(p)) {
                points.push(p);
            }
        }
    }

    for _ in 0..cfg.background_points {
        let p = [
            rng.gen_range(r[0]..r[1]),
            rng.gen_range(r[2]..r[3]),
            rng.gen_range(r[4]..ground - 0.02),
        ];
        if !boxes.iter().any(|b| b.contains(p)) {
            points.push(p);
        }
    }

    let point_to_box = label_points(&points, &boxes);
    let mut scene = Scene {
        points,
        semantics: Vec::new(),
        num_classes: cfg.num_classes,
        boxes,
        point_to_box,
        seed,
    };
    scene.semantics = paint_points(&scene, cfg.semantic_noise, seed ^ 0x5eed_5eed_5eed_5eed);
    Ok(scene)
}

/// First box containing each point, or -1.
pub fn label_points(points: &[[f64; 3]], boxes: &[Box3D]) -> Vec<i64> {
    points
        .iter()
        .map(|&p| {
            boxes
                .iter()
                .position(|b| b.contains(p))
                .map_or(-1, |i| i as i64)
        })
        .collect()
}

/// Simulated segmentation scores: a peak at the box class for foreground
/// points, near-uniform low mass for background points. Rows sum to <= 1.
pub fn paint_points(scene: &Scene, noise: f64, seed: u64) -> Vec<f64> {
    let k = scene.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0; scene.points.len() * k];
    for (i, row) in out.chunks_exact_mut(k).enumerate() {
        let owner = scene.point_to_box[i];
        if owner >= 0 {
            let c = scene.boxes[owner as usize].class_id;
            let peak = 1.0 - noise * rng.gen::<f64>();
            let rest = if k > 1 { (1.0 - peak) / (k - 1) as f64 } else { 0.0 };
            for (j, v) in row.iter_mut().enumerate() {
                *v = if j == c { peak } else { rest };
            }
        } else {
            for v in row.iter_mut() {
                *v = (0.5 + 0.5 * noise * rng.gen::<f64>()) / k as f64 * 0.5;
            }
        }
    }
    out
}

#![allow(dead_code)]

use distill3d_core::detector::HeadSpec;
use distill3d_core::scene::{Box3D, Scene, SceneConfig};
use distill3d_core::tensor::Tensor;
use distill3d_core::voxel::GridSpec;
use rand::{Rng, SeedableRng};
pub use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// 3.2 m x 3.2 m x 0.8 m grid with an 8x8 BEV map.
pub fn tiny_grid() -> GridSpec {
    GridSpec {
        origin: [-1.6, -1.6, -0.4],
        voxel_size: [0.1, 0.1, 0.2],
        dims: [32, 32, 4],
        bev_stride: 4,
    }
}

/// Scene settings matching [`tiny_grid`].
pub fn tiny_scene_config() -> SceneConfig {
    SceneConfig {
        range: [-1.6, 1.6, -1.6, 1.6, -0.4, 0.4],
        boxes_per_scene: [2, 3],
        points_per_box: [20, 40],
        background_points: 20,
        class_sizes: vec![[0.5, 0.9, 0.5], [0.6, 1.0, 0.5], [0.3, 0.3, 0.5], [0.3, 0.6, 0.5]],
        distractors_per_scene: [0, 1],
        ..SceneConfig::default()
    }
}

pub fn heads() -> HeadSpec {
    HeadSpec::default()
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// `base + d` with every `|d|` kept at least `margin` away from the
/// smooth-L1 transition at `beta`.
pub fn offset_away_from_kink(rng: &mut ChaCha8Rng, base: &Tensor, spread: f64, beta: f64, margin: f64) -> Tensor {
    let data = base
        .data()
        .iter()
        .map(|&b| loop {
            let d: f64 = rng.gen_range(-spread..spread);
            if (d.abs() - beta).abs() > margin {
                break b + d;
            }
        })
        .collect();
    Tensor::new(base.shape(), data).unwrap()
}

pub fn random_box(rng: &mut ChaCha8Rng, half_extent: f64, class_id: usize) -> Box3D {
    Box3D {
        x: rng.gen_range(-half_extent..half_extent),
        y: rng.gen_range(-half_extent..half_extent),
        z: 0.0,
        w: rng.gen_range(0.3..1.5),
        l: rng.gen_range(0.3..2.0),
        h: rng.gen_range(0.3..1.0),
        vx: 0.0,
        vy: 0.0,
        yaw: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
        class_id,
    }
}

/// Scene with `n` uniform points in the grid; the first `fg` are labeled foreground.
pub fn point_scene(rng: &mut ChaCha8Rng, grid: &GridSpec, n: usize, fg: usize) -> Scene {
    let hi = [0, 1, 2].map(|a| grid.origin[a] + grid.voxel_size[a] * grid.dims[a] as f64);
    let points: Vec<[f64; 3]> = (0..n)
        .map(|_| [0, 1, 2].map(|a| rng.gen_range(grid.origin[a]..hi[a])))
        .collect();
    Scene {
        point_to_box: (0..n).map(|i| if i < fg { 0 } else { -1 }).collect(),
        semantics: vec![0.0; n * 4],
        points,
        num_classes: 4,
        boxes: vec![],
        seed: 0,
    }
}
pub mod grad_suite;
pub mod mining_suite;
pub mod interp_suite;
pub mod iou_suite;
pub mod fixed_point;

/// Run configuration on the tiny grid with a handful of scenes.
pub fn tiny_run_config() -> distill3d_core::config::RunConfig {
    let mut cfg = distill3d_core::config::RunConfig {
        scene: tiny_scene_config(),
        grid: tiny_grid(),
        ..Default::default()
    };
    cfg.data.train_seeds = [0, 6];
    cfg.data.eval_seeds = [100, 104];
    cfg.train.steps = 4;
    cfg.train.teacher_steps = 4;
    cfg.train.batch_scenes = 2;
    cfg
}

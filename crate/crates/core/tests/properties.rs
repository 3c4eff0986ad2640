mod common;

use common::grad_suite::LossFixture;
use common::*;
use distill3d_core::config::RunConfig;
use distill3d_core::distill::{total_loss, voxel_relation_loss};
use distill3d_core::scene::{generate_scene, Box3D, SceneConfig};
use distill3d_core::tensor::{Graph, Tensor};
use distill3d_core::voxel::CrucialVoxelSets;
use proptest::prelude::*;
use rand::Rng;

/// Point-in-box through the half-planes of the corner polygon.
fn inside_oracle(b: &Box3D, p: [f64; 3]) -> bool {
    let c = b.bev_corners();
    let inside_edges = (0..4).all(|i| {
        let (a, n) = (c[i], c[(i + 1) % 4]);
        (n[0] - a[0]) * (p[1] - a[1]) - (n[1] - a[1]) * (p[0] - a[0]) > 0.0
    });
    inside_edges && (p[2] - b.z).abs() < 0.5 * b.h
}

#[test]
fn containment_matches_half_plane_oracle() {
    let mut r = rng(1);
    let mut hits = 0;
    for _ in 0..1000 {
        let mut b = random_box(&mut r, 3.0, 0);
        b.z = r.gen_range(-1.0..1.0);
        let reach = 0.6 * b.l.max(b.w);
        let p = [
            b.x + r.gen_range(-reach..reach),
            b.y + r.gen_range(-reach..reach),
            b.z + r.gen_range(-0.6..0.6) * b.h,
        ];
        let got = b.contains(p);
        assert_eq!(got, inside_oracle(&b, p), "{b:?} {p:?}");
        hits += got as usize;
    }
    assert!(hits > 100 && hits < 900);
}

#[test]
fn classes_are_balanced() {
    let cfg = SceneConfig::default();
    let mut counts = vec![0usize; cfg.num_classes];
    for seed in 0..100 {
        for b in generate_scene(&cfg, seed).unwrap().boxes {
            counts[b.class_id] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    for c in &counts {
        let share = *c as f64 / total as f64;
        assert!((0.15..0.35).contains(&share), "{counts:?}");
    }
}

#[test]
fn painted_semantics_peak_at_the_owning_class() {
    let cfg = SceneConfig::default();
    for seed in 0..20 {
        let s = generate_scene(&cfg, seed).unwrap();
        let mut fg_min = f64::INFINITY;
        let mut bg_max: f64 = 0.0;
        for i in 0..s.num_points() {
            let row = s.semantics_row(i);
            let top = row.iter().copied().fold(f64::MIN, f64::max);
            assert!(row.iter().sum::<f64>() <= 1.0 + 1e-12);
            match s.point_to_box[i] {
                -1 => bg_max = bg_max.max(top),
                o => {
                    let c = s.boxes[o as usize].class_id;
                    assert_eq!(row[c], top);
                    assert!(row.iter().enumerate().all(|(j, &v)| j == c || v < top));
                    fg_min = fg_min.min(top);
                }
            }
        }
        assert!(bg_max < fg_min);
    }
}

#[test]
fn labels_agree_with_box_containment() {
    let cfg = SceneConfig::default();
    for seed in 0..20 {
        let s = generate_scene(&cfg, seed).unwrap();
        for (p, &o) in s.points.iter().zip(&s.point_to_box) {
            let owner = s.boxes.iter().position(|b| inside_oracle(b, *p));
            assert_eq!(owner.map_or(-1, |i| i as i64), o);
        }
    }
}

#[test]
fn every_benchmark_seed_generates() {
    let cfg = RunConfig::default();
    let [a, _] = cfg.data.train_seeds;
    let [_, d] = cfg.data.eval_seeds;
    for seed in a..d {
        let s = generate_scene(&cfg.scene, seed).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        assert!(s.boxes.iter().all(|b| b.is_valid(cfg.scene.num_classes)));
    }
}

fn relation_value(s: &Tensor, t: &Tensor) -> f64 {
    let mut g = Graph::new();
    let v = g.param(s.clone());
    let sets = CrucialVoxelSets {
        true_pos: (0..s.rows()).collect(),
        ..Default::default()
    };
    let l = voxel_relation_loss(&mut g, v, t, &sets).unwrap();
    g.item(l)
}

fn brute_force_relation(s: &Tensor, t: &Tensor) -> f64 {
    let n = s.rows();
    let cos = |m: &Tensor, i: usize, j: usize| {
        let (a, b) = (m.row(i), m.row(j));
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            sum += (cos(s, i, j) - cos(t, i, j)).powi(2);
        }
    }
    sum / (n * n) as f64
}

proptest! {
    #[test]
    fn relation_matches_pairwise_definition(seed in 0u64..10_000, n in 1usize..=64, c in 1usize..12) {
        let mut r = rng(seed);
        let s = uniform(&mut r, n, c, -1.0, 1.0);
        let t = uniform(&mut r, n, c, -1.0, 1.0);
        let got = relation_value(&s, &t);
        let want = brute_force_relation(&s, &t);
        prop_assert!((got - want).abs() < 1e-9, "{} vs {}", got, want);
    }

    #[test]
    fn relation_ignores_row_scale(seed in 0u64..10_000, n in 1usize..40) {
        let mut r = rng(seed);
        let s = uniform(&mut r, n, 5, -1.0, 1.0);
        let t = uniform(&mut r, n, 5, -1.0, 1.0);
        let mut scaled = s.clone();
        for row in scaled.data_mut().chunks_exact_mut(5) {
            let k: f64 = r.gen_range(0.01..100.0);
            row.iter_mut().for_each(|v| *v *= k);
        }
        prop_assert!((relation_value(&s, &t) - relation_value(&scaled, &t)).abs() < 1e-9);
    }

    #[test]
    fn every_loss_is_non_negative(seed in 0u64..1_000) {
        let fx = LossFixture::new(seed);
        let mut g = Graph::new();
        let x = g.constant(fx.bev_s.clone());
        let terms = fx.terms(&mut g, 3, x).unwrap();
        let (total, parts) = total_loss(&mut g, &terms, &fx.cfg).unwrap();
        prop_assert!(parts.is_finite());
        for (name, v) in parts.components() {
            prop_assert!(v >= 0.0, "{} = {}", name, v);
        }
        prop_assert!(g.item(total) >= 0.0);
    }
}

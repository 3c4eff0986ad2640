//! Brute-force nearest-neighbour oracle for inverse-distance interpolation.

use distill3d_core::scene::Scene;
use distill3d_core::tensor::SparseRows;
use distill3d_core::voxel::{idw_weights, voxelize, GridSpec, SparseVoxelGrid, COINCIDENT_EPS};
use rand::Rng;

use super::*;

/// Scans every active voxel; ties break by row index.
pub fn oracle_weights(grid: &SparseVoxelGrid, q: [f64; 3], spec: &GridSpec, k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(f64, usize)> = grid
        .coords()
        .iter()
        .enumerate()
        .map(|(row, &c)| {
            let p = spec.voxel_center(c);
            let d = ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2)).sqrt();
            (d, row)
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let near = &all[..k.min(all.len())];
    if near[0].0 < COINCIDENT_EPS {
        return vec![(near[0].1, 1.0)];
    }
    let total: f64 = near.iter().map(|(d, _)| 1.0 / d).sum();
    near.iter().map(|&(d, row)| (row, 1.0 / d / total)).collect()
}

pub fn sparse_scene(r: &mut ChaCha8Rng, spec: &GridSpec, n: usize) -> Scene {
    point_scene(r, spec, n, 0)
}

/// Queries inside the grid, on voxel centers, and slightly outside it.
pub fn queries(r: &mut ChaCha8Rng, spec: &GridSpec, grid: &SparseVoxelGrid, n: usize) -> Vec<[f64; 3]> {
    let lo = spec.origin;
    let hi = [0, 1, 2].map(|a| lo[a] + spec.voxel_size[a] * spec.dims[a] as f64);
    (0..n)
        .map(|i| match i % 10 {
            0 => spec.voxel_center(grid.coords()[r.gen_range(0..grid.len())]),
            1 => [0, 1, 2].map(|a| r.gen_range(lo[a] - 0.3..hi[a] + 0.3)),
            _ => [0, 1, 2].map(|a| r.gen_range(lo[a]..hi[a])),
        })
        .collect()
}

pub struct InterpOutcome {
    pub queries: usize,
    pub max_weight_err: f64,
    pub neighbour_mismatches: usize,
    /// Largest `|sum(w) - 1|` over queries.
    pub max_sum_err: f64,
    /// Rows that are empty or hold a weight outside `[0, 1]`.
    pub non_convex_rows: usize,
}

pub fn run_interpolation_oracle(num_queries: usize, seed: u64) -> InterpOutcome {
    let spec = tiny_grid();
    let mut r = rng(seed);
    let scene = sparse_scene(&mut r, &spec, 80);
    let (grid, _) = voxelize(&scene, &spec, false);
    let qs = queries(&mut r, &spec, &grid, num_queries);
    let table: SparseRows = idw_weights(grid.coords(), |c| grid.row_of(c), &qs, &spec, 3).unwrap();
    let mut out = InterpOutcome {
        queries: qs.len(),
        max_weight_err: 0.0,
        neighbour_mismatches: 0,
        max_sum_err: 0.0,
        non_convex_rows: 0,
    };
    for (i, &q) in qs.iter().enumerate() {
        let want = oracle_weights(&grid, q, &spec, 3);
        let got = table.row(i);
        let sum: f64 = got.iter().map(|e| e.1).sum();
        out.max_sum_err = out.max_sum_err.max((sum - 1.0).abs());
        if got.is_empty() || got.iter().any(|&(_, w)| !(0.0..=1.0).contains(&w)) {
            out.non_convex_rows += 1;
        }
        if got.len() != want.len() || got.iter().zip(&want).any(|(a, b)| a.0 != b.0) {
            out.neighbour_mismatches += 1;
            continue;
        }
        for (a, b) in got.iter().zip(&want) {
            out.max_weight_err = out.max_weight_err.max((a.1 - b.1).abs());
        }
    }
    out
}

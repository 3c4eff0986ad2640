//! Brute-force oracles for crucial response and voxel mining.

use std::collections::BTreeSet;

use distill3d_core::distill::{mine_crucial_responses, BevCell, CrucialSets};
use distill3d_core::tensor::Tensor;
use distill3d_core::voxel::{mine_crucial_voxels, CrucialVoxelSets, GridSpec, VoxelCoord};
use rand::Rng;

use super::*;

/// Heatmap values on a coarse lattice so that many land exactly on `tau`.
pub fn lattice_heatmaps(r: &mut ChaCha8Rng, cells: usize, groups: &[usize], tau: f64) -> Vec<Tensor> {
    groups
        .iter()
        .map(|&k| {
            let data = (0..cells * k)
                .map(|_| match r.gen_range(0..4) {
                    0 => tau,
                    1 => 0.0,
                    _ => (r.gen_range(0..=10) as f64) * tau * 0.2,
                })
                .collect();
            Tensor::matrix(cells, k, data).unwrap()
        })
        .collect()
}

/// Per-class formulation: a cell "fires" when any class exceeds `tau` and is
/// "quiet" when every class is below it.
pub fn oracle_responses(h_s: &[Tensor], h_g: &[Tensor], width: usize, tau: f64) -> CrucialSets {
    let mut out = CrucialSets::default();
    for head in 0..h_s.len() {
        for cell in 0..h_s[head].rows() {
            let fires = |t: &Tensor| t.row(cell).iter().any(|&v| v > tau);
            let quiet = |t: &Tensor| t.row(cell).iter().all(|&v| v < tau);
            let at = BevCell {
                head,
                y: cell / width,
                x: cell % width,
            };
            let (s, g) = (&h_s[head], &h_g[head]);
            if fires(s) && fires(g) {
                out.true_pos.push(at);
            }
            if fires(s) && quiet(g) {
                out.false_pos.push(at);
            }
            if quiet(s) && fires(g) {
                out.false_neg.push(at);
            }
        }
    }
    out
}

/// Each voxel takes the strongest label (FN over FP over TP) of the BEV cell
/// containing its column, over all heads.
pub fn oracle_voxels(sets: &CrucialSets, coords: &[VoxelCoord], spec: &GridSpec) -> CrucialVoxelSets {
    let column = |cells: &[BevCell]| -> BTreeSet<(usize, usize)> { cells.iter().map(|c| (c.y, c.x)).collect() };
    let (tp, fp, fneg) = (column(&sets.true_pos), column(&sets.false_pos), column(&sets.false_neg));
    let mut out = CrucialVoxelSets::default();
    let s = spec.bev_stride as u32;
    for (row, c) in coords.iter().enumerate() {
        let key = ((c[1] / s) as usize, (c[0] / s) as usize);
        if fneg.contains(&key) {
            out.false_neg.push(row);
        } else if fp.contains(&key) {
            out.false_pos.push(row);
        } else if tp.contains(&key) {
            out.true_pos.push(row);
        }
    }
    out
}

pub struct MiningOutcome {
    pub instances: usize,
    pub response_mismatches: usize,
    pub voxel_mismatches: usize,
    pub boundary_cells: usize,
}

/// 64 x 64 x 2 voxels under a 16 x 16 BEV map.
pub fn wide_grid() -> GridSpec {
    GridSpec {
        origin: [-3.2, -3.2, -0.2],
        voxel_size: [0.1, 0.1, 0.2],
        dims: [64, 64, 2],
        bev_stride: 4,
    }
}

/// Runs `n` random instances on `grid` against both oracles.
pub fn run_mining_oracles(grid: &GridSpec, n: usize, seed: u64) -> MiningOutcome {
    let grid = grid.clone();
    let (h, w) = grid.bev_dims();
    let groups: Vec<usize> = heads().groups.iter().map(Vec::len).collect();
    let mut r = rng(seed);
    let mut out = MiningOutcome {
        instances: n,
        response_mismatches: 0,
        voxel_mismatches: 0,
        boundary_cells: 0,
    };
    for i in 0..n {
        let tau = [0.1, 0.3, 0.5][i % 3];
        let hs = lattice_heatmaps(&mut r, h * w, &groups, tau);
        let hg = lattice_heatmaps(&mut r, h * w, &groups, tau);
        out.boundary_cells += hs
            .iter()
            .map(|t| (0..t.rows()).filter(|&c| t.row(c).iter().copied().fold(f64::MIN, f64::max) == tau).count())
            .sum::<usize>();
        let got = mine_crucial_responses(&hs, &hg, w, tau).unwrap();
        let want = oracle_responses(&hs, &hg, w, tau);
        if got != want {
            out.response_mismatches += 1;
        }
        let n_points = r.gen_range(50..grid.dims.iter().product::<usize>() / 4);
        let scene = point_scene(&mut r, &grid, n_points, 0);
        let (voxels, _) = distill3d_core::voxel::voxelize(&scene, &grid, false);
        let got_v = mine_crucial_voxels(&got, voxels.coords(), &grid);
        if got_v != oracle_voxels(&want, voxels.coords(), &grid) {
            out.voxel_mismatches += 1;
        }
    }
    out
}

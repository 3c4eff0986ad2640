//! Voxelization, crucial-voxel mining and voxel-to-point interpolation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::distill::CrucialSets;
use crate::error::{Error, Result};
use crate::scene::Scene;
use crate::tensor::{SparseRows, Tensor};

pub type VoxelCoord = [u32; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub origin: [f64; 3],
    pub voxel_size: [f64; 3],
    pub dims: [usize; 3],
    /// Voxel columns per BEV cell along x and y.
    pub bev_stride: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            origin: [-8.0, -8.0, -1.0],
            voxel_size: [0.1, 0.1, 0.2],
            dims: [160, 160, 10],
            bev_stride: 4,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.voxel_size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config(format!("voxel_size {:?} must be > 0", self.voxel_size)));
        }
        if self.dims.contains(&0) || self.bev_stride == 0 {
            return Err(Error::Config("grid dims and bev_stride must be > 0".into()));
        }
        if !self.dims[0].is_multiple_of(self.bev_stride) || !self.dims[1].is_multiple_of(self.bev_stride) {
            return Err(Error::Config(format!(
                "dims {:?} not divisible by bev_stride {}",
                self.dims, self.bev_stride
            )));
        }
        Ok(())
    }

    /// `(height, width)` of the BEV maps, i.e. `(ny, nx) / bev_stride`.
    pub fn bev_dims(&self) -> (usize, usize) {
        (self.dims[1] / self.bev_stride, self.dims[0] / self.bev_stride)
    }

    pub fn bev_cells(&self) -> usize {
        let (h, w) = self.bev_dims();
        h * w
    }

    /// BEV cell edge length along x and y, in meters.
    pub fn bev_cell_size(&self) -> [f64; 2] {
        [
            self.voxel_size[0] * self.bev_stride as f64,
            self.voxel_size[1] * self.bev_stride as f64,
        ]
    }

    pub fn voxel_of(&self, p: [f64; 3]) -> Option<VoxelCoord> {
        let mut c = [0u32; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size[a]).floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            c[a] = f as u32;
        }
        Some(c)
    }

    pub fn voxel_center(&self, c: VoxelCoord) -> [f64; 3] {
        [0, 1, 2].map(|a| self.origin[a] + (c[a] as f64 + 0.5) * self.voxel_size[a])
    }

    /// Flat BEV index of the cell above voxel column `(ix, iy)`.
    pub fn bev_index_of_voxel(&self, c: VoxelCoord) -> usize {
        let (_, w) = self.bev_dims();
        let s = self.bev_stride as u32;
        (c[1] / s) as usize * w + (c[0] / s) as usize
    }

    /// Continuous BEV coordinates `(col, row)` of a metric point; cell `i`
    /// spans `[i, i + 1)`.
    pub fn bev_continuous(&self, x: f64, y: f64) -> (f64, f64) {
        let cs = self.bev_cell_size();
        ((x - self.origin[0]) / cs[0], (y - self.origin[1]) / cs[1])
    }
}

/// Active voxels with one feature row each, in sorted coordinate order.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelGrid {
    coords: Vec<VoxelCoord>,
    index: HashMap<VoxelCoord, usize>,
    features: Tensor,
}

impl SparseVoxelGrid {
    /// Builds a grid from unique coordinates; rows are re-sorted by coordinate.
    pub fn new(coords: Vec<VoxelCoord>, features: Tensor) -> Result<Self> {
        if features.rows() != coords.len() || features.shape().len() != 2 {
            return Err(Error::InvalidTensor(format!(
                "{} coords but feature shape {:?}",
                coords.len(),
                features.shape()
            )));
        }
        let c = features.cols();
        let mut order: Vec<usize> = (0..coords.len()).collect();
        order.sort_by_key(|&i| coords[i]);
        let mut sorted = Vec::with_capacity(coords.len());
        let mut data = Vec::with_capacity(features.numel());
        let mut index = HashMap::with_capacity(coords.len());
        for (row, &i) in order.iter().enumerate() {
            if index.insert(coords[i], row).is_some() {
                return Err(Error::InvalidTensor(format!("duplicate voxel {:?}", coords[i])));
            }
            sorted.push(coords[i]);
            data.extend_from_slice(features.row(i));
        }
        let features = Tensor::matrix(sorted.len(), c, data)?;
        Ok(Self {
            coords: sorted,
            index,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[VoxelCoord] {
        &self.coords
    }

    pub fn row_of(&self, c: VoxelCoord) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    /// Same geometry with new per-row features.
    pub fn with_features(&self, features: Tensor) -> Result<Self> {
        if features.rows() != self.len() {
            return Err(Error::InvalidTensor(format!(
                "{} feature rows for {} voxels",
                features.rows(),
                self.len()
            )));
        }
        Ok(Self {
            coords: self.coords.clone(),
            index: self.index.clone(),
            features,
        })
    }

    /// Gather table of every active voxel's 3x3x3 neighbourhood, 27 rows per
    /// voxel with offsets in `(d0, d1, d2)` lexicographic order. Inactive or
    /// out-of-grid neighbours are empty rows (zero features).
    pub fn neighbourhood_taps(&self) -> SparseRows {
        let mut t = SparseRows::with_capacity(27 * self.len(), 27 * self.len());
        for c in &self.coords {
            for d0 in -1i64..=1 {
                for d1 in -1i64..=1 {
                    for d2 in -1i64..=1 {
                        let n = [c[0] as i64 + d0, c[1] as i64 + d1, c[2] as i64 + d2];
                        let row = if n.iter().all(|&v| (0..=u32::MAX as i64).contains(&v)) {
                            self.row_of([n[0] as u32, n[1] as u32, n[2] as u32])
                        } else {
                            None
                        };
                        t.push_row(row.map(|r| (r, 1.0)));
                    }
                }
            }
        }
        t
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Voxelization {
    pub grid: Option<SparseVoxelGrid>,
    /// Points that fell outside the grid.
    pub skipped: usize,
}

/// Feature width produced by [`voxelize`] for `num_classes` semantic channels.
pub fn input_channels(num_classes: usize) -> usize {
    4 + num_classes
}

/// One row per occupied voxel: mean point offset from the voxel center (in
/// voxel units), `ln(1 + count)`, and mean semantics (zeros when
/// `use_semantics` is false, so both modalities have the same width).
pub fn voxelize(scene: &Scene, spec: &GridSpec, use_semantics: bool) -> (SparseVoxelGrid, usize) {
    let k = scene.num_classes;
    let c = input_channels(k);
    let mut members: HashMap<VoxelCoord, Vec<usize>> = HashMap::new();
    let mut skipped = 0;
    for (i, &p) in scene.points.iter().enumerate() {
        match spec.voxel_of(p) {
            Some(v) => members.entry(v).or_default().push(i),
            None => skipped += 1,
        }
    }
    let mut coords: Vec<VoxelCoord> = members.keys().copied().collect();
    coords.sort_unstable();
    let mut data = Vec::with_capacity(coords.len() * c);
    for v in &coords {
        let idx = members.get_mut(v).expect("present");
        // order-independent sums
        idx.sort_by(|&a, &b| {
            let (pa, pb) = (scene.points[a], scene.points[b]);
            pa.iter()
                .zip(&pb)
                .map(|(x, y)| x.total_cmp(y))
                .chain(
                    scene
                        .semantics_row(a)
                        .iter()
                        .zip(scene.semantics_row(b))
                        .map(|(x, y)| x.total_cmp(y)),
                )
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let n = idx.len() as f64;
        let center = spec.voxel_center(*v);
        let mut row = vec![0.0; c];
        for &i in idx.iter() {
            for a in 0..3 {
                row[a] += (scene.points[i][a] - center[a]) / spec.voxel_size[a];
            }
            if use_semantics {
                for (j, s) in scene.semantics_row(i).iter().enumerate() {
                    row[4 + j] += s;
                }
            }
        }
        for x in &mut row[..3] {
            *x /= n;
        }
        row[3] = n.ln_1p();
        for s in &mut row[4..] {
            *s /= n;
        }
        data.extend(row);
    }
    let features = Tensor::matrix(coords.len(), c, data).expect("consistent");
    let grid = SparseVoxelGrid::new(coords, features).expect("unique coords");
    (grid, skipped)
}

/// Row-index sets of crucial voxels; disjoint with priority FN > FP > TP.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CrucialVoxelSets {
    pub true_pos: Vec<usize>,
    pub false_pos: Vec<usize>,
    pub false_neg: Vec<usize>,
}

impl CrucialVoxelSets {
    /// `FP ∪ FN`, sorted.
    pub fn false_rows(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.false_pos.iter().chain(&self.false_neg).copied().collect();
        v.sort_unstable();
        v
    }

    /// All crucial rows, sorted.
    pub fn all_rows(&self) -> Vec<usize> {
        let mut v = self.false_rows();
        v.extend(&self.true_pos);
        v.sort_unstable();
        v
    }

    pub fn len(&self) -> usize {
        self.true_pos.len() + self.false_pos.len() + self.false_neg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Lifts crucial BEV responses (from every head) to the active voxels in the
/// full-height pillar under each crucial cell.
pub fn mine_crucial_voxels(
    crucial: &CrucialSets,
    coords: &[VoxelCoord],
    spec: &GridSpec,
) -> CrucialVoxelSets {
    const NONE: u8 = 0;
    const TP: u8 = 1;
    const FP: u8 = 2;
    const FN: u8 = 3;
    let (h, w) = spec.bev_dims();
    let mut label = vec![NONE; h * w];
    for (cells, tag) in [
        (&crucial.true_pos, TP),
        (&crucial.false_pos, FP),
        (&crucial.false_neg, FN),
    ] {
        for cell in cells {
            if cell.y < h && cell.x < w {
                let slot = &mut label[cell.y * w + cell.x];
                *slot = (*slot).max(tag);
            }
        }
    }
    let mut out = CrucialVoxelSets::default();
    for (row, &c) in coords.iter().enumerate() {
        match label[spec.bev_index_of_voxel(c)] {
            TP => out.true_pos.push(row),
            FP => out.false_pos.push(row),
            FN => out.false_neg.push(row),
            _ => {}
        }
    }
    out
}

/// Distances below this snap a query onto the voxel center it coincides with.
pub const COINCIDENT_EPS: f64 = 1e-9;

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Inverse-distance weights over the `k` nearest active voxel centers for
/// each query, normalized to sum to one. Neighbours are searched in growing
/// index-space shells around the query's voxel; ties break by row index.
pub fn idw_weights(
    coords: &[VoxelCoord],
    index: impl Fn(VoxelCoord) -> Option<usize>,
    queries: &[[f64; 3]],
    spec: &GridSpec,
    k: usize,
) -> Result<SparseRows> {
    if coords.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if k == 0 {
        return Err(Error::Config("interpolation needs k >= 1".into()));
    }
    let k = k.min(coords.len());
    let min_size = spec.voxel_size.iter().copied().fold(f64::INFINITY, f64::min);
    let max_shell = *spec.dims.iter().max().unwrap() as i64 + 1;
    let mut table = SparseRows::with_capacity(queries.len(), queries.len() * k);
    let mut cand: Vec<(f64, usize)> = Vec::new();

    for &q in queries {
        let qc: [i64; 3] = [0, 1, 2].map(|a| ((q[a] - spec.origin[a]) / spec.voxel_size[a]).floor() as i64);
        cand.clear();
        let mut r: i64 = 0;
        loop {
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        let c = [qc[0] + dx, qc[1] + dy, qc[2] + dz];
                        if (0..3).any(|a| c[a] < 0 || c[a] >= spec.dims[a] as i64) {
                            continue;
                        }
                        let vc = [c[0] as u32, c[1] as u32, c[2] as u32];
                        if let Some(row) = index(vc) {
                            cand.push((dist(q, spec.voxel_center(vc)), row));
                        }
                    }
                }
            }
            // any voxel in shell r + 1 or beyond is at least this far away
            let bound = (r as f64 + 0.5) * min_size;
            if cand.len() >= k {
                cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                if cand[k - 1].0 < bound {
                    break;
                }
            }
            if r > max_shell + qc.iter().map(|v| v.abs()).max().unwrap() {
                cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                break;
            }
            r += 1;
        }
        let nearest = &cand[..k];
        if nearest[0].0 < COINCIDENT_EPS {
            table.push_row([(nearest[0].1, 1.0)]);
            continue;
        }
        let total: f64 = nearest.iter().map(|(d, _)| 1.0 / d).sum();
        table.push_row(nearest.iter().map(|&(d, row)| (row, (1.0 / d) / total)));
    }
    Ok(table)
}

/// Interpolated features at `queries` (value-level; the detector uses
/// [`idw_weights`] with a graph mix to keep gradients).
pub fn interpolate_to_points(
    grid: &SparseVoxelGrid,
    queries: &[[f64; 3]],
    spec: &GridSpec,
    k: usize,
) -> Result<Tensor> {
    let table = idw_weights(grid.coords(), |c| grid.row_of(c), queries, spec, k)?;
    let c = grid.channels();
    let f = grid.features().data();
    let mut out = vec![0.0; queries.len() * c];
    for (i, dst) in out.chunks_exact_mut(c.max(1)).enumerate() {
        for &(r, w) in table.row(i) {
            dst.iter_mut()
                .zip(&f[r * c..(r + 1) * c])
                .for_each(|(d, x)| *d += w * x);
        }
    }
    Tensor::matrix(queries.len(), c, out)
}

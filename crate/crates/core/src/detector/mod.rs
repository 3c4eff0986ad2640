//! Toy center-based single-stage detector shared by teacher and student.
//!
//! voxelize -> per-voxel linear layer -> 3x3x3 submanifold sparse convolution
//! -> column max-collapse to BEV -> three 3x3 convolutions (dilations 1, 2, 2)
//! -> per-head 1x1 heatmap and regression heads.

mod params;
mod targets;

pub use params::{seeded_rng, uniform_init, AdaptationLayer, BoundParams, ParamStore};
pub use targets::{make_gt_targets, supervised_loss, GtTargets, NUM_REG};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Scene;
use crate::tensor::{Graph, Tensor, Var};
use crate::voxel::{input_channels, voxelize, GridSpec, SparseVoxelGrid};

/// Class groups, one detection head per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub groups: Vec<Vec<usize>>,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            groups: vec![vec![0, 1], vec![2, 3]],
        }
    }
}

impl HeadSpec {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let mut seen = vec![false; num_classes];
        for &c in self.groups.iter().flatten() {
            if c >= num_classes || seen[c] {
                return Err(Error::Config(format!(
                    "head groups {:?} do not partition 0..{num_classes}",
                    self.groups
                )));
            }
            seen[c] = true;
        }
        if seen.iter().any(|s| !s) || self.groups.iter().any(Vec::is_empty) {
            return Err(Error::Config(format!(
                "head groups {:?} do not partition 0..{num_classes}",
                self.groups
            )));
        }
        Ok(())
    }

    pub fn num_heads(&self) -> usize {
        self.groups.len()
    }

    /// `(head, slot)` of a class id.
    pub fn locate(&self, class_id: usize) -> Option<(usize, usize)> {
        self.groups.iter().enumerate().find_map(|(h, g)| {
            g.iter().position(|&c| c == class_id).map(|s| (h, s))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    /// LiDAR only; semantic channels are zero.
    Student,
    /// LiDAR plus painted semantics.
    Teacher,
}

/// Forward-pass results. All maps are pixel-major `(H*W) x channels`.
#[derive(Debug, Clone)]
pub struct DetectorOutputs {
    /// Active voxels with their raw input features.
    pub voxels: SparseVoxelGrid,
    /// Last per-voxel stage, `N x C`.
    pub voxel_features: Var,
    /// Last BEV stage, `(H*W) x C`.
    pub bev_features: Var,
    pub heatmap_logits: Vec<Var>,
    /// Sigmoid heatmaps per head, `(H*W) x K_head`.
    pub heatmaps: Vec<Var>,
    /// Raw regression per head, `(H*W) x 10`:
    /// x/y cell offsets, z, ln w, ln l, ln h, vx, vy, sin, cos.
    pub regression: Vec<Var>,
}

/// Architecture description; parameters live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub grid: GridSpec,
    pub heads: HeadSpec,
    pub num_classes: usize,
    pub channels: usize,
}

/// Initial heatmap bias: a foreground prior of 0.01, below the default
/// mining threshold.
pub const HEATMAP_BIAS_INIT: f64 = -4.595;

/// Dilation of each BEV convolution, in order.
pub const BEV_DILATIONS: [usize; 3] = [1, 2, 2];

impl Detector {
    pub fn new(grid: GridSpec, heads: HeadSpec, num_classes: usize) -> Result<Self> {
        grid.validate()?;
        heads.validate(num_classes)?;
        Ok(Self {
            grid,
            heads,
            num_classes,
            channels: 32,
        })
    }

    pub fn bev_dims(&self) -> (usize, usize) {
        self.grid.bev_dims()
    }

    /// Seeded detector parameters (no adaptation layers).
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = seeded_rng(seed);
        let c = self.channels;
        let cin = input_channels(self.num_classes);
        let mut p = ParamStore::new();
        p.insert("vfe.w1", uniform_init(&mut rng, &[cin, c], cin));
        p.insert("vfe.b1", uniform_init(&mut rng, &[c], cin));
        p.insert("vfe.w2", uniform_init(&mut rng, &[27 * c, c], 27 * c));
        p.insert("vfe.b2", uniform_init(&mut rng, &[c], 27 * c));
        for i in 1..=BEV_DILATIONS.len() {
            p.insert(format!("bev.conv{i}"), uniform_init(&mut rng, &[9 * c, c], 9 * c));
        }
        for (h, group) in self.heads.groups.iter().enumerate() {
            let k = group.len();
            p.insert(format!("head{h}.cls.w"), uniform_init(&mut rng, &[c, k], c));
            p.insert(format!("head{h}.cls.b"), Tensor::from_vec(vec![HEATMAP_BIAS_INIT; k]));
            p.insert(format!("head{h}.reg.w"), uniform_init(&mut rng, &[c, NUM_REG], c));
            p.insert(format!("head{h}.reg.b"), uniform_init(&mut rng, &[NUM_REG], c));
        }
        p
    }

    /// Student parameters plus identity-initialized adaptation layers for the
    /// voxel and point distillation branches.
    pub fn init_student_params(&self, seed: u64) -> ParamStore {
        let mut p = self.init_params(seed);
        for prefix in [ADAPT_VOXEL, ADAPT_POINT] {
            AdaptationLayer { prefix }.init(&mut p, self.channels, self.channels);
        }
        p
    }

    /// Validates that a parameter store fits this architecture.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        self.init_params(0).check_compatible(&params.subset_without_adapters())
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        scene: &Scene,
        modality: Modality,
    ) -> Result<DetectorOutputs> {
        if scene.num_classes != self.num_classes {
            return Err(Error::ModelMismatch(format!(
                "scene has {} classes, detector {}",
                scene.num_classes, self.num_classes
            )));
        }
        let (voxels, _skipped) = voxelize(scene, &self.grid, modality == Modality::Teacher);
        let (h, w) = self.bev_dims();

        let x = g.constant(voxels.features().clone());
        let h1 = g.linear(x, params.var("vfe.w1"), params.var("vfe.b1"))?;
        let h1 = g.relu(h1);
        let taps = g.mix(h1, voxels.neighbourhood_taps())?;
        let taps = g.reshape(taps, &[voxels.len(), 27 * self.channels])?;
        let vf = g.linear(taps, params.var("vfe.w2"), params.var("vfe.b2"))?;
        let voxel_features = g.relu(vf);

        let groups: Vec<usize> = voxels
            .coords()
            .iter()
            .map(|&c| self.grid.bev_index_of_voxel(c))
            .collect();
        let mut bev_features = g.scatter_max(voxel_features, &groups, h * w)?;
        for (i, &d) in BEV_DILATIONS.iter().enumerate() {
            let cols = g.im2col3x3_dilated(bev_features, h, w, d)?;
            let conv = g.matmul(cols, params.var(&format!("bev.conv{}", i + 1)))?;
            bev_features = g.relu(conv);
        }

        let mut heatmap_logits = Vec::new();
        let mut heatmaps = Vec::new();
        let mut regression = Vec::new();
        for hd in 0..self.heads.num_heads() {
            let logits = g.linear(
                bev_features,
                params.var(&format!("head{hd}.cls.w")),
                params.var(&format!("head{hd}.cls.b")),
            )?;
            heatmaps.push(g.sigmoid(logits));
            heatmap_logits.push(logits);
            regression.push(g.linear(
                bev_features,
                params.var(&format!("head{hd}.reg.w")),
                params.var(&format!("head{hd}.reg.b")),
            )?);
        }
        Ok(DetectorOutputs {
            voxels,
            voxel_features,
            bev_features,
            heatmap_logits,
            heatmaps,
            regression,
        })
    }
}

pub const ADAPT_VOXEL: &str = "adapt.voxel";
pub const ADAPT_POINT: &str = "adapt.point";

impl ParamStore {
    /// Drops the distillation-only adaptation layers.
    pub fn subset_without_adapters(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            if !n.starts_with("adapt.") {
                out.insert(n, t.clone());
            }
        }
        out
    }
}

/// Value-level copies of detector outputs, used for frozen teacher caches.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputValues {
    pub voxel_features: Tensor,
    pub bev_features: Tensor,
    pub heatmaps: Vec<Tensor>,
    pub regression: Vec<Tensor>,
}

impl OutputValues {
    pub fn capture(g: &Graph, out: &DetectorOutputs) -> Self {
        Self {
            voxel_features: g.value(out.voxel_features).clone(),
            bev_features: g.value(out.bev_features).clone(),
            heatmaps: out.heatmaps.iter().map(|&v| g.value(v).clone()).collect(),
            regression: out.regression.iter().map(|&v| g.value(v).clone()).collect(),
        }
    }
}

//! Run configuration, read from TOML. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::HeadSpec;
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::scene::SceneConfig;
use crate::voxel::GridSpec;

/// Learning-rate schedule over a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to 0 over the run.
    Cosine,
}

impl LrSchedule {
    /// Learning rate at `step` of a `total`-step run.
    pub fn lr_at(self, lr: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                0.5 * lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Student optimization steps.
    pub steps: usize,
    /// Teacher pre-training steps.
    pub teacher_steps: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub batch_scenes: usize,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            teacher_steps: 500,
            lr: 0.01,
            lr_schedule: LrSchedule::Constant,
            momentum: 0.9,
            batch_scenes: 4,
            seed: 0,
            grad_clip: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.teacher_steps == 0 {
            return Err(Error::Config("steps and teacher_steps must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.batch_scenes == 0 {
            return Err(Error::Config("batch_scenes must be >= 1".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be >= 0".into()));
        }
        Ok(())
    }
}

/// Scene seeds of the train and held-out splits, as half-open ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_seeds: [u64; 2],
    pub eval_seeds: [u64; 2],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_seeds: [0, 200],
            eval_seeds: [200, 250],
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let [a, b] = self.train_seeds;
        let [c, d] = self.eval_seeds;
        if a >= b || c >= d {
            return Err(Error::Config("seed ranges must be non-empty [start, end)".into()));
        }
        if a < d && c < b {
            return Err(Error::Config("train and eval seed ranges overlap".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub scene: SceneConfig,
    pub grid: GridSpec,
    pub heads: HeadSpec,
    pub distill: DistillConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            scene: SceneConfig::default(),
            grid: GridSpec::default(),
            heads: HeadSpec::default(),
            distill: DistillConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.grid.validate()?;
        self.heads.validate(self.scene.num_classes)?;
        self.distill.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.data.validate()?;
        let r = &self.scene.range;
        let g = &self.grid;
        for axis in 0..3 {
            let lo = g.origin[axis];
            let hi = lo + g.voxel_size[axis] * g.dims[axis] as f64;
            if (lo - r[2 * axis]).abs() > 1e-9 || (hi - r[2 * axis + 1]).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "grid axis {axis} spans [{lo}, {hi}] but the scene range is [{}, {}]",
                    r[2 * axis],
                    r[2 * axis + 1]
                )));
            }
        }
        Ok(())
    }
}

//! Run configuration: TOML with `[run]`, `[data]`, `[model]`, `[optim]`
//! and `[output]` sections. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::{Decay, LrSchedule};
use crate::data::Difficulty;
use crate::error::{Error, Result};
use crate::model::NetConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    pub precision: Precision,
    /// Also write `iter_{t}.ckpt` every this many iterations (0: never).
    pub checkpoint_every: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            iterations: 200,
            batch_size: 4,
            precision: Precision::F32,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory of `{id}.ppm` / `{id}_mask.pgm` pairs; synthetic data when absent.
    pub dir: Option<PathBuf>,
    pub count: usize,
    pub extent: usize,
    pub difficulty: String,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dir: None,
            count: 8,
            extent: 64,
            difficulty: "easy".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Channels after the stem.
    pub width: usize,
    /// Encoder stages including the stem: 2 gives `[(3,w),(w,w)]`, 3 gives
    /// `[(3,w),(w,4w),(4w,8w)]`.
    pub stages: usize,
    pub alpha: usize,
    pub branches: usize,
    pub kernel: usize,
    pub attention: bool,
    pub levels: usize,
    pub sff: bool,
    pub instant_conv: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            width: 16,
            stages: 2,
            alpha: 2,
            branches: 4,
            kernel: 3,
            attention: true,
            levels: 2,
            sff: true,
            instant_conv: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// In epochs (passes over the training set).
    pub milestones: Vec<usize>,
    pub factor: f64,
    pub decay: Decay,
}

impl Default for OptimSection {
    fn default() -> Self {
        let s = LrSchedule::default();
        OptimSection {
            lr: s.base,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: s.milestones,
            factor: s.factor,
            decay: s.decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "run".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub optim: OptimSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.batch_size < 2 {
            return Err(Error::config("batch size must be at least 2 for batch norm"));
        }
        if !(1..=3).contains(&self.model.stages) {
            return Err(Error::config(format!("model.stages must be 1, 2 or 3, got {}", self.model.stages)));
        }
        if self.run.iterations == 0 {
            return Err(Error::config("iterations must be positive"));
        }
        if self.data.dir.is_none() && self.data.count < self.run.batch_size {
            return Err(Error::config(format!(
                "{} samples cannot fill a batch of {}",
                self.data.count, self.run.batch_size
            )));
        }
        self.difficulty()?;
        self.schedule().validate()?;
        self.net_config().validate()
    }

    pub fn difficulty(&self) -> Result<Difficulty> {
        self.data.difficulty.parse()
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.optim.lr,
            milestones: self.optim.milestones.clone(),
            factor: self.optim.factor,
            decay: self.optim.decay,
        }
    }

    pub fn net_config(&self) -> NetConfig {
        let m = &self.model;
        let w = m.width;
        let stages = match m.stages {
            1 => vec![(3, w)],
            2 => vec![(3, w), (w, w)],
            _ => vec![(3, w), (w, 4 * w), (4 * w, 8 * w)],
        };
        NetConfig {
            alpha: m.alpha,
            stages,
            branches: m.branches,
            kernel: m.kernel,
            input_extent: self.data.extent,
            attention: m.attention,
            levels: m.levels,
            sff: m.sff,
            orthogonal_instant: m.instant_conv,
            ..NetConfig::default()
        }
    }
}

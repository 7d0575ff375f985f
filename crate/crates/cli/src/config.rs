//! Pipeline configuration: one TOML file, flags override it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ptprobe::attn::HeadThresholds;
use ptprobe::harness::{KnockoutSpec, PlantedConfig, ToyConfig, ToyTrainConfig};
use ptprobe::probe::{ProbeConfig, TrainConfig};
use ptprobe::scene::SceneConfig;
use ptprobe::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Planted,
    Toy,
    /// Weights and adapter supplied outside this tool; capture must already exist.
    External,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub planted: PlantedConfig,
    pub toy: ToyConfig,
    pub toy_train: ToyTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    /// Pairs used to fit probes (and the toy model).
    pub train_pairs: usize,
    /// Held-out pairs used by eval, heads, knockout and export.
    pub eval_pairs: usize,
    pub scene: SceneConfig,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { train_pairs: 24, eval_pairs: 8, scene: SceneConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointSet {
    #[default]
    PostSkip,
    /// Post- and pre-skip points.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSpec {
    pub points: PointSet,
    pub config: ProbeConfig,
    pub train: TrainConfig,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self { points: PointSet::PostSkip, config: ProbeConfig::default(), train: TrainConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Aligned,
    ScaleShiftInvariant,
    Depth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub metrics: Vec<Metric>,
    /// Least-squares scale/shift alignment for depth metrics.
    pub depth_align: bool,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { metrics: vec![Metric::Aligned, Metric::ScaleShiftInvariant], depth_align: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadsSpec {
    pub thresholds: HeadThresholds,
    /// Correspondence recall threshold in pixels.
    pub recall_threshold_px: f64,
}

impl Default for HeadsSpec {
    fn default() -> Self {
        Self { thresholds: HeadThresholds::default(), recall_threshold_px: 16.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSpec {
    pub bind: String,
    /// Allowed explorer origin; `*` allows any.
    pub cors_origin: String,
    /// Load adapters for knockout jobs.
    pub live: bool,
}

impl Default for ServeSpec {
    fn default() -> Self {
        Self { bind: "127.0.0.1:8787".into(), cors_origin: "*".into(), live: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root seed; every other seed derives from it.
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: usize,
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
    pub probe: ProbeSpec,
    pub eval: EvalSpec,
    pub heads: HeadsSpec,
    /// Intervention for `knockout`; `None` means an empty (no-op) spec.
    pub knockout: Option<KnockoutSpec>,
    pub serve: ServeSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            jobs: 1,
            model: ModelSpec::default(),
            dataset: DatasetSpec::default(),
            probe: ProbeSpec::default(),
            eval: EvalSpec::default(),
            heads: HeadsSpec::default(),
            knockout: None,
            serve: ServeSpec::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(j) = o.jobs {
            self.jobs = j;
        }
    }

    /// Seeds of the model, probes and scene generator follow the root seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.model.planted.seed = self.seed;
        c.model.toy_train.seed = self.seed;
        c.probe.train.seed = self.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if self.dataset.train_pairs == 0 || self.dataset.eval_pairs == 0 {
            return Err(Error::Config("train_pairs and eval_pairs must be positive".into()));
        }
        self.dataset.scene.validate().map_err(as_config)?;
        self.probe.config.validate().map_err(as_config)?;
        self.probe.train.optimizer.validate().map_err(as_config)?;
        if self.probe.train.batch_pairs == 0 {
            return Err(Error::Config("probe.train.batch_pairs must be positive".into()));
        }
        let s = &self.dataset.scene;
        match self.model.kind {
            ModelKind::Planted => {
                let p = &self.model.planted;
                p.validate().map_err(as_config)?;
                if (p.image_size, p.image_size, p.patch_size) != (s.height, s.width, s.patch_size) {
                    return Err(Error::Config("planted model and scene disagree on resolution or patch size".into()));
                }
            }
            ModelKind::Toy => {
                let t = &self.model.toy;
                t.validate().map_err(as_config)?;
                if (t.image_size, t.image_size, t.patch_size) != (s.height, s.width, s.patch_size) {
                    return Err(Error::Config("toy model and scene disagree on resolution or patch size".into()));
                }
            }
            ModelKind::External => {}
        }
        if !(self.heads.recall_threshold_px.is_finite() && self.heads.recall_threshold_px > 0.0) {
            return Err(Error::Config("heads.recall_threshold_px must be positive".into()));
        }
        Ok(())
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(m),
        other => Error::Config(other.to_string()),
    }
}

/// Seed of the `i`-th pair (splitmix64 of the root seed and index).
pub fn pair_seed(root: u64, i: usize) -> u64 {
    let mut z = root.wrapping_add((i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

//! Pipeline configuration. Every field has a default, so `{}` is a valid
//! config file; the effective config is hashed into every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lcpred_core::features::MissingNeighborPolicy;
use lcpred_core::frenet::FrenetConfig;
use lcpred_core::svm::SvmParams;
use lcpred_core::synth::PopulationParams;
use lcpred_core::SegmentParams;
use lcpred_model::{ModelConfig, TrainConfig};

use crate::ExperimentError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub params: PopulationParams,
    pub n_tracks: usize,
    pub duration_s: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { params: PopulationParams::default(), n_tracks: 1500, duration_s: 600.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PopulationSpec {
    /// Dataset tag, also the artifact directory name.
    pub tag: String,
    /// Directory with `tracks.csv`, `recordingMeta.csv` and `lane_config.json`.
    /// Without it the population is generated by the `synth` stage.
    pub data_dir: Option<PathBuf>,
    pub synth: Option<SynthSpec>,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        Self { tag: "exid".into(), data_dir: None, synth: Some(SynthSpec::default()) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefPathConfig {
    pub svm: SvmParams,
    /// Training points per class after striding.
    pub max_points_per_class: usize,
    /// Margin around the training points when no bounding box is configured.
    pub bbox_pad: f64,
    /// Boundary points farther than this from every training point are dropped.
    pub max_data_distance: f64,
    pub grid_step: f64,
    pub smoothing_window: usize,
    pub spacing: f64,
    /// Bucket size of the nearest-point index.
    pub index_cell: f64,
}

impl Default for RefPathConfig {
    fn default() -> Self {
        Self {
            svm: SvmParams { c: 1.0, gamma: 0.01, ..SvmParams::default() },
            max_points_per_class: 2000,
            bbox_pad: 2.0,
            max_data_distance: 5.0,
            grid_step: 0.5,
            smoothing_window: 31,
            spacing: 1.0,
            index_cell: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub policy: MissingNeighborPolicy,
    /// Balanced counts per population: this many LLC and RLC, twice as many LK.
    pub per_class_lc: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { policy: MissingNeighborPolicy::default(), per_class_lc: 250 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentPlan {
    /// Share of each class that goes to training.
    pub split_fraction: f64,
    /// Share of each training class held out for early stopping.
    pub validation_fraction: f64,
    pub seeds: Vec<u64>,
    /// Adds the regime trained on the union of all populations.
    pub joint: bool,
    pub eval_batch_size: usize,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self { split_fraction: 0.8, validation_fraction: 0.1, seeds: vec![0, 1, 2, 3, 4], joint: true, eval_batch_size: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads for per-track and per-run parallelism; 0 picks the
    /// number of cores.
    pub threads: usize,
    pub populations: Vec<PopulationSpec>,
    pub refpath: RefPathConfig,
    pub frenet: FrenetConfig,
    pub segment: SegmentParams,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub plan: ExperimentPlan,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            threads: 0,
            populations: default_populations(),
            refpath: RefPathConfig::default(),
            frenet: FrenetConfig::default(),
            segment: SegmentParams::default(),
            features: FeatureConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig { max_epochs: 60, patience: 8, ..TrainConfig::default() },
            plan: ExperimentPlan::default(),
        }
    }
}

fn default_populations() -> Vec<PopulationSpec> {
    [PopulationParams::exid_like(), PopulationParams::hk_like()]
        .into_iter()
        .map(|params| PopulationSpec {
            tag: params.name.clone(),
            data_dir: None,
            synth: Some(SynthSpec { params, ..SynthSpec::default() }),
        })
        .collect()
}

impl PipelineConfig {
    pub fn from_json_str(s: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.populations.is_empty() {
            return bad("no populations configured".into());
        }
        let mut tags = std::collections::BTreeSet::new();
        for p in &self.populations {
            if p.tag.is_empty() || p.tag.contains(['/', '\\', ',']) || !tags.insert(&p.tag) {
                return bad(format!("population tag {:?} is empty, duplicated or not a plain name", p.tag));
            }
            if p.data_dir.is_none() && p.synth.is_none() {
                return bad(format!("population {} needs either data_dir or synth", p.tag));
            }
        }
        let plan = &self.plan;
        if !(plan.split_fraction > 0.0 && plan.split_fraction < 1.0) {
            return bad(format!("split_fraction must lie in (0, 1), got {}", plan.split_fraction));
        }
        if !(plan.validation_fraction > 0.0 && plan.validation_fraction < 1.0) {
            return bad(format!("validation_fraction must lie in (0, 1), got {}", plan.validation_fraction));
        }
        if plan.seeds.is_empty() {
            return bad("plan.seeds is empty".into());
        }
        if self.features.per_class_lc == 0 {
            return bad("features.per_class_lc must be positive".into());
        }
        self.model.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn population(&self, tag: &str) -> Result<&PopulationSpec, ExperimentError> {
        self.populations
            .iter()
            .find(|p| p.tag == tag)
            .ok_or_else(|| ExperimentError::Config(format!("unknown population {tag}")))
    }

    /// The config without the output directory and thread count, which do
    /// not affect results.
    pub fn canonical(&self) -> Self {
        Self { out_dir: PathBuf::new(), threads: 0, ..self.clone() }
    }

    /// Hex SHA-256 of the JSON of [`Self::canonical`].
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&self.canonical()).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

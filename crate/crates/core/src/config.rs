//! Experiment configuration. The defaults are the flagship two-class toy run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::criteria::{CriterionKind, Regularization};
use crate::data::{Dataset, GroupSpec, ToySpec};
use crate::error::{read_text, Error, Result};
use crate::metrics::StrataThresholds;
use crate::models::{Activation, ClassifierShape, DenoiserShape, EncoderShape};
use crate::sampler::GuidanceConfig;
use crate::schedule::ScheduleParams;
use crate::train::{OptimizerKind, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub schedule: ScheduleParams,
    pub denoiser: DenoiserShape,
    pub encoder: EncoderShape,
    pub classifier: ClassifierShape,
    pub train: TrainStages,
    pub guidance: GuidanceConfig,
    pub plan: PlanConfig,
    pub metrics: MetricsConfig,
    pub sweep: SweepConfig,
    pub ablate: AblateConfig,
    pub plot: PlotConfig,
}

/// Exactly one of `toy` and `groups` describes the training distribution.
/// Validation and test sets share its geometry with every mode or group
/// holding the stated count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub toy: Option<ToySpec>,
    pub groups: Option<GroupSpec>,
    pub validation_per_group: usize,
    pub test_per_group: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { toy: Some(ToySpec::two_class(1000, 5.0, 0.6)), groups: None, validation_per_group: 100, test_per_group: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainStages {
    pub denoiser: TrainConfig,
    pub classifier: TrainConfig,
    pub retrain: TrainConfig,
}

impl Default for TrainStages {
    fn default() -> Self {
        let classifier = TrainConfig { epochs: 1, batch_size: 64, lr: 0.002, ..Default::default() };
        Self {
            denoiser: TrainConfig {
                epochs: 400,
                batch_size: 128,
                lr: 2e-3,
                optimizer: OptimizerKind::Adam,
                decay_every: 50,
                decay_factor: 0.5,
                p_uncond: 0.1,
                p_no_instance: 0.5,
                ..Default::default()
            },
            retrain: TrainConfig { batch_size: 128, mix_ratio: 0.5, alpha: 1.0, ..classifier.clone() },
            classifier,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanLevel {
    Class,
    Group,
}

/// How much synthetic data to make and which real points condition it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub level: PlanLevel,
    /// Cell size to fill up to; the largest cell when absent.
    pub target: Option<usize>,
    /// Reference pool: the whole class, or only the deficient group.
    pub pool: PlanLevel,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self { level: PlanLevel::Group, target: None, pool: PlanLevel::Class }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub knn_k: usize,
    pub strata: StrataThresholds,
    /// Samples per class drawn for the unguided and guided occupancy measurements.
    pub samples_per_class: usize,
    pub regularization: Regularization,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { knn_k: 5, strata: StrataThresholds::default(), samples_per_class: 1000, regularization: Regularization::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub gammas: Vec<f64>,
    pub omegas: Vec<f64>,
    /// Samples per class; the synthesis plan's requests when the key is
    /// absent from a `[sweep]` table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_per_class: Option<usize>,
    pub criterion: CriterionKind,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            gammas: vec![1.0, 2.0],
            omegas: vec![0.0, 1.0, 3.0, 10.0, 30.0],
            samples_per_class: Some(1000),
            criterion: CriterionKind::Entropy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Samples per class for the generative metrics.
    pub samples_per_class: usize,
    pub dropout_p: f64,
    pub omega: f64,
    /// Retrain a classifier per row to fill the accuracy columns.
    pub retrain: bool,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { samples_per_class: 20, dropout_p: 0.25, omega: 30.0, retrain: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlotConfig {
    /// `[x_min, x_max, y_min, y_max]`.
    pub viewport: [f64; 4],
    pub panel_size: u32,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self { viewport: [-8.0, 8.0, -8.0, 8.0], panel_size: 360 }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            out_dir: PathBuf::from("runs/toy"),
            data: DataConfig::default(),
            schedule: ScheduleParams::default(),
            denoiser: DenoiserShape { activation: Activation::Relu, ..Default::default() },
            encoder: EncoderShape::default(),
            classifier: ClassifierShape::default(),
            train: TrainStages::default(),
            guidance: GuidanceConfig {
                gamma: 1.0,
                omega: 30.0,
                criterion: Some(CriterionKind::Entropy),
                instance_conditioning: false,
                clip_x0: Some(8.0),
                ..Default::default()
            },
            plan: PlanConfig::default(),
            metrics: MetricsConfig::default(),
            sweep: SweepConfig::default(),
            ablate: AblateConfig::default(),
            plot: PlotConfig::default(),
        }
    }
}

/// Pipeline stages that consume randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedStage {
    Data = 1,
    Diffusion = 2,
    Classifier = 3,
    /// Every sampling stage; runs with equal requests share samples.
    Sampling = 4,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_text(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("config version {} is not supported (expected {CONFIG_VERSION})", self.version));
        }
        let dim = match (&self.data.toy, &self.data.groups) {
            (Some(t), None) => {
                t.validate().map_err(|e| Error::Config(e.to_string()))?;
                t.dim()
            }
            (None, Some(_)) => 2,
            _ => return bad("exactly one of data.toy and data.groups must be set".into()),
        };
        let classes = self.classes();
        if self.denoiser.data_dim != dim || self.encoder.data_dim != dim || self.classifier.data_dim != dim {
            return bad(format!("model data_dim must match the data dimension {dim}"));
        }
        if self.denoiser.classes != classes || self.classifier.classes != classes {
            return bad(format!("model class counts must match the {classes} data classes"));
        }
        if self.denoiser.cond_dim != self.encoder.cond_dim {
            return bad("denoiser and encoder cond_dim differ".into());
        }
        for t in [&self.train.denoiser, &self.train.classifier, &self.train.retrain] {
            t.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        self.guidance.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.sweep.gammas.is_empty() || self.sweep.omegas.is_empty() {
            return bad("sweep needs at least one gamma and one omega".into());
        }
        let [x0, x1, y0, y1] = self.plot.viewport;
        if !(x0 < x1 && y0 < y1) {
            return bad("plot viewport must have min < max on both axes".into());
        }
        if self.plan.pool == PlanLevel::Group && self.plan.level == PlanLevel::Class {
            return bad("plan.pool = \"group\" needs plan.level = \"group\"".into());
        }
        if self.metrics.knn_k == 0 {
            return bad("metrics.knn_k must be positive".into());
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        match (&self.data.toy, &self.data.groups) {
            (Some(t), _) => t.classes.len(),
            (None, Some(g)) => g.classes,
            _ => 0,
        }
    }

    pub fn group_classes(&self) -> Vec<usize> {
        match (&self.data.toy, &self.data.groups) {
            (Some(t), _) => t.group_classes(),
            (None, Some(g)) => g.group_classes(),
            _ => vec![],
        }
    }

    /// Seed of one pipeline stage, derived from the global seed.
    pub fn stage_seed(&self, stage: SeedStage) -> u64 {
        mix(self.seed ^ mix(stage as u64))
    }

    /// Training config of a stage with its seed offset by the stage seed.
    pub fn seeded(&self, train: &TrainConfig, stage: SeedStage) -> TrainConfig {
        TrainConfig { seed: self.stage_seed(stage) ^ train.seed, ..train.clone() }
    }

    /// Mode or group id of each point, by nearest center within its class for
    /// toy data. Used to tag synthetic points for per-group reporting.
    pub fn assign_groups(&self, ds: &Dataset) -> Vec<usize> {
        match (&self.data.toy, &self.data.groups) {
            (Some(t), _) => {
                let offsets = t.group_offsets();
                (0..ds.len())
                    .map(|i| {
                        let y = ds.labels[i];
                        let centers: Vec<&[f64]> = t.classes[y].modes.iter().map(|m| m.center.as_slice()).collect();
                        offsets[y] + crate::metrics::nearest_mode(ds.points.row(i), &centers)
                    })
                    .collect()
            }
            (None, Some(g)) => (0..ds.len())
                .map(|i| {
                    let y = ds.labels[i];
                    let centers: Vec<[f64; 2]> = (0..g.contexts).map(|c| g.center(y, c)).collect();
                    let refs: Vec<&[f64]> = centers.iter().map(|c| c.as_slice()).collect();
                    y * g.contexts + crate::metrics::nearest_mode(ds.points.row(i), &refs)
                })
                .collect(),
            _ => vec![0; ds.len()],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = ExperimentConfig::from_toml("seed = 4\n[guidance]\nomega = 3.0\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.guidance.omega, 3.0);
        // a section that is present starts from that section's own defaults
        assert_eq!(cfg.guidance, GuidanceConfig { omega: 3.0, ..Default::default() });
        assert_eq!(cfg.train, ExperimentConfig::default().train);
        assert_eq!(cfg.sweep.samples_per_class, Some(1000));
        let cfg = ExperimentConfig::from_toml("[sweep]\ngammas = [1.0]\n").unwrap();
        assert_eq!(cfg.sweep.samples_per_class, None);
    }

    #[test]
    fn rejects_bad_configs() {
        for text in ["sed = 1\n", "[guidance]\nomgea = 1.0\n", "version = 9\n", "[guidance]\nperiod = 0\n"] {
            assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn stage_seeds_differ() {
        let cfg = ExperimentConfig::default();
        assert_ne!(cfg.stage_seed(SeedStage::Data), cfg.stage_seed(SeedStage::Diffusion));
        let other = ExperimentConfig { seed: 1, ..cfg.clone() };
        assert_ne!(cfg.stage_seed(SeedStage::Data), other.stage_seed(SeedStage::Data));
    }
}

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::ClassifierRecipe;
use crate::data::{DataError, GmmSpec};
use crate::denoiser::DenoiserConfig;
use crate::finetune::{IMFinetuneConfig, PretrainConfig};
use crate::schedule::ScheduleConfig;
use crate::selection::{PoolConfig, SelectionParams, DEFAULT_CLAMP_FLOOR};

use super::StageError;

/// Simplex Gaussian mixture: class `i` has mean `separation · e_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub scale: f64,
    /// Per class.
    pub n_train: usize,
    /// Per class.
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_classes: 5,
            dim: 8,
            separation: 2.0,
            scale: 1.0,
            n_train: 200,
            n_test: 200,
        }
    }
}

impl DataConfig {
    pub fn spec(&self) -> Result<GmmSpec, DataError> {
        GmmSpec::simplex(
            self.n_classes,
            self.dim,
            self.separation,
            self.scale,
            self.n_train,
            self.n_test,
        )
    }
}

/// Denoiser widths; `dim` and `n_classes` come from [`DataConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserShape {
    pub embed_dim: usize,
    pub n_freqs: usize,
    pub hidden: Vec<usize>,
    pub init_std: f64,
    pub embed_init_std: f64,
}

impl Default for DenoiserShape {
    fn default() -> Self {
        let d = DenoiserConfig::new(1, 1);
        Self {
            embed_dim: d.embed_dim,
            n_freqs: d.n_freqs,
            hidden: d.hidden,
            init_std: d.init_std,
            embed_init_std: d.embed_init_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    /// Samples per class in the distilled set; also the subgroup size K.
    pub ipc: usize,
    /// Candidate subgroups per class (G).
    pub n_groups: usize,
    /// Real samples per reference centroid (K_i).
    pub k_real: usize,
    pub alpha: f64,
    pub beta: f64,
    pub clamp_floor: f64,
    /// DDIM steps used to generate candidates.
    pub sample_steps: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            ipc: 10,
            n_groups: 8,
            k_real: 50,
            alpha: 0.5,
            beta: 0.5,
            clamp_floor: DEFAULT_CLAMP_FLOOR,
            sample_steps: 50,
        }
    }
}

impl SelectionConfig {
    pub fn params(&self) -> SelectionParams {
        SelectionParams {
            alpha: self.alpha,
            beta: self.beta,
            clamp_floor: self.clamp_floor,
        }
    }

    pub fn pool(&self) -> PoolConfig {
        PoolConfig {
            n_groups: self.n_groups,
            group_size: self.ipc,
            k_real: self.k_real,
            sample_steps: self.sample_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    pub classifier: ClassifierRecipe,
    pub feature_extractor: ClassifierRecipe,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            classifier: ClassifierRecipe::evaluation(),
            feature_extractor: ClassifierRecipe::feature_extractor(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InstabilityConfig {
    pub class_id: usize,
    pub n_probes: usize,
    pub fd_step: f64,
    pub sample_steps: usize,
}

impl Default for InstabilityConfig {
    fn default() -> Self {
        Self {
            class_id: 0,
            n_probes: 50,
            fd_step: crate::instability::DEFAULT_FD_STEP,
            sample_steps: 50,
        }
    }
}

/// Whole-experiment configuration. Every section and field is optional in
/// JSON; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: String,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserShape,
    pub pretrain: PretrainConfig,
    pub finetune: IMFinetuneConfig,
    pub selection: SelectionConfig,
    pub eval: EvalConfig,
    pub instability: InstabilityConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: "out".to_string(),
            data: DataConfig::default(),
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserShape::default(),
            pretrain: PretrainConfig::default(),
            finetune: IMFinetuneConfig::default(),
            selection: SelectionConfig::default(),
            eval: EvalConfig::default(),
            instability: InstabilityConfig::default(),
        }
    }
}

fn invalid(msg: String) -> StageError {
    StageError::Config(msg)
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, StageError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, StageError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON serialization (fixed field order).
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            dim: self.data.dim,
            n_classes: self.data.n_classes,
            embed_dim: self.denoiser.embed_dim,
            n_freqs: self.denoiser.n_freqs,
            hidden: self.denoiser.hidden.clone(),
            init_std: self.denoiser.init_std,
            embed_init_std: self.denoiser.embed_init_std,
        }
    }

    pub fn validate(&self) -> Result<(), StageError> {
        self.data.spec()?;
        if self.data.n_classes < 2 {
            return Err(invalid("n_classes must be >= 2 (feature extractor needs 2 classes)".into()));
        }
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return Err(invalid("n_train and n_test must be >= 1".into()));
        }
        self.schedule.build()?;
        self.finetune.validate()?;
        if self.pretrain.batch_size == 0 || !(self.pretrain.lr > 0.0) {
            return Err(invalid("pretrain needs batch_size >= 1 and lr > 0".into()));
        }
        self.selection.params().validate()?;
        let s = &self.selection;
        if s.ipc == 0 || s.n_groups == 0 || s.sample_steps == 0 {
            return Err(invalid("ipc, n_groups and sample_steps must be >= 1".into()));
        }
        if s.ipc > self.data.n_train {
            return Err(invalid(format!("ipc {} exceeds n_train {}", s.ipc, self.data.n_train)));
        }
        if s.k_real == 0 || s.k_real > self.data.n_train {
            return Err(invalid(format!("k_real must lie in 1..={}", self.data.n_train)));
        }
        if s.sample_steps > self.schedule.steps || self.instability.sample_steps > self.schedule.steps {
            return Err(invalid("sample_steps exceeds schedule steps".into()));
        }
        if self.eval.seeds.is_empty() {
            return Err(invalid("eval.seeds must not be empty".into()));
        }
        for r in [&self.eval.classifier, &self.eval.feature_extractor] {
            if r.hidden == 0 || r.batch_size == 0 || !(r.lr > 0.0) {
                return Err(invalid("classifier recipes need hidden, batch_size >= 1 and lr > 0".into()));
            }
        }
        if self.instability.class_id >= self.data.n_classes || !(self.instability.fd_step > 0.0) {
            return Err(invalid("instability needs a valid class_id and fd_step > 0".into()));
        }
        Ok(())
    }
}

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::expert::{ExpertConfig, GradientBoundary};
use crate::grad::OptimizerKind;
use crate::lam::LamConfig;

use super::PipelineError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Lam,
    Pretrain,
    Finetune,
}

/// Budget and optimiser settings for one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    /// Overrides the stage's default boundary when set.
    pub gradient_boundary: Option<GradientBoundary>,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self { steps: 1000, batch: 8, lr: 1e-3, warmup: 50, gradient_boundary: None }
    }
}

impl StageConfig {
    pub fn boundary(&self, stage: Stage) -> GradientBoundary {
        self.gradient_boundary.unwrap_or(match stage {
            Stage::Finetune => GradientBoundary::FlowThrough,
            _ => GradientBoundary::Truncate,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub use_fast: bool,
    pub use_lam: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { use_fast: true, use_lam: true }
    }
}

impl Ablation {
    pub fn label(&self) -> &'static str {
        match (self.use_fast, self.use_lam) {
            (true, true) => "full",
            (false, true) => "no_fast",
            (true, false) => "no_lam",
            (false, false) => "no_fast_no_lam",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub sigma: f64,
    pub m: usize,
    pub paper_literal_sign: bool,
    pub include_fast: bool,
    pub lat_only_context: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { sigma: 0.2, m: 4, paper_literal_sign: false, include_fast: false, lat_only_context: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FastConfig {
    pub gamma: f64,
    pub vocab_size: usize,
}

impl Default for FastConfig {
    fn default() -> Self {
        Self { gamma: crate::fast::DEFAULT_GAMMA, vocab_size: crate::fast::DEFAULT_VOCAB_SIZE }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub episodes: usize,
    pub qa_samples: usize,
    pub robot_weight: f64,
    pub qa_weight: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { episodes: 500, qa_samples: 500, robot_weight: 0.8, qa_weight: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub max_steps: usize,
    /// Evaluate on initial scenes of training episodes.
    pub seen: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 50, max_steps: 150, seen: true }
    }
}

/// Everything one run needs; read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub clip_norm: f64,
    pub data: DataConfig,
    pub fast: FastConfig,
    pub lam_model: LamConfig,
    pub backbone: BackboneConfig,
    pub expert: ExpertConfig,
    pub flow: FlowConfig,
    pub ablation: Ablation,
    pub lam: StageConfig,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            optimizer: OptimizerKind::Adam,
            clip_norm: 1.0,
            data: DataConfig::default(),
            fast: FastConfig::default(),
            lam_model: LamConfig::default(),
            backbone: BackboneConfig::default(),
            expert: ExpertConfig::default(),
            flow: FlowConfig::default(),
            ablation: Ablation::default(),
            lam: StageConfig { steps: 2000, batch: 8, lr: 1e-3, warmup: 50, gradient_boundary: None },
            pretrain: StageConfig { steps: 5000, batch: 8, lr: 1e-3, warmup: 100, gradient_boundary: None },
            finetune: StageConfig { steps: 2000, batch: 8, lr: 5e-4, warmup: 50, gradient_boundary: None },
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.backbone.layers != self.expert.layers {
            return bad(format!(
                "expert depth {} must match backbone depth {}",
                self.expert.layers, self.backbone.layers
            ));
        }
        if self.backbone.d_model != self.expert.d_model || self.backbone.heads != self.expert.heads {
            return bad("expert and backbone widths/heads must agree".into());
        }
        if self.flow.m == 0 {
            return bad("flow.m must be at least 1".into());
        }
        crate::expert::euler_steps(self.flow.sigma).map_err(|e| PipelineError::Config(e.to_string()))?;
        for (name, s) in [("lam", &self.lam), ("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            if s.batch == 0 {
                return bad(format!("{name}.batch must be at least 1"));
            }
        }
        Ok(())
    }
}

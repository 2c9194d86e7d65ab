use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::{ArchId, ArchSpec};
use crate::baselines::TaperConfig;
use crate::data::ToyUniverseConfig;
use crate::diffusion::{DiTConfig, ScheduleConfig, TrainConfig};
use crate::encoder::EncoderKind;
use crate::error::{Error, Result};
use crate::pmodel::SgdConfig;
use crate::universe::{PromptMode, SamplingStrategy};

use super::{Method, Suite};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub train_tasks: usize,
    pub classes: usize,
    pub ood_tasks: usize,
    pub strategy: SamplingStrategy,
    /// Prompt mode the main generator is trained and evaluated with.
    pub prompt_mode: PromptMode,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            train_tasks: 200,
            classes: 5,
            ood_tasks: 50,
            strategy: SamplingStrategy::Uniform,
            prompt_mode: PromptMode::Name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub id: ArchId,
    /// Hidden width of `toy_mlp`.
    pub hidden: usize,
    pub head_bias: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            id: ArchId::ToyMlp,
            hidden: 8,
            head_bias: true,
        }
    }
}

impl ArchConfig {
    pub fn build(&self, input: [usize; 3], rows: usize) -> ArchSpec {
        ArchSpec::new(self.id, input, rows, self.hidden, self.head_bias)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// `pretrained` uses the universe's aligned text/image encoder.
    pub kind: EncoderKind,
    /// Stub only: separate embedding spaces per prompt mode.
    pub mode_salted: bool,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Pretrained,
            mode_salted: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Evenly respaced reverse steps; `None` runs the full chain.
    pub steps: Option<usize>,
    /// Prompts per sampling batch.
    pub batch: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { steps: None, batch: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub suites: Vec<Suite>,
    pub methods: Vec<Method>,
    /// Tasks per evaluated cell.
    pub min_tasks: usize,
    pub unseen_fractions: Vec<f64>,
    pub class_counts: Vec<usize>,
    pub memorization_tasks: usize,
    pub memorization_samples: usize,
    /// Prompt modes crossed in `prompt_cross`; `image` is test-only unless
    /// listed in `cross_train_modes`.
    pub cross_modes: Vec<PromptMode>,
    pub cross_train_modes: Vec<PromptMode>,
    /// Update count for the auxiliary generators (padded, unseen-class,
    /// cross-mode, ablations); defaults to `train.iters`.
    pub variant_iters: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            suites: vec![Suite::Id, Suite::Ood],
            methods: vec![Method::Generic, Method::Select, Method::Taper, Method::Diffusion],
            min_tasks: 50,
            unseen_fractions: vec![0.0, 0.2, 0.4, 0.6, 1.0],
            class_counts: vec![1, 2, 3, 4, 5],
            memorization_tasks: 10,
            memorization_samples: 2,
            cross_modes: vec![PromptMode::Name, PromptMode::Description],
            cross_train_modes: vec![PromptMode::Name, PromptMode::Description],
            variant_iters: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub universe: ToyUniverseConfig,
    pub tasks: TaskConfig,
    pub arch: ArchConfig,
    /// Stage-1 optimizer.
    pub generic: SgdConfig,
    /// Stage-2 optimizer.
    pub finetune: SgdConfig,
    pub encoder: EncoderConfig,
    pub dit: DiTConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub sampling: SamplingConfig,
    pub taper: TaperConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "toy".into(),
            seed: 0,
            universe: ToyUniverseConfig::default(),
            tasks: TaskConfig::default(),
            arch: ArchConfig::default(),
            generic: SgdConfig::default(),
            finetune: SgdConfig::default(),
            encoder: EncoderConfig::default(),
            dit: DiTConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig {
                iters: 1500,
                ..TrainConfig::default()
            },
            sampling: SamplingConfig::default(),
            taper: TaperConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parse TOML; schema errors name the offending field path.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config {
            path: String::new(),
            message: e.to_string(),
        })?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let err = |path: &str, message: String| Err(Error::Config { path: path.into(), message });
        if self.tasks.classes == 0 || self.tasks.classes > self.universe.num_classes {
            return err("tasks.classes", format!("must be in 1..={}", self.universe.num_classes));
        }
        if self.dit.c_max < self.tasks.classes {
            return err("dit.c_max", format!("must be at least tasks.classes ({})", self.tasks.classes));
        }
        if self.dit.embed_dim != self.universe.embedding_dim {
            return err(
                "dit.embed_dim",
                format!("must equal universe.embedding_dim ({})", self.universe.embedding_dim),
            );
        }
        if let Some(&c) = self.eval.class_counts.iter().find(|&&c| c == 0 || c > self.dit.c_max) {
            return err("eval.class_counts", format!("{c} is outside 1..={}", self.dit.c_max));
        }
        if self.eval.min_tasks == 0 {
            return err("eval.min_tasks", "must be positive".into());
        }
        if self.eval.memorization_samples < 2 {
            return err("eval.memorization_samples", "at least two generated models are needed".into());
        }
        if self.tasks.prompt_mode == PromptMode::Image {
            return err("tasks.prompt_mode", "the main generator is trained on text prompts".into());
        }
        if self.arch.id == ArchId::Resnet20Head && self.universe.image_size < 4 {
            return err("universe.image_size", "resnet20_head needs at least 4x4 inputs".into());
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&canonical)[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn errors_carry_field_paths() {
        match ExperimentConfig::from_toml("[dit]\nhidden = \"wide\"\n") {
            Err(Error::Config { path, .. }) => assert_eq!(path, "dit.hidden"),
            other => panic!("unexpected {other:?}"),
        }
        match ExperimentConfig::from_toml("[eval]\nsuites = [\"ood\", \"bogus\"]\n") {
            Err(Error::Config { path, .. }) => assert_eq!(path, "eval.suites[1]"),
            other => panic!("unexpected {other:?}"),
        }
        match ExperimentConfig::from_toml("[train]\nitres = 3\n") {
            Err(Error::Config { path, .. }) => assert!(path.starts_with("train"), "{path}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        let back = ExperimentConfig::from_toml(&a.to_toml().unwrap()).unwrap();
        assert_eq!(back, a);
    }
}

//! TOML run configuration. Every section and key is optional; unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pla_core::bayes::KernelForm;
use pla_core::{
    EmbeddingHead, HyperBox, HyperParams, ModelShape, OptimizerConfig, PlaConfig, SplitMode,
    SynthSpec, TuneSettings,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for model initialization, batch sampling and the search.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Dataset file; `<out_dir>/dataset.txt` when unset.
    pub dataset: Option<PathBuf>,
    pub data: SynthSpec,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub bounds: HyperBox,
    pub optimizer: OptimizerConfig,
    pub pla: PlaConfig,
    pub fixed: FixedConfig,
    pub eval: EvalConfig,
    pub tune: TuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("pla-out"),
            dataset: None,
            data: SynthSpec::default(),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            bounds: HyperBox::default(),
            optimizer: OptimizerConfig::default(),
            pla: PlaConfig::default(),
            fixed: FixedConfig::default(),
            eval: EvalConfig::default(),
            tune: TuneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub query_per_identity: usize,
    pub mode: SplitMode,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            query_per_identity: 2,
            mode: SplitMode::Closed {
                train_per_identity: 8,
            },
        }
    }
}

/// Layer widths; the input width and class count come from the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub head_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            head_dim: 16,
        }
    }
}

/// Objective and budget of the fixed-objective modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixedConfig {
    pub lambda: f64,
    pub margin: f64,
    pub k: usize,
    pub p: usize,
    /// Defaults to `pla.max_epochs`.
    pub epochs: Option<usize>,
}

impl Default for FixedConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            margin: 0.2,
            k: 1,
            p: 1,
            epochs: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub target_dim: Option<usize>,
    pub embedding: EmbeddingHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneConfig {
    pub initial_design: usize,
    pub rounds: usize,
    pub pool_size: usize,
    pub kernel: KernelForm,
}

impl Default for TuneConfig {
    fn default() -> Self {
        let s = TuneSettings::default();
        Self {
            initial_design: s.initial_design,
            rounds: s.rounds,
            pool_size: s.pool_size,
            kernel: s.kernel,
        }
    }
}

impl RunConfig {
    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate().context("[data]")?;
        self.bounds.validate().context("[bounds]")?;
        self.optimizer.validate().context("[optimizer]")?;
        self.pla.validate().context("[pla]")?;
        self.fixed_params().context("[fixed]")?;
        if self.fixed.epochs == Some(0) {
            bail!("[fixed]: epochs must be at least 1");
        }
        if self.model.hidden_dim == 0 || self.model.head_dim == 0 {
            bail!("[model]: hidden_dim and head_dim must be at least 1");
        }
        if self.split.query_per_identity == 0 {
            bail!("[split]: query_per_identity must be at least 1");
        }
        if self.eval.target_dim == Some(0) {
            bail!("[eval]: target_dim must be at least 1");
        }
        if self.tune.initial_design == 0 || self.tune.pool_size == 0 {
            bail!("[tune]: initial_design and pool_size must be at least 1");
        }
        Ok(())
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset
            .clone()
            .unwrap_or_else(|| self.out_dir.join("dataset.txt"))
    }

    pub fn fixed_params(&self) -> Result<HyperParams> {
        let f = &self.fixed;
        Ok(HyperParams::new(f.lambda, f.margin, f.k, f.p)?)
    }

    pub fn fixed_epochs(&self) -> usize {
        self.fixed.epochs.unwrap_or(self.pla.max_epochs)
    }

    pub fn model_shape(&self, input_dim: usize, classes: usize) -> ModelShape {
        ModelShape {
            input_dim,
            hidden_dim: self.model.hidden_dim,
            head_dim: self.model.head_dim,
            classes,
        }
    }

    pub fn tune_settings(&self) -> TuneSettings {
        TuneSettings {
            initial_design: self.tune.initial_design,
            rounds: self.tune.rounds,
            pool_size: self.tune.pool_size,
            kernel: self.tune.kernel,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn default_round_trips_through_toml() {
        let text = toml::to_string(&RunConfig::default()).unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), RunConfig::default());
    }

    #[test]
    fn nested_sections_parse() {
        let cfg = RunConfig::parse(
            r#"
            seed = 7
            [split]
            mode = { kind = "open", test_identities = 16 }
            [pla]
            max_epochs = 60
            re_explore_policy = "stale"
            [pla.batch_spec]
            identities = 8
            per_identity = 4
            [bounds]
            lambda = { lo = 0.5, hi = 1.5 }
            margin = { lo = 0.0, hi = 0.2 }
            k = { lo = 1, hi = 4 }
            p = { lo = 1, hi = 8 }
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(
            cfg.split.mode,
            SplitMode::Open {
                test_identities: 16
            }
        );
        assert_eq!(cfg.pla.max_epochs, 60);
        assert_eq!(cfg.pla.batch_spec.identities, 8);
        assert_eq!(cfg.bounds.k.hi, 4.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("sed = 1").is_err());
        assert!(RunConfig::parse("[pla]\nmax_epoch = 5").is_err());
        assert!(RunConfig::parse("[data]\ndims = 5").is_err());
    }

    #[test]
    fn out_of_box_bounds_are_rejected() {
        let err = RunConfig::parse(
            "[bounds]\nlambda = { lo = 0.0, hi = 3.0 }\nmargin = { lo = -0.1, hi = 0.3 }\nk = { lo = 1, hi = 8 }\np = { lo = 1, hi = 16 }",
        )
        .unwrap_err();
        assert!(format!("{err:#}").contains("[bounds]"));
        assert!(RunConfig::parse("[fixed]\nk = 0").is_err());
        assert!(RunConfig::parse("[pla]\nexplore_epochs = 5").is_err());
    }

    #[test]
    fn shipped_configs_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let desk = RunConfig::load(Some(&dir.join("desk.toml"))).unwrap();
        assert_eq!(desk, RunConfig::default());
        RunConfig::load(Some(&dir.join("smoke.toml"))).unwrap();
    }
}

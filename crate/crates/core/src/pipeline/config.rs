//! Declarative experiment configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::budgetnas::{NasConfig, SpaceSpec};
use crate::error::{Error, Result};
use crate::flopsmeter::model_flops;
use crate::metaengine::{InitConfig, MetaConfig};
use crate::nets::{ArchConfig, Architecture, EncoderKind, InputShape, ModelSpec, TrainConfig};
use crate::synthgen::{UniverseConfig, DEFAULT_SUPPORT_FRAC};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    /// Heavy model trained on the scenario alone.
    SinH,
    /// Agnostic heavy model fine-tuned to the scenario.
    MeH,
    /// Pre-designed light model distilled from the fine-tuned heavy model.
    MeL,
    /// Searched light model distilled from the fine-tuned heavy model.
    Ours,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::SinH, Strategy::MeH, Strategy::MeL, Strategy::Ours];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::SinH => "SinH",
            Strategy::MeH => "MeH",
            Strategy::MeL => "MeL",
            Strategy::Ours => "Ours",
        }
    }

    pub fn needs_meta(self) -> bool {
        self != Strategy::SinH
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Timing of the serving stub.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub batch_size: usize,
    pub reps: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            reps: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub universe: UniverseConfig,
    /// One full run per seed; report rows carry the seed.
    pub seeds: Vec<u64>,
    pub n_initial_scenarios: usize,
    pub strategies: Vec<Strategy>,
    pub support_frac: f64,
    pub heavy: ArchConfig,
    pub light: ArchConfig,
    /// Training of single-scenario heavy models.
    pub heavy_train: TrainConfig,
    /// Training of light students (pre-designed and searched).
    pub light_train: TrainConfig,
    /// Distillation weight for light students.
    pub delta: f64,
    pub meta: MetaConfig,
    pub init: InitConfig,
    /// Search settings; `flops_budget` defaults to the light model's FLOPs.
    pub nas: NasConfig,
    /// Refresh the agnostic model after every this many scenarios.
    pub refresh_every: Option<usize>,
    pub serve: ServeConfig,
    pub save_models: bool,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let heavy = ArchConfig::heavy(EncoderKind::Recurrent);
        let light = ArchConfig::light(EncoderKind::Recurrent);
        Self {
            universe: UniverseConfig::default(),
            seeds: vec![0],
            n_initial_scenarios: 8,
            strategies: Strategy::ALL.to_vec(),
            support_frac: DEFAULT_SUPPORT_FRAC,
            heavy: heavy.clone(),
            light: light.clone(),
            heavy_train: TrainConfig {
                learning_rate: 0.003,
                batch_size: 32,
                epochs: 5,
                ..TrainConfig::default()
            },
            light_train: TrainConfig {
                learning_rate: 0.003,
                batch_size: 32,
                epochs: 5,
                ..TrainConfig::default()
            },
            delta: 1.0,
            meta: MetaConfig::default(),
            init: InitConfig::default(),
            nas: NasConfig {
                n_layers: light.n_encoder_layers,
                ..NasConfig::default()
            },
            refresh_every: None,
            serve: ServeConfig::default(),
            save_models: true,
            out_dir: PathBuf::from("runs/latest"),
        }
    }
}

impl ExperimentConfig {
    pub fn input_shape(&self) -> InputShape {
        InputShape {
            profile_dim: self.universe.profile_dim,
            vocab_size: self.universe.vocab_size,
            seq_len: self.universe.max_seq_len,
        }
    }

    pub fn heavy_spec(&self) -> ModelSpec {
        ModelSpec::new(
            self.input_shape(),
            Architecture::Predesigned(self.heavy.clone()),
        )
    }

    pub fn light_spec(&self) -> ModelSpec {
        ModelSpec::new(
            self.input_shape(),
            Architecture::Predesigned(self.light.clone()),
        )
    }

    /// Candidate operations at the light model's width.
    pub fn search_space(&self) -> Result<SpaceSpec> {
        SpaceSpec::new(
            self.nas.n_layers,
            SpaceSpec::default_candidates(self.light.embed_dim, self.light.n_heads),
        )
    }

    /// Whole-model FLOPs budget for searched light models.
    pub fn flops_budget(&self) -> Result<u64> {
        match self.nas.flops_budget {
            Some(b) => Ok(b),
            None => Ok(model_flops(&self.light_spec())?.total),
        }
    }

    pub fn uses_meta(&self) -> bool {
        self.strategies.iter().any(|s| s.needs_meta())
    }

    pub fn validate(&self) -> Result<()> {
        let err = |path: &str, msg: String| Err(Error::Config(format!("{path}: {msg}")));
        self.universe
            .validate()
            .map_err(|e| Error::Config(format!("universe: {e}")))?;
        if self.strategies.is_empty() {
            return err("strategies", "at least one strategy is required".into());
        }
        if self.seeds.is_empty() {
            return err("seeds", "at least one seed is required".into());
        }
        if self.uses_meta() && !(1..=self.universe.n_scenarios).contains(&self.n_initial_scenarios)
        {
            return err(
                "n_initial_scenarios",
                format!(
                    "{} is outside 1..={}",
                    self.n_initial_scenarios, self.universe.n_scenarios
                ),
            );
        }
        if !(self.support_frac > 0.0 && self.support_frac < 1.0) {
            return err(
                "support_frac",
                format!("{} outside (0, 1)", self.support_frac),
            );
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return err("delta", format!("{} must be >= 0", self.delta));
        }
        self.heavy_spec()
            .validate()
            .map_err(|e| Error::Config(format!("heavy: {e}")))?;
        self.light_spec()
            .validate()
            .map_err(|e| Error::Config(format!("light: {e}")))?;
        for (name, t) in [
            ("heavy_train", &self.heavy_train),
            ("light_train", &self.light_train),
        ] {
            t.validate()
                .map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        self.meta
            .validate()
            .map_err(|e| Error::Config(format!("meta: {e}")))?;
        self.nas
            .validate()
            .map_err(|e| Error::Config(format!("nas: {e}")))?;
        if self.strategies.contains(&Strategy::Ours) {
            if self.light.embed_dim != self.light.hidden_dim {
                return err(
                    "light",
                    "searched models need embed_dim equal to hidden_dim".into(),
                );
            }
            let light = model_flops(&self.light_spec())?.total;
            if let Some(b) = self.nas.flops_budget {
                if b != light {
                    return err(
                        "nas.flops_budget",
                        format!("{b} differs from the light model's {light} FLOPs; leave it unset"),
                    );
                }
            }
        }
        if self.serve.reps < 3 {
            return err("serve.reps", format!("{} is below 3", self.serve.reps));
        }
        if self.serve.batch_size == 0 {
            return err("serve.batch_size", "must be >= 1".into());
        }
        if self.refresh_every == Some(0) {
            return err("refresh_every", "must be >= 1 when set".into());
        }
        Ok(())
    }
}

/// Parses and validates a TOML experiment config. Unknown keys and type
/// errors are reported with their dotted path.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(e.to_string()))?;
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("{path}: {}", e.into_inner().message()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

//! Run configuration: one TOML document describing data, networks,
//! training plans and the evaluation protocol.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderSpec, PretrainConfig};
use crate::error::{config, Error, Result};
use crate::fusion::FusionConfig;
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;
use crate::synthdata::DatasetSpec;
use crate::training::{Stage, TrainPlan};

pub const RUN_SCHEMA: &str = "mmdistill.run/1";

/// Encoder size shared by every modality of one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSize {
    pub width: usize,
    pub depth: usize,
    pub out_dim: usize,
    pub attention: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub encoder: EncoderSize,
    pub fusion: FusionConfig,
}

/// The enhancement toggles of a run, from a plain cross-entropy model up to
/// the fully distilled student.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ladder {
    pub modality_dropout: bool,
    pub missing_modality_strategy: bool,
    pub distillation: bool,
}

impl Ladder {
    pub const PLAIN: Ladder = Ladder {
        modality_dropout: false,
        missing_modality_strategy: false,
        distillation: false,
    };
    pub const DROPOUT: Ladder = Ladder {
        modality_dropout: true,
        missing_modality_strategy: false,
        distillation: false,
    };
    pub const ENHANCED: Ladder = Ladder {
        modality_dropout: true,
        missing_modality_strategy: true,
        distillation: false,
    };
    pub const FULL: Ladder = Ladder {
        modality_dropout: true,
        missing_modality_strategy: true,
        distillation: true,
    };

    /// Run directory name, e.g. `baseline-dropout-tokens`.
    pub fn label(self) -> String {
        if self == Self::FULL {
            return "student".into();
        }
        let mut s = String::from("baseline");
        if self.modality_dropout {
            s.push_str("-dropout");
        }
        if self.missing_modality_strategy {
            s.push_str("-tokens");
        }
        if self.distillation {
            s.push_str("-kd");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub eval_seed: u64,
    /// Inference-time modality dropout probabilities.
    pub sweep_probabilities: Vec<f64>,
    /// Seeds for multi-seed comparisons.
    pub seeds: Vec<u64>,
    pub alpha_grid: Vec<f64>,
    pub theta_grid: Vec<usize>,
    /// Training-time modality dropout rates compared by `ablate-dropout`.
    pub dropout_grid: Vec<f64>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            eval_seed: 17,
            sweep_probabilities: (0..10).map(|i| i as f64 / 10.0).collect(),
            seeds: vec![0, 1, 2, 3, 4],
            alpha_grid: vec![1.0, 0.7, 0.4, 0.1],
            theta_grid: vec![4, 8, 16],
            dropout_grid: vec![0.0, 0.25, 0.5, 0.75],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema: String,
    /// Master seed: drives data generation, initialization and training.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Token cap per modality after group averaging.
    pub theta: usize,
    pub data: DatasetSpec,
    pub teacher: NetworkConfig,
    pub student: NetworkConfig,
    /// Student modalities whose encoders start from a pretrained
    /// student-size encoder; the rest start from random weights.
    pub student_pretrained: Vec<usize>,
    pub pretrain: PretrainConfig,
    pub teacher_plan: TrainPlan,
    pub student_plan: TrainPlan,
    /// Toggles used by `train-baseline`.
    pub baseline: Ladder,
    pub eval: EvalProtocol,
}

impl Default for RunConfig {
    fn default() -> Self {
        let teacher_plan = TrainPlan {
            epochs: 15,
            batch_size: 32,
            warmup_epochs: 3.0,
            peak_lr: 3e-3,
            ..TrainPlan::teacher()
        };
        let student_plan = TrainPlan {
            stage: Stage::Distill,
            alpha: 0.7,
            optimizer: AdamWConfig::with_decay(0.01, 2.0),
            epochs: 30,
            ..teacher_plan.clone()
        };
        Self {
            schema: RUN_SCHEMA.into(),
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            theta: 4,
            data: DatasetSpec::default(),
            teacher: NetworkConfig {
                encoder: EncoderSize {
                    width: 32,
                    depth: 1,
                    out_dim: 32,
                    attention: false,
                },
                fusion: FusionConfig {
                    dim: 32,
                    layers: 2,
                    heads: 4,
                    attention_dropout: 0.3,
                    missing_tokens: true,
                    head_hidden: 32,
                },
            },
            student: NetworkConfig {
                encoder: EncoderSize {
                    width: 16,
                    depth: 1,
                    out_dim: 16,
                    attention: false,
                },
                fusion: FusionConfig {
                    dim: 16,
                    layers: 1,
                    heads: 2,
                    attention_dropout: 0.0,
                    missing_tokens: true,
                    head_hidden: 16,
                },
            },
            student_pretrained: vec![0, 1],
            pretrain: PretrainConfig::default(),
            teacher_plan,
            student_plan,
            baseline: Ladder::PLAIN,
            eval: EvalProtocol::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| config(format!("config does not parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| config(format!("config does not serialize: {e}")))
    }

    /// Applies `key.path=value` overrides; values are parsed as TOML and
    /// fall back to plain strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(|e| config(e.to_string()))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| config(format!("override `{item}` is not key=value")))?;
            let value = parse_value(raw.trim());
            set_path(&mut root, key.trim(), value)?;
        }
        let cfg: RunConfig = root
            .try_into()
            .map_err(|e| config(format!("override produced an invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != RUN_SCHEMA {
            return Err(config(format!(
                "unsupported config schema `{}` (expected {RUN_SCHEMA})",
                self.schema
            )));
        }
        self.data.validate()?;
        let m = self.data.num_modalities();
        if let Some(bad) = self.student_pretrained.iter().find(|&&i| i >= m) {
            return Err(config(format!(
                "student_pretrained names modality {bad}, but the dataset has {m}"
            )));
        }
        if self.teacher.encoder.width < 2 * self.student.encoder.width {
            return Err(config(
                "teacher encoder width must be at least twice the student's",
            ));
        }
        self.teacher_model().validate()?;
        self.student_model(Ladder::FULL).validate()?;
        if self.teacher_plan.stage != Stage::Teacher || self.student_plan.stage != Stage::Distill {
            return Err(config(
                "teacher_plan must have stage teacher and student_plan stage distill",
            ));
        }
        self.teacher_plan.validate()?;
        self.student_plan.validate()?;
        for &p in &self.eval.sweep_probabilities {
            if !(0.0..1.0).contains(&p) {
                return Err(config(format!("sweep probability {p} is outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// The dataset spec with the master seed applied.
    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            seed: self.seed,
            ..self.data.clone()
        }
    }

    fn encoder_specs(&self, size: &EncoderSize, trainable: bool) -> Vec<EncoderSpec> {
        self.data
            .modalities
            .iter()
            .map(|m| EncoderSpec {
                modality_id: m.modality_id,
                input_tokens: m.token_count,
                input_dim: m.token_dim,
                width: size.width,
                depth: size.depth,
                out_dim: size.out_dim,
                attention: size.attention,
                trainable,
            })
            .collect()
    }

    pub fn teacher_model(&self) -> ModelConfig {
        ModelConfig {
            encoders: self.encoder_specs(&self.teacher.encoder, false),
            fusion: self.teacher.fusion.clone(),
            theta: self.theta,
            head_classes: self.data.head_classes(),
        }
    }

    /// Student-size network; without the missing-modality strategy absent
    /// streams enter the fusion block as zeros.
    pub fn student_model(&self, ladder: Ladder) -> ModelConfig {
        let mut fusion = self.student.fusion.clone();
        fusion.missing_tokens = ladder.missing_modality_strategy;
        ModelConfig {
            encoders: self.encoder_specs(&self.student.encoder, true),
            fusion,
            theta: self.theta,
            head_classes: self.data.head_classes(),
        }
    }

    /// Student-stage plan for a rung of the ladder. Rungs without
    /// distillation train on cross-entropy alone.
    pub fn ladder_plan(&self, ladder: Ladder) -> TrainPlan {
        let mut plan = self.student_plan.clone();
        plan.seed = self.seed;
        if !ladder.modality_dropout {
            plan.modality_dropout_p = 0.0;
        }
        if !ladder.distillation {
            plan.alpha = 1.0;
        }
        plan
    }

    pub fn teacher_plan(&self) -> TrainPlan {
        TrainPlan {
            seed: self.seed,
            ..self.teacher_plan.clone()
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            toml::Value::Table(t) => {
                let slot = t
                    .get_mut(*part)
                    .ok_or_else(|| config(format!("unknown config key `{key}`")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            toml::Value::Array(a) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| config(format!("`{part}` in `{key}` is not an index")))?;
                let len = a.len();
                let slot = a.get_mut(idx).ok_or_else(|| {
                    config(format!("index {idx} out of range ({len}) in `{key}`"))
                })?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(config(format!("`{key}` descends into a scalar"))),
        };
    }
    Err(config("empty override key"))
}

//! Run configuration: a sectioned TOML file plus command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use mllm_core::corpus::Threshold;
use mllm_core::model::SharingPattern;
use mllm_core::rnn::DropoutConfig;
use mllm_core::sweep::{ModelShape, SweepSpec};
use mllm_core::trainer::{ScheduleMode, TrainingConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_seed() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub languages: Vec<LanguageEntry>,
    /// Training-size limit applied by `prepare` (`FULL`, `40K`, `2500`).
    #[serde(default = "default_threshold")]
    pub threshold: String,
}

fn default_threshold() -> String {
    "FULL".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageEntry {
    pub name: String,
    pub train: PathBuf,
    pub test: PathBuf,
    /// Without it, the tail of the training text is held out.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embedding: usize,
    pub hidden: usize,
    pub pattern: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            embedding: 64,
            hidden: 128,
            pattern: "SSP".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub variant: String,
    /// Languages to train on; all configured languages when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub languages: Option<Vec<String>>,
    pub batch: usize,
    pub bptt: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub dropout_input: f64,
    pub dropout_hidden: f64,
    pub dropout_output: f64,
    pub dropout_embedding: f64,
    /// Separate embedding-dropout decisions for each batch row.
    pub embedding_dropout_per_row: bool,
    pub weight_drop: f64,
    pub alpha: f64,
    pub beta: f64,
    pub clip: f64,
    pub patience: usize,
    pub anneal_factor: f64,
    pub min_lr: f64,
    pub variable_length: bool,
    pub schedule: String,
    pub eval_batch: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainingConfig::default();
        TrainSection {
            variant: Variant::MultiAwd.to_string(),
            languages: None,
            batch: t.batch,
            bptt: t.bptt,
            lr: t.lr,
            max_epochs: t.max_epochs,
            dropout_input: t.dropout.input,
            dropout_hidden: t.dropout.hidden,
            dropout_output: t.dropout.output,
            dropout_embedding: t.dropout.embedding,
            embedding_dropout_per_row: t.dropout.embedding_per_batch_row,
            weight_drop: t.dropout.weight,
            alpha: t.alpha,
            beta: t.beta,
            clip: t.clip,
            patience: t.patience,
            anneal_factor: t.anneal_factor,
            min_lr: t.min_lr,
            variable_length: t.variable_length,
            schedule: t.schedule.to_string(),
            eval_batch: t.eval_batch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Target languages; all configured languages when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<String>>,
    pub variants: Vec<String>,
    pub thresholds: Vec<String>,
    pub seeds: Vec<u64>,
    pub test_batch: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            targets: None,
            variants: Variant::ALL.iter().map(ToString::to_string).collect(),
            thresholds: ["5K", "10K", "20K", "40K", "80K"].map(String::from).to_vec(),
            seeds: vec![1, 2, 3],
            test_batch: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "runs".into() }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::usage(format!("invalid configuration: {e}")))
    }

    /// Reads a config file; relative paths are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = RunConfig::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for l in &mut cfg.data.languages {
            resolve(&mut l.train);
            resolve(&mut l.test);
            if let Some(v) = l.valid.as_mut() {
                resolve(v);
            }
        }
        resolve(&mut cfg.output.dir);
        Ok(cfg)
    }

    pub fn dump(&self) -> String {
        toml::to_string(self).expect("configuration is always serializable")
    }

    pub fn language_names(&self) -> Vec<String> {
        self.data.languages.iter().map(|l| l.name.clone()).collect()
    }

    /// Checks values and that every raw corpus exists.
    pub fn validate(&self, need_raw: bool) -> Result<(), CliError> {
        if self.data.languages.is_empty() {
            return Err(CliError::usage("[data] lists no languages"));
        }
        let mut names: Vec<&str> = self.data.languages.iter().map(|l| l.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::usage("[data] lists a language twice"));
        }
        if need_raw {
            for l in &self.data.languages {
                for p in [Some(&l.train), Some(&l.test), l.valid.as_ref()].into_iter().flatten() {
                    if !p.is_file() {
                        return Err(CliError::usage(format!(
                            "corpus file for `{}` not found: {}",
                            l.name,
                            p.display()
                        )));
                    }
                }
            }
        }
        self.threshold()?;
        self.shape()?;
        self.training()?.validate().map_err(CliError::usage)?;
        self.variant()?;
        self.sweep_spec()?.validate().map_err(CliError::usage)?;
        Ok(())
    }

    pub fn threshold(&self) -> Result<Threshold, CliError> {
        self.data.threshold.parse().map_err(CliError::usage)
    }

    pub fn shape(&self) -> Result<ModelShape, CliError> {
        Ok(ModelShape {
            embedding: self.model.embedding,
            hidden: self.model.hidden,
            pattern: self.model.pattern.parse::<SharingPattern>().map_err(CliError::usage)?,
        })
    }

    pub fn variant(&self) -> Result<Variant, CliError> {
        self.train.variant.parse().map_err(CliError::usage)
    }

    pub fn training(&self) -> Result<TrainingConfig, CliError> {
        let t = &self.train;
        Ok(TrainingConfig {
            batch: t.batch,
            bptt: t.bptt,
            lr: t.lr,
            max_epochs: t.max_epochs,
            dropout: DropoutConfig {
                input: t.dropout_input,
                hidden: t.dropout_hidden,
                output: t.dropout_output,
                embedding: t.dropout_embedding,
                embedding_per_batch_row: t.embedding_dropout_per_row,
                weight: t.weight_drop,
                locked: true,
            },
            alpha: t.alpha,
            beta: t.beta,
            clip: t.clip,
            patience: t.patience,
            anneal_factor: t.anneal_factor,
            min_lr: t.min_lr,
            variable_length: t.variable_length,
            schedule: t.schedule.parse::<ScheduleMode>().map_err(CliError::usage)?,
            eval_batch: t.eval_batch,
            seed: self.seed,
        })
    }

    /// Languages for `train`, in configuration order.
    pub fn train_languages(&self) -> Result<Vec<String>, CliError> {
        let all = self.language_names();
        match &self.train.languages {
            None => Ok(all),
            Some(sel) => {
                for s in sel {
                    if !all.contains(s) {
                        return Err(CliError::usage(format!("[train] language `{s}` is not configured")));
                    }
                }
                Ok(all.into_iter().filter(|l| sel.contains(l)).collect())
            }
        }
    }

    pub fn sweep_spec(&self) -> Result<SweepSpec, CliError> {
        let s = &self.sweep;
        let targets = s.targets.clone().unwrap_or_else(|| self.language_names());
        for t in &targets {
            if !self.language_names().contains(t) {
                return Err(CliError::usage(format!("[sweep] target `{t}` is not configured")));
            }
        }
        Ok(SweepSpec {
            targets,
            variants: s
                .variants
                .iter()
                .map(|v| v.parse())
                .collect::<Result<_, _>>()
                .map_err(CliError::usage)?,
            thresholds: s
                .thresholds
                .iter()
                .map(|t| t.parse())
                .collect::<Result<_, _>>()
                .map_err(CliError::usage)?,
            seeds: s.seeds.clone(),
            test_batch: s.test_batch,
        })
    }

    pub fn packs_dir(&self) -> PathBuf {
        self.output.dir.join("packs")
    }
}

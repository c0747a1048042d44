//! Flat run configuration: a JSON file, then `--key value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use mimn_core::data::DataFormat;
use mimn_core::model::{ModelConfig, Variant};
use mimn_core::train::{AdamConfig, TrainConfig};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Every key a config file may set. Paths in a file are relative to the
/// file's directory; paths on the command line are relative to the working
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub mlp_hidden: usize,
    pub turns: usize,
    pub variant: Variant,
    pub dropout: f64,
    /// Label set; taken from the training data when absent.
    pub labels: Option<Vec<String>>,

    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l2_coeff: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,

    pub format: DataFormat,
    pub train_data: Option<PathBuf>,
    pub valid_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    /// Checkpoint written by train and read by eval and predict; defaults to
    /// `out_dir/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            embed_dim: model.embed_dim,
            hidden: model.hidden,
            mlp_hidden: model.mlp_hidden,
            turns: model.turns,
            variant: model.variant,
            dropout: model.dropout,
            labels: None,
            batch_size: train.batch_size,
            lr: train.adam.lr,
            beta1: train.adam.beta1,
            beta2: train.adam.beta2,
            eps: train.adam.eps,
            l2_coeff: train.l2_coeff,
            patience: train.patience,
            max_epochs: train.max_epochs,
            seed: train.seed,
            format: DataFormat::UnifiedJsonl,
            train_data: None,
            valid_data: None,
            test_data: None,
            embeddings: None,
            checkpoint: None,
            out_dir: PathBuf::from("out"),
            precision: Precision::F32,
        }
    }
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: mimn_core::Error| e.to_string())
}

fn parse_format(s: &str) -> Result<DataFormat, String> {
    s.parse().map_err(|e: mimn_core::Error| e.to_string())
}

/// Command-line overrides, one per config key.
#[derive(Clone, Debug, Default, Args)]
pub struct Overrides {
    /// Flat JSON config file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// full, no_memory, gate_relu or mixed_single_turn.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// Inference turns (default 3).
    #[arg(long)]
    pub turns: Option<usize>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,

    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Comma-separated label names.
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<String>>,

    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub l2_coeff: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,

    /// snli_jsonl, scitail_tsv, mpe_tsv or unified_jsonl.
    #[arg(long, value_parser = parse_format)]
    pub format: Option<DataFormat>,
    #[arg(long, value_name = "PATH")]
    pub train_data: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub valid_data: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub test_data: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub embeddings: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
}

macro_rules! apply {
    ($cfg:ident, $o:ident, $($field:ident),*) => {
        $(if let Some(v) = $o.$field.clone() { $cfg.$field = v; })*
    };
}

macro_rules! apply_some {
    ($cfg:ident, $o:ident, $($field:ident),*) => {
        $(if let Some(v) = $o.$field.clone() { $cfg.$field = Some(v); })*
    };
}

impl RunConfig {
    /// Defaults, then the config file, then the overrides.
    pub fn resolve(o: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match &o.config {
            Some(path) => Self::from_file(path)?,
            None => RunConfig::default(),
        };
        apply!(
            cfg, o, seed, out_dir, variant, turns, precision, embed_dim, hidden, mlp_hidden, dropout, batch_size, lr,
            beta1, beta2, eps, l2_coeff, patience, max_epochs, format
        );
        apply_some!(cfg, o, labels, train_data, valid_data, test_data, embeddings, checkpoint);
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.train_data,
            &mut cfg.valid_data,
            &mut cfg.test_data,
            &mut cfg.embeddings,
            &mut cfg.checkpoint,
        ]
        .into_iter()
        .flatten()
        {
            *p = base.join(&*p);
        }
        cfg.out_dir = base.join(&cfg.out_dir);
        Ok(cfg)
    }

    /// Model configuration; `labels` fills in when the config has none.
    pub fn model(&self, labels: &[String]) -> Result<ModelConfig, CliError> {
        let labels = match &self.labels {
            Some(own) if own != labels && !labels.is_empty() => {
                return Err(CliError::Config(format!(
                    "configured labels {own:?} do not match the data labels {labels:?}"
                )))
            }
            Some(own) => own.clone(),
            None => labels.to_vec(),
        };
        let model = ModelConfig {
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            mlp_hidden: self.mlp_hidden,
            turns: self.turns,
            variant: self.variant,
            dropout: self.dropout,
            labels,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let train = TrainConfig {
            batch_size: self.batch_size,
            l2_coeff: self.l2_coeff,
            patience: self.patience,
            max_epochs: self.max_epochs,
            seed: self.seed,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
        };
        train.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CliError::Config(format!(
                "lr must be a positive number, got {}",
                self.lr
            )));
        }
        Ok(train)
    }

    /// `checkpoint`, or `out_dir/model.ckpt` where training writes by default.
    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("model.ckpt"))
    }

    /// The path stored under `key`, which must name an existing file.
    pub fn require<'a>(&self, key: &str, path: &'a Option<PathBuf>) -> Result<&'a Path, CliError> {
        let path = path
            .as_deref()
            .ok_or_else(|| CliError::Config(format!("`{key}` is required for this command")))?;
        if !path.is_file() {
            return Err(CliError::Config(format!("{key}: no such file {}", path.display())));
        }
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_core_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.model(&["a".into(), "b".into(), "c".into()]).unwrap().embed_dim, 300);
        assert_eq!(c.train().unwrap(), TrainConfig::default());
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(
            &path,
            r#"{"hidden": 8, "seed": 4, "train_data": "t.jsonl", "variant": "gate_relu"}"#,
        )
        .unwrap();
        let o = Overrides {
            config: Some(path),
            seed: Some(9),
            ..Overrides::default()
        };
        let c = RunConfig::resolve(&o).unwrap();
        assert_eq!((c.hidden, c.seed, c.variant), (8, 9, Variant::GateRelu));
        assert_eq!(c.train_data.unwrap(), dir.path().join("t.jsonl"));
        assert_eq!(c.out_dir, dir.path().join("out"));
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"hiden": 8}"#).unwrap();
        assert!(matches!(RunConfig::from_file(&path), Err(CliError::Config(_))));
    }

    #[test]
    fn label_consistency() {
        let mut c = RunConfig::default();
        let three: Vec<String> = ["neutral", "entailment", "contradiction"].map(String::from).to_vec();
        c.labels = Some(vec!["neutral".into(), "entails".into()]);
        assert!(c.model(&three).is_err());
        assert_eq!(c.model(&[]).unwrap().num_labels(), 2);
    }
}

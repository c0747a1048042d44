use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use mimn_core::data::{
    generate_toy_corpus, load_dataset, save_embeddings, tokenize, toy_embeddings, DataFormat, Dataset, EmbeddingStats,
    Encoded, ToyCorpus, Vocabulary,
};
use mimn_core::model::{argmax, Mimn, ModelConfig, Variant, THREE_WAY_LABELS};
use mimn_core::tensor::{BackwardFault, OpKind};
use mimn_core::train::{
    self, ensemble_eval, evaluate, init_model, toy_settings, Checkpoint, Evaluation, History, TrainConfig,
};
use mimn_core::verify::{count_params, GradCheckConfig};
use mimn_core::Scalar;

use crate::config::{Overrides, Precision, RunConfig};
use crate::error::CliError;

/// Pretty JSON on stdout, newline-terminated.
fn emit(value: &impl Serialize) -> Result<(), CliError> {
    println!(
        "{}",
        serde_json::to_string_pretty(value).map_err(mimn_core::Error::from)?
    );
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(mimn_core::Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(mimn_core::Error::from)?;
    Ok(())
}

fn load(path: &Path, format: DataFormat) -> Result<Dataset, CliError> {
    let data = load_dataset(path, format)?;
    if data.is_empty() {
        return Err(CliError::Config(format!("{}: no usable examples", path.display())));
    }
    Ok(data)
}

fn same_labels(expected: &[String], data: &Dataset, path: &Path) -> Result<(), CliError> {
    if data.labels != expected {
        return Err(CliError::Config(format!(
            "{} has labels {:?}, expected {:?}",
            path.display(),
            data.labels,
            expected
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    variant: Variant,
    seed: u64,
    precision: Precision,
    epochs: usize,
    best_epoch: usize,
    best_valid_accuracy: f64,
    test: Option<Evaluation>,
    embeddings: EmbeddingStats,
    checkpoint: PathBuf,
    history: PathBuf,
}

struct Prepared {
    model: ModelConfig,
    train: TrainConfig,
    vocab: Vocabulary,
    train_set: Vec<Encoded>,
    valid_set: Vec<Encoded>,
    test_set: Option<Vec<Encoded>>,
}

pub fn train(o: &Overrides) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(o)?;
    let train_path = cfg.require("train_data", &cfg.train_data)?;
    let valid_path = cfg.require("valid_data", &cfg.valid_data)?;
    let test_path = match &cfg.test_data {
        Some(_) => Some(cfg.require("test_data", &cfg.test_data)?),
        None => None,
    };
    let embeddings = match &cfg.embeddings {
        Some(_) => Some(cfg.require("embeddings", &cfg.embeddings)?),
        None => None,
    };
    let train_data = load(train_path, cfg.format)?;
    let valid_data = load(valid_path, cfg.format)?;
    same_labels(&train_data.labels, &valid_data, valid_path)?;
    let test_data = test_path.map(|p| load(p, cfg.format)).transpose()?;
    if let (Some(t), Some(p)) = (&test_data, test_path) {
        same_labels(&train_data.labels, t, p)?;
    }
    let model = cfg.model(&train_data.labels)?;
    let train = cfg.train()?;
    // words of every split, so pretrained rows cover evaluation text too
    let vocab = Vocabulary::build(
        train_data
            .examples
            .iter()
            .chain(&valid_data.examples)
            .chain(test_data.iter().flat_map(|d| &d.examples)),
    );
    let prepared = Prepared {
        train_set: train_data.encode(&vocab),
        valid_set: valid_data.encode(&vocab),
        test_set: test_data.map(|d| d.encode(&vocab)),
        vocab,
        model,
        train,
    };
    match cfg.precision {
        Precision::F32 => run_training::<f32>(&cfg, prepared, embeddings),
        Precision::F64 => run_training::<f64>(&cfg, prepared, embeddings),
    }
}

fn run_training<F: Scalar>(cfg: &RunConfig, p: Prepared, embeddings: Option<&Path>) -> Result<(), CliError> {
    let (model, stats) = init_model::<F>(p.model, &p.vocab, embeddings, p.train.seed)?;
    let trained = train::train(model, &p.train_set, &p.valid_set, &p.train)?;
    fs::create_dir_all(&cfg.out_dir).map_err(mimn_core::Error::from)?;
    let checkpoint = cfg.checkpoint_path();
    Checkpoint::from_model(&trained.model, &p.vocab).save(&checkpoint)?;
    let history_path = cfg.out_dir.join("history.json");
    write_json(&history_path, &trained.history)?;
    let test = p.test_set.map(|t| evaluate(&trained.model, &t)).transpose()?;
    let History {
        variant,
        seed,
        epochs,
        best_epoch,
        best_valid_accuracy,
        ..
    } = trained.history;
    emit(&TrainSummary {
        variant,
        seed,
        precision: cfg.precision,
        epochs: epochs.len(),
        best_epoch,
        best_valid_accuracy,
        test,
        embeddings: stats,
        checkpoint,
        history: history_path,
    })
}

#[derive(Serialize)]
struct EvalReport {
    members: usize,
    #[serde(flatten)]
    evaluation: Evaluation,
}

pub fn eval(o: &Overrides, ensemble: Option<&[PathBuf]>) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(o)?;
    let paths: Vec<PathBuf> = match ensemble {
        Some([]) => return Err(CliError::Config("--ensemble needs at least one checkpoint".into())),
        Some(list) => list
            .iter()
            .map(|p| cfg.require("ensemble", &Some(p.clone())).map(Path::to_path_buf))
            .collect::<Result<_, _>>()?,
        None => vec![cfg.require("checkpoint", &Some(cfg.checkpoint_path()))?.to_path_buf()],
    };
    let data_path = cfg.require("test_data", &cfg.test_data)?;
    let checkpoints = paths.iter().map(Checkpoint::load).collect::<Result<Vec<_>, _>>()?;
    let first = &checkpoints[0];
    if checkpoints.iter().any(|c| c.vocab != first.vocab) {
        return Err(CliError::Config("ensemble members have different vocabularies".into()));
    }
    let data = load(data_path, cfg.format)?;
    same_labels(&first.config.labels, &data, data_path)?;
    let examples = data.encode(&first.vocab);
    let evaluation = match cfg.precision {
        Precision::F32 => evaluate_members::<f32>(&checkpoints, &examples)?,
        Precision::F64 => evaluate_members::<f64>(&checkpoints, &examples)?,
    };
    emit(&EvalReport {
        members: checkpoints.len(),
        evaluation,
    })
}

fn evaluate_members<F: Scalar>(checkpoints: &[Checkpoint], examples: &[Encoded]) -> Result<Evaluation, CliError> {
    let models = checkpoints
        .iter()
        .map(Checkpoint::model::<F>)
        .collect::<Result<Vec<Mimn<F>>, _>>()?;
    Ok(match &models[..] {
        [single] => evaluate(single, examples)?,
        many => ensemble_eval(many, examples)?,
    })
}

#[derive(Serialize)]
struct LabelProbability {
    label: String,
    probability: f64,
}

#[derive(Serialize)]
struct Prediction {
    label: String,
    distribution: Vec<LabelProbability>,
}

pub fn predict(o: &Overrides, premise: &str, hypothesis: &str) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(o)?;
    let (p, q) = (tokenize(premise), tokenize(hypothesis));
    if p.is_empty() || q.is_empty() {
        return Err(CliError::Config("premise and hypothesis must be nonempty".into()));
    }
    let checkpoint = Checkpoint::load(cfg.require("checkpoint", &Some(cfg.checkpoint_path()))?)?;
    let example = Encoded {
        premise: checkpoint.vocab.encode(&p),
        hypothesis: checkpoint.vocab.encode(&q),
        label: 0,
    };
    let dist = match cfg.precision {
        Precision::F32 => distribution::<f32>(&checkpoint, &example)?,
        Precision::F64 => distribution::<f64>(&checkpoint, &example)?,
    };
    let labels = &checkpoint.config.labels;
    emit(&Prediction {
        label: labels[argmax(&dist)].clone(),
        distribution: labels
            .iter()
            .zip(dist)
            .map(|(l, probability)| LabelProbability {
                label: l.clone(),
                probability,
            })
            .collect(),
    })
}

fn distribution<F: Scalar>(checkpoint: &Checkpoint, example: &Encoded) -> Result<Vec<f64>, CliError> {
    let model = checkpoint.model::<F>()?;
    Ok(train::predict(&model, example)?
        .into_iter()
        .map(|p| p.to_f64_lossy())
        .collect())
}

pub fn gradcheck(o: &Overrides, corrupt: Option<&str>) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(o)?;
    let mut config = GradCheckConfig::new(cfg.variant, cfg.seed);
    if let Some(op) = corrupt {
        config.fault = Some(BackwardFault::new(op.parse::<OpKind>()?));
    }
    let report = mimn_core::verify::gradcheck(&config)?;
    emit(&report)?;
    if report.passed {
        Ok(())
    } else {
        Err(CliError::GradCheck)
    }
}

pub fn params(o: &Overrides) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(o)?;
    let labels: Vec<String> = match &cfg.labels {
        Some(l) => l.clone(),
        None => THREE_WAY_LABELS.iter().map(|s| s.to_string()).collect(),
    };
    emit(&count_params(&cfg.model(&labels)?))
}

#[derive(Serialize)]
struct ToySummary {
    config: PathBuf,
    train: usize,
    valid: usize,
    test: usize,
}

/// Writes `train.jsonl`, `valid.jsonl`, `test.jsonl`, `embeddings.txt` and
/// `config.json` into `out_dir`. The config holds the toy preset with the
/// chosen variant and seed.
pub fn gen_toy(o: &Overrides, size: usize) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(o)?;
    let corpus = generate_toy_corpus(cfg.seed, size)
        .ok_or_else(|| CliError::Config(format!("toy corpus needs at least 30 examples, got {size}")))?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).map_err(mimn_core::Error::from)?;
    for (name, examples) in [
        ("train", &corpus.train),
        ("valid", &corpus.valid),
        ("test", &corpus.test),
    ] {
        let split = Dataset {
            labels: ToyCorpus::labels(),
            examples: examples.clone(),
            skipped: Default::default(),
        };
        split.save(dir.join(format!("{name}.jsonl")))?;
    }
    let (model, train) = toy_settings(cfg.variant, cfg.seed);
    save_embeddings(dir.join("embeddings.txt"), &toy_embeddings(model.embed_dim, cfg.seed))?;
    let toy = RunConfig {
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
        train_data: Some("train.jsonl".into()),
        valid_data: Some("valid.jsonl".into()),
        test_data: Some("test.jsonl".into()),
        embeddings: Some("embeddings.txt".into()),
        checkpoint: None,
        out_dir: "out".into(),
        precision: cfg.precision,
    };
    let config = dir.join("config.json");
    write_json(&config, &toy)?;
    emit(&ToySummary {
        config,
        train: corpus.train.len(),
        valid: corpus.valid.len(),
        test: corpus.test.len(),
    })
}

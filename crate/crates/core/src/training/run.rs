use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::metrics::{evaluate_metrics, Metrics};
use super::train::{predict_all, train, write_history, write_predictions, EpochRecord};
use crate::config::{Architecture, Config};
use crate::dataset::{file_sha256, make_split, parse_dataset_with_cutoff, MixtureSystem, Normalizer, Split, SplitSpec};
use crate::error::{Error, Result};
use crate::model::Model;

/// Inputs that fully determine a training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub data: PathBuf,
    pub data_sha256: String,
    pub seed: u64,
    pub config: Config,
    pub split_sizes: [usize; 3],
    pub num_parameters: usize,
}

pub struct RunOutput {
    pub manifest: Manifest,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// `None` when test metrics are undefined (e.g. constant predictions).
    pub test_metrics: Option<Metrics>,
    pub test_error: Option<String>,
}

pub fn split_spec(cfg: &Config) -> SplitSpec {
    let mut spec = SplitSpec::new(cfg.split, cfg.seed);
    spec.threshold = cfg.split_threshold();
    spec
}

fn select<'a>(data: &'a [MixtureSystem], idx: &[usize]) -> Vec<&'a MixtureSystem> {
    idx.iter().map(|&i| &data[i]).collect()
}

fn ids<'a>(v: &[&'a MixtureSystem]) -> Vec<&'a str> {
    v.iter().map(|s| s.id.as_str()).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct SplitIds<'a> {
    train: Vec<&'a str>,
    valid: Vec<&'a str>,
    test: Vec<&'a str>,
}

/// Parses `data`, splits it, trains and writes every artifact into `out`:
/// `manifest.json`, `config.toml`, `split.json`, `history.csv`,
/// `checkpoint.json` (best validation epoch), `test_predictions.csv` and
/// `metrics.json`.
pub fn run_training(
    data: &Path,
    cfg: &Config,
    out: &Path,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunOutput> {
    cfg.validate()?;
    let systems = parse_dataset_with_cutoff(data, cfg.cutoff)?;
    let split: Split = make_split(&systems, &split_spec(cfg))?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let train_set = select(&systems, &split.train);
    let valid_set = select(&systems, &split.valid);
    let test_set = select(&systems, &split.test);
    let normalizer = Normalizer::fit(train_set.iter().copied(), cfg.log_target);
    let vocabulary = match cfg.architecture {
        Architecture::ProportionMlp => Model::vocabulary_of(systems.iter()),
        Architecture::Geomix => Vec::new(),
    };
    let model = Model::new(cfg, normalizer, vocabulary)?;

    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").into(),
        data: data.to_path_buf(),
        data_sha256: file_sha256(data)?,
        seed: cfg.seed,
        config: cfg.clone(),
        split_sizes: [split.train.len(), split.valid.len(), split.test.len()],
        num_parameters: model.num_parameters(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    let cfg_path = out.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    write_json(
        &out.join("split.json"),
        &SplitIds {
            train: ids(&train_set),
            valid: ids(&valid_set),
            test: ids(&test_set),
        },
    )?;

    let outcome = train(model, &train_set, &valid_set, on_epoch)?;
    write_history(&out.join("history.csv"), &outcome.history)?;
    Checkpoint::from_model(&outcome.best, Some(outcome.best_epoch)).save(&out.join("checkpoint.json"))?;

    let pred = predict_all(&outcome.best, &test_set)?;
    write_predictions(&out.join("test_predictions.csv"), &test_set, &pred)?;
    let target: Vec<f64> = test_set.iter().map(|s| s.target).collect();
    let (test_metrics, test_error) = match evaluate_metrics(&pred, &target) {
        Ok(m) => (Some(m), None),
        Err(e @ Error::UndefinedCorrelation(_)) => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    write_json(
        &out.join("metrics.json"),
        &serde_json::json!({
            "best_epoch": outcome.best_epoch,
            "test": test_metrics,
            "test_error": test_error,
        }),
    )?;
    Ok(RunOutput {
        manifest,
        history: outcome.history,
        best_epoch: outcome.best_epoch,
        test_metrics,
        test_error,
    })
}

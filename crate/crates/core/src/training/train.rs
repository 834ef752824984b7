use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{mse, pearson};
use crate::autodiff::{adam_step, AdamConfig, OptimizerState, Tensor};
use crate::dataset::MixtureSystem;
use crate::error::{Error, Result};
use crate::model::{LossParts, Model};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "GEOMIX_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_mse: f64,
    pub train_denoise: f64,
    pub valid_mse: f64,
    /// NaN when undefined (constant predictions).
    pub valid_pearson: f64,
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation MSE.
    pub best: Model,
    pub best_epoch: usize,
    pub last: Model,
    pub history: Vec<EpochRecord>,
}

/// Worker pool sized by [`THREADS_ENV`], or the number of cores.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("{THREADS_ENV}=`{v}` is not a thread count")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Noise stream for one system in one epoch, independent of batching and
/// thread scheduling.
pub fn noise_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_655f_7365);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Predictions in mS/cm, in input order.
pub fn predict_all(model: &Model, systems: &[&MixtureSystem]) -> Result<Vec<f64>> {
    systems.par_iter().map(|s| model.predict(s)).collect()
}

fn validation(model: &Model, valid: &[&MixtureSystem]) -> Result<(f64, f64)> {
    let pred = predict_all(model, valid)?;
    let target: Vec<f64> = valid.iter().map(|s| s.target).collect();
    let m = mse(&pred, &target)?;
    let r = match pearson(&pred, &target) {
        Ok(r) => r,
        Err(Error::UndefinedCorrelation(_)) => f64::NAN,
        Err(e) => return Err(e),
    };
    Ok((m, r))
}

/// Mini-batch Adam on `train`, validating after every epoch.
///
/// Results depend only on the model, the data and the config: per-system
/// work may run on any thread but is reduced in a fixed order.
pub fn train(
    initial: Model,
    train: &[&MixtureSystem],
    valid: &[&MixtureSystem],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if train.is_empty() || valid.is_empty() {
        return Err(Error::DegenerateSplit("train and validation sets must be non-empty".into()));
    }
    let cfg = initial.config.clone();
    let (sigma, gamma) = cfg.noise();
    let pool = thread_pool()?;
    let mut model = initial;
    let mut opt = OptimizerState::new(
        AdamConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
        model.params.tensors(),
    );
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, crate::nn::ParamStore)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = Vec::with_capacity(train.len());
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<(LossParts, Vec<Tensor>)>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| {
                        let mut rng = noise_rng(cfg.seed, epoch, i);
                        model.loss_and_gradients(train[i], Some((sigma, &mut rng)), gamma)
                    })
                    .collect()
            });
            let inv = 1.0 / batch.len() as f64;
            let mut acc: Vec<Tensor> = model.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            for r in results {
                let (parts, grads) = r.map_err(|e| e.with_context(format!("epoch {epoch}, batch {b}")))?;
                if !parts.total.is_finite() {
                    return Err(Error::NumericFault {
                        op: "loss",
                        node: 0,
                        context: format!(" [epoch {epoch}, batch {b}]"),
                    });
                }
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y * inv;
                    }
                }
                sums.push(parts);
            }
            adam_step(model.params.tensors_mut(), &acc, &mut opt)?;
        }
        let n = sums.len() as f64;
        let (valid_mse, valid_pearson) = pool.install(|| validation(&model, valid))?;
        let rec = EpochRecord {
            epoch,
            train_loss: sums.iter().map(|p| p.total).sum::<f64>() / n,
            train_mse: sums.iter().map(|p| p.mse).sum::<f64>() / n,
            train_denoise: sums.iter().map(|p| p.denoise).sum::<f64>() / n,
            valid_mse,
            valid_pearson,
        };
        on_epoch(&rec);
        if best.as_ref().map_or(true, |(m, _, _)| valid_mse < *m) {
            best = Some((valid_mse, epoch, model.params.clone()));
        }
        history.push(rec);
    }

    let mut best_model = model.clone();
    let best_epoch = match best {
        Some((_, e, params)) => {
            best_model.params = params;
            e
        }
        None => 0,
    };
    Ok(TrainOutcome {
        best: best_model,
        best_epoch,
        last: model,
        history,
    })
}

pub const HISTORY_HEADER: [&str; 6] = [
    "epoch",
    "train_loss",
    "train_mse",
    "train_denoise",
    "valid_mse",
    "valid_pearson",
];

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    w.write_record(HISTORY_HEADER).map_err(|e| Error::io(path, e.into()))?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.train_mse.to_string(),
            r.train_denoise.to_string(),
            r.valid_mse.to_string(),
            r.valid_pearson.to_string(),
        ])
        .map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_predictions(
    path: &Path,
    systems: &[&MixtureSystem],
    pred: &[f64],
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "id,y_pred,y_true,abs_err").map_err(io)?;
    let mut cw = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for (s, p) in systems.iter().zip(pred) {
        cw.write_record([
            s.id.clone(),
            p.to_string(),
            s.target.to_string(),
            (p - s.target).abs().to_string(),
        ])
        .map_err(|e| Error::io(path, e.into()))?;
    }
    cw.flush().map_err(io)
}

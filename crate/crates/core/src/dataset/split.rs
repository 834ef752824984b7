use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::MixtureSystem;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    #[default]
    Random,
    /// Test set: conductivity above the threshold.
    OodConductivity,
    /// Test set: temperature above the threshold.
    OodTemperature,
}

impl FromStr for SplitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "random" => Ok(Self::Random),
            "ood-conductivity" => Ok(Self::OodConductivity),
            "ood-temperature" => Ok(Self::OodTemperature),
            other => Err(Error::Config(format!("unknown split mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    /// Train and validation fractions for random mode; the rest is test.
    pub fractions: (f64, f64),
    /// Fraction of the non-test records used for training in OOD modes.
    pub ood_train_fraction: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(mode: SplitMode, seed: u64) -> Self {
        Self {
            mode,
            fractions: (0.7, 0.2),
            ood_train_fraction: 0.8,
            threshold: match mode {
                SplitMode::OodTemperature => 320.0,
                _ => 10.0,
            },
            seed,
        }
    }
}

/// Indices into the dataset.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn make_split(data: &[MixtureSystem], spec: &SplitSpec) -> Result<Split> {
    if data.is_empty() {
        return Err(Error::DegenerateSplit("dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let split = match spec.mode {
        SplitMode::Random => {
            let mut idx: Vec<usize> = (0..data.len()).collect();
            idx.shuffle(&mut rng);
            let n = data.len() as f64;
            let a = ((spec.fractions.0 * n).round() as usize).min(data.len());
            let b = (a + (spec.fractions.1 * n).round() as usize).min(data.len());
            Split {
                train: idx[..a].to_vec(),
                valid: idx[a..b].to_vec(),
                test: idx[b..].to_vec(),
            }
        }
        SplitMode::OodConductivity | SplitMode::OodTemperature => {
            let key = |s: &MixtureSystem| match spec.mode {
                SplitMode::OodConductivity => s.target,
                _ => s.env.temperature_k,
            };
            let (test, mut rest): (Vec<usize>, Vec<usize>) =
                (0..data.len()).partition(|&i| key(&data[i]) > spec.threshold);
            rest.shuffle(&mut rng);
            let a = (spec.ood_train_fraction * rest.len() as f64).round() as usize;
            Split {
                train: rest[..a].to_vec(),
                valid: rest[a..].to_vec(),
                test,
            }
        }
    };
    for (name, part) in [("train", &split.train), ("valid", &split.valid), ("test", &split.test)] {
        if part.is_empty() {
            return Err(Error::DegenerateSplit(format!(
                "{name} subset is empty ({} records, mode {:?})",
                data.len(),
                spec.mode
            )));
        }
    }
    Ok(split)
}

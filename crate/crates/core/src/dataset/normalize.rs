use serde::{Deserialize, Serialize};

use super::io::{MixtureSystem, ENV_DIM};
use crate::autodiff::exact_sum;

/// Z-score statistics for the environment vector and the target, fitted on
/// the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub env_mean: [f64; ENV_DIM],
    pub env_std: [f64; ENV_DIM],
    pub target_mean: f64,
    pub target_std: f64,
    /// Regress ln κ instead of κ.
    #[serde(default)]
    pub log_target: bool,
}

impl Default for Normalizer {
    fn default() -> Self {
        Self {
            env_mean: [0.0; ENV_DIM],
            env_std: [1.0; ENV_DIM],
            target_mean: 0.0,
            target_std: 1.0,
            log_target: false,
        }
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = exact_sum(values.iter().copied()) / n;
    let var = exact_sum(values.iter().map(|v| (v - mean).powi(2))) / n;
    let std = var.sqrt();
    (mean, if std > 1e-12 { std } else { 1.0 })
}

impl Normalizer {
    pub fn fit<'a, I>(systems: I, log_target: bool) -> Self
    where
        I: IntoIterator<Item = &'a MixtureSystem>,
    {
        let systems: Vec<&MixtureSystem> = systems.into_iter().collect();
        let mut env_mean = [0.0; ENV_DIM];
        let mut env_std = [1.0; ENV_DIM];
        for d in 0..ENV_DIM {
            let col: Vec<f64> = systems.iter().map(|s| s.env.to_vector()[d]).collect();
            (env_mean[d], env_std[d]) = mean_std(&col);
        }
        let t: Vec<f64> = systems
            .iter()
            .map(|s| if log_target { s.target.max(1e-12).ln() } else { s.target })
            .collect();
        let (target_mean, target_std) = mean_std(&t);
        Self {
            env_mean,
            env_std,
            target_mean,
            target_std,
            log_target,
        }
    }

    pub fn env(&self, s: &MixtureSystem) -> [f64; ENV_DIM] {
        let v = s.env.to_vector();
        std::array::from_fn(|d| (v[d] - self.env_mean[d]) / self.env_std[d])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_dataset, SyntheticSpec};

    #[test]
    fn fitted_env_is_standardized() {
        let data = generate_dataset(&SyntheticSpec::small(40, 5));
        let n = Normalizer::fit(&data, false);
        let z: Vec<f64> = data.iter().map(|s| n.env(s)[0]).collect();
        let m = exact_sum(z.iter().copied()) / z.len() as f64;
        assert!(m.abs() < 1e-12);
        let v = z.iter().map(|x| x * x).sum::<f64>() / z.len() as f64;
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_columns_keep_unit_scale() {
        let data = generate_dataset(&SyntheticSpec::small(5, 1));
        let n = Normalizer::fit(&data, false);
        // The molar column is absent for every synthetic record.
        assert_eq!(n.env_std[3], 1.0);
        assert_eq!(n.env_std[4], 1.0);
    }
}

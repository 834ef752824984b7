use serde::Serialize;

use crate::autodiff::exact_sum;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub pearson: f64,
    pub spearman: f64,
}

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Contract(format!(
            "metrics need equal-length non-empty vectors, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths(pred, target)?;
    Ok(exact_sum(pred.iter().zip(target).map(|(p, t)| (p - t).powi(2))) / pred.len() as f64)
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths(pred, target)?;
    Ok(exact_sum(pred.iter().zip(target).map(|(p, t)| (p - t).abs())) / pred.len() as f64)
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths(a, b)?;
    let n = a.len() as f64;
    let ma = exact_sum(a.iter().copied()) / n;
    let mb = exact_sum(b.iter().copied()) / n;
    let sab = exact_sum(a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)));
    let saa = exact_sum(a.iter().map(|x| (x - ma).powi(2)));
    let sbb = exact_sum(b.iter().map(|y| (y - mb).powi(2)));
    if saa == 0.0 {
        return Err(Error::UndefinedCorrelation("predictions"));
    }
    if sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("targets"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &k in &idx[start..end] {
            ranks[k] = r;
        }
        start = end;
    }
    ranks
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths(a, b)?;
    pearson(&average_ranks(a), &average_ranks(b))
}

pub fn evaluate_metrics(pred: &[f64], target: &[f64]) -> Result<Metrics> {
    Ok(Metrics {
        mse: mse(pred, target)?,
        mae: mae(pred, target)?,
        pearson: pearson(pred, target)?,
        spearman: spearman(pred, target)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let t = [1.0, 3.0, 2.0, 5.0];
        let m = evaluate_metrics(&t, &t).unwrap();
        assert_eq!((m.mse, m.mae), (0.0, 0.0));
        assert!((m.pearson - 1.0).abs() < 1e-15 && (m.spearman - 1.0).abs() < 1e-15);
    }

    #[test]
    fn negated_targets() {
        let t = [-1.5, 0.5, 1.0, -0.25, 0.25];
        let p: Vec<f64> = t.iter().map(|v| -v).collect();
        assert!((pearson(&p, &t).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_variance_is_undefined() {
        assert!(matches!(
            pearson(&[1.0, 1.0], &[0.0, 2.0]),
            Err(Error::UndefinedCorrelation("predictions"))
        ));
        assert!(mse(&[], &[]).is_err());
    }

    #[test]
    fn ties_share_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }
}

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::ProbeModel;
use crate::label::{midpoint, ProgressBucket};
use crate::{Error, Result};

/// Probabilities over progress buckets; index 0 is bucket 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BucketDistribution {
    probs: Vec<f64>,
}

impl BucketDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::Range(format!("{} buckets", probs.len())));
        }
        if probs.iter().any(|&p| !(p.is_finite() && p >= 0.0)) {
            return Err(Error::Data("negative or non-finite probability".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Data(format!("probabilities sum to {sum}")));
        }
        Ok(Self { probs })
    }

    pub fn from_logits(logits: ArrayView1<'_, f64>) -> Self {
        let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exp: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = exp.iter().sum();
        Self {
            probs: exp.into_iter().map(|e| e / sum).collect(),
        }
    }

    pub fn uniform(buckets: u32) -> Self {
        Self {
            probs: vec![1.0 / f64::from(buckets); buckets as usize],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn buckets(&self) -> u32 {
        self.probs.len() as u32
    }

    /// Most probable bucket; ties go to the lowest index.
    pub fn top1(&self) -> ProgressBucket {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        ProgressBucket {
            index: best as u32 + 1,
            count: self.buckets(),
        }
    }

    /// `sum_q p(q) c_q`.
    pub fn expected_progress(&self) -> f64 {
        let q = self.buckets();
        self.probs
            .iter()
            .enumerate()
            .map(|(i, &p)| p * midpoint(i as u32 + 1, q))
            .sum()
    }
}

pub fn top1(dist: &BucketDistribution) -> ProgressBucket {
    dist.top1()
}

pub fn expected_progress(dist: &BucketDistribution) -> f64 {
    dist.expected_progress()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeEvaluation {
    pub top1_accuracy: f64,
    /// Mean `|top1 - label|` in bucket units.
    pub bucket_mae: f64,
    pub rows: usize,
}

/// Top-1 bucket of every row, in row order. Rows are scored on the current
/// rayon pool; the output order does not depend on the thread count.
pub fn predict_top1(model: &ProbeModel, features: &Array2<f64>) -> Result<Vec<u32>> {
    if features.ncols() != model.dim() {
        return Err(Error::Dimension {
            expected: model.dim(),
            actual: features.ncols(),
        });
    }
    let rows: Vec<_> = features.rows().into_iter().collect();
    rows.par_iter()
        .map(|row| Ok(model.predict(*row)?.top1().index))
        .collect()
}

/// Accuracy and bucket MAE of predicted against true 1-based buckets.
pub fn score_buckets(predicted: &[u32], labels: &[u32]) -> Result<ProbeEvaluation> {
    if predicted.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    if predicted.len() != labels.len() {
        return Err(Error::Dimension {
            expected: labels.len(),
            actual: predicted.len(),
        });
    }
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    let abs: u64 = predicted
        .iter()
        .zip(labels)
        .map(|(&p, &y)| u64::from(p.abs_diff(y)))
        .sum();
    let n = predicted.len() as f64;
    Ok(ProbeEvaluation {
        top1_accuracy: hits as f64 / n,
        bucket_mae: abs as f64 / n,
        rows: predicted.len(),
    })
}

pub fn evaluate_probe(model: &ProbeModel, features: &Array2<f64>, labels: &[u32]) -> Result<ProbeEvaluation> {
    if features.nrows() == 0 {
        return Err(Error::Empty("evaluation set".into()));
    }
    score_buckets(&predict_top1(model, features)?, labels)
}

/// Mean `|100 c_top1 - 100 g|` over aligned top-1 buckets and realized
/// progress values.
pub fn percent_mae(top1: &[ProgressBucket], realized: &[f64]) -> Result<f64> {
    if top1.len() != realized.len() {
        return Err(Error::Dimension {
            expected: top1.len(),
            actual: realized.len(),
        });
    }
    if top1.is_empty() {
        return Err(Error::Empty("no evaluation points".into()));
    }
    let total: f64 = top1
        .iter()
        .zip(realized)
        .map(|(b, &g)| (100.0 * b.midpoint() - 100.0 * g).abs())
        .sum();
    Ok(total / top1.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(v: &[f64]) -> BucketDistribution {
        BucketDistribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn top1_and_ties() {
        let mut v = vec![0.0125; 10];
        v[0] = 0.1;
        v[1] = 0.8;
        assert_eq!(dist(&v).top1().index, 2);
        assert_eq!(BucketDistribution::uniform(10).top1().index, 1);
    }

    #[test]
    fn expected_progress_examples() {
        assert!((BucketDistribution::uniform(10).expected_progress() - 0.5).abs() < 1e-15);
        let mut v = vec![0.0; 10];
        v[0] = 1.0;
        assert_eq!(dist(&v).expected_progress(), 0.05);
    }

    #[test]
    fn invalid_distributions() {
        assert!(BucketDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(BucketDistribution::new(vec![1.5, -0.5]).is_err());
        assert!(BucketDistribution::new(vec![1.0]).is_err());
    }

    #[test]
    fn scoring() {
        let e = score_buckets(&[1, 2, 3], &[1, 2, 3]).unwrap();
        assert_eq!((e.top1_accuracy, e.bucket_mae), (1.0, 0.0));
        let e = score_buckets(&[1, 5], &[3, 5]).unwrap();
        assert_eq!((e.top1_accuracy, e.bucket_mae), (0.5, 1.0));
        assert!(score_buckets(&[], &[]).is_err());
    }

    #[test]
    fn percent_mae_examples() {
        let b6 = ProgressBucket::new(6, 10).unwrap();
        let b1 = ProgressBucket::new(1, 10).unwrap();
        assert!(percent_mae(&[b6], &[0.55]).unwrap().abs() < 1e-12);
        assert!((percent_mae(&[b1], &[1.0]).unwrap() - 95.0).abs() < 1e-12);
        assert!(percent_mae(&[b1], &[]).is_err());
    }
}

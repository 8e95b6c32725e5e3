use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

/// Task metrics for one evaluation pass. Classification fills accuracy and
/// macro-F1; ranking fills Hits@K.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub hits_at_k: Option<f64>,
}

impl EvalMetrics {
    /// Accuracy for classification, Hits@K for ranking.
    pub fn primary(&self) -> f64 {
        self.accuracy.or(self.hits_at_k).unwrap_or(f64::NAN)
    }
}

pub fn accuracy(predicted: &[usize], gold: &[usize]) -> f64 {
    assert_eq!(predicted.len(), gold.len());
    if gold.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
    hits as f64 / gold.len() as f64
}

/// Unweighted mean of per-class F1 over every class that occurs in either
/// the predictions or the gold labels. A class with no true positives scores 0.
pub fn macro_f1(predicted: &[usize], gold: &[usize]) -> f64 {
    assert_eq!(predicted.len(), gold.len());
    let classes: BTreeSet<usize> = predicted.iter().chain(gold).copied().collect();
    if classes.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &c in &classes {
        let tp = predicted
            .iter()
            .zip(gold)
            .filter(|(&p, &g)| p == c && g == c)
            .count() as f64;
        let fp = predicted
            .iter()
            .zip(gold)
            .filter(|(&p, &g)| p == c && g != c)
            .count() as f64;
        let fn_ = predicted
            .iter()
            .zip(gold)
            .filter(|(&p, &g)| p != c && g == c)
            .count() as f64;
        if tp > 0.0 {
            total += 2.0 * tp / (2.0 * tp + fp + fn_);
        }
    }
    total / classes.len() as f64
}

/// Fraction of gold candidates in the top `K = |gold|` by score (ties keep
/// the earlier candidate first).
pub fn hits_at_k(scores: &[f64], gold: &[bool]) -> f64 {
    assert_eq!(scores.len(), gold.len());
    let k = gold.iter().filter(|&&g| g).count();
    if k == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let found = order[..k].iter().filter(|&&i| gold[i]).count();
    found as f64 / k as f64
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Sample mean and standard deviation (zero for a single value).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

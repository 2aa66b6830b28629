//! Evaluation metrics and uncertainty analyses: MSE, accuracy, F1,
//! perplexity, entropy, correlation, and the per-group
//! uncertainty-vs-difficulty table.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub fn mse(gold: &[f64], predicted: &[f64]) -> Result<f64> {
    if gold.len() != predicted.len() || gold.is_empty() {
        return Err(Error::Contract(format!(
            "mse needs matching nonempty inputs, got {} vs {}",
            gold.len(),
            predicted.len()
        )));
    }
    let n = gold.len() as f64;
    Ok(gold
        .iter()
        .zip(predicted)
        .map(|(g, p)| (g - p) * (g - p))
        .sum::<f64>()
        / n)
}

pub fn accuracy(gold: &[usize], predicted: &[usize]) -> Result<f64> {
    if gold.len() != predicted.len() || gold.is_empty() {
        return Err(Error::Contract(format!(
            "accuracy needs matching nonempty inputs, got {} vs {}",
            gold.len(),
            predicted.len()
        )));
    }
    let hits = gold.iter().zip(predicted).filter(|(g, p)| g == p).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// F1 from counts; defined as 0 whenever a denominator vanishes.
pub fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    2.0 * precision * recall / (precision + recall)
}

/// exp(mean NLL in nats).
pub fn perplexity(mean_nll_nats: f64) -> f64 {
    mean_nll_nats.exp()
}

/// Shannon entropy in nats with the 0·log 0 := 0 convention.
pub fn entropy(p: &[f64]) -> Result<f64> {
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 || p.iter().any(|&v| v < 0.0) {
        return Err(Error::Contract(format!(
            "entropy needs a distribution, sum was {total}"
        )));
    }
    Ok(-p
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub pearson: f64,
    pub spearman: f64,
    pub n: usize,
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate(
            "zero variance in correlation input".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Average ranks with ties sharing the mean of their rank positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn correlate(xs: &[f64], ys: &[f64]) -> Result<CorrelationResult> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Contract(format!(
            "correlate needs n >= 2 matched points, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Contract("non-finite correlation input".into()));
    }
    let r = pearson(xs, ys)?;
    let rho = pearson(&average_ranks(xs), &average_ranks(ys))?;
    Ok(CorrelationResult {
        pearson: r,
        spearman: rho,
        n: xs.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupMetric {
    /// Fraction of correct predictions inside the group.
    Accuracy,
    /// One-vs-rest F1 where the group key is a class index.
    F1OneVsRest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: String,
    pub mean_u_data: f64,
    pub metric: f64,
    pub count: usize,
}

#[derive(Debug)]
pub struct DifficultyAnalysis {
    pub rows: Vec<GroupRow>,
    /// Degenerate inputs (one group, constant u_data) surface here while
    /// the table itself is still emitted.
    pub correlation: Result<CorrelationResult>,
}

/// Aggregate mean data uncertainty and the chosen metric per group, then
/// correlate the two across groups.
pub fn uncertainty_vs_difficulty(
    groups: &[String],
    u_data: &[f64],
    gold: &[usize],
    predicted: &[usize],
    metric: GroupMetric,
) -> Result<DifficultyAnalysis> {
    let n = groups.len();
    if n == 0 || u_data.len() != n || gold.len() != n || predicted.len() != n {
        return Err(Error::Contract(format!(
            "uncertainty_vs_difficulty needs matched nonempty columns, got {} groups, {} u_data, {} gold, {} predicted",
            n,
            u_data.len(),
            gold.len(),
            predicted.len()
        )));
    }
    let mut by_group: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        by_group.entry(g).or_default().push(i);
    }
    let mut rows = Vec::with_capacity(by_group.len());
    for (name, idx) in &by_group {
        let mean_u: f64 = idx.iter().map(|&i| u_data[i]).sum::<f64>() / idx.len() as f64;
        let m = match metric {
            GroupMetric::Accuracy => {
                idx.iter().filter(|&&i| gold[i] == predicted[i]).count() as f64
                    / idx.len() as f64
            }
            GroupMetric::F1OneVsRest => {
                let class: usize = name.parse().map_err(|_| {
                    Error::Contract(format!(
                        "f1 grouping requires class-index group keys, got {name:?}"
                    ))
                })?;
                let tp = (0..n)
                    .filter(|&i| gold[i] == class && predicted[i] == class)
                    .count();
                let fp = (0..n)
                    .filter(|&i| gold[i] != class && predicted[i] == class)
                    .count();
                let fn_ = (0..n)
                    .filter(|&i| gold[i] == class && predicted[i] != class)
                    .count();
                f1(tp, fp, fn_)
            }
        };
        rows.push(GroupRow {
            group: name.to_string(),
            mean_u_data: mean_u,
            metric: m,
            count: idx.len(),
        });
    }
    let us: Vec<f64> = rows.iter().map(|r| r.mean_u_data).collect();
    let ms: Vec<f64> = rows.iter().map(|r| r.metric).collect();
    let correlation = correlate(&us, &ms);
    Ok(DifficultyAnalysis { rows, correlation })
}

//! Detection AUC and localization IoU.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{localization_mask, AnomalyResult};

/// Area under the ROC curve via the Mann-Whitney U statistic: the probability
/// that a random anomalous score exceeds a random normal one, ties counting
/// one half. `labels[i]` is true for anomalous.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(
            "AUC needs both normal and anomalous samples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 1-based ranks of the positives, with ties sharing their mean rank.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j + 2) as f64 / 2.0;
        rank_sum += mean_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Intersection over union; two empty masks agree perfectly.
pub fn iou(pred: &Array2<bool>, truth: &Array2<bool>) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(Error::Shape(format!("mask {:?} vs {:?}", pred.dim(), truth.dim())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// How localization maps are binarized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPolicy {
    Fixed(f64),
    /// The best of `n` evenly spaced thresholds in `[0, 1]`, chosen once for
    /// all sampled images.
    BestOfGrid(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedIou {
    pub mean: f64,
    pub per_group: Vec<f64>,
    pub threshold: f64,
}

/// Mean IoU over `n_groups` groups of `group_size` images, each group drawn
/// without replacement from the population and independently of the others.
pub fn grouped_iou(
    results: &[AnomalyResult],
    masks: &[Array2<bool>],
    group_size: usize,
    n_groups: usize,
    seed: u64,
    policy: ThresholdPolicy,
) -> Result<GroupedIou> {
    if results.len() != masks.len() {
        return Err(Error::Shape(format!("{} results for {} masks", results.len(), masks.len())));
    }
    if group_size == 0 || n_groups == 0 {
        return Err(Error::InvalidArgument("group size and count must be positive".into()));
    }
    if results.len() < group_size {
        return Err(Error::Metric(format!(
            "{} anomalous images with masks, groups need {group_size}",
            results.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = (0..n_groups)
        .map(|_| sample(&mut rng, results.len(), group_size).into_vec())
        .collect();

    let iou_at = |i: usize, t: f64| iou(&localization_mask(&results[i], t), &masks[i]);
    let group_means = |t: f64| -> Result<Vec<f64>> {
        groups
            .iter()
            .map(|g| Ok(g.iter().map(|&i| iou_at(i, t)).sum::<Result<f64>>()? / g.len() as f64))
            .collect()
    };

    let threshold = match policy {
        ThresholdPolicy::Fixed(t) => t,
        ThresholdPolicy::BestOfGrid(n) => {
            if n < 2 {
                return Err(Error::InvalidArgument("threshold grid needs at least 2 points".into()));
            }
            let mut union: Vec<usize> = groups.iter().flatten().copied().collect();
            union.sort_unstable();
            union.dedup();
            let mut best = (f64::NEG_INFINITY, 0.0);
            for k in 0..n {
                let t = k as f64 / (n - 1) as f64;
                let m = union.iter().map(|&i| iou_at(i, t)).sum::<Result<f64>>()? / union.len() as f64;
                if m > best.0 {
                    best = (m, t);
                }
            }
            best.1
        }
    };
    let per_group = group_means(threshold)?;
    let mean = per_group.iter().sum::<f64>() / per_group.len() as f64;
    Ok(GroupedIou {
        mean,
        per_group,
        threshold,
    })
}

//! Score tables and evaluation reports.

use std::fmt;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalharness::dataset::{Label, LabeledTestSet};
use crate::evalharness::metrics::{grouped_iou, roc_auc, GroupedIou, ThresholdPolicy};
use crate::pipeline::Checkpoint;
use crate::scoring::{score_image, AnomalyResult, ScoringConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub image_id: String,
    pub label: Label,
    pub score: f64,
}

pub fn write_scores_csv(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRow>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    csv::Reader::from_path(path)?
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub group_size: usize,
    pub n_groups: usize,
    /// Seed for drawing the IoU groups.
    pub seed: u64,
    pub fixed_threshold: f64,
    /// Number of evenly spaced thresholds in `[0, 1]` searched for the best IoU.
    pub threshold_grid: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            group_size: 100,
            n_groups: 5,
            seed: 0,
            fixed_threshold: 0.5,
            threshold_grid: 51,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub detection_auc: f64,
    pub n_normal: usize,
    pub n_anomalous: usize,
    /// IoU at the fixed threshold; absent without localization data.
    pub iou_fixed: Option<GroupedIou>,
    /// IoU at the best grid threshold.
    pub iou_best: Option<GroupedIou>,
    pub group_size: usize,
    pub n_groups: usize,
    pub scores: Vec<ScoreRow>,
    pub config_fingerprint: String,
}

/// Builds a report from image scores and, optionally, localization results
/// for the anomalous images that carry masks.
pub fn evaluate(
    rows: &[ScoreRow],
    localization: Option<(&[AnomalyResult], &[Array2<bool>])>,
    cfg: &EvalConfig,
    config_fingerprint: String,
) -> Result<EvalReport> {
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let labels: Vec<bool> = rows.iter().map(|r| r.label.is_anomalous()).collect();
    let detection_auc = roc_auc(&scores, &labels)?;
    let (iou_fixed, iou_best) = match localization {
        Some((results, masks)) => {
            let run = |policy| grouped_iou(results, masks, cfg.group_size, cfg.n_groups, cfg.seed, policy);
            (
                Some(run(ThresholdPolicy::Fixed(cfg.fixed_threshold))?),
                Some(run(ThresholdPolicy::BestOfGrid(cfg.threshold_grid))?),
            )
        }
        None => (None, None),
    };
    let n_anomalous = labels.iter().filter(|&&l| l).count();
    Ok(EvalReport {
        detection_auc,
        n_normal: labels.len() - n_anomalous,
        n_anomalous,
        iou_fixed,
        iou_best,
        group_size: cfg.group_size,
        n_groups: cfg.n_groups,
        scores: rows.to_vec(),
        config_fingerprint,
    })
}

/// Scores every test entry.
pub fn score_test_set(
    checkpoint: &Checkpoint,
    test: &LabeledTestSet,
    cfg: &ScoringConfig,
) -> Result<(Vec<ScoreRow>, Vec<AnomalyResult>)> {
    let mut rows = Vec::with_capacity(test.len());
    let mut results = Vec::with_capacity(test.len());
    for e in &test.entries {
        let r = score_image(&e.image, checkpoint, cfg)?;
        rows.push(ScoreRow {
            image_id: e.id.clone(),
            label: e.label,
            score: r.image_score,
        });
        results.push(r);
    }
    Ok((rows, results))
}

/// Scores the test set and evaluates detection plus, when masks exist,
/// grouped IoU over the masked anomalous entries.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    test: &LabeledTestSet,
    scoring: &ScoringConfig,
    cfg: &EvalConfig,
    config_fingerprint: String,
) -> Result<(EvalReport, Vec<AnomalyResult>)> {
    if test.count(Label::Anomalous) == 0 {
        return Err(Error::Metric("test set has no anomalous images; AUC is undefined".into()));
    }
    let (rows, results) = score_test_set(checkpoint, test, scoring)?;
    let (loc_results, masks): (Vec<AnomalyResult>, Vec<Array2<bool>>) = test
        .entries
        .iter()
        .zip(&results)
        .filter_map(|(e, r)| Some((r.clone(), e.mask.clone()?)))
        .unzip();
    let localization = (!masks.is_empty()).then_some((&loc_results[..], &masks[..]));
    let report = evaluate(&rows, localization, cfg, config_fingerprint)?;
    Ok((report, results))
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "images        {} normal, {} anomalous", self.n_normal, self.n_anomalous)?;
        writeln!(f, "detection AUC {:.3}", self.detection_auc)?;
        for (name, g) in [("IoU fixed", &self.iou_fixed), ("IoU best ", &self.iou_best)] {
            if let Some(g) = g {
                let groups: Vec<String> = g.per_group.iter().map(|v| format!("{v:.3}")).collect();
                writeln!(
                    f,
                    "{name}     {:.3} at threshold {:.2} (groups of {}: {})",
                    g.mean,
                    g.threshold,
                    self.group_size,
                    groups.join(", ")
                )?;
            }
        }
        write!(f, "config        {}", self.config_fingerprint)
    }
}

/// FNV-1a hash of a value's JSON encoding, as 16 hex digits.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes to JSON");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

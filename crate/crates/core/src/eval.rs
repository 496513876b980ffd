//! ROC curves, AUC and two-fold cross-validated model selection.
//!
//! Normal sequences (`+1`) are the positive class and scores are real-valued
//! margins, so a higher score means "more normal".

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Label, Sequence, SequenceBatch};
use crate::rng::seeded;
use crate::trainer::{train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("ROC needs both classes, got {n_pos} normal and {n_neg} anomalous items")]
    DegenerateLabels { n_pos: usize, n_neg: usize },
    #[error("score {index} is not finite")]
    NonFiniteScore { index: usize },
    #[error("configuration grid is empty")]
    EmptyGrid,
    #[error("cross-validation needs every item labeled; item {0} has no label")]
    Unlabeled(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("every configuration failed; first error: {0}")]
    AllFailed(TrainError),
    #[error("CSV output failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("output failed: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Items scoring at or above this value are called normal.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Threshold sweep over the distinct scores in descending order; tied scores
/// move the curve in a single step.
pub fn roc_curve(scores: &[f64], labels: &[Label]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore { index });
    }
    let n_pos = labels.iter().filter(|l| **l == Label::Normal).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::DegenerateLabels { n_pos, n_neg });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            match labels[order[i]] {
                Label::Normal => tp += 1,
                Label::Anomalous => fp += 1,
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
        });
    }
    Ok(RocCurve { points, n_pos, n_neg })
}

/// Trapezoidal area under the curve.
pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) * 0.5)
        .sum()
}

pub fn auc_of(scores: &[f64], labels: &[Label]) -> Result<f64> {
    Ok(auc(&roc_curve(scores, labels)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucSummary {
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl RocCurve {
    pub fn summary(&self) -> AucSummary {
        AucSummary {
            auc: auc(self),
            n_pos: self.n_pos,
            n_neg: self.n_neg,
        }
    }

    /// CSV with header `threshold,fpr,tpr`; the opening point's threshold is
    /// written as `inf`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["threshold", "fpr", "tpr"])?;
        for p in &self.points {
            w.write_record([p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean validation AUC of one grid entry; `None` when training or scoring
/// failed on either fold.
#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub config: TrainConfig,
    pub fold_aucs: Option<[f64; 2]>,
    pub mean_auc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValReport {
    pub best_index: usize,
    pub best: TrainConfig,
    pub results: Vec<GridResult>,
}

/// Stratified seeded two-fold split: each class is shuffled and dealt
/// alternately into the folds. Items keep their input order within a fold.
pub fn two_fold_split(batch: &SequenceBatch, seed: u64) -> Result<[SequenceBatch; 2]> {
    if let Some(s) = batch.items().iter().find(|s| s.label.is_none()) {
        return Err(EvalError::Unlabeled(s.id.clone()));
    }
    let mut rng = seeded(seed);
    let mut fold_of = vec![0usize; batch.len()];
    for class in [Label::Normal, Label::Anomalous] {
        let mut idx: Vec<usize> = (0..batch.len())
            .filter(|&i| batch.items()[i].label == Some(class))
            .collect();
        if idx.len() < 2 {
            return Err(DataError::InsufficientData(format!(
                "two folds need at least two {} items, found {}",
                class,
                idx.len()
            ))
            .into());
        }
        idx.shuffle(&mut rng);
        for (k, i) in idx.into_iter().enumerate() {
            fold_of[i] = k % 2;
        }
    }
    let mut folds: [Vec<Sequence>; 2] = [Vec::new(), Vec::new()];
    for (item, f) in batch.items().iter().zip(fold_of) {
        folds[f].push(item.clone());
    }
    let [a, b] = folds;
    Ok([SequenceBatch::new(batch.p(), a)?, SequenceBatch::new(batch.p(), b)?])
}

fn fold_auc(train_on: &SequenceBatch, validate_on: &SequenceBatch, cfg: &TrainConfig) -> std::result::Result<f64, String> {
    let det = train(train_on, cfg).map_err(|e| e.to_string())?;
    let scores = det.margins(validate_on).map_err(|e| e.to_string())?;
    let labels: Vec<Label> = validate_on.items().iter().filter_map(|s| s.label).collect();
    auc_of(&scores, &labels).map_err(|e| e.to_string())
}

/// Picks the grid entry with the best mean two-fold validation AUC. Failed
/// entries rank last and ties go to the earliest entry.
pub fn crossval_select(batch: &SequenceBatch, grid: &[TrainConfig], seed: u64) -> Result<CrossValReport> {
    if grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    let [a, b] = two_fold_split(batch, seed)?;
    let mut results = Vec::with_capacity(grid.len());
    let mut first_error = None;
    for cfg in grid {
        let outcome = fold_auc(&a, &b, cfg).and_then(|x| Ok([x, fold_auc(&b, &a, cfg)?]));
        match outcome {
            Ok(aucs) => results.push(GridResult {
                config: cfg.clone(),
                fold_aucs: Some(aucs),
                mean_auc: Some(0.5 * (aucs[0] + aucs[1])),
                error: None,
            }),
            Err(e) => {
                if first_error.is_none() {
                    first_error = Some(train(&a, cfg).err().unwrap_or_else(|| TrainError::Config(e.clone())));
                }
                results.push(GridResult {
                    config: cfg.clone(),
                    fold_aucs: None,
                    mean_auc: None,
                    error: Some(e),
                })
            }
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in results.iter().enumerate() {
        if let Some(m) = r.mean_auc {
            if best.is_none_or(|(_, b)| m > b) {
                best = Some((i, m));
            }
        }
    }
    match best {
        Some((best_index, _)) => Ok(CrossValReport {
            best_index,
            best: grid[best_index].clone(),
            results,
        }),
        None => Err(EvalError::AllFailed(first_error.expect("at least one failure recorded"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    use Label::{Anomalous as A, Normal as N};

    fn pairs(curve: &RocCurve) -> Vec<(f64, f64)> {
        curve.points.iter().map(|p| (p.fpr, p.tpr)).collect()
    }

    #[test]
    fn perfect_ranking_curve() {
        let c = roc_curve(&[0.9, 0.8, 0.3, 0.1], &[N, N, A, A]).unwrap();
        assert_eq!(pairs(&c), vec![(0.0, 0.0), (0.0, 0.5), (0.0, 1.0), (0.5, 1.0), (1.0, 1.0)]);
        assert_eq!(auc(&c), 1.0);
    }

    #[test]
    fn all_ties_give_diagonal() {
        let c = roc_curve(&[0.5; 4], &[N, A, N, A]).unwrap();
        assert_eq!(pairs(&c), vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(auc(&c), 0.5);
    }

    #[test]
    fn order_independent() {
        let a = roc_curve(&[0.9, 0.3, 0.8, 0.1], &[N, A, N, A]).unwrap();
        let b = roc_curve(&[0.9, 0.8, 0.3, 0.1], &[N, N, A, A]).unwrap();
        assert_eq!(pairs(&a), pairs(&b));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_of(&[0.9, 0.4, 0.8, 0.1], &[N, A, N, A]).unwrap(), 1.0);
        assert_relative_eq!(auc_of(&[0.9, 0.8, 0.4, 0.1], &[N, A, N, A]).unwrap(), 0.75);
    }

    #[test]
    fn degenerate_labels_rejected() {
        assert!(matches!(
            roc_curve(&[0.1, 0.2], &[N, N]),
            Err(EvalError::DegenerateLabels { n_pos: 2, n_neg: 0 })
        ));
        assert!(matches!(
            roc_curve(&[0.1], &[N, A]),
            Err(EvalError::LengthMismatch { .. })
        ));
        assert!(matches!(
            roc_curve(&[0.1, f64::NAN], &[N, A]),
            Err(EvalError::NonFiniteScore { index: 1 })
        ));
    }

    #[test]
    fn csv_and_summary() {
        let c = roc_curve(&[0.9, 0.1], &[N, A]).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "threshold,fpr,tpr\ninf,0,0\n0.9,0,1\n0.1,1,1\n");
        let s = serde_json::to_value(c.summary()).unwrap();
        assert_eq!(s, serde_json::json!({"auc": 1.0, "n_pos": 1, "n_neg": 1}));
    }
}

//! Evaluation: ROC curves, detection rate at a fixed benign false-positive
//! rate, and k-fold cross-validation of the whole training pipeline.
//!
//! "FDR" here is the empirical proportion of benign programs flagged
//! malicious, matching how fixed-FDR detection columns are usually reported
//! for malware classifiers.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, invalid_param, Error, Result};
use crate::penalized::stratified_folds;
use crate::pipeline::{algorithm1_fit, LabeledCounts, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    /// CSV with header `fpr,tpr`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fpr,tpr\n");
        for p in &self.points {
            out.push_str(&format!("{},{}\n", p.fpr, p.tpr));
        }
        out
    }
}

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&b| b).count();
    (pos, labels.len() - pos)
}

/// ROC curve by a threshold sweep from high to low scores. Equal scores
/// form one step, so a block of ties contributes a single diagonal segment.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(invalid_input("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid_input("scores contain NaN"));
    }
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(invalid_input("ROC needs at least one example of each class"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // Trapezoid in count units, normalized at the end.
        auc += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(RocCurve {
        points,
        auc: auc / (pos as f64 * neg as f64),
    })
}

/// Smallest threshold `t` such that the share of benign scores strictly
/// above `t` is at most `fdr`. Returns `-inf` when every benign program may
/// be flagged.
pub fn fdr_threshold(benign_scores: &[f64], fdr: f64) -> Result<f64> {
    if !(fdr > 0.0 && fdr < 1.0) {
        return Err(invalid_param(format!("FDR level must lie in (0, 1), got {fdr}")));
    }
    if benign_scores.is_empty() {
        return Err(invalid_input("benign sample is empty"));
    }
    let mut sorted = benign_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len();
    let allowed = (fdr * n as f64 + 1e-9).floor() as usize;
    Ok(if allowed >= n {
        f64::NEG_INFINITY
    } else {
        sorted[allowed]
    })
}

/// Malware detection rate at the [`fdr_threshold`] of the benign scores.
/// Programs are flagged when their score is strictly above the threshold.
pub fn accuracy_at_fdr(scores: &[f64], labels: &[bool], fdr: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(invalid_input("scores and labels differ in length"));
    }
    let benign: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(&s, _)| s)
        .collect();
    let t = fdr_threshold(&benign, fdr)?;
    let malware: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    if malware.is_empty() {
        return Err(invalid_input("malware sample is empty"));
    }
    Ok(malware.iter().filter(|&&s| s > t).count() as f64 / malware.len() as f64)
}

/// Fraction of correct decisions with `score > threshold` meaning malicious.
pub fn overall_accuracy(scores: &[f64], labels: &[bool], threshold: f64) -> f64 {
    scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s > threshold) == l)
        .count() as f64
        / labels.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdrDetection {
    pub fdr: f64,
    pub detection_rate: f64,
}

/// Summary of one scorer's pooled out-of-fold scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub overall_accuracy: f64,
    pub detection_at_fdr: Vec<FdrDetection>,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub accuracy: f64,
    pub linear_accuracy: f64,
    pub active_predictors: usize,
    pub nonzero_terms: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredProgram {
    pub id: String,
    pub label: bool,
    /// Out-of-fold linear predictor of the interaction-spline model.
    pub score: f64,
    /// Out-of-fold linear predictor of the step-1 linear model.
    pub linear_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub folds: usize,
    pub fold_seed: u64,
    pub overall_accuracy: f64,
    pub detection_at_fdr: Vec<FdrDetection>,
    pub auc: f64,
    pub roc: Vec<RocPoint>,
    /// The step-1 linear model evaluated on the same folds.
    pub linear_baseline: ScoreSummary,
    pub per_fold: Vec<FoldReport>,
    pub scores: Vec<ScoredProgram>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })
    }
}

/// Scores are linear predictors; the 0.5 probability cut is `score > 0`.
pub fn summarize_scores(scores: &[f64], labels: &[bool], fdr_levels: &[f64]) -> Result<ScoreSummary> {
    let roc = roc_curve(scores, labels)?;
    let detection_at_fdr = fdr_levels
        .iter()
        .map(|&fdr| {
            Ok(FdrDetection {
                fdr,
                detection_rate: accuracy_at_fdr(scores, labels, fdr)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreSummary {
        overall_accuracy: overall_accuracy(scores, labels, 0.0),
        detection_at_fdr,
        auc: roc.auc,
    })
}

/// Default FDR levels reported by [`kfold_cv`].
pub const DEFAULT_FDR_LEVELS: [f64; 2] = [0.01, 0.001];

/// Stratified k-fold cross-validation of the full training procedure.
///
/// Every fold refits the standardizer, knots, and all tuning parameters
/// from its own training part. Out-of-fold linear predictors are pooled
/// into one report.
pub fn kfold_cv(data: &[LabeledCounts], k: usize, cfg: &TrainConfig, fdr_levels: &[f64]) -> Result<EvalReport> {
    if k < 2 {
        return Err(invalid_param(format!("need at least 2 folds, got {k}")));
    }
    let labels: Vec<f64> = data.iter().map(|d| if d.malicious { 1.0 } else { 0.0 }).collect();
    let fold = stratified_folds(&labels, k, cfg.seed);
    let mut scores = vec![0.0; data.len()];
    let mut linear_scores = vec![0.0; data.len()];
    let mut per_fold = Vec::with_capacity(k);
    for f in 0..k {
        let (train, test): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| fold[i] != f);
        for (part, name) in [(&train, "training"), (&test, "held-out")] {
            let pos = part.iter().filter(|&&i| data[i].malicious).count();
            if pos == 0 || pos == part.len() {
                return Err(invalid_input(format!(
                    "fold {f} {name} part has a single class; use fewer folds or add samples of the minority class"
                )));
            }
        }
        let train_data: Vec<LabeledCounts> = train.iter().map(|&i| data[i].clone()).collect();
        let model = algorithm1_fit(&train_data, cfg)?;
        let scorer = model.scorer()?;
        for &i in &test {
            scores[i] = scorer.linear_predictor(&data[i].counts)?;
            linear_scores[i] = scorer.linear_baseline_predictor(&data[i].counts)?;
        }
        let test_labels: Vec<bool> = test.iter().map(|&i| data[i].malicious).collect();
        let s: Vec<f64> = test.iter().map(|&i| scores[i]).collect();
        let ls: Vec<f64> = test.iter().map(|&i| linear_scores[i]).collect();
        per_fold.push(FoldReport {
            fold: f,
            n_train: train.len(),
            n_test: test.len(),
            accuracy: overall_accuracy(&s, &test_labels, 0.0),
            linear_accuracy: overall_accuracy(&ls, &test_labels, 0.0),
            active_predictors: model.active.len(),
            nonzero_terms: model.coefficients.len(),
        });
    }
    let bools: Vec<bool> = data.iter().map(|d| d.malicious).collect();
    let main = summarize_scores(&scores, &bools, fdr_levels)?;
    let roc = roc_curve(&scores, &bools)?;
    let linear_baseline = summarize_scores(&linear_scores, &bools, fdr_levels)?;
    Ok(EvalReport {
        folds: k,
        fold_seed: cfg.seed,
        overall_accuracy: main.overall_accuracy,
        detection_at_fdr: main.detection_at_fdr,
        auc: roc.auc,
        roc: roc.points,
        linear_baseline,
        per_fold,
        scores: data
            .iter()
            .enumerate()
            .map(|(i, d)| ScoredProgram {
                id: d.id.clone(),
                label: d.malicious,
                score: scores[i],
                linear_score: linear_scores[i],
            })
            .collect(),
    })
}

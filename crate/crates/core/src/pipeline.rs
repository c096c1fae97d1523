//! Three-step relaxed adaptive elastic-net training, prior correction,
//! classification, and the model file.
//!
//! 1. Screen: elastic net (ρ = 0.5) on the c² standardized logit features,
//!    λ₁ by cross-validation. Nonzero coefficients define the active set.
//! 2. Fit the interaction spline over the active set with the elastic net
//!    (ρ = 0.5), λ₂ by cross-validation. Call these estimates β̃.
//! 3. Drop terms with β̃ = 0 and refit with adaptive weights `1/|β̃|`,
//!    tuning (λ₃, ρ₃) jointly by cross-validation.
//!
//! Each step is tuned on its own; nothing from a later step feeds back.

use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dirichlet::{posterior_mean, DEFAULT_NU};
use crate::error::{invalid_input, invalid_param, Error, Result};
use crate::eval::fdr_threshold;
use crate::features::{
    build_design, build_design_row, fit_interaction_terms, fit_standardizer, inv_logit, logit_features, FeatureVector,
    SplineKnots, Standardizer, Term, TermIndex, DEFAULT_KNOTS,
};
use crate::penalized::{
    cv_tune, fit_path, predict_linear, resolve_grid, CvConfig, CvCriterion, CvResult, LambdaGrid, PenaltyConfig,
    SparseCoefficients, DEFAULT_MAX_ACTIVE,
};
use crate::sparse::CscMatrix;
use crate::trace::{count_transitions, parse_trace_file, Categorization, CategoryMap, TransitionCounts};

/// Model file schema version written by this build.
pub const SCHEMA_VERSION: u64 = 1;

/// Default minimum trace length for training.
pub const DEFAULT_MIN_TRACE_LENGTH: u64 = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub categorization: Categorization,
    pub knots: usize,
    pub nu: f64,
    /// ρ for steps 1 and 2.
    pub screen_rho: f64,
    pub rho3_grid: Vec<f64>,
    pub lambda_grid: LambdaGrid,
    pub max_active: usize,
    pub inner_folds: usize,
    pub seed: u64,
    pub min_trace_length: u64,
    pub criterion: CvCriterion,
    /// Benign false-positive target used to calibrate τ on training data.
    pub target_fdr: f64,
    /// Deployment prevalence π₁ for prior correction, if known.
    pub prior_malware_rate: Option<f64>,
    pub tol: f64,
    pub max_sweeps: usize,
    pub saturation: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            categorization: Categorization::Cat1,
            knots: DEFAULT_KNOTS,
            nu: DEFAULT_NU,
            screen_rho: 0.5,
            rho3_grid: (1..=19).map(|k| k as f64 * 0.05).collect(),
            lambda_grid: LambdaGrid::default(),
            max_active: DEFAULT_MAX_ACTIVE,
            inner_folds: 10,
            seed: 0,
            min_trace_length: DEFAULT_MIN_TRACE_LENGTH,
            criterion: CvCriterion::Deviance,
            target_fdr: 0.001,
            prior_malware_rate: None,
            tol: 1e-7,
            max_sweeps: 100_000,
            saturation: Some(0.999),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.knots == 0 {
            return Err(invalid_param("knot budget must be positive"));
        }
        if !(self.nu > 0.0) {
            return Err(invalid_param("nu must be positive"));
        }
        if !in_unit(self.screen_rho) || self.rho3_grid.is_empty() || !self.rho3_grid.iter().all(|&r| in_unit(r)) {
            return Err(invalid_param(
                "rho values must lie in [0, 1] and the rho3 grid must be nonempty",
            ));
        }
        if self.inner_folds < 2 {
            return Err(invalid_param("inner cross-validation needs at least 2 folds"));
        }
        if !(self.target_fdr > 0.0 && self.target_fdr < 1.0) {
            return Err(invalid_param("target FDR must lie in (0, 1)"));
        }
        if let Some(p) = self.prior_malware_rate {
            if !(p > 0.0 && p < 1.0) {
                return Err(invalid_param("prior malware rate must lie in (0, 1)"));
            }
        }
        Ok(())
    }

    fn penalty(&self, rho: f64) -> PenaltyConfig {
        PenaltyConfig {
            rho,
            lambda_grid: self.lambda_grid.clone(),
            weights: None,
            max_active: self.max_active,
            tol: self.tol,
            max_sweeps: self.max_sweeps,
            saturation: self.saturation,
            ..Default::default()
        }
    }

    fn cv(&self, step: u64, rho_grid: Option<Vec<f64>>) -> CvConfig {
        CvConfig {
            folds: self.inner_folds,
            seed: self.seed.wrapping_add(step),
            criterion: self.criterion,
            rho_grid,
        }
    }
}

/// One training or evaluation program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledCounts {
    pub id: String,
    pub counts: TransitionCounts,
    pub malicious: bool,
}

/// Nonzero model coefficient on term `(s, t, l)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub s: usize,
    pub t: usize,
    pub l: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorCorrection {
    pub pi1: f64,
    pub sample_rate: f64,
    pub corrected_intercept: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub lambda: f64,
    pub rho: f64,
    pub cv_error: f64,
    pub nonzero: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub n_train: usize,
    pub n_malicious: usize,
    pub n_filtered: usize,
    pub steps: Vec<StepSummary>,
    pub warnings: Vec<String>,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub schema_version: u64,
    pub categorization: Categorization,
    pub num_categories: usize,
    pub nu: f64,
    pub standardizer: Standardizer,
    /// Predictors selected in step 1, ascending.
    pub active: Vec<usize>,
    pub knots: SplineKnots,
    /// Terms entering step 3.
    pub terms: TermIndex,
    pub intercept: f64,
    pub coefficients: Vec<Coefficient>,
    pub prior_correction: Option<PriorCorrection>,
    pub threshold: f64,
    /// Step-1 linear model over all standardized features.
    pub linear_baseline: SparseCoefficients,
    pub metadata: ModelMetadata,
}

/// Prior-corrected intercept: `β₀ - ln((1-π₁)/π₁ · B̄/(1-B̄))`.
pub fn prior_correct(beta0: f64, pi1: f64, b_bar: f64) -> Result<f64> {
    if !(pi1 > 0.0 && pi1 < 1.0) || !(b_bar > 0.0 && b_bar < 1.0) {
        return Err(invalid_param(format!(
            "prior correction needs rates strictly inside (0, 1), got pi1 = {pi1}, sample rate = {b_bar}"
        )));
    }
    Ok(beta0 - ((1.0 - pi1) / pi1 * b_bar / (1.0 - b_bar)).ln())
}

/// Classification outcome for one trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub probability: f64,
    pub malicious: bool,
}

/// Compiled scoring form of a model: only nonzero terms, contiguous columns.
#[derive(Debug, Clone)]
pub struct Scorer<'a> {
    model: &'a TrainedModel,
    terms: TermIndex,
    coef: SparseCoefficients,
}

impl TrainedModel {
    /// The intercept used for scoring: prior-corrected when available.
    pub fn effective_intercept(&self) -> f64 {
        self.prior_correction.map_or(self.intercept, |p| p.corrected_intercept)
    }

    pub fn scorer(&self) -> Result<Scorer<'_>> {
        let mut terms = Vec::with_capacity(self.coefficients.len());
        let mut slopes = Vec::with_capacity(self.coefficients.len());
        for (j, c) in self.coefficients.iter().enumerate() {
            terms.push(Term { s: c.s, t: c.t, l: c.l });
            slopes.push((j, c.value));
        }
        Ok(Scorer {
            model: self,
            terms: TermIndex { terms },
            coef: SparseCoefficients {
                intercept: self.effective_intercept(),
                ncols: self.coefficients.len(),
                slopes,
            },
        })
    }

    /// Apply prior correction for deployment prevalence `pi1`, using the
    /// recorded training malware proportion.
    pub fn with_prior_correction(mut self, pi1: f64) -> Result<Self> {
        let b_bar = self.metadata.n_malicious as f64 / self.metadata.n_train as f64;
        let corrected = prior_correct(self.intercept, pi1, b_bar)?;
        let shift = corrected - self.effective_intercept();
        self.prior_correction = Some(PriorCorrection {
            pi1,
            sample_rate: b_bar,
            corrected_intercept: corrected,
        });
        if self.threshold > 0.0 && self.threshold < 1.0 {
            let t = self.threshold;
            self.threshold = inv_logit((t / (1.0 - t)).ln() + shift);
        }
        Ok(self)
    }

    fn check_counts(&self, counts: &TransitionCounts) -> Result<()> {
        if counts.num_categories() != self.num_categories {
            return Err(invalid_input(format!(
                "trace has {} categories but the model expects {} ({})",
                counts.num_categories(),
                self.num_categories,
                self.categorization.name()
            )));
        }
        Ok(())
    }

    /// Standardized logit features of the posterior-mean transition matrix.
    pub fn features(&self, counts: &TransitionCounts) -> Result<FeatureVector> {
        self.check_counts(counts)?;
        let est = posterior_mean(counts, self.nu)?;
        let mut x = logit_features(&est)?;
        self.standardizer.apply_in_place(&mut x.0);
        Ok(x)
    }

    pub fn classify(&self, counts: &TransitionCounts) -> Result<Classification> {
        classify(self, counts)
    }
}

impl Scorer<'_> {
    pub fn model(&self) -> &TrainedModel {
        self.model
    }

    /// Linear predictor from already standardized features.
    pub fn linear_predictor_std(&self, x_std: &FeatureVector) -> Result<f64> {
        let row = build_design_row(x_std, &self.model.active, &self.model.knots, &self.terms)?;
        predict_linear(&self.coef, &row)
    }

    pub fn linear_predictor(&self, counts: &TransitionCounts) -> Result<f64> {
        let x = self.model.features(counts)?;
        self.linear_predictor_std(&x)
    }

    pub fn probability(&self, counts: &TransitionCounts) -> Result<f64> {
        self.linear_predictor(counts).map(inv_logit)
    }

    /// Linear predictor of the step-1 model.
    pub fn linear_baseline_predictor(&self, counts: &TransitionCounts) -> Result<f64> {
        let x = self.model.features(counts)?;
        let row: Vec<(usize, f64)> = x.0.iter().copied().enumerate().filter(|e| e.1 != 0.0).collect();
        predict_linear(&self.model.linear_baseline, &row)
    }
}

/// Posterior-mean probability of maliciousness and the τ decision.
pub fn classify(model: &TrainedModel, counts: &TransitionCounts) -> Result<Classification> {
    let probability = model.scorer()?.probability(counts)?;
    Ok(Classification {
        probability,
        malicious: probability > model.threshold,
    })
}

/// Fit at the tuned λ by running the warm-started path down to it.
fn fit_at(design: &CscMatrix, y: &[f64], cfg: &PenaltyConfig, lambda: f64) -> Result<SparseCoefficients> {
    let grid: Vec<f64> = resolve_grid(design, y, cfg)
        .into_iter()
        .filter(|&l| l >= lambda)
        .collect();
    let mut c = cfg.clone();
    c.lambda_grid = LambdaGrid::Explicit(grid);
    let fit = fit_path(design, y, &c)?;
    fit.path
        .last()
        .map(|p| p.coef.clone())
        .ok_or_else(|| Error::Training("empty regularization path".into()))
}

fn step_summary(cv: &CvResult, nonzero: usize) -> StepSummary {
    StepSummary {
        lambda: cv.best_lambda,
        rho: cv.best_rho,
        cv_error: cv.best_error,
        nonzero,
    }
}

/// Train the interaction-spline classifier.
pub fn algorithm1_fit(data: &[LabeledCounts], cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    let c = cfg.categorization.num_categories();
    if let Some(d) = data.iter().find(|d| d.counts.num_categories() != c) {
        return Err(invalid_input(format!(
            "program '{}' has {} categories, {} expects {c}",
            d.id,
            d.counts.num_categories(),
            cfg.categorization.name()
        )));
    }
    let kept: Vec<&LabeledCounts> = data
        .iter()
        .filter(|d| d.counts.instructions() >= cfg.min_trace_length)
        .collect();
    let n_filtered = data.len() - kept.len();
    let n = kept.len();
    let n_mal = kept.iter().filter(|d| d.malicious).count();
    if n_mal == 0 || n_mal == n {
        return Err(Error::Training(format!(
            "training data needs both classes after the length filter ({n_mal} malicious of {n})"
        )));
    }
    if n < 2 * cfg.inner_folds {
        return Err(Error::Training(format!(
            "{n} programs are too few for {}-fold tuning",
            cfg.inner_folds
        )));
    }
    let y: Vec<f64> = kept.iter().map(|d| if d.malicious { 1.0 } else { 0.0 }).collect();
    let raw = kept
        .iter()
        .map(|d| posterior_mean(&d.counts, cfg.nu).and_then(|e| logit_features(&e)))
        .collect::<Result<Vec<_>>>()?;
    let standardizer = fit_standardizer(&raw)?;
    let x_std: Vec<FeatureVector> = raw
        .into_iter()
        .map(|mut x| {
            standardizer.apply_in_place(&mut x.0);
            x
        })
        .collect();
    let mut warnings = Vec::new();
    let mut steps = Vec::new();

    // Step 1: linear screening.
    let d1 = CscMatrix::from_dense(&x_std.iter().map(|x| x.0.clone()).collect::<Vec<_>>())?;
    let pen1 = cfg.penalty(cfg.screen_rho);
    let cv1 = cv_tune(&d1, &y, &pen1, &cfg.cv(1, None))?;
    let alpha = fit_at(&d1, &y, &pen1, cv1.best_lambda)?;
    let active: Vec<usize> = alpha.slopes.iter().map(|e| e.0).collect();
    steps.push(step_summary(&cv1, active.len()));

    let ybar = n_mal as f64 / n as f64;
    let null_intercept = (ybar / (1.0 - ybar)).ln();
    let mut model = TrainedModel {
        schema_version: SCHEMA_VERSION,
        categorization: cfg.categorization,
        num_categories: c,
        nu: cfg.nu,
        standardizer,
        active: active.clone(),
        knots: SplineKnots {
            budget: cfg.knots,
            pairs: Vec::new(),
        },
        terms: TermIndex::default(),
        intercept: null_intercept,
        coefficients: Vec::new(),
        prior_correction: None,
        threshold: 0.5,
        linear_baseline: alpha,
        metadata: ModelMetadata {
            n_train: n,
            n_malicious: n_mal,
            n_filtered,
            steps: Vec::new(),
            warnings: Vec::new(),
            config: cfg.clone(),
        },
    };

    if active.is_empty() {
        warnings.push("step 1 selected no predictors; model is intercept-only".to_string());
    } else {
        // Step 2: interaction spline over the active set.
        let (mut knots, terms) = fit_interaction_terms(&x_std, &active, cfg.knots)?;
        let d2 = build_design(&x_std, &active, &knots, &terms)?;
        let pen2 = cfg.penalty(cfg.screen_rho);
        let cv2 = cv_tune(&d2, &y, &pen2, &cfg.cv(2, None))?;
        let tilde = fit_at(&d2, &y, &pen2, cv2.best_lambda)?;
        steps.push(step_summary(&cv2, tilde.active()));

        if tilde.slopes.is_empty() {
            warnings.push("step 2 selected no terms; model is intercept-only".to_string());
            model.intercept = tilde.intercept;
        } else {
            // Step 3: adaptive refit on the step-2 support.
            let cols: Vec<usize> = tilde.slopes.iter().map(|e| e.0).collect();
            let weights: Vec<f64> = tilde.slopes.iter().map(|e| 1.0 / e.1.abs()).collect();
            let d3 = d2.select_columns(&cols);
            let terms3 = terms.select(&cols);
            let mut pen3 = cfg.penalty(cfg.screen_rho);
            pen3.weights = Some(weights);
            let cv3 = cv_tune(&d3, &y, &pen3, &cfg.cv(3, Some(cfg.rho3_grid.clone())))?;
            pen3.rho = cv3.best_rho;
            let beta = fit_at(&d3, &y, &pen3, cv3.best_lambda)?;
            steps.push(step_summary(&cv3, beta.active()));
            model.intercept = beta.intercept;
            model.coefficients = beta
                .slopes
                .iter()
                .map(|&(j, value)| {
                    let t = terms3.terms[j];
                    Coefficient {
                        s: t.s,
                        t: t.t,
                        l: t.l,
                        value,
                    }
                })
                .collect();
            knots.retain_pairs(&terms3);
            model.knots = knots;
            model.terms = terms3;
            if model.coefficients.is_empty() {
                warnings.push("step 3 removed every term; model is intercept-only".to_string());
            }
        }
    }
    model.metadata.steps = steps;
    model.metadata.warnings = warnings;

    if let Some(pi1) = cfg.prior_malware_rate {
        let corrected = prior_correct(model.intercept, pi1, ybar)?;
        model.prior_correction = Some(PriorCorrection {
            pi1,
            sample_rate: ybar,
            corrected_intercept: corrected,
        });
    }

    // τ: training-set calibration to the target benign false-positive rate.
    let scorer = model.scorer()?;
    let benign_probs = x_std
        .iter()
        .zip(&y)
        .filter(|(_, &l)| l == 0.0)
        .map(|(x, _)| scorer.linear_predictor_std(x).map(inv_logit))
        .collect::<Result<Vec<_>>>()?;
    let tau = fdr_threshold(&benign_probs, cfg.target_fdr)?;
    model.threshold = if tau.is_finite() { tau } else { 0.0 };
    Ok(model)
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Parse {
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    }
}

/// Write the model as versioned JSON.
pub fn save_model<W: Write>(model: &TrainedModel, mut sink: W) -> Result<()> {
    let s = serde_json::to_string_pretty(model).map_err(json_err)?;
    sink.write_all(s.as_bytes())?;
    sink.write_all(b"\n")?;
    Ok(())
}

/// Read a model, rejecting any schema version other than [`SCHEMA_VERSION`].
pub fn load_model<R: Read>(mut source: R) -> Result<TrainedModel> {
    let mut s = String::new();
    source.read_to_string(&mut s)?;
    let value: serde_json::Value = serde_json::from_str(&s).map_err(json_err)?;
    let version = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Parse {
            line: 1,
            column: 1,
            msg: "missing or non-integer 'schema_version'".into(),
        })?;
    if version != SCHEMA_VERSION {
        return Err(Error::Version {
            found: version,
            expected: SCHEMA_VERSION,
        });
    }
    serde_json::from_str(&s).map_err(json_err)
}

pub fn save_model_file(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    save_model(model, std::io::BufWriter::new(f))
}

pub fn load_model_file(path: impl AsRef<Path>) -> Result<TrainedModel> {
    load_model(std::fs::File::open(path)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub malicious: bool,
}

/// Parse `<trace-path> <label 0|1>` lines. Relative paths resolve against `base`.
pub fn parse_manifest<R: BufRead>(reader: R, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            line: lineno + 1,
            column: 1,
            msg,
        };
        let (path, label) = trimmed
            .rsplit_once(char::is_whitespace)
            .ok_or_else(|| err("expected '<trace-path> <label>'".into()))?;
        let malicious = match label {
            "0" => false,
            "1" => true,
            other => return Err(err(format!("label must be 0 or 1, got '{other}'"))),
        };
        let p = PathBuf::from(path.trim());
        out.push(ManifestEntry {
            path: if p.is_relative() { base.join(p) } else { p },
            malicious,
        });
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(std::io::BufReader::new(std::fs::File::open(path)?), base)
}

/// Parse every trace listed in a manifest.
pub fn load_dataset(entries: &[ManifestEntry], map: &CategoryMap) -> Result<Vec<LabeledCounts>> {
    entries
        .iter()
        .map(|e| {
            let seq = parse_trace_file(&e.path, map)?;
            Ok(LabeledCounts {
                id: e.path.display().to_string(),
                counts: count_transitions(&seq, map.num_categories())?,
                malicious: e.malicious,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prior_correct_examples() {
        assert_eq!(prior_correct(0.37, 0.2, 0.2).unwrap(), 0.37);
        let b = 18942.0 / 21988.0;
        let v = prior_correct(-1.0, 0.01, b).unwrap();
        // Independent high-precision evaluation.
        assert!((v - (-7.422_672_274_465_529)).abs() < 1e-12, "{v}");
        assert!(prior_correct(0.0, 0.0, 0.5).is_err());
        assert!(prior_correct(0.0, 0.5, 1.0).is_err());
    }

    #[test]
    fn manifest_parsing() {
        let text = "# corpus\ntraces/a.trace 1\n/abs/b.trace 0\n\nwith space.trace 1\n";
        let m = parse_manifest(text.as_bytes(), Path::new("/data")).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m[0].path, PathBuf::from("/data/traces/a.trace"));
        assert!(m[0].malicious);
        assert_eq!(m[1].path, PathBuf::from("/abs/b.trace"));
        assert_eq!(m[2].path, PathBuf::from("/data/with space.trace"));
        assert!(matches!(
            parse_manifest("x.trace 2\n".as_bytes(), Path::new(".")),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn load_rejects_empty_and_bad_version() {
        assert!(matches!(load_model("".as_bytes()), Err(Error::Parse { .. })));
        assert!(matches!(
            load_model("{\"schema_version\": 99}".as_bytes()),
            Err(Error::Version { found: 99, .. })
        ));
        assert!(matches!(load_model("{\"a\": 1}".as_bytes()), Err(Error::Parse { .. })));
        assert!(matches!(
            load_model("{\"schema_version\": 1, \"nu\": ".as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}

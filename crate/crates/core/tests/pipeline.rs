mod common;

use common::{fast_config, labeled, small_model};
use mctrace_core::eval::kfold_cv;
use mctrace_core::features::inv_logit;
use mctrace_core::pipeline::{
    algorithm1_fit, classify, load_model, load_model_file, prior_correct, save_model, save_model_file, LabeledCounts,
};
use mctrace_core::synth::SyntheticSpec;
use mctrace_core::trace::TransitionCounts;
use mctrace_core::Error;

fn bytes(m: &mctrace_core::TrainedModel) -> Vec<u8> {
    let mut out = Vec::new();
    save_model(m, &mut out).unwrap();
    out
}

#[test]
fn training_is_deterministic() {
    assert_eq!(bytes(&small_model(21)), bytes(&small_model(21)));
}

#[test]
fn model_file_roundtrip_and_version_check() {
    let m = small_model(22);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    save_model_file(&m, &path).unwrap();
    assert_eq!(load_model_file(&path).unwrap(), m);

    let text = std::fs::read_to_string(&path)
        .unwrap()
        .replacen("\"schema_version\": 1", "\"schema_version\": 2", 1);
    assert!(matches!(
        load_model(text.as_bytes()),
        Err(Error::Version { found: 2, expected: 1 })
    ));
    let truncated = &std::fs::read(&path).unwrap()[..200];
    assert!(matches!(load_model(truncated), Err(Error::Parse { .. })));
}

#[test]
fn prior_correction_moves_only_the_intercept() {
    let m = small_model(23);
    let b = m.metadata.n_malicious as f64 / m.metadata.n_train as f64;
    let c = m.clone().with_prior_correction(0.01).unwrap();
    assert_eq!(c.coefficients, m.coefficients);
    assert_eq!(c.intercept, m.intercept);
    let p = c.prior_correction.unwrap();
    assert_eq!(p.corrected_intercept, prior_correct(m.intercept, 0.01, b).unwrap());
    // Balanced training data and pi1 = 0.01: the intercept drops by ln 99.
    assert!((p.corrected_intercept - m.intercept + 99f64.ln()).abs() < 1e-12);

    let data = labeled(&SyntheticSpec::contrast(8, &[0, 1], 5, 500, 230));
    let (s0, s1) = (m.scorer().unwrap(), c.scorer().unwrap());
    for d in &data {
        let a = s0.linear_predictor(&d.counts).unwrap();
        let z = s1.linear_predictor(&d.counts).unwrap();
        assert!((z - a + 99f64.ln()).abs() < 1e-12);
    }
    assert!(m.clone().with_prior_correction(1.0).is_err());
}

#[test]
fn classify_uses_threshold() {
    let mut m = small_model(24);
    let data = labeled(&SyntheticSpec::contrast(8, &[0, 1], 3, 3000, 240));
    for d in &data {
        let c = classify(&m, &d.counts).unwrap();
        assert!((0.0..=1.0).contains(&c.probability));
        assert_eq!(c.malicious, c.probability > m.threshold);
        assert_eq!(c.malicious, d.malicious, "{}", d.id);
    }
    m.threshold = 1.0;
    assert!(data.iter().all(|d| !classify(&m, &d.counts).unwrap().malicious));
    assert!(matches!(
        classify(&m, &TransitionCounts::new(56)),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn threshold_meets_training_fdr_target() {
    let data = labeled(&SyntheticSpec::contrast(8, &[0, 1], 40, 3000, 25));
    let mut cfg = fast_config(25);
    cfg.target_fdr = 0.05;
    let m = algorithm1_fit(&data, &cfg).unwrap();
    let benign: Vec<&LabeledCounts> = data.iter().filter(|d| !d.malicious).collect();
    let fp = benign
        .iter()
        .filter(|d| classify(&m, &d.counts).unwrap().malicious)
        .count();
    assert!(fp as f64 <= 0.05 * benign.len() as f64);
}

#[test]
fn short_traces_are_filtered_and_single_class_rejected() {
    let mut data = labeled(&SyntheticSpec::contrast(8, &[0, 1], 30, 3000, 26));
    data.extend(labeled(&SyntheticSpec::contrast(8, &[0, 1], 4, 100, 27)));
    let m = algorithm1_fit(&data, &fast_config(26)).unwrap();
    assert_eq!(m.metadata.n_filtered, 8);
    assert_eq!(m.metadata.n_train, 60);

    let benign: Vec<LabeledCounts> = data.iter().filter(|d| !d.malicious).cloned().collect();
    assert!(matches!(
        algorithm1_fit(&benign, &fast_config(1)),
        Err(Error::Training(_))
    ));

    let mut wrong = data.clone();
    wrong[0].counts = TransitionCounts::new(56);
    assert!(matches!(
        algorithm1_fit(&wrong, &fast_config(1)),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn indistinguishable_classes_score_near_chance() {
    let data = labeled(&SyntheticSpec::null(8, 100, 2000, 28));
    let r = kfold_cv(&data, 5, &fast_config(28), &[0.01]).unwrap();
    // Binomial sd at n = 200 is about 0.035.
    assert!((r.overall_accuracy - 0.5).abs() < 0.15, "{}", r.overall_accuracy);
    assert!((r.auc - 0.5).abs() < 0.15, "{}", r.auc);
}

#[test]
fn shuffled_labels_score_near_chance() {
    let mut data = labeled(&SyntheticSpec::contrast(8, &[0, 1], 100, 2000, 29));
    // Deterministic relabeling unrelated to the generating class.
    for (i, d) in data.iter_mut().enumerate() {
        d.malicious = (i * 7919 + 13) % 200 < 100;
    }
    let r = kfold_cv(&data, 5, &fast_config(29), &[0.01]).unwrap();
    assert!((r.overall_accuracy - 0.5).abs() < 0.15, "{}", r.overall_accuracy);
}

#[test]
fn cv_report_is_deterministic_and_pools_every_program() {
    let data = labeled(&SyntheticSpec::contrast(8, &[0, 1], 15, 3000, 30));
    let a = kfold_cv(&data, 3, &fast_config(30), &[0.01, 0.001]).unwrap();
    let b = kfold_cv(&data, 3, &fast_config(30), &[0.01, 0.001]).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_eq!(a.scores.len(), data.len());
    assert_eq!(a.per_fold.iter().map(|f| f.n_test).sum::<usize>(), data.len());
    assert!(a.overall_accuracy >= 0.9);
    assert!(matches!(
        kfold_cv(&data, 1, &fast_config(30), &[0.01]),
        Err(Error::InvalidParameter(_))
    ));
    assert!(matches!(
        kfold_cv(&data, 20, &fast_config(30), &[0.01]),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn null_data_model_can_be_intercept_only() {
    let data = labeled(&SyntheticSpec::null(8, 30, 2000, 31));
    let m = algorithm1_fit(&data, &fast_config(31)).unwrap();
    if m.coefficients.is_empty() {
        assert!(!m.metadata.warnings.is_empty());
        let p = classify(&m, &data[0].counts).unwrap().probability;
        assert_eq!(p, inv_logit(m.intercept));
    }
}

//! Malware classification from dynamic instruction traces.
//!
//! Traces become Markov transition counts, smoothed under a Dirichlet prior,
//! mapped to standardized logit features, and scored by a sparse logistic
//! interaction-spline model. The online monitor propagates posterior
//! uncertainty in the transition matrix to a credible interval on the
//! malware probability as a trace grows.

pub mod dirichlet;
pub mod error;
pub mod eval;
pub mod features;
pub mod monitor;
pub mod penalized;
pub mod pipeline;
pub mod sparse;
pub mod synth;
pub mod trace;

pub use dirichlet::{posterior_mean, sample_posterior, DirichletDrawConfig, TransitionEstimate};
pub use error::{Error, Result};
pub use eval::{accuracy_at_fdr, kfold_cv, roc_curve, EvalReport, RocCurve, RocPoint};
pub use features::{FeatureVector, SplineKnots, Standardizer, Term, TermIndex};
pub use monitor::{posterior_prob, Decision, DecisionRule, MonitorRecord, OnlineMonitor, PosteriorSummary};
pub use penalized::{fit_path, CvCriterion, FitResult, LambdaGrid, PenaltyConfig, SparseCoefficients};
pub use pipeline::{
    algorithm1_fit, classify, load_model, prior_correct, save_model, Classification, LabeledCounts, TrainConfig,
    TrainedModel,
};
pub use sparse::CscMatrix;
pub use synth::{generate_synthetic, write_corpus, SyntheticProgram, SyntheticSpec};
pub use trace::{
    count_transitions, parse_trace, update_counts, Categorization, CategoryMap, InstructionSequence, TransitionCounts,
};

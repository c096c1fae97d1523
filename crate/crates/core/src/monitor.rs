//! Online classification of a running trace with posterior uncertainty.

use serde::{Deserialize, Serialize};

use crate::dirichlet::{draw_rng, gamma_draw, gamma_row_logits, DEFAULT_DRAWS};
use crate::error::{invalid_input, invalid_param, Result};
use crate::features::{inv_logit, quantile_sorted, FeatureVector};
use crate::pipeline::TrainedModel;
use crate::trace::TransitionCounts;

/// Posterior distribution of the malware probability at one point of a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    /// Instructions observed so far.
    pub m: u64,
    pub mean_prob: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub draws: usize,
}

impl PosteriorSummary {
    pub fn ci_width(&self) -> f64 {
        self.ci_high - self.ci_low
    }
}

/// Sample `draws` transition matrices from the Dirichlet posterior, push each
/// through the model, and summarize the resulting probabilities.
pub fn posterior_prob(
    model: &TrainedModel,
    counts: &TransitionCounts,
    draws: usize,
    seed: u64,
) -> Result<PosteriorSummary> {
    if draws < 2 {
        return Err(invalid_param("posterior summary needs at least 2 draws"));
    }
    if counts.num_categories() != model.num_categories {
        return Err(invalid_input(format!(
            "trace has {} categories but the model expects {}",
            counts.num_categories(),
            model.num_categories
        )));
    }
    let scorer = model.scorer()?;
    let c = model.num_categories;
    let mut probs = Vec::with_capacity(draws);
    let mut x = Vec::with_capacity(c * c);
    for r in 0..draws {
        let mut rng = draw_rng(seed, r as u64);
        let g = gamma_draw(counts, model.nu, &mut rng);
        x.clear();
        for row in g.chunks(c) {
            gamma_row_logits(row, &mut x);
        }
        let mut fv = FeatureVector(std::mem::take(&mut x));
        model.standardizer.apply_in_place(&mut fv.0);
        probs.push(inv_logit(scorer.linear_predictor_std(&fv)?));
        x = fv.0;
    }
    let mean_prob = probs.iter().sum::<f64>() / draws as f64;
    probs.sort_by(|a, b| a.total_cmp(b));
    Ok(PosteriorSummary {
        m: counts.instructions(),
        mean_prob,
        ci_low: quantile_sorted(&probs, 0.025),
        ci_high: quantile_sorted(&probs, 0.975),
        draws,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Malicious,
    Benign,
    Undecided,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecisionRule {
    /// Probability threshold. Defaults to the model's τ when built via
    /// [`DecisionRule::for_model`].
    pub tau: f64,
    /// Decide only once the 95% interval is narrower than this.
    pub ci_width_max: f64,
    /// Evaluate every this many instructions.
    pub cadence: u64,
    /// Past this many instructions, decide on the mean alone.
    pub m_max: u64,
    pub draws: usize,
    pub seed: u64,
}

impl Default for DecisionRule {
    fn default() -> Self {
        DecisionRule {
            tau: 0.5,
            ci_width_max: 0.1,
            cadence: 1000,
            m_max: 3_500_000,
            draws: DEFAULT_DRAWS,
            seed: 0,
        }
    }
}

impl DecisionRule {
    pub fn for_model(model: &TrainedModel) -> Self {
        DecisionRule {
            tau: model.threshold,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.cadence == 0 {
            return Err(invalid_param("evaluation cadence must be positive"));
        }
        if !(self.ci_width_max > 0.0) {
            return Err(invalid_param("interval width bound must be positive"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(invalid_param("tau must lie in [0, 1]"));
        }
        if self.draws < 2 {
            return Err(invalid_param("posterior summary needs at least 2 draws"));
        }
        Ok(())
    }

    pub fn decide(&self, s: &PosteriorSummary) -> (Decision, bool) {
        let by_mean = if s.mean_prob > self.tau {
            Decision::Malicious
        } else {
            Decision::Benign
        };
        if s.ci_width() < self.ci_width_max {
            (by_mean, false)
        } else if s.m >= self.m_max {
            (by_mean, true)
        } else {
            (Decision::Undecided, false)
        }
    }
}

/// One checkpoint of the online monitor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorRecord {
    pub m: u64,
    pub mean_prob: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub decision: Decision,
    /// Decided at the instruction cap with a wide interval.
    pub low_confidence: bool,
}

/// Incremental monitor. Checkpoints fall on exact multiples of the cadence,
/// so output does not depend on how the trace is chunked.
#[derive(Debug, Clone)]
pub struct OnlineMonitor<'a> {
    model: &'a TrainedModel,
    rule: DecisionRule,
    counts: TransitionCounts,
    decided: Option<Decision>,
}

impl<'a> OnlineMonitor<'a> {
    pub fn new(model: &'a TrainedModel, rule: DecisionRule) -> Result<Self> {
        rule.validate()?;
        Ok(OnlineMonitor {
            model,
            rule,
            counts: TransitionCounts::new(model.num_categories),
            decided: None,
        })
    }

    pub fn counts(&self) -> &TransitionCounts {
        &self.counts
    }

    /// First confident decision reached, if any.
    pub fn decision(&self) -> Option<Decision> {
        self.decided
    }

    fn checkpoint(&mut self) -> Result<MonitorRecord> {
        let m = self.counts.instructions();
        let seed = self.rule.seed.wrapping_add(m.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let s = posterior_prob(self.model, &self.counts, self.rule.draws, seed)?;
        let (decision, low_confidence) = self.rule.decide(&s);
        if decision != Decision::Undecided && self.decided.is_none() {
            self.decided = Some(decision);
        }
        Ok(MonitorRecord {
            m,
            mean_prob: s.mean_prob,
            ci_low: s.ci_low,
            ci_high: s.ci_high,
            decision,
            low_confidence,
        })
    }

    /// Feed category indices. Returns a record for every cadence multiple
    /// crossed. The chunk is validated before any state changes.
    pub fn step(&mut self, chunk: &[usize]) -> Result<Vec<MonitorRecord>> {
        let c = self.model.num_categories;
        if let Some(&bad) = chunk.iter().find(|&&k| k >= c) {
            return Err(invalid_input(format!("category {bad} out of range for {c} categories")));
        }
        let mut out = Vec::new();
        for &k in chunk {
            self.counts.push(k)?;
            if self.counts.instructions().is_multiple_of(self.rule.cadence) {
                out.push(self.checkpoint()?);
            }
        }
        Ok(out)
    }

    /// Evaluate at the current position if it is not already a checkpoint.
    pub fn finish(&mut self) -> Result<Option<MonitorRecord>> {
        let m = self.counts.instructions();
        if m == 0 || m.is_multiple_of(self.rule.cadence) {
            return Ok(None);
        }
        self.checkpoint().map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(m: u64, mean: f64, lo: f64, hi: f64) -> PosteriorSummary {
        PosteriorSummary {
            m,
            mean_prob: mean,
            ci_low: lo,
            ci_high: hi,
            draws: 10,
        }
    }

    #[test]
    fn decision_rule() {
        let r = DecisionRule {
            tau: 0.5,
            ..Default::default()
        };
        assert_eq!(r.decide(&summary(1000, 0.9, 0.86, 0.94)), (Decision::Malicious, false));
        assert_eq!(r.decide(&summary(1000, 0.1, 0.05, 0.12)), (Decision::Benign, false));
        assert_eq!(r.decide(&summary(1000, 0.6, 0.3, 0.9)), (Decision::Undecided, false));
        assert_eq!(
            r.decide(&summary(3_500_000, 0.6, 0.3, 0.9)),
            (Decision::Malicious, true)
        );
    }

    #[test]
    fn bad_rules() {
        let bad = [
            DecisionRule {
                cadence: 0,
                ..Default::default()
            },
            DecisionRule {
                draws: 1,
                ..Default::default()
            },
            DecisionRule {
                tau: 1.5,
                ..Default::default()
            },
            DecisionRule {
                ci_width_max: 0.0,
                ..Default::default()
            },
        ];
        for r in bad {
            assert!(r.validate().is_err());
        }
    }
}

//! Predictor space: logit transition features, standardization, and the
//! linear-spline interaction basis.
//!
//! Terms are indexed by `(s, t, l)` with `s <= t`. For `s == t` the spline
//! input is the standardized feature `x_s`; for `s < t` it is the product
//! `x_s * x_t`. Component `l = 1` is the input itself and `l >= 2` is the
//! hinge `max(u - knot[l - 2], 0)`.
//!
//! Quantiles use linear interpolation between order statistics: for sorted
//! values `v[0..n]` the level-`q` quantile is `v[h] + (h - floor(h)) *
//! (v[h+1] - v[h])` at `h = (n - 1) q`. Knots are deduplicated and only
//! knots strictly inside the training range are kept, so a constant input
//! yields no knots.

use serde::{Deserialize, Serialize};

use crate::dirichlet::TransitionEstimate;
use crate::error::{invalid_input, Error, Result};
use crate::sparse::{CscMatrix, SparseRow};

/// Default knot budget per spline.
pub const DEFAULT_KNOTS: usize = 5;

/// Row-major logits of all c² transition probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn inv_logit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

pub fn logit_features(est: &TransitionEstimate) -> Result<FeatureVector> {
    est.p
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if p > 0.0 && p < 1.0 {
                Ok(logit(p))
            } else {
                Err(invalid_input(format!(
                    "transition probability {p} at ({}, {}) is not strictly inside (0, 1)",
                    i / est.c,
                    i % est.c
                )))
            }
        })
        .collect::<Result<Vec<_>>>()
        .map(FeatureVector)
}

/// Per-feature centering and scaling fitted on training rows.
///
/// Uses the sample standard deviation (divisor `n - 1`). Features that are
/// constant across the training rows are flagged degenerate and map to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    pub degenerate: Vec<bool>,
}

impl Standardizer {
    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn transform(&self, x: &FeatureVector) -> Result<FeatureVector> {
        standardize(x, self)
    }

    /// `x * sd + mean` on non-degenerate coordinates; degenerate ones return the mean.
    pub fn inverse(&self, z: &FeatureVector) -> FeatureVector {
        FeatureVector(
            z.0.iter()
                .enumerate()
                .map(|(k, &v)| {
                    if self.degenerate[k] {
                        self.means[k]
                    } else {
                        v * self.sds[k] + self.means[k]
                    }
                })
                .collect(),
        )
    }

    /// Standardize in place without length checks; used in hot loops.
    pub(crate) fn apply_in_place(&self, x: &mut [f64]) {
        for (k, v) in x.iter_mut().enumerate() {
            *v = if self.degenerate[k] {
                0.0
            } else {
                (*v - self.means[k]) / self.sds[k]
            };
        }
    }
}

pub fn fit_standardizer(rows: &[FeatureVector]) -> Result<Standardizer> {
    let n = rows.len();
    if n < 2 {
        return Err(invalid_input(format!("standardizer needs at least 2 rows, got {n}")));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(invalid_input("feature rows differ in length"));
    }
    let mut means = vec![0.0; d];
    let mut sds = vec![0.0; d];
    let mut degenerate = vec![false; d];
    for k in 0..d {
        let first = rows[0].0[k];
        let constant = rows.iter().all(|r| r.0[k] == first);
        let mean = rows.iter().map(|r| r.0[k]).sum::<f64>() / n as f64;
        let var = rows.iter().map(|r| (r.0[k] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        means[k] = if constant { first } else { mean };
        sds[k] = if constant { 0.0 } else { var.sqrt() };
        degenerate[k] = constant || !(sds[k] > 0.0);
    }
    Ok(Standardizer { means, sds, degenerate })
}

pub fn standardize(x: &FeatureVector, s: &Standardizer) -> Result<FeatureVector> {
    if x.len() != s.dim() {
        return Err(invalid_input(format!(
            "feature length {} does not match standardizer dimension {}",
            x.len(),
            s.dim()
        )));
    }
    let mut out = x.0.clone();
    s.apply_in_place(&mut out);
    Ok(FeatureVector(out))
}

/// Level-`q` quantile of ascending `sorted` by linear interpolation.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Knots at quantile levels `l / (K + 1)`, `l = 1..=K`.
pub fn compute_knots(values: &[f64], k: usize) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(invalid_input(format!(
            "knot placement needs at least 2 values, got {}",
            values.len()
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(knots_from_sorted(&sorted, k))
}

fn knots_from_sorted(sorted: &[f64], k: usize) -> Vec<f64> {
    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
    let mut knots: Vec<f64> = Vec::with_capacity(k);
    for l in 1..=k {
        let q = quantile_sorted(sorted, l as f64 / (k + 1) as f64);
        if q > min && q < max && knots.last().is_none_or(|&last| q > last) {
            knots.push(q);
        }
    }
    knots
}

/// `[u, max(u - knot_1, 0), ..., max(u - knot_K, 0)]`.
pub fn spline_basis(u: f64, knots: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(knots.len() + 1);
    out.push(u);
    out.extend(knots.iter().map(|&k| (u - k).max(0.0)));
    out
}

/// Knot vector for one `(s, t)` spline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairKnots {
    pub s: usize,
    pub t: usize,
    pub knots: Vec<f64>,
}

/// Knots for every spline in a model, sorted by `(s, t)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplineKnots {
    pub budget: usize,
    pub pairs: Vec<PairKnots>,
}

impl SplineKnots {
    pub fn get(&self, s: usize, t: usize) -> Option<&[f64]> {
        self.pairs
            .binary_search_by(|p| (p.s, p.t).cmp(&(s, t)))
            .ok()
            .map(|i| self.pairs[i].knots.as_slice())
    }

    /// Drop knot entries for pairs no term uses.
    pub fn retain_pairs(&mut self, terms: &TermIndex) {
        let used: std::collections::BTreeSet<(usize, usize)> =
            terms.terms.iter().filter(|t| t.l >= 2).map(|t| (t.s, t.t)).collect();
        self.pairs.retain(|p| used.contains(&(p.s, p.t)));
    }
}

/// One model term: spline component `l` of predictor pair `(s, t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Term {
    pub s: usize,
    pub t: usize,
    pub l: usize,
}

/// Ordered list of terms; position `j` is design column `j`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TermIndex {
    pub terms: Vec<Term>,
}

impl TermIndex {
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Linear main effects `(s, s, 1)` for each listed predictor.
    pub fn linear(predictors: &[usize]) -> Self {
        TermIndex {
            terms: predictors.iter().map(|&s| Term { s, t: s, l: 1 }).collect(),
        }
    }

    /// Keep the listed columns, in order.
    pub fn select(&self, cols: &[usize]) -> Self {
        TermIndex {
            terms: cols.iter().map(|&j| self.terms[j]).collect(),
        }
    }

    /// Distinct predictors referenced by any term, ascending.
    pub fn predictors(&self) -> Vec<usize> {
        let mut p: Vec<usize> = self.terms.iter().flat_map(|t| [t.s, t.t]).collect();
        p.sort_unstable();
        p.dedup();
        p
    }
}

#[inline]
fn spline_input(x: &[f64], s: usize, t: usize) -> f64 {
    if s == t {
        x[s]
    } else {
        x[s] * x[t]
    }
}

/// Fit knots on standardized training rows and enumerate the terms of the
/// multiplicative-interaction spline over `active` (every pair `s <= t`).
pub fn fit_interaction_terms(
    x_std: &[FeatureVector],
    active: &[usize],
    budget: usize,
) -> Result<(SplineKnots, TermIndex)> {
    if x_std.len() < 2 {
        return Err(invalid_input("interaction terms need at least 2 training rows"));
    }
    let mut active = active.to_vec();
    active.sort_unstable();
    active.dedup();
    let mut pairs = Vec::new();
    let mut terms = Vec::new();
    let mut buf = vec![0.0; x_std.len()];
    for (ia, &s) in active.iter().enumerate() {
        for &t in &active[ia..] {
            for (b, row) in buf.iter_mut().zip(x_std) {
                *b = spline_input(&row.0, s, t);
            }
            buf.sort_by(|a, b| a.total_cmp(b));
            let knots = knots_from_sorted(&buf, budget);
            for l in 1..=knots.len() + 1 {
                terms.push(Term { s, t, l });
            }
            pairs.push(PairKnots { s, t, knots });
        }
    }
    Ok((SplineKnots { budget, pairs }, TermIndex { terms }))
}

/// Sparse design row for one standardized feature vector.
pub fn build_design_row(
    x_std: &FeatureVector,
    active: &[usize],
    knots: &SplineKnots,
    terms: &TermIndex,
) -> Result<SparseRow> {
    let x = x_std.as_slice();
    let mut row = Vec::new();
    let mut cache: Option<((usize, usize), f64, &[f64])> = None;
    for (j, term) in terms.terms.iter().enumerate() {
        let key = (term.s, term.t);
        let (u, ks) = match cache {
            Some((k, u, ks)) if k == key => (u, ks),
            _ => {
                if active.binary_search(&term.s).is_err() || active.binary_search(&term.t).is_err() {
                    return Err(Error::Consistency(format!(
                        "term ({}, {}, {}) references a predictor outside the active set",
                        term.s, term.t, term.l
                    )));
                }
                if term.t >= x.len() {
                    return Err(invalid_input(format!(
                        "term predictor {} out of range for feature length {}",
                        term.t,
                        x.len()
                    )));
                }
                let ks: &[f64] = knots.get(term.s, term.t).unwrap_or(&[]);
                let u = spline_input(x, term.s, term.t);
                cache = Some((key, u, ks));
                (u, ks)
            }
        };
        let v = if term.l == 1 {
            u
        } else {
            let knot = ks.get(term.l - 2).ok_or_else(|| {
                Error::Consistency(format!(
                    "term ({}, {}, {}) has no matching knot",
                    term.s, term.t, term.l
                ))
            })?;
            (u - knot).max(0.0)
        };
        if v != 0.0 {
            row.push((j, v));
        }
    }
    Ok(row)
}

/// Design matrix over many standardized rows.
pub fn build_design(
    x_std: &[FeatureVector],
    active: &[usize],
    knots: &SplineKnots,
    terms: &TermIndex,
) -> Result<CscMatrix> {
    let rows = x_std
        .iter()
        .map(|x| build_design_row(x, active, knots, terms))
        .collect::<Result<Vec<_>>>()?;
    CscMatrix::from_rows(&rows, terms.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector(v.to_vec())
    }

    #[test]
    fn logit_examples() {
        let est = TransitionEstimate {
            c: 2,
            nu: 0.1,
            p: vec![0.5, 0.5, 0.125, 0.875],
        };
        let x = logit_features(&est).unwrap();
        assert_eq!(x.0[0], 0.0);
        // -ln 7, evaluated independently to 17 significant digits.
        assert!((x.0[2] - (-1.945_910_149_055_313_3)).abs() < 1e-12);
    }

    #[test]
    fn logit_rejects_boundary() {
        let est = TransitionEstimate {
            c: 1,
            nu: 0.0,
            p: vec![1.0],
        };
        assert!(logit_features(&est).is_err());
    }

    #[test]
    fn two_point_standardizer() {
        let s = fit_standardizer(&[fv(&[1.0, 5.0]), fv(&[3.0, 5.0])]).unwrap();
        assert_eq!(s.means[0], 2.0);
        assert!((s.sds[0] - 2f64.sqrt()).abs() < 1e-15);
        assert!(!s.degenerate[0]);
        assert!(s.degenerate[1]);
        let z = standardize(&fv(&[2.0, 123.0]), &s).unwrap();
        assert_eq!(z.0, vec![0.0, 0.0]);
    }

    #[test]
    fn standardizer_errors() {
        assert!(fit_standardizer(&[fv(&[1.0])]).is_err());
        let s = fit_standardizer(&[fv(&[1.0]), fv(&[2.0])]).unwrap();
        assert!(standardize(&fv(&[1.0, 2.0]), &s).is_err());
    }

    #[test]
    fn knot_examples() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let k = compute_knots(&v, 4).unwrap();
        let expect = [20.8, 40.6, 60.4, 80.2];
        for (a, b) in k.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!(compute_knots(&[3.0; 10], 5).unwrap().is_empty());
        assert_eq!(compute_knots(&[0.0, 1.0], 1).unwrap(), vec![0.5]);
        assert!(compute_knots(&[1.0], 1).is_err());
    }

    #[test]
    fn tied_values_deduplicate() {
        let mut v = vec![0.0; 80];
        v.extend((0..20).map(|i| 1.0 + i as f64));
        let k = compute_knots(&v, 5).unwrap();
        assert!(k.len() < 5);
        assert!(k.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn basis_examples() {
        assert_eq!(spline_basis(0.5, &[-1.0, 0.0, 1.0]), vec![0.5, 1.5, 0.5, 0.0]);
        assert_eq!(spline_basis(-5.0, &[-1.0, 0.0, 1.0]), vec![-5.0, 0.0, 0.0, 0.0]);
        assert_eq!(spline_basis(0.0, &[-1.0, 0.0, 1.0])[2], 0.0);
    }

    #[test]
    fn single_linear_term_row() {
        let terms = TermIndex::linear(&[1]);
        let row = build_design_row(&fv(&[9.0, 2.5, 4.0]), &[1], &SplineKnots::default(), &terms).unwrap();
        assert_eq!(row, vec![(0, 2.5)]);
    }

    #[test]
    fn product_collapses_when_factor_is_zero() {
        let rows: Vec<FeatureVector> = (0..20)
            .map(|i| fv(&[(i as f64 - 10.0) / 3.0, ((i * 7 % 20) as f64 - 10.0) / 4.0]))
            .collect();
        let (knots, terms) = fit_interaction_terms(&rows, &[0, 1], 2).unwrap();
        let x = fv(&[0.0, 1.7]);
        let row = build_design_row(&x, &[0, 1], &knots, &terms).unwrap();
        let prod_knots = knots.get(0, 1).unwrap();
        let expect = spline_basis(0.0, prod_knots);
        for (j, term) in terms.terms.iter().enumerate() {
            if term.s == 0 && term.t == 1 {
                let got = row.iter().find(|e| e.0 == j).map_or(0.0, |e| e.1);
                assert_eq!(got, expect[term.l - 1]);
            }
        }
    }

    #[test]
    fn column_count_without_dedup() {
        let rows: Vec<FeatureVector> = (0..50)
            .map(|i| fv(&[i as f64, ((i * 17) % 50) as f64, ((i * 31) % 50) as f64 + 0.5]))
            .collect();
        let (_, terms) = fit_interaction_terms(&rows, &[0, 1, 2], 3).unwrap();
        let a = 3;
        assert_eq!(terms.len(), (a + a * (a - 1) / 2) * 4);
        // Categorization 2 scale: 3136 predictors all active, K = 5.
        let a: u64 = 3136;
        assert_eq!((a + a * (a - 1) / 2) * 6, 29_512_896);
    }

    #[test]
    fn outside_active_is_consistency_error() {
        let terms = TermIndex::linear(&[2]);
        let r = build_design_row(&fv(&[0.0, 0.0, 1.0]), &[0], &SplineKnots::default(), &terms);
        assert!(matches!(r, Err(Error::Consistency(_))));
    }
}

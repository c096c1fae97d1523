//! Dirichlet smoothing of transition probabilities.
//!
//! Each row of the transition matrix gets an independent symmetric
//! Dirichlet(ν) prior, so given counts Z the row posterior is
//! Dirichlet(Z[j][·] + ν). Draws use the Gamma-normalization construction
//! with one ChaCha stream per draw, so draw `r` depends only on
//! `(seed, r)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_param, Result};
use crate::trace::TransitionCounts;

/// Default prior concentration.
pub const DEFAULT_NU: f64 = 0.1;

/// Default number of posterior draws.
pub const DEFAULT_DRAWS: usize = 1000;

/// A c×c row-stochastic matrix of transition probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionEstimate {
    pub c: usize,
    pub nu: f64,
    /// Row-major probabilities.
    pub p: Vec<f64>,
}

impl TransitionEstimate {
    #[inline]
    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.p[from * self.c + to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.p[from * self.c..(from + 1) * self.c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirichletDrawConfig {
    pub draws: usize,
    pub seed: u64,
}

impl Default for DirichletDrawConfig {
    fn default() -> Self {
        DirichletDrawConfig {
            draws: DEFAULT_DRAWS,
            seed: 0,
        }
    }
}

fn check_nu(nu: f64) -> Result<()> {
    if nu > 0.0 && nu.is_finite() {
        Ok(())
    } else {
        Err(invalid_param(format!(
            "prior concentration must be positive and finite, got {nu}"
        )))
    }
}

/// Posterior mean: `(Z[j][k] + ν) / (n_j + cν)`. Unvisited rows are uniform.
pub fn posterior_mean(z: &TransitionCounts, nu: f64) -> Result<TransitionEstimate> {
    check_nu(nu)?;
    let c = z.num_categories();
    let mut p = Vec::with_capacity(c * c);
    for j in 0..c {
        let row = z.row(j);
        let n: u64 = row.iter().sum();
        let denom = n as f64 + c as f64 * nu;
        p.extend(row.iter().map(|&cnt| (cnt as f64 + nu) / denom));
    }
    Ok(TransitionEstimate { c, nu, p })
}

/// RNG for posterior draw `index` under `seed`.
pub fn draw_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// One set of unnormalized Gamma variates, row-major. Row `j` normalized is
/// a Dirichlet(Z[j][·] + ν) draw.
pub(crate) fn gamma_draw(z: &TransitionCounts, nu: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    z.as_slice()
        .iter()
        .map(|&cnt| {
            let g = Gamma::new(cnt as f64 + nu, 1.0).expect("shape is positive");
            // Tiny shapes can underflow; keep every component strictly positive.
            g.sample(rng).max(f64::MIN_POSITIVE)
        })
        .collect()
}

/// `R` independent posterior draws of the full transition matrix.
pub fn sample_posterior(z: &TransitionCounts, nu: f64, cfg: &DirichletDrawConfig) -> Result<Vec<TransitionEstimate>> {
    check_nu(nu)?;
    if cfg.draws == 0 {
        return Err(invalid_param("number of posterior draws must be at least 1"));
    }
    let c = z.num_categories();
    Ok((0..cfg.draws)
        .map(|r| {
            let mut rng = draw_rng(cfg.seed, r as u64);
            let mut g = gamma_draw(z, nu, &mut rng);
            for row in g.chunks_mut(c) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            TransitionEstimate { c, nu, p: g }
        })
        .collect())
}

/// Logits of a normalized Gamma row draw, computed without forming `1 - p`:
/// `logit(p_k) = ln g_k - ln(sum_{j != k} g_j)`.
pub(crate) fn gamma_row_logits(row: &[f64], out: &mut Vec<f64>) {
    let c = row.len();
    let mut suffix = vec![0.0; c + 1];
    for k in (0..c).rev() {
        suffix[k] = suffix[k + 1] + row[k];
    }
    let mut prefix = 0.0;
    for k in 0..c {
        let others = (prefix + suffix[k + 1]).max(f64::MIN_POSITIVE);
        out.push(row[k].ln() - others.ln());
        prefix += row[k];
    }
}

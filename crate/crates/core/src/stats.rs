//! Empirical CDFs, DKW-band stochastic-dominance verdicts, Wilson intervals
//! and a chi-square homogeneity test for discrete samples.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use thiserror::Error;

/// Fewest observations `dominance_test` accepts per sample.
pub const MIN_DOMINANCE_SAMPLES: usize = 100;

/// Smallest expected cell count in the chi-square test.
pub const MIN_EXPECTED: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("sample is empty")]
    Empty,
    #[error("sample has {found} observations, at least {needed} required")]
    TooFewSamples { found: usize, needed: usize },
    #[error("significance level must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("{successes} successes out of {trials} trials")]
    InvalidCounts { successes: u64, trials: u64 },
    #[error("non-finite observation {0}")]
    NonFinite(f64),
    #[error("pooled sample collapses to {0} bin(s) after merging")]
    DegenerateBins(usize),
}

fn check_alpha(alpha: f64) -> Result<(), StatsError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(StatsError::InvalidAlpha(alpha))
    }
}

/// Observed values plus a count of right-censored observations (known only to
/// exceed the observation window). Censored observations count towards the
/// sample size but never towards the ECDF, so `F` may stay below 1.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalSample {
    values: Vec<f64>,
    censored: usize,
}

impl EmpiricalSample {
    pub fn new(mut values: Vec<f64>, censored: usize) -> Result<Self, StatsError> {
        if let Some(&v) = values.iter().find(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite(v));
        }
        values.sort_by(f64::total_cmp);
        Ok(EmpiricalSample { values, censored })
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self, StatsError> {
        Self::new(values, 0)
    }

    /// Integer observations; `None` marks a censored one.
    pub fn from_counts<I: IntoIterator<Item = Option<u64>>>(obs: I) -> Self {
        let mut values = Vec::new();
        let mut censored = 0;
        for o in obs {
            match o {
                Some(v) => values.push(v as f64),
                None => censored += 1,
            }
        }
        values.sort_by(f64::total_cmp);
        EmpiricalSample { values, censored }
    }

    /// Sorted observed values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn censored(&self) -> usize {
        self.censored
    }

    pub fn len(&self) -> usize {
        self.values.len() + self.censored
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Right-continuous step function `F(x) = #{obs <= x} / m`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ecdf {
    /// Distinct observed values, increasing.
    pub jumps: Vec<f64>,
    /// `F` at each jump.
    pub levels: Vec<f64>,
    pub m: usize,
}

impl Ecdf {
    pub fn eval(&self, x: f64) -> f64 {
        match self.jumps.partition_point(|&j| j <= x) {
            0 => 0.0,
            k => self.levels[k - 1],
        }
    }
}

pub fn ecdf(sample: &EmpiricalSample) -> Result<Ecdf, StatsError> {
    if sample.is_empty() {
        return Err(StatsError::Empty);
    }
    let m = sample.len();
    let mut jumps: Vec<f64> = Vec::new();
    let mut levels: Vec<f64> = Vec::new();
    for (i, &v) in sample.values.iter().enumerate() {
        let level = (i + 1) as f64 / m as f64;
        if jumps.last() == Some(&v) {
            *levels.last_mut().expect("paired with jumps") = level;
        } else {
            jumps.push(v);
            levels.push(level);
        }
    }
    Ok(Ecdf { jumps, levels, m })
}

/// DKW half-width `sqrt(ln(2/alpha) / (2m))`.
pub fn dkw_epsilon(m: usize, alpha: f64) -> f64 {
    ((2.0 / alpha).ln() / (2.0 * m as f64)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DominanceStatus {
    Consistent,
    Inconclusive,
    Violated,
}

impl fmt::Display for DominanceStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Verdict on the claim `Y <=_st X`, i.e. `F_Y(t) >= F_X(t)` for all `t`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DominanceVerdict {
    pub claim: String,
    pub status: DominanceStatus,
    /// `max_t (F_X(t) - F_Y(t))`.
    pub max_violation: f64,
    /// Where the maximum is attained (`None` when both ECDFs are empty).
    pub argmax: Option<f64>,
    /// `eps_X + eps_Y`.
    pub band: f64,
    pub alpha: f64,
    pub m_x: usize,
    pub m_y: usize,
    pub censored_x: usize,
    pub censored_y: usize,
}

/// Tests `Y <=_st X` from samples of `X` and `Y`.
pub fn dominance_test(
    x: &EmpiricalSample,
    y: &EmpiricalSample,
    alpha: f64,
) -> Result<DominanceVerdict, StatsError> {
    dominance_test_labeled(x, y, alpha, "Y <=_st X")
}

/// `dominance_test` with a caller-supplied description of the claim.
pub fn dominance_test_labeled(
    x: &EmpiricalSample,
    y: &EmpiricalSample,
    alpha: f64,
    claim: &str,
) -> Result<DominanceVerdict, StatsError> {
    check_alpha(alpha)?;
    for s in [x, y] {
        if s.len() < MIN_DOMINANCE_SAMPLES {
            return Err(StatsError::TooFewSamples {
                found: s.len(),
                needed: MIN_DOMINANCE_SAMPLES,
            });
        }
    }
    let fx = ecdf(x)?;
    let fy = ecdf(y)?;
    // both ECDFs are constant between jumps of either, and 0 before them
    let mut max_violation = 0.0;
    let mut argmax = None;
    for &t in fx.jumps.iter().chain(fy.jumps.iter()) {
        let diff = fx.eval(t) - fy.eval(t);
        if argmax.is_none() || diff > max_violation {
            max_violation = diff;
            argmax = Some(t);
        }
    }
    let band = dkw_epsilon(x.len(), alpha) + dkw_epsilon(y.len(), alpha);
    let status = if max_violation <= 0.0 {
        DominanceStatus::Consistent
    } else if max_violation <= band {
        DominanceStatus::Inconclusive
    } else {
        DominanceStatus::Violated
    };
    Ok(DominanceVerdict {
        claim: claim.to_string(),
        status,
        max_violation,
        argmax,
        band,
        alpha,
        m_x: x.len(),
        m_y: y.len(),
        censored_x: x.censored,
        censored_y: y.censored,
    })
}

/// Point estimate and Wilson score interval at confidence `1 - alpha`.
pub fn estimate_prob(successes: u64, trials: u64, alpha: f64) -> Result<(f64, f64, f64), StatsError> {
    check_alpha(alpha)?;
    if trials == 0 || successes > trials {
        return Err(StatsError::InvalidCounts { successes, trials });
    }
    let z = Normal::standard().inverse_cdf(1.0 - alpha / 2.0);
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let lo = if successes == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if successes == trials { 1.0 } else { (centre + half).min(1.0) };
    Ok((p, lo, hi))
}

/// Chi-square homogeneity test between two discrete samples.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginalTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub alpha: f64,
    pub pass: bool,
    pub n_a: usize,
    pub n_b: usize,
    /// Lower edge (smallest value) of each merged bin.
    pub bin_edges: Vec<u64>,
}

/// Pools both samples, merges adjacent value bins until every expected cell
/// count is at least [`MIN_EXPECTED`], and runs a 2 x k chi-square test of
/// homogeneity. `pass` means the p-value is at least `alpha`.
pub fn two_sample_marginal_test(a: &[u64], b: &[u64], alpha: f64) -> Result<MarginalTest, StatsError> {
    check_alpha(alpha)?;
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut table: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
    for &v in a {
        table.entry(v).or_default().0 += 1;
    }
    for &v in b {
        table.entry(v).or_default().1 += 1;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let total = na + nb;
    let min_share = na.min(nb) / total;
    // a bin is large enough once its smaller expected cell reaches the floor
    let enough = |pooled: u64| pooled as f64 * min_share >= MIN_EXPECTED;

    let mut bins: Vec<(u64, u64, u64)> = Vec::new();
    let mut open: Option<(u64, u64, u64)> = None;
    for (&v, &(ca, cb)) in &table {
        let cur = open.get_or_insert((v, 0, 0));
        cur.1 += ca;
        cur.2 += cb;
        if enough(cur.1 + cur.2) {
            bins.push(open.take().expect("just filled"));
        }
    }
    if let Some(rest) = open {
        match bins.last_mut() {
            Some(last) => {
                last.1 += rest.1;
                last.2 += rest.2;
            }
            None => bins.push(rest),
        }
    }
    if bins.len() < 2 {
        return Err(StatsError::DegenerateBins(bins.len()));
    }
    let mut statistic = 0.0;
    for &(_, ca, cb) in &bins {
        let pooled = (ca + cb) as f64;
        for (obs, n) in [(ca as f64, na), (cb as f64, nb)] {
            let expected = pooled * n / total;
            statistic += (obs - expected).powi(2) / expected;
        }
    }
    let dof = bins.len() - 1;
    let p_value = ChiSquared::new(dof as f64)
        .expect("positive degrees of freedom")
        .sf(statistic);
    Ok(MarginalTest {
        statistic,
        dof,
        p_value,
        alpha,
        pass: p_value >= alpha,
        n_a: a.len(),
        n_b: b.len(),
        bin_edges: bins.iter().map(|b| b.0).collect(),
    })
}

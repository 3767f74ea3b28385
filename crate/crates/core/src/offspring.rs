//! Finite-support offspring laws.

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::rng::binomial;

/// Tolerance on `sum(P_i) = 1`.
pub const NORMALIZATION_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LawError {
    #[error("offspring law has no probabilities")]
    Empty,
    #[error("probability P_{index} = {value} is negative or not finite")]
    NegativeProbability { index: usize, value: f64 },
    #[error("probabilities sum to {sum}, not 1")]
    NotNormalized { sum: f64 },
    #[error("survival probability {0} is outside [0, 1]")]
    InvalidSurvival(f64),
    #[error("pgf argument {0} is outside [0, 1]")]
    ArgumentOutOfRange(f64),
    #[error("Bernoulli-sum law needs lambda > 0, N >= 1 and lambda / N < 1 (got lambda = {lambda}, N = {n})")]
    BernoulliParameters { lambda: f64, n: u64 },
}

/// Offspring distribution `(P_0, ..., P_K)` together with the probability
/// `survival` that a parent persists into the next generation (only used by
/// the generalized kernel; zero for the lazy and strict walks).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OffspringLaw {
    probs: Vec<f64>,
    survival: f64,
    #[serde(skip)]
    cumulative: Vec<f64>,
}

impl OffspringLaw {
    pub fn new(probs: Vec<f64>, survival: f64) -> Result<Self, LawError> {
        validate(&probs, survival)?;
        let mut probs = probs;
        while probs.len() > 1 && probs[probs.len() - 1] == 0.0 {
            probs.pop();
        }
        let cumulative = probs
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p;
                Some(*acc)
            })
            .collect();
        Ok(OffspringLaw {
            probs,
            survival,
            cumulative,
        })
    }

    /// Law without parent survival.
    pub fn from_probs(probs: &[f64]) -> Result<Self, LawError> {
        Self::new(probs.to_vec(), 0.0)
    }

    pub fn point_mass(k: usize) -> Self {
        let mut probs = vec![0.0; k + 1];
        probs[k] = 1.0;
        Self::new(probs, 0.0).expect("point mass is a valid law")
    }

    pub fn with_survival(&self, survival: f64) -> Result<Self, LawError> {
        Self::new(self.probs.clone(), survival)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn survival(&self) -> f64 {
        self.survival
    }

    /// Largest offspring count with positive mass.
    pub fn max_offspring(&self) -> usize {
        self.probs.len() - 1
    }

    /// Generating function `f(s) = sum_i P_i s^i` for `s` in `[0, 1]`.
    pub fn pgf(&self, s: f64) -> Result<f64, LawError> {
        if !(0.0..=1.0).contains(&s) {
            return Err(LawError::ArgumentOutOfRange(s));
        }
        Ok(self.eval_pgf(s))
    }

    /// Horner evaluation without the range check.
    #[inline]
    pub(crate) fn eval_pgf(&self, s: f64) -> f64 {
        self.probs.iter().rev().fold(0.0, |acc, p| acc * s + p)
    }

    pub fn mean(&self) -> f64 {
        self.probs.iter().enumerate().map(|(i, p)| i as f64 * p).sum()
    }

    /// One offspring count by inverse CDF over the cumulative masses.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let u: f64 = rng.random();
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.probs.len() - 1) as u64
    }

    /// Total offspring of `parents` independent particles: draws the
    /// multinomial split of the parents over offspring counts by sequential
    /// conditional binomials.
    pub fn sample_total<R: Rng + ?Sized>(&self, parents: u64, rng: &mut R) -> u64 {
        let mut left = parents;
        let mut mass = 1.0;
        let mut total = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if left == 0 {
                break;
            }
            let k = if i + 1 == self.probs.len() {
                left
            } else {
                binomial(rng, left, (p / mass).min(1.0))
            };
            total += i as u64 * k;
            left -= k;
            mass -= p;
        }
        total
    }
}

fn validate(probs: &[f64], survival: f64) -> Result<(), LawError> {
    if probs.is_empty() {
        return Err(LawError::Empty);
    }
    if let Some((index, &value)) = probs
        .iter()
        .enumerate()
        .find(|(_, p)| !p.is_finite() || **p < 0.0)
    {
        return Err(LawError::NegativeProbability { index, value });
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(LawError::NotNormalized { sum });
    }
    if !(0.0..=1.0).contains(&survival) {
        return Err(LawError::InvalidSurvival(survival));
    }
    Ok(())
}

/// Law of the sum of four independent Bernoulli(`sqrt(lambda / N)`)
/// variables, i.e. `Binomial(4, sqrt(lambda / N))`, with parent survival
/// `sqrt(1 - 1/N)`.
pub fn bernoulli_sum_law(lambda: f64, n: u64) -> Result<OffspringLaw, LawError> {
    if !(lambda > 0.0) || n == 0 || lambda / n as f64 >= 1.0 {
        return Err(LawError::BernoulliParameters { lambda, n });
    }
    let p = (lambda / n as f64).sqrt();
    let q = 1.0 - p;
    let probs: Vec<f64> = (0..=4u32)
        .map(|i| binomial_coefficient(4, i) * p.powi(i as i32) * q.powi(4 - i as i32))
        .collect();
    // rounding can leave the sum a few ulps away from 1
    let sum: f64 = probs.iter().sum();
    let probs = probs.into_iter().map(|x| x / sum).collect();
    OffspringLaw::new(probs, (1.0 - 1.0 / n as f64).sqrt())
}

fn binomial_coefficient(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * f64::from(n - i) / f64::from(i + 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::replica_rng;
    use proptest::prelude::*;

    fn law_b() -> OffspringLaw {
        OffspringLaw::from_probs(&[0.5, 0.0, 0.5]).unwrap()
    }

    #[test]
    fn validation() {
        assert!(OffspringLaw::from_probs(&[0.5, 0.0, 0.5]).is_ok());
        assert!(matches!(
            OffspringLaw::from_probs(&[0.5, 0.6]),
            Err(LawError::NotNormalized { .. })
        ));
        assert!(matches!(
            OffspringLaw::from_probs(&[1.5, -0.5]),
            Err(LawError::NegativeProbability { index: 1, .. })
        ));
        assert!(OffspringLaw::new(vec![1.0], 0.3).is_ok());
        assert!(matches!(OffspringLaw::new(vec![1.0], 1.3), Err(LawError::InvalidSurvival(_))));
        assert!(matches!(OffspringLaw::from_probs(&[]), Err(LawError::Empty)));
        let trimmed = OffspringLaw::from_probs(&[0.5, 0.5, 0.0, 0.0]).unwrap();
        assert_eq!(trimmed.probs(), &[0.5, 0.5]);
        assert_eq!(OffspringLaw::from_probs(&[1.0, 0.0]).unwrap().probs(), &[1.0]);
    }

    #[test]
    fn pgf_values() {
        let b = law_b();
        assert_eq!(b.pgf(1.0).unwrap(), 1.0);
        assert_eq!(b.pgf(0.0).unwrap(), 0.5);
        assert!((b.pgf(0.5).unwrap() - 0.625).abs() < 1e-15);
        assert!(matches!(b.pgf(1.5), Err(LawError::ArgumentOutOfRange(_))));
        assert!(b.pgf(-0.1).is_err());
    }

    #[test]
    fn means() {
        assert_eq!(law_b().mean(), 1.0);
        assert_eq!(OffspringLaw::from_probs(&[0.25, 0.25, 0.5]).unwrap().mean(), 1.25);
        assert_eq!(OffspringLaw::point_mass(3).mean(), 3.0);
    }

    #[test]
    fn pgf_slope_at_one_is_mean() {
        for probs in [vec![0.5, 0.0, 0.5], vec![0.25, 0.25, 0.5], vec![0.4, 0.4, 0.2], vec![0.1, 0.2, 0.3, 0.4]] {
            let law = OffspringLaw::from_probs(&probs).unwrap();
            let h = 1e-7;
            let slope = (1.0 - law.pgf(1.0 - h).unwrap()) / h;
            assert!((slope - law.mean()).abs() < 1e-6, "{probs:?}: {slope}");
        }
    }

    #[test]
    fn point_mass_sampling() {
        let mut rng = replica_rng(3, 0);
        let law = OffspringLaw::point_mass(2);
        assert!((0..1000).all(|_| law.sample(&mut rng) == 2));
        assert_eq!(law.sample_total(17, &mut rng), 34);
    }

    #[test]
    fn seeded_draws_are_reproducible() {
        let law = law_b();
        let draw = |seed| {
            let mut rng = replica_rng(seed, 0);
            (0..64).map(|_| law.sample(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
        assert_ne!(draw(11), draw(12));
    }

    #[test]
    fn sample_mean_within_three_sigma() {
        // law B: mean 1, variance E[C^2] - 1 = 2 - 1 = 1
        let mut rng = replica_rng(5, 0);
        let m = 1_000_000;
        let law = law_b();
        let total: u64 = (0..m).map(|_| law.sample(&mut rng)).sum();
        let mean = total as f64 / m as f64;
        assert!((mean - 1.0).abs() < 3.0 / (m as f64).sqrt(), "{mean}");
    }

    #[test]
    fn sampling_frequencies_within_dkw_band() {
        let law = OffspringLaw::from_probs(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut rng = replica_rng(9, 0);
        let m = 1_000_000usize;
        let mut counts = [0usize; 4];
        for _ in 0..m {
            counts[law.sample(&mut rng) as usize] += 1;
        }
        // DKW at confidence 99.9%
        let eps = ((2.0f64 / 0.001).ln() / (2.0 * m as f64)).sqrt();
        let mut emp = 0.0;
        let mut exact = 0.0;
        for i in 0..4 {
            emp += counts[i] as f64 / m as f64;
            exact += law.probs()[i];
            assert!((emp - exact).abs() <= eps, "i={i}: {emp} vs {exact}");
        }
    }

    #[test]
    fn aggregated_total_matches_per_particle_mean() {
        let law = OffspringLaw::from_probs(&[0.25, 0.25, 0.5]).unwrap();
        let mut rng = replica_rng(21, 0);
        let reps = 200_000;
        let parents = 3;
        let total: u64 = (0..reps).map(|_| law.sample_total(parents, &mut rng)).sum();
        let mean = total as f64 / reps as f64;
        // variance per parent: E[C^2] - 1.25^2 = 2.25 - 1.5625
        let sd = (parents as f64 * 0.6875 / reps as f64).sqrt();
        assert!((mean - 3.75).abs() < 4.0 * sd, "{mean}");
    }

    #[test]
    fn bernoulli_sum_matches_enumeration() {
        let law = bernoulli_sum_law(1.0, 100).unwrap();
        let p = 0.1f64;
        let mut enumerated = [0.0f64; 5];
        for mask in 0u32..16 {
            let ones = mask.count_ones() as i32;
            enumerated[ones as usize] += p.powi(ones) * (1.0 - p).powi(4 - ones);
        }
        for (a, b) in law.probs().iter().zip(enumerated) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert!((law.probs()[0] - 0.6561).abs() < 1e-15);
        assert!((law.survival() - 0.99f64.sqrt()).abs() < 1e-15);
        assert!((law.survival() - 0.994987).abs() < 1e-6);
        assert!(bernoulli_sum_law(2.0, 2).is_err());
        assert!(bernoulli_sum_law(-1.0, 10).is_err());
        assert!(bernoulli_sum_law(1.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn pgf_is_monotone_and_convex(raw in prop::collection::vec(0.0f64..1.0, 1..6)) {
            let sum: f64 = raw.iter().sum();
            prop_assume!(sum > 1e-6);
            let probs: Vec<f64> = raw.iter().map(|p| p / sum).collect();
            let law = OffspringLaw::from_probs(&probs).unwrap();
            prop_assert!((law.pgf(1.0).unwrap() - 1.0).abs() < 1e-12);
            let grid: Vec<f64> = (0..=50).map(|i| law.pgf(i as f64 / 50.0).unwrap()).collect();
            for w in grid.windows(2) { prop_assert!(w[1] >= w[0] - 1e-15); }
            for w in grid.windows(3) { prop_assert!(w[0] + w[2] - 2.0 * w[1] >= -1e-12); }
        }

        #[test]
        fn bernoulli_sum_is_normalized(lambda in 0.01f64..5.0, n in 6u64..10_000) {
            prop_assume!(lambda / (n as f64) < 1.0);
            let law = bernoulli_sum_law(lambda, n).unwrap();
            let s: f64 = law.probs().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

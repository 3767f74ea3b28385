//! Forward simulation of the lazy, strict and generalized (parent-survival)
//! branching random walks, hitting-time extraction, and the continuous-time
//! walk.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::lattice::{neighbor, BoxGeometry, KernelKind, LatticeError, Site, MAX_DIM};
use crate::offspring::{LawError, OffspringLaw};
use crate::rng::{binomial, multinomial_uniform};

/// Default population cap.
pub const DEFAULT_CAP: u64 = 1_000_000;

/// Most destinations any kernel can have (`2 * MAX_DIM + 1`).
pub(crate) const MAX_MOVES: usize = 2 * MAX_DIM + 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("population {population} exceeded the cap at t = {t}")]
    CapExceeded { population: u64, t: u64 },
    #[error(transparent)]
    Geometry(#[from] LatticeError),
    #[error(transparent)]
    Law(#[from] LawError),
    #[error("law has survival probability {0} but the kernel is not generalized")]
    SurvivalWithoutGeneralizedKernel(f64),
    #[error("rate must be positive and finite, got {0}")]
    InvalidRate(f64),
    #[error("time must be non-negative and finite, got {0}")]
    InvalidTime(f64),
}

/// Finite configuration of particles: site -> count, zero counts absent.
#[derive(Clone, Default, PartialEq, Eq)]
pub struct ParticleField {
    counts: BTreeMap<Site, u64>,
    total: u64,
}

impl ParticleField {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn single(site: Site) -> Self {
        let mut f = Self::new();
        f.add(site, 1);
        f
    }

    pub fn from_pairs<I: IntoIterator<Item = (Site, u64)>>(pairs: I) -> Self {
        let mut f = Self::new();
        for (s, k) in pairs {
            f.add(s, k);
        }
        f
    }

    #[inline]
    pub fn add(&mut self, site: Site, k: u64) {
        if k == 0 {
            return;
        }
        *self.counts.entry(site).or_insert(0) += k;
        self.total += k;
    }

    pub fn get(&self, site: &Site) -> u64 {
        self.counts.get(site).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Number of occupied sites.
    pub fn support_len(&self) -> usize {
        self.counts.len()
    }

    /// Occupied sites with their counts, in lexicographic site order.
    pub fn iter(&self) -> impl Iterator<Item = (Site, u64)> + '_ {
        self.counts.iter().map(|(s, k)| (*s, *k))
    }

    pub fn sites(&self) -> impl Iterator<Item = &Site> + '_ {
        self.counts.keys()
    }

    /// Pointwise sum.
    pub fn plus(&self, other: &ParticleField) -> ParticleField {
        let mut out = self.clone();
        for (s, k) in other.iter() {
            out.add(s, k);
        }
        out
    }

    /// Pointwise image under a site map: `(f . m^{-1})`, i.e. a particle at
    /// `x` moves to `m(x)`.
    pub fn mapped(&self, m: impl Fn(Site) -> Site) -> ParticleField {
        ParticleField::from_pairs(self.iter().map(|(s, k)| (m(s), k)))
    }
}

impl fmt::Debug for ParticleField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map().entries(self.counts.iter()).finish()
    }
}

impl fmt::Display for ParticleField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, (s, k)) in self.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{s}:{k}")?;
        }
        write!(f, "}}")
    }
}

/// How randomness is consumed for the particles of one site.
///
/// Both modes realise the same law: `PerParticle` draws one offspring count
/// per particle and one destination per child in index order; `Aggregated`
/// draws the site's offspring-count histogram and the children's destination
/// histogram directly as multinomials, which costs O(1) per site instead of
/// O(particles).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    #[default]
    PerParticle,
    Aggregated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StepKernel {
    pub kind: KernelKind,
    pub d: usize,
}

impl StepKernel {
    pub fn new(kind: KernelKind, d: usize) -> Result<Self, SimError> {
        if d == 0 || d > MAX_DIM {
            return Err(LatticeError::UnsupportedDimension(d).into());
        }
        Ok(StepKernel { kind, d })
    }

    pub fn move_count(&self) -> usize {
        self.kind.move_count(self.d)
    }
}

/// Offspring of the particles sitting on one site: destination histogram in
/// the normative neighbour order, plus surviving parents.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Brood {
    pub moves: [u64; MAX_MOVES],
    pub survivors: u64,
}

pub(crate) fn draw_brood<R: Rng + ?Sized>(
    law: &OffspringLaw,
    kind: KernelKind,
    move_count: usize,
    sampling: Sampling,
    parents: u64,
    rng: &mut R,
) -> Brood {
    let mut brood = Brood {
        moves: [0; MAX_MOVES],
        survivors: 0,
    };
    let generalized = kind == KernelKind::Generalized;
    match sampling {
        Sampling::PerParticle => {
            for _ in 0..parents {
                let children = law.sample(rng);
                for _ in 0..children {
                    brood.moves[rng.random_range(0..move_count)] += 1;
                }
                if generalized && rng.random::<f64>() < law.survival() {
                    brood.survivors += 1;
                }
            }
        }
        Sampling::Aggregated => {
            let children = law.sample_total(parents, rng);
            multinomial_uniform(rng, children, &mut brood.moves[..move_count]);
            if generalized {
                brood.survivors = binomial(rng, parents, law.survival());
            }
        }
    }
    brood
}

/// A branching random walk: kernel, offspring law and simulation controls.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Process {
    pub kernel: StepKernel,
    pub law: OffspringLaw,
    pub sampling: Sampling,
    pub cap: u64,
}

impl Process {
    pub fn new(kernel: StepKernel, law: OffspringLaw) -> Result<Self, SimError> {
        if kernel.kind != KernelKind::Generalized && law.survival() != 0.0 {
            return Err(SimError::SurvivalWithoutGeneralizedKernel(law.survival()));
        }
        Ok(Process {
            kernel,
            law,
            sampling: Sampling::default(),
            cap: DEFAULT_CAP,
        })
    }

    pub fn with_cap(mut self, cap: u64) -> Self {
        self.cap = cap;
        self
    }

    pub fn with_sampling(mut self, sampling: Sampling) -> Self {
        self.sampling = sampling;
        self
    }

    /// One generation. Sites are processed in lexicographic order.
    /// `t` only labels the cap-abort signal.
    pub fn step<R: Rng + ?Sized>(
        &self,
        field: &ParticleField,
        t: u64,
        rng: &mut R,
    ) -> Result<ParticleField, SimError> {
        let kind = self.kernel.kind;
        let k = self.kernel.move_count();
        let mut next = ParticleField::new();
        for (site, count) in field.iter() {
            let brood = draw_brood(&self.law, kind, k, self.sampling, count, rng);
            for (m, &c) in brood.moves[..k].iter().enumerate() {
                next.add(neighbor(&site, kind, m), c);
            }
            next.add(site, brood.survivors);
        }
        if next.total() > self.cap {
            return Err(SimError::CapExceeded {
                population: next.total(),
                t,
            });
        }
        Ok(next)
    }

    /// Field after `steps` generations of unconfined evolution from one
    /// particle at `start`.
    pub fn evolve<R: Rng + ?Sized>(
        &self,
        start: Site,
        steps: u64,
        rng: &mut R,
    ) -> Result<ParticleField, SimError> {
        self.check_dim(&start)?;
        let mut field = ParticleField::single(start);
        for t in 1..=steps {
            if field.is_empty() {
                break;
            }
            field = self.step(&field, t, rng)?;
        }
        Ok(field)
    }

    /// Count at `probe` after `t` generations of free evolution from `start`.
    pub fn site_count_path<R: Rng + ?Sized>(
        &self,
        start: Site,
        t: u64,
        probe: Site,
        rng: &mut R,
    ) -> Result<u64, SimError> {
        self.check_dim(&probe)?;
        Ok(self.evolve(start, t, rng)?.get(&probe))
    }

    /// First generation at which some particle occupies the boundary of
    /// `geom`, started from one particle at `start`.
    pub fn run_hitting<R: Rng + ?Sized>(
        &self,
        start: Site,
        geom: &BoxGeometry,
        horizon: u64,
        rng: &mut R,
    ) -> Result<HittingTimes, SimError> {
        self.check_dim(&start)?;
        if !geom.contains(&start)? {
            return Err(LatticeError::OutsideBox {
                site: start,
                n: geom.n,
            }
            .into());
        }
        if geom.boundary_contains(&start)? {
            return Ok(HittingTimes {
                started_on_boundary: true,
                final_population: 1,
                ..HittingTimes::new(HitTime::At(0))
            });
        }
        let mut field = ParticleField::single(start);
        for t in 1..=horizon {
            field = match self.step(&field, t, rng) {
                Ok(f) => f,
                Err(SimError::CapExceeded { population, .. }) => {
                    return Ok(HittingTimes {
                        censored: Some(Censor::Cap),
                        final_population: population,
                        ..HittingTimes::new(HitTime::Beyond)
                    });
                }
                Err(e) => return Err(e),
            };
            if field.sites().any(|s| s.sup_norm() >= geom.n) {
                return Ok(HittingTimes {
                    final_population: field.total(),
                    ..HittingTimes::new(HitTime::At(t))
                });
            }
            if field.is_empty() {
                return Ok(HittingTimes::new(HitTime::Beyond));
            }
        }
        Ok(HittingTimes {
            censored: Some(Censor::Horizon),
            final_population: field.total(),
            ..HittingTimes::new(HitTime::Beyond)
        })
    }

    fn check_dim(&self, s: &Site) -> Result<(), SimError> {
        if s.dim() != self.kernel.d {
            return Err(LatticeError::DimensionMismatch {
                expected: self.kernel.d,
                found: s.dim(),
            }
            .into());
        }
        Ok(())
    }
}

/// A hitting time in `{0, 1, 2, ...} ∪ {beyond the observation window}`.
///
/// `Beyond` covers both `τ = ∞` (extinction before hitting) and runs stopped
/// by the horizon or the population cap; `HittingTimes::censored`
/// distinguishes them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HitTime {
    At(u64),
    Beyond,
}

impl HitTime {
    pub fn value(self) -> Option<u64> {
        match self {
            HitTime::At(t) => Some(t),
            HitTime::Beyond => None,
        }
    }

    pub fn is_observed(self) -> bool {
        matches!(self, HitTime::At(_))
    }

    /// Records a hit at `t` if none was recorded yet.
    pub(crate) fn record(&mut self, t: u64, hit: bool) {
        if hit && *self == HitTime::Beyond {
            *self = HitTime::At(t);
        }
    }
}

impl fmt::Display for HitTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HitTime::At(t) => write!(f, "{t}"),
            HitTime::Beyond => write!(f, "inf"),
        }
    }
}

impl Serialize for HitTime {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            HitTime::At(t) => serializer.serialize_u64(*t),
            HitTime::Beyond => serializer.serialize_none(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Censor {
    Horizon,
    Cap,
}

impl fmt::Display for Censor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Censor::Horizon => "horizon",
            Censor::Cap => "cap",
        })
    }
}

/// Hitting time of one run, with the optional coupling components
/// `s` (shared part), `t` (mirror part, far side) and `u` (mirror part,
/// top/bottom strips).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct HittingTimes {
    pub tau: HitTime,
    pub s: Option<HitTime>,
    pub t: Option<HitTime>,
    pub u: Option<HitTime>,
    pub censored: Option<Censor>,
    pub started_on_boundary: bool,
    pub final_population: u64,
}

impl HittingTimes {
    pub fn new(tau: HitTime) -> Self {
        HittingTimes {
            tau,
            s: None,
            t: None,
            u: None,
            censored: None,
            started_on_boundary: false,
            final_population: 0,
        }
    }

    /// `τ ∧ (horizon + 1)`, mapping every unobserved time to `horizon + 1`.
    pub fn capped(&self, horizon: u64) -> u64 {
        self.tau.value().map_or(horizon + 1, |t| t.min(horizon + 1))
    }
}

/// Continuous-time walk with death rate 1 and birth rate `lambda` onto each
/// of the `2d` neighbours, started from one particle at `start`; returns the
/// configuration at time `t`.
///
/// Exact event-driven simulation: with `m` particles the next event comes
/// after an `Exp(m (1 + 2 d lambda))` time and is a death of a uniform
/// particle with probability `1 / (1 + 2 d lambda)`, otherwise a birth at a
/// uniform neighbour of a uniform particle.
pub fn simulate_ct<R: Rng + ?Sized>(
    start: Site,
    lambda: f64,
    t: f64,
    cap: u64,
    rng: &mut R,
) -> Result<ParticleField, SimError> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(SimError::InvalidRate(lambda));
    }
    if !(t >= 0.0) || !t.is_finite() {
        return Err(SimError::InvalidTime(t));
    }
    let d = start.dim();
    let per_particle = 1.0 + 2.0 * d as f64 * lambda;
    let death_share = 1.0 / per_particle;
    let mut particles = vec![start];
    let mut now = 0.0;
    while !particles.is_empty() {
        let rate = particles.len() as f64 * per_particle;
        let u: f64 = rng.random();
        now += -(1.0 - u).ln() / rate;
        if now > t {
            break;
        }
        let idx = rng.random_range(0..particles.len());
        if rng.random::<f64>() < death_share {
            particles.swap_remove(idx);
        } else {
            let child = neighbor(&particles[idx], KernelKind::Strict, rng.random_range(0..2 * d));
            particles.push(child);
            if particles.len() as u64 > cap {
                return Err(SimError::CapExceeded {
                    population: particles.len() as u64,
                    t: now.floor() as u64,
                });
            }
        }
    }
    Ok(ParticleField::from_pairs(particles.into_iter().map(|s| (s, 1))))
}

//! Pathwise reflection couplings of two planar branching random walks started
//! from neighbouring sites.
//!
//! Each coupled process is split as `marginal = sigma + alpha`. The `sigma`
//! parts are identical in both processes and evolve with shared randomness;
//! the `alpha` parts live in opposite half-planes and are mirror images of
//! each other. Mirror-paired `alpha` particles share their offspring count
//! and use mirror-conjugate displacements, except that children of pairs
//! adjacent to the symmetry axis which land on a common site are relabelled
//! into `sigma` on both sides.
//!
//! | kind         | starts            | kernel      | mirror              | axis        |
//! |--------------|-------------------|-------------|---------------------|-------------|
//! | `AxisShift1` | (0,0) vs (1,0)    | lazy        | `(x,y) -> (1-x,y)`  | `x = 1/2`   |
//! | `DiagShift`  | (0,0) vs (1,1)    | strict      | `(x,y) -> (1-y,1-x)`| `x + y = 1` |
//! | `AxisShift2` | (0,0) vs (2,0)    | generalized | `(x,y) -> (2-x,y)`  | `x = 1`     |

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::lattice::{
    neighbor, reflect_phi, reflect_psi, reflect_upsilon, BoxGeometry, KernelKind, LatticeError,
    Site,
};
use crate::offspring::OffspringLaw;
use crate::simulator::{
    draw_brood, Censor, HitTime, HittingTimes, ParticleField, Sampling, DEFAULT_CAP,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CouplingKind {
    AxisShift1,
    DiagShift,
    AxisShift2,
}

/// Position of a site relative to a coupling's symmetry axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HalfSpace {
    /// The half-plane containing the origin start.
    Near,
    /// The mirror half-plane, containing the shifted start.
    Far,
    /// Neither half: the lattice line on the axis (`x = 1` or `x + y = 1`).
    Outside,
}

/// `(partner move, relabel)` for each move of the near-side parent, indexed
/// in the kernel's normative order.
type PairTable = &'static [(usize, bool)];

// Lazy order: stay, E, W, N, S.
const AXIS1_SYNTHETIC: PairTable = &[(2, true), (0, true), (1, false), (3, false), (4, false)];
const AXIS1_ANTITHETIC: PairTable = &[(0, false), (2, false), (1, false), (3, false), (4, false)];
// Strict order: E, W, N, S.
const DIAG_SYNTHETIC: PairTable = &[(3, true), (2, false), (1, true), (0, false)];
const DIAG_ANTITHETIC: PairTable = &[(3, false), (2, false), (1, false), (0, false)];
const AXIS2_SYNTHETIC: PairTable = &[(1, true), (0, false), (2, false), (3, false)];
const AXIS2_ANTITHETIC: PairTable = &[(1, false), (0, false), (2, false), (3, false)];

impl CouplingKind {
    pub const ALL: [CouplingKind; 3] = [
        CouplingKind::AxisShift1,
        CouplingKind::DiagShift,
        CouplingKind::AxisShift2,
    ];

    pub fn kernel(self) -> KernelKind {
        match self {
            CouplingKind::AxisShift1 => KernelKind::Lazy,
            CouplingKind::DiagShift => KernelKind::Strict,
            CouplingKind::AxisShift2 => KernelKind::Generalized,
        }
    }

    pub fn near_start(self) -> Site {
        Site::xy(0, 0)
    }

    pub fn far_start(self) -> Site {
        match self {
            CouplingKind::AxisShift1 => Site::xy(1, 0),
            CouplingKind::DiagShift => Site::xy(1, 1),
            CouplingKind::AxisShift2 => Site::xy(2, 0),
        }
    }

    pub fn mirror(self, s: Site) -> Site {
        match self {
            CouplingKind::AxisShift1 => reflect_phi(s),
            CouplingKind::DiagShift => reflect_upsilon(s),
            CouplingKind::AxisShift2 => reflect_psi(s),
        }
    }

    pub fn classify(self, s: &Site) -> HalfSpace {
        let (key, near_max, far_min) = match self {
            CouplingKind::AxisShift1 => (s.x(), 0, 1),
            CouplingKind::DiagShift => (s.x() + s.y(), 0, 2),
            CouplingKind::AxisShift2 => (s.x(), 0, 2),
        };
        if key <= near_max {
            HalfSpace::Near
        } else if key >= far_min {
            HalfSpace::Far
        } else {
            HalfSpace::Outside
        }
    }

    /// Near-side line whose pairs reproduce synthetically (`x = 0` or
    /// `x + y = 0`).
    pub fn on_synthetic_line(self, s: &Site) -> bool {
        match self {
            CouplingKind::AxisShift1 | CouplingKind::AxisShift2 => s.x() == 0,
            CouplingKind::DiagShift => s.x() + s.y() == 0,
        }
    }

    fn pairing(self, synthetic: bool) -> PairTable {
        match (self, synthetic) {
            (CouplingKind::AxisShift1, true) => AXIS1_SYNTHETIC,
            (CouplingKind::AxisShift1, false) => AXIS1_ANTITHETIC,
            (CouplingKind::DiagShift, true) => DIAG_SYNTHETIC,
            (CouplingKind::DiagShift, false) => DIAG_ANTITHETIC,
            (CouplingKind::AxisShift2, true) => AXIS2_SYNTHETIC,
            (CouplingKind::AxisShift2, false) => AXIS2_ANTITHETIC,
        }
    }

    /// Smallest box radius for which hitting comparisons are meaningful.
    pub fn min_radius(self) -> i32 {
        match self {
            CouplingKind::AxisShift1 => 1,
            CouplingKind::DiagShift | CouplingKind::AxisShift2 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CouplingKind::AxisShift1 => "axis-shift-1",
            CouplingKind::DiagShift => "diag-shift",
            CouplingKind::AxisShift2 => "axis-shift-2",
        }
    }
}

impl fmt::Display for CouplingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CouplingKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "axis-shift-1" | "axisshift1" => Ok(CouplingKind::AxisShift1),
            "diag-shift" | "diagshift" => Ok(CouplingKind::DiagShift),
            "axis-shift-2" | "axisshift2" => Ok(CouplingKind::AxisShift2),
            other => Err(format!("unknown coupling kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Invariant {
    Decomposition,
    SigmaEquality,
    AlphaSupport,
    AlphaMirror,
    HittingDecomposition,
    EvenDiagonal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvariantViolation {
    pub invariant: Invariant,
    pub kind: CouplingKind,
    pub t: u64,
    pub detail: String,
    pub dump: String,
}

impl fmt::Display for InvariantViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?} violated by {} coupling at t = {}: {}\n{}",
            self.invariant, self.kind, self.t, self.detail, self.dump
        )
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CouplingError {
    #[error("{0}")]
    Violation(Box<InvariantViolation>),
    #[error("population {population} exceeded the cap at t = {t}")]
    CapExceeded { population: u64, t: u64 },
    #[error(transparent)]
    Geometry(#[from] LatticeError),
    #[error("the {kind} coupling needs box radius >= {min}, got {n}")]
    RadiusTooSmall { kind: CouplingKind, min: i32, n: i32 },
    #[error("the {kind} coupling runs without parent survival, law has survival {survival}")]
    UnexpectedSurvival { kind: CouplingKind, survival: f64 },
    #[error("couplings are planar, box has dimension {0}")]
    NotPlanar(usize),
}

/// Joint state `(sigma0, alpha0, sigma1, alpha1)` of two coupled processes.
///
/// `placed0`/`placed1` record every particle each side produced in the last
/// generation regardless of its label; they are what the decomposition
/// invariant is checked against.
#[derive(Clone, PartialEq, Eq)]
pub struct CoupledState {
    pub kind: CouplingKind,
    pub t: u64,
    pub sigma0: ParticleField,
    pub alpha0: ParticleField,
    pub sigma1: ParticleField,
    pub alpha1: ParticleField,
    placed0: ParticleField,
    placed1: ParticleField,
}

impl CoupledState {
    /// Empty `sigma` parts, one `alpha` particle at each start.
    pub fn init(kind: CouplingKind) -> Self {
        let near = ParticleField::single(kind.near_start());
        let far = ParticleField::single(kind.far_start());
        CoupledState {
            kind,
            t: 0,
            sigma0: ParticleField::new(),
            alpha0: near.clone(),
            sigma1: ParticleField::new(),
            alpha1: far.clone(),
            placed0: near,
            placed1: far,
        }
    }

    /// `sigma + alpha` of side 0 (near start) or 1 (shifted start).
    pub fn marginal_of(&self, side: usize) -> ParticleField {
        match side {
            0 => self.sigma0.plus(&self.alpha0),
            1 => self.sigma1.plus(&self.alpha1),
            _ => panic!("side must be 0 or 1, got {side}"),
        }
    }

    pub fn population(&self, side: usize) -> u64 {
        match side {
            0 => self.sigma0.total() + self.alpha0.total(),
            _ => self.sigma1.total() + self.alpha1.total(),
        }
    }

    pub fn is_extinct(&self) -> bool {
        self.population(0) == 0 && self.population(1) == 0
    }

    fn violation(&self, invariant: Invariant, detail: String) -> CouplingError {
        CouplingError::Violation(Box::new(InvariantViolation {
            invariant,
            kind: self.kind,
            t: self.t,
            detail,
            dump: self.to_string(),
        }))
    }

    /// Checks the four structural invariants of the coupling.
    pub fn check_invariants(&self) -> Result<(), CouplingError> {
        for side in 0..2 {
            let placed = if side == 0 { &self.placed0 } else { &self.placed1 };
            if *placed != self.marginal_of(side) {
                return Err(self.violation(
                    Invariant::Decomposition,
                    format!("side {side}: produced particles differ from sigma + alpha"),
                ));
            }
        }
        if self.sigma0 != self.sigma1 {
            return Err(self.violation(Invariant::SigmaEquality, "sigma0 != sigma1".into()));
        }
        if let Some(s) = self
            .alpha0
            .sites()
            .find(|s| self.kind.classify(s) != HalfSpace::Near)
        {
            return Err(self.violation(
                Invariant::AlphaSupport,
                format!("alpha0 occupies {s} outside the near half"),
            ));
        }
        if let Some(s) = self
            .alpha1
            .sites()
            .find(|s| self.kind.classify(s) != HalfSpace::Far)
        {
            return Err(self.violation(
                Invariant::AlphaSupport,
                format!("alpha1 occupies {s} outside the far half"),
            ));
        }
        let kind = self.kind;
        if self.alpha0.mapped(|s| kind.mirror(s)) != self.alpha1 {
            return Err(self.violation(
                Invariant::AlphaMirror,
                "alpha1 is not the mirror image of alpha0".into(),
            ));
        }
        Ok(())
    }

    /// Probes `(x, y)` with `x >= 2`, `y >= 0` and `x + y` even at which the
    /// near process must carry only `sigma` particles, matched by the far
    /// process: `marginal0 = sigma0 = sigma1 <= marginal1`. Returns the
    /// offending sites (meaningful for `AxisShift2` at even times).
    pub fn even_diagonal_violations(&self) -> Vec<Site> {
        let m0 = self.marginal_of(0);
        let m1 = self.marginal_of(1);
        let mut probes: Vec<Site> = m0
            .sites()
            .chain(m1.sites())
            .copied()
            .filter(|s| s.x() >= 2 && s.y() >= 0 && (s.x() + s.y()) % 2 == 0)
            .collect();
        probes.sort();
        probes.dedup();
        probes
            .into_iter()
            .filter(|z| {
                let (c0, s0, s1, c1) = (m0.get(z), self.sigma0.get(z), self.sigma1.get(z), m1.get(z));
                !(c0 == s0 && s0 == s1 && s1 <= c1)
            })
            .collect()
    }
}

impl fmt::Debug for CoupledState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for CoupledState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "coupled state ({}, t = {})", self.kind, self.t)?;
        writeln!(f, "  sigma0 = {}", self.sigma0)?;
        writeln!(f, "  alpha0 = {}", self.alpha0)?;
        writeln!(f, "  sigma1 = {}", self.sigma1)?;
        write!(f, "  alpha1 = {}", self.alpha1)
    }
}

/// How often invariants are verified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckPolicy {
    EveryStep,
    /// Every k-th generation (k >= 1).
    Every(u64),
    Off,
}

impl CheckPolicy {
    fn due(self, t: u64) -> bool {
        match self {
            CheckPolicy::EveryStep => true,
            CheckPolicy::Every(k) => k <= 1 || t.is_multiple_of(k),
            CheckPolicy::Off => false,
        }
    }
}

/// A coupling kind together with the offspring law and run controls.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Coupling {
    pub kind: CouplingKind,
    pub law: OffspringLaw,
    pub sampling: Sampling,
    pub cap: u64,
    pub check: CheckPolicy,
}

/// Result of a free (unconfined) coupled run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FreeRun {
    pub steps: u64,
    pub extinct: bool,
    pub capped: bool,
    pub max_population: u64,
}

/// Paired hitting times of a confined coupled run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CoupledHitting {
    pub near: HittingTimes,
    pub far: HittingTimes,
    pub censored: Option<Censor>,
    pub steps: u64,
    pub max_population: u64,
}

impl CoupledHitting {
    /// Pathwise ordering `tau_far <= tau_near` (vacuous when `tau_near` was
    /// not observed).
    pub fn ordered(&self) -> bool {
        match self.near.tau {
            HitTime::At(_) => self.far.tau <= self.near.tau,
            HitTime::Beyond => true,
        }
    }
}

impl Coupling {
    pub fn new(kind: CouplingKind, law: OffspringLaw) -> Result<Self, CouplingError> {
        if kind != CouplingKind::AxisShift2 && law.survival() != 0.0 {
            return Err(CouplingError::UnexpectedSurvival {
                kind,
                survival: law.survival(),
            });
        }
        Ok(Coupling {
            kind,
            law,
            sampling: Sampling::default(),
            cap: DEFAULT_CAP,
            check: CheckPolicy::EveryStep,
        })
    }

    pub fn with_sampling(mut self, sampling: Sampling) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn with_cap(mut self, cap: u64) -> Self {
        self.cap = cap;
        self
    }

    pub fn with_check(mut self, check: CheckPolicy) -> Self {
        self.check = check;
        self
    }

    pub fn init(&self) -> CoupledState {
        CoupledState::init(self.kind)
    }

    /// One synchronised generation of both processes.
    pub fn coupled_step<R: Rng + ?Sized>(
        &self,
        state: &CoupledState,
        rng: &mut R,
    ) -> Result<CoupledState, CouplingError> {
        let kind = self.kind;
        let kernel = kind.kernel();
        let k = kernel.move_count(2);
        let mut next = CoupledState {
            kind,
            t: state.t + 1,
            sigma0: ParticleField::new(),
            alpha0: ParticleField::new(),
            sigma1: ParticleField::new(),
            alpha1: ParticleField::new(),
            placed0: ParticleField::new(),
            placed1: ParticleField::new(),
        };
        let track = self.check.due(next.t);

        // sigma pairs share every draw
        for (z, count) in state.sigma0.iter() {
            if state.sigma1.get(&z) != count {
                return Err(state.violation(
                    Invariant::SigmaEquality,
                    format!("no sigma1 partner for sigma0 particles at {z}"),
                ));
            }
            let brood = draw_brood(&self.law, kernel, k, self.sampling, count, rng);
            for (m, &c) in brood.moves[..k].iter().enumerate() {
                let child = neighbor(&z, kernel, m);
                next.sigma0.add(child, c);
                next.sigma1.add(child, c);
                if track {
                    next.placed0.add(child, c);
                    next.placed1.add(child, c);
                }
            }
            next.sigma0.add(z, brood.survivors);
            next.sigma1.add(z, brood.survivors);
            if track {
                next.placed0.add(z, brood.survivors);
                next.placed1.add(z, brood.survivors);
            }
        }
        if state.sigma1.total() != state.sigma0.total() {
            return Err(state.violation(
                Invariant::SigmaEquality,
                "unpaired sigma1 particles".into(),
            ));
        }

        // alpha pairs: mirror-paired parents, shared counts, paired moves
        for (z, count) in state.alpha0.iter() {
            let w = kind.mirror(z);
            if state.alpha1.get(&w) != count {
                return Err(state.violation(
                    Invariant::AlphaMirror,
                    format!("alpha0 at {z} has no mirror partner at {w}"),
                ));
            }
            let table = kind.pairing(kind.on_synthetic_line(&z));
            let brood = draw_brood(&self.law, kernel, k, self.sampling, count, rng);
            for (m, &c) in brood.moves[..k].iter().enumerate() {
                if c == 0 {
                    continue;
                }
                let (partner, relabel) = table[m];
                let c0 = neighbor(&z, kernel, m);
                let c1 = neighbor(&w, kernel, partner);
                if relabel {
                    next.sigma0.add(c0, c);
                    next.sigma1.add(c1, c);
                } else {
                    next.alpha0.add(c0, c);
                    next.alpha1.add(c1, c);
                }
                if track {
                    next.placed0.add(c0, c);
                    next.placed1.add(c1, c);
                }
            }
            next.alpha0.add(z, brood.survivors);
            next.alpha1.add(w, brood.survivors);
            if track {
                next.placed0.add(z, brood.survivors);
                next.placed1.add(w, brood.survivors);
            }
        }
        if state.alpha1.total() != state.alpha0.total() {
            return Err(state.violation(
                Invariant::AlphaMirror,
                "unpaired alpha1 particles".into(),
            ));
        }

        let population = next.population(0).max(next.population(1));
        if population > self.cap {
            return Err(CouplingError::CapExceeded {
                population,
                t: next.t,
            });
        }
        if track {
            next.check_invariants()?;
        } else {
            next.placed0 = next.marginal_of(0);
            next.placed1 = next.marginal_of(1);
        }
        Ok(next)
    }

    /// Unconfined evolution for up to `steps` generations; `observe` sees the
    /// initial state and every subsequent one. Stops early on extinction of
    /// both processes or when the cap is hit (reported, not an error).
    pub fn run_free<R, F>(&self, steps: u64, rng: &mut R, mut observe: F) -> Result<FreeRun, CouplingError>
    where
        R: Rng + ?Sized,
        F: FnMut(&CoupledState) -> Result<(), CouplingError>,
    {
        let mut state = self.init();
        state.check_invariants()?;
        observe(&state)?;
        let mut run = FreeRun {
            steps: 0,
            extinct: false,
            capped: false,
            max_population: 1,
        };
        while run.steps < steps {
            if state.is_extinct() {
                run.extinct = true;
                break;
            }
            state = match self.coupled_step(&state, rng) {
                Ok(s) => s,
                Err(CouplingError::CapExceeded { .. }) => {
                    run.capped = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            run.steps = state.t;
            run.max_population = run
                .max_population
                .max(state.population(0))
                .max(state.population(1));
            observe(&state)?;
        }
        if state.is_extinct() {
            run.extinct = true;
        }
        Ok(run)
    }

    /// Runs the coupling until both processes have put a particle on the
    /// boundary of `geom` (or both died out, or horizon/cap), recording the
    /// hitting time of each process and its decomposition into the shared
    /// `S`, far-side `T` and top/bottom `U` components.
    pub fn run_coupled_hitting<R: Rng + ?Sized>(
        &self,
        geom: &BoxGeometry,
        horizon: u64,
        rng: &mut R,
    ) -> Result<CoupledHitting, CouplingError> {
        if geom.d != 2 {
            return Err(CouplingError::NotPlanar(geom.d));
        }
        if geom.n < self.kind.min_radius() {
            return Err(CouplingError::RadiusTooSmall {
                kind: self.kind,
                min: self.kind.min_radius(),
                n: geom.n,
            });
        }
        let mut rec = HitRecorder::new(self.kind, geom.n);
        let mut state = self.init();
        state.check_invariants()?;
        rec.observe(&state);
        let mut censored = None;
        let mut max_population = 1;
        let mut capped_population = None;
        loop {
            if rec.near.tau.is_observed() && rec.far.tau.is_observed() {
                break;
            }
            if state.is_extinct() {
                break;
            }
            if state.t >= horizon {
                censored = Some(Censor::Horizon);
                break;
            }
            state = match self.coupled_step(&state, rng) {
                Ok(s) => s,
                Err(CouplingError::CapExceeded { population, .. }) => {
                    censored = Some(Censor::Cap);
                    capped_population = Some(population);
                    break;
                }
                Err(e) => return Err(e),
            };
            max_population = max_population
                .max(state.population(0))
                .max(state.population(1));
            rec.observe(&state);
        }
        let out = rec.finish(&state, censored, capped_population, max_population);
        for (side, times) in [(0, &out.near), (1, &out.far)] {
            let components = [times.s, times.t, times.u]
                .into_iter()
                .flatten()
                .min()
                .unwrap_or(HitTime::Beyond);
            if components != times.tau {
                return Err(state.violation(
                    Invariant::HittingDecomposition,
                    format!(
                        "side {side}: tau = {} but min(S, T, U) = {components}",
                        times.tau
                    ),
                ));
            }
        }
        if out.near.s != out.far.s {
            return Err(state.violation(
                Invariant::HittingDecomposition,
                "shared component S differs between the two processes".into(),
            ));
        }
        Ok(out)
    }
}

/// First-passage bookkeeping for `run_coupled_hitting`.
struct HitRecorder {
    kind: CouplingKind,
    n: i32,
    near: Components,
    far: Components,
}

#[derive(Clone, Copy)]
struct Components {
    tau: HitTime,
    s: HitTime,
    t: HitTime,
    u: HitTime,
}

impl Components {
    fn new() -> Self {
        Components {
            tau: HitTime::Beyond,
            s: HitTime::Beyond,
            t: HitTime::Beyond,
            u: HitTime::Beyond,
        }
    }
}

impl HitRecorder {
    fn new(kind: CouplingKind, n: i32) -> Self {
        HitRecorder {
            kind,
            n,
            near: Components::new(),
            far: Components::new(),
        }
    }

    fn observe(&mut self, state: &CoupledState) {
        let n = self.n;
        let t = state.t;
        let on_boundary = |s: &Site| s.sup_norm() >= n;
        let in_box = |c: i32| c.abs() <= n;
        for (side, comp) in [(0usize, &mut self.near), (1, &mut self.far)] {
            let (sigma, alpha) = if side == 0 {
                (&state.sigma0, &state.alpha0)
            } else {
                (&state.sigma1, &state.alpha1)
            };
            let sigma_hit = sigma.sites().any(on_boundary);
            comp.s.record(t, sigma_hit);
            comp.tau.record(t, sigma_hit || alpha.sites().any(on_boundary));
            match self.kind {
                CouplingKind::AxisShift1 | CouplingKind::AxisShift2 => {
                    let wall = if side == 0 { -n } else { n };
                    comp.t
                        .record(t, alpha.sites().any(|s| s.x() == wall && in_box(s.y())));
                    comp.u
                        .record(t, alpha.sites().any(|s| s.y().abs() == n && in_box(s.x())));
                }
                CouplingKind::DiagShift => {
                    // near: South and West sides; far: North and East sides
                    let wall = if side == 0 { -n } else { n };
                    comp.t.record(
                        t,
                        alpha.sites().any(|s| {
                            (s.y() == wall && in_box(s.x())) || (s.x() == wall && in_box(s.y()))
                        }),
                    );
                }
            }
        }
    }

    fn finish(
        &self,
        state: &CoupledState,
        censored: Option<Censor>,
        capped_population: Option<u64>,
        max_population: u64,
    ) -> CoupledHitting {
        let with_u = self.kind != CouplingKind::DiagShift;
        let side = |c: &Components, idx: usize| HittingTimes {
            tau: c.tau,
            s: Some(c.s),
            t: Some(c.t),
            u: with_u.then_some(c.u),
            censored: if c.tau.is_observed() { None } else { censored },
            started_on_boundary: false,
            final_population: capped_population.unwrap_or_else(|| state.population(idx)),
        };
        CoupledHitting {
            near: side(&self.near, 0),
            far: side(&self.far, 1),
            censored,
            steps: state.t,
            max_population: max_population.max(capped_population.unwrap_or(0)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::KernelKind;
    use crate::rng::replica_rng;

    fn law_b() -> OffspringLaw {
        OffspringLaw::from_probs(&[0.5, 0.0, 0.5]).unwrap()
    }

    fn variants() -> Vec<Coupling> {
        vec![
            Coupling::new(CouplingKind::AxisShift1, law_b()).unwrap(),
            Coupling::new(CouplingKind::DiagShift, law_b()).unwrap(),
            Coupling::new(CouplingKind::AxisShift2, law_b()).unwrap(),
            Coupling::new(CouplingKind::AxisShift2, law_b().with_survival(0.3).unwrap()).unwrap(),
        ]
    }

    /// Near-side parents on the synthetic line and strictly inside the half.
    fn parents(kind: CouplingKind) -> (Vec<Site>, Vec<Site>) {
        let ys = -3..=3;
        match kind {
            CouplingKind::AxisShift1 | CouplingKind::AxisShift2 => (
                ys.clone().map(|y| Site::xy(0, y)).collect(),
                ys.flat_map(|y| (-4..=-1).map(move |x| Site::xy(x, y))).collect(),
            ),
            CouplingKind::DiagShift => (
                ys.clone().map(|y| Site::xy(-y, y)).collect(),
                ys.flat_map(|y| (-6..=-2).map(move |k| Site::xy(k - y, y))).collect(),
            ),
        }
    }

    #[test]
    fn pairing_tables_are_bijections_matching_sites_or_mirrors() {
        for kind in CouplingKind::ALL {
            let kernel = kind.kernel();
            let k = kernel.move_count(2);
            let (line, inner) = parents(kind);
            for (synthetic, sites) in [(true, line), (false, inner)] {
                let table = kind.pairing(synthetic);
                assert_eq!(table.len(), k);
                let mut partners: Vec<usize> = table.iter().map(|p| p.0).collect();
                partners.sort();
                assert_eq!(partners, (0..k).collect::<Vec<_>>(), "{kind} synthetic={synthetic}");
                for z in sites {
                    assert_eq!(kind.on_synthetic_line(&z), synthetic);
                    let w = kind.mirror(z);
                    for (m, &(p, relabel)) in table.iter().enumerate() {
                        let c0 = neighbor(&z, kernel, m);
                        let c1 = neighbor(&w, kernel, p);
                        if relabel {
                            assert_eq!(c0, c1, "{kind} {z} move {m}");
                        } else {
                            assert_eq!(c1, kind.mirror(c0), "{kind} {z} move {m}");
                            assert_eq!(kind.classify(&c0), HalfSpace::Near, "{kind} {z} move {m}");
                        }
                    }
                }
            }
            assert!(!kind.pairing(false).iter().any(|p| p.1));
        }
    }

    #[test]
    fn init_states() {
        let s = CoupledState::init(CouplingKind::AxisShift1);
        assert_eq!(s.alpha1, ParticleField::single(Site::xy(1, 0)));
        assert_eq!(s.marginal_of(1), ParticleField::single(Site::xy(1, 0)));
        let s = CoupledState::init(CouplingKind::DiagShift);
        assert_eq!(s.alpha1, ParticleField::single(Site::xy(1, 1)));
        let s = CoupledState::init(CouplingKind::AxisShift2);
        assert_eq!(s.alpha1, ParticleField::single(Site::xy(2, 0)));
        for kind in CouplingKind::ALL {
            let s = CoupledState::init(kind);
            assert!(s.sigma0.is_empty() && s.sigma1.is_empty());
            assert_eq!(s.alpha0, ParticleField::single(Site::xy(0, 0)));
            s.check_invariants().unwrap();
        }
    }

    #[test]
    fn kinds_fix_their_kernels_and_survival_rules() {
        assert_eq!(CouplingKind::AxisShift1.kernel(), KernelKind::Lazy);
        assert_eq!(CouplingKind::DiagShift.kernel(), KernelKind::Strict);
        assert_eq!(CouplingKind::AxisShift2.kernel(), KernelKind::Generalized);
        assert!(Coupling::new(CouplingKind::DiagShift, law_b().with_survival(0.2).unwrap()).is_err());
        assert_eq!("diag-shift".parse::<CouplingKind>().unwrap(), CouplingKind::DiagShift);
        assert!("mirror".parse::<CouplingKind>().is_err());
    }

    /// Single alpha pair, one child, forced move.
    fn one_child_step(kind: CouplingKind, near_move: usize) -> CoupledState {
        let c = Coupling::new(kind, OffspringLaw::point_mass(1)).unwrap();
        // find a seed whose single child takes `near_move`
        for seed in 0..10_000 {
            let mut rng = replica_rng(seed, 0);
            let next = c.coupled_step(&c.init(), &mut rng).unwrap();
            let want = neighbor(&Site::xy(0, 0), kind.kernel(), near_move);
            if next.marginal_of(0).get(&want) == 1 {
                return next;
            }
        }
        panic!("no seed produced move {near_move}");
    }

    #[test]
    fn east_child_on_axis_shift_1_is_relabelled_on_both_sides() {
        let s = one_child_step(CouplingKind::AxisShift1, 1);
        assert_eq!(s.sigma0, ParticleField::single(Site::xy(1, 0)));
        assert_eq!(s.sigma1, ParticleField::single(Site::xy(1, 0)));
        assert!(s.alpha0.is_empty() && s.alpha1.is_empty());
    }

    #[test]
    fn stay_child_on_axis_shift_1_is_relabelled_at_origin() {
        let s = one_child_step(CouplingKind::AxisShift1, 0);
        assert_eq!(s.sigma0, ParticleField::single(Site::xy(0, 0)));
        assert_eq!(s.sigma1, s.sigma0);
    }

    #[test]
    fn north_child_on_diag_shift_is_relabelled() {
        let s = one_child_step(CouplingKind::DiagShift, 2);
        assert_eq!(s.sigma0, ParticleField::single(Site::xy(0, 1)));
        assert_eq!(s.sigma1, s.sigma0);
        assert!(s.alpha0.is_empty());
    }

    #[test]
    fn west_child_on_diag_shift_stays_mirrored() {
        let s = one_child_step(CouplingKind::DiagShift, 1);
        assert_eq!(s.alpha0, ParticleField::single(Site::xy(-1, 0)));
        assert_eq!(s.alpha1, ParticleField::single(Site::xy(1, 2)));
    }

    #[test]
    fn invariants_hold_over_seeded_runs() {
        for sampling in [Sampling::PerParticle, Sampling::Aggregated] {
            for c in variants() {
                let c = c.with_sampling(sampling).with_cap(100_000);
                for rep in 0..200 {
                    let mut rng = replica_rng(17, rep);
                    c.run_free(20, &mut rng, |_| Ok(())).unwrap();
                }
            }
        }
    }

    #[test]
    fn corrupted_states_are_rejected() {
        let mut s = CoupledState::init(CouplingKind::AxisShift1);
        s.sigma0.add(Site::xy(3, 3), 1);
        s.placed0.add(Site::xy(3, 3), 1);
        let err = s.check_invariants().unwrap_err();
        assert!(matches!(err, CouplingError::Violation(ref v) if v.invariant == Invariant::SigmaEquality));
        assert!(err.to_string().contains("sigma0 = {(3,3):1}"));

        let mut s = CoupledState::init(CouplingKind::DiagShift);
        s.alpha0 = ParticleField::single(Site::xy(1, 0));
        s.placed0 = s.alpha0.clone();
        let err = s.check_invariants().unwrap_err();
        assert!(matches!(err, CouplingError::Violation(ref v) if v.invariant == Invariant::AlphaSupport));

        let mut s = CoupledState::init(CouplingKind::AxisShift2);
        s.alpha1 = ParticleField::single(Site::xy(3, 0));
        s.placed1 = s.alpha1.clone();
        let err = s.check_invariants().unwrap_err();
        assert!(matches!(err, CouplingError::Violation(ref v) if v.invariant == Invariant::AlphaMirror));

        let mut s = CoupledState::init(CouplingKind::AxisShift2);
        s.placed1 = ParticleField::new();
        let err = s.check_invariants().unwrap_err();
        assert!(matches!(err, CouplingError::Violation(ref v) if v.invariant == Invariant::Decomposition));

        // stepping a broken state fails on pairing
        let mut s = CoupledState::init(CouplingKind::AxisShift1);
        s.alpha1 = ParticleField::single(Site::xy(2, 0));
        let c = Coupling::new(CouplingKind::AxisShift1, law_b()).unwrap();
        let mut rng = replica_rng(0, 0);
        assert!(matches!(c.coupled_step(&s, &mut rng), Err(CouplingError::Violation(_))));
    }

    #[test]
    fn marginal_totals_add_up() {
        let c = Coupling::new(CouplingKind::AxisShift1, law_b()).unwrap();
        let mut rng = replica_rng(2, 0);
        let mut s = c.init();
        for _ in 0..10 {
            s = c.coupled_step(&s, &mut rng).unwrap();
            for side in 0..2 {
                assert_eq!(s.marginal_of(side).total(), s.population(side));
            }
            assert_eq!(s.marginal_of(0).total(), s.sigma0.total() + s.alpha0.total());
        }
    }

    #[test]
    fn hitting_order_and_shared_component() {
        for c in variants() {
            let g = BoxGeometry::new(2, 3).unwrap();
            for rep in 0..500 {
                let mut rng = replica_rng(23, rep);
                let h = c.run_coupled_hitting(&g, 90, &mut rng).unwrap();
                assert!(h.ordered(), "{} {:?}", c.kind, h);
                assert_eq!(h.near.s, h.far.s);
                assert_eq!(h.near.u.is_some(), c.kind != CouplingKind::DiagShift);
            }
        }
    }

    #[test]
    fn extinct_law_never_hits() {
        for kind in CouplingKind::ALL {
            let c = Coupling::new(kind, OffspringLaw::point_mass(0)).unwrap();
            let g = BoxGeometry::new(2, 3).unwrap();
            let mut rng = replica_rng(0, 0);
            let h = c.run_coupled_hitting(&g, 90, &mut rng).unwrap();
            assert_eq!(h.near.tau, HitTime::Beyond);
            assert_eq!(h.far.tau, HitTime::Beyond);
            assert_eq!(h.censored, None);
        }
    }

    #[test]
    fn radius_and_dimension_checks() {
        let c = Coupling::new(CouplingKind::DiagShift, law_b()).unwrap();
        let mut rng = replica_rng(0, 0);
        assert!(matches!(
            c.run_coupled_hitting(&BoxGeometry::new(2, 1).unwrap(), 10, &mut rng),
            Err(CouplingError::RadiusTooSmall { .. })
        ));
        assert!(matches!(
            c.run_coupled_hitting(&BoxGeometry::new(3, 3).unwrap(), 10, &mut rng),
            Err(CouplingError::NotPlanar(3))
        ));
    }

    #[test]
    fn even_diagonal_ordering_on_generalized_paths() {
        let c = Coupling::new(CouplingKind::AxisShift2, law_b().with_survival(0.3).unwrap()).unwrap();
        for rep in 0..300 {
            let mut rng = replica_rng(31, rep);
            c.run_free(12, &mut rng, |s| {
                if s.t % 2 == 0 {
                    assert!(s.even_diagonal_violations().is_empty(), "{s}");
                }
                Ok(())
            })
            .unwrap();
        }
    }

    #[test]
    fn sampled_checking_still_pairs() {
        let c = Coupling::new(CouplingKind::DiagShift, law_b())
            .unwrap()
            .with_check(CheckPolicy::Every(5));
        let mut rng = replica_rng(8, 0);
        c.run_free(30, &mut rng, |_| Ok(())).unwrap();
        let c = c.with_check(CheckPolicy::Off);
        c.run_free(30, &mut rng, |_| Ok(())).unwrap();
    }
}

//! Deterministic ground truth: escape probabilities and hitting-time CDFs by
//! monotone generating-function iteration on a box, and mean fields of the
//! discrete and continuous-time walks.
//!
//! With `g_t(x) = P(tau^x > t)` and `f` the offspring pgf, independence of
//! the offspring subtrees gives
//!
//! ```text
//! g_0 = 1 inside, g = 0 on the boundary,
//! g_{t+1}(x) = f( mean of g_t over the kernel destinations of x ).
//! ```
//!
//! The iterates decrease to `q(x) = P(tau^x = inf)`.

use serde::Serialize;
use thiserror::Error;

use crate::lattice::{leq_partial, neighbor, BoxGeometry, KernelKind, LatticeError, Site};
use crate::offspring::OffspringLaw;

pub const DEFAULT_EPS: f64 = 1e-12;
pub const DEFAULT_MAX_ITER: u64 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error(transparent)]
    Geometry(#[from] LatticeError),
    #[error("the hitting recursion needs a kernel without parent survival")]
    SurvivalKernel,
    #[error("no convergence after {iterations} sweeps (residual {residual:e})")]
    NotConverged { iterations: u64, residual: f64 },
    #[error("iteration increased at {site} in sweep {sweep}: {before} -> {after}")]
    NotMonotone { site: Site, sweep: u64, before: f64, after: f64 },
    #[error("window radius {radius} cannot hold {steps} steps from {start}")]
    TruncationTooSmall { radius: i32, steps: u64, start: Site },
    #[error("rate must be positive and finite, got {0}")]
    InvalidRate(f64),
    #[error("time must be non-negative and finite, got {0}")]
    InvalidTime(f64),
    #[error("step {dt} is outside the stable range (0, {max}]")]
    UnstableStep { dt: f64, max: f64 },
    #[error("the identity checks are planar with the strict kernel")]
    NotPlanar,
}

/// Real values on every site of a box, stored in lexicographic site order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalarGrid {
    pub geom: BoxGeometry,
    pub values: Vec<f64>,
}

impl ScalarGrid {
    pub fn filled(geom: BoxGeometry, v: f64) -> Self {
        ScalarGrid {
            geom,
            values: vec![v; geom.volume()],
        }
    }

    /// Position of `s` in `values`; `None` outside the box.
    pub fn index(&self, s: &Site) -> Option<usize> {
        site_index(&self.geom, s)
    }

    pub fn get(&self, s: &Site) -> Option<f64> {
        self.index(s).map(|i| self.values[i])
    }

    /// `(site, value)` pairs in lexicographic order.
    pub fn iter(&self) -> impl Iterator<Item = (Site, f64)> + '_ {
        self.geom.sites().zip(self.values.iter().copied())
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

fn site_index(geom: &BoxGeometry, s: &Site) -> Option<usize> {
    if s.dim() != geom.d || s.sup_norm() > geom.n {
        return None;
    }
    let side = (2 * geom.n + 1) as usize;
    Some(
        s.coords()
            .iter()
            .fold(0, |acc, &c| acc * side + (c + geom.n) as usize),
    )
}

/// Interior sites with their destination indices; boundary sites are absent.
struct Stencil {
    interior: Vec<(usize, Site, Vec<usize>)>,
    volume: usize,
}

impl Stencil {
    fn new(geom: &BoxGeometry, kind: KernelKind) -> Self {
        let k = kind.move_count(geom.d);
        let interior = geom
            .sites()
            .enumerate()
            .filter(|(_, s)| s.sup_norm() < geom.n)
            .map(|(i, s)| {
                let nb = (0..k)
                    .map(|m| site_index(geom, &neighbor(&s, kind, m)).expect("interior neighbour in box"))
                    .collect();
                (i, s, nb)
            })
            .collect();
        Stencil {
            interior,
            volume: geom.volume(),
        }
    }

    fn initial(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.volume];
        for (i, _, _) in &self.interior {
            g[*i] = 1.0;
        }
        g
    }

    /// One sweep `next = f(avg g)`; returns the sup-norm change and fails if
    /// any value increased.
    fn sweep(&self, law: &OffspringLaw, g: &[f64], next: &mut [f64], sweep: u64) -> Result<f64, OracleError> {
        let mut change: f64 = 0.0;
        for (i, site, nb) in &self.interior {
            let avg = nb.iter().map(|&j| g[j]).sum::<f64>() / nb.len() as f64;
            // laws are normalized to 1e-12 only, so f(1) may round above 1
            let v = law.eval_pgf(avg).min(1.0);
            if v > g[*i] {
                return Err(OracleError::NotMonotone {
                    site: *site,
                    sweep,
                    before: g[*i],
                    after: v,
                });
            }
            change = change.max(g[*i] - v);
            next[*i] = v;
        }
        Ok(change)
    }
}

fn check_hitting_inputs(geom: &BoxGeometry, kind: KernelKind, law: &OffspringLaw) -> Result<(), OracleError> {
    if kind == KernelKind::Generalized || law.survival() != 0.0 {
        return Err(OracleError::SurvivalKernel);
    }
    BoxGeometry::new(geom.d, geom.n)?;
    Ok(())
}

/// Converged escape probabilities `p = 1 - q` with the iteration record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EscapeGrid {
    pub p: ScalarGrid,
    pub q: ScalarGrid,
    pub iterations: u64,
    pub residual: f64,
}

/// Iterates until the sup-norm change drops below `eps`.
pub fn escape_probability_grid(
    geom: &BoxGeometry,
    kind: KernelKind,
    law: &OffspringLaw,
    eps: f64,
    max_iter: u64,
) -> Result<EscapeGrid, OracleError> {
    check_hitting_inputs(geom, kind, law)?;
    let stencil = Stencil::new(geom, kind);
    let mut g = stencil.initial();
    let mut next = g.clone();
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        residual = stencil.sweep(law, &g, &mut next, iterations)?;
        std::mem::swap(&mut g, &mut next);
        if residual < eps {
            break;
        }
    }
    if residual >= eps {
        return Err(OracleError::NotConverged { iterations, residual });
    }
    let q = ScalarGrid { geom: *geom, values: g };
    let p = ScalarGrid {
        geom: *geom,
        values: q.values.iter().map(|v| 1.0 - v).collect(),
    };
    Ok(EscapeGrid { p, q, iterations, residual })
}

/// `P(tau^x <= t)` for every site and `t = 0..=t_max`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CdfGrid {
    pub geom: BoxGeometry,
    pub t_max: u64,
    /// `layers[t].values[i]` is the CDF of site `i` at time `t`.
    pub layers: Vec<ScalarGrid>,
}

impl CdfGrid {
    pub fn cdf(&self, s: &Site, t: u64) -> Option<f64> {
        self.layers.get(t as usize)?.get(s)
    }
}

pub fn hitting_cdf_grid(
    geom: &BoxGeometry,
    kind: KernelKind,
    law: &OffspringLaw,
    t_max: u64,
) -> Result<CdfGrid, OracleError> {
    check_hitting_inputs(geom, kind, law)?;
    let stencil = Stencil::new(geom, kind);
    let mut g = stencil.initial();
    let mut next = g.clone();
    let to_cdf = |g: &[f64]| ScalarGrid {
        geom: *geom,
        values: g.iter().map(|v| 1.0 - v).collect(),
    };
    let mut layers = vec![to_cdf(&g)];
    for t in 1..=t_max {
        stencil.sweep(law, &g, &mut next, t)?;
        std::mem::swap(&mut g, &mut next);
        layers.push(to_cdf(&g));
    }
    Ok(CdfGrid {
        geom: *geom,
        t_max,
        layers,
    })
}

/// Interior sites of the box with all coordinates non-negative.
pub fn positive_orthant_interior(geom: &BoxGeometry) -> Vec<Site> {
    geom.interior_sites()
        .filter(|s| s.coords().iter().all(|&c| c >= 0))
        .collect()
}

/// A comparable pair `x <= y` where the ordering claim fails by more than
/// the tolerance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderViolation {
    pub x: Site,
    pub y: Site,
    pub value_x: f64,
    pub value_y: f64,
    /// Time index for CDF audits.
    pub t: Option<u64>,
}

/// Audit of `grid(x) <= grid(y) + tol` over all comparable interior pairs of
/// the positive orthant. Returns the number of pairs checked and the failures.
pub fn audit_increasing(grid: &ScalarGrid, tol: f64) -> (usize, Vec<OrderViolation>) {
    let sites = positive_orthant_interior(&grid.geom);
    let mut checked = 0;
    let mut bad = Vec::new();
    for x in &sites {
        for y in &sites {
            if x == y || !leq_partial(x, y).unwrap_or(false) {
                continue;
            }
            checked += 1;
            let (vx, vy) = (grid.get(x).unwrap_or(0.0), grid.get(y).unwrap_or(0.0));
            if vx > vy + tol {
                bad.push(OrderViolation {
                    x: *x,
                    y: *y,
                    value_x: vx,
                    value_y: vy,
                    t: None,
                });
            }
        }
    }
    (checked, bad)
}

/// Audit of `P(tau^y <= t) >= P(tau^x <= t) - tol` for all `t` and all
/// comparable interior pairs `x <= y` of the positive orthant.
pub fn audit_cdf_dominance(cdf: &CdfGrid, tol: f64) -> (usize, Vec<OrderViolation>) {
    let sites = positive_orthant_interior(&cdf.geom);
    let mut checked = 0;
    let mut bad = Vec::new();
    for x in &sites {
        for y in &sites {
            if x == y || !leq_partial(x, y).unwrap_or(false) {
                continue;
            }
            checked += 1;
            if let Some(v) = cdf_pair_violation(cdf, x, y, tol) {
                bad.push(v);
            }
        }
    }
    (checked, bad)
}

/// First `t` at which `P(tau^y <= t) < P(tau^x <= t) - tol`, if any.
pub fn cdf_pair_violation(cdf: &CdfGrid, x: &Site, y: &Site, tol: f64) -> Option<OrderViolation> {
    let (ix, iy) = (cdf.layers[0].index(x)?, cdf.layers[0].index(y)?);
    cdf.layers.iter().enumerate().find_map(|(t, layer)| {
        let (vx, vy) = (layer.values[ix], layer.values[iy]);
        (vy < vx - tol).then_some(OrderViolation {
            x: *x,
            y: *y,
            value_x: vx,
            value_y: vy,
            t: Some(t as u64),
        })
    })
}

/// Mean occupation `m_t(y) = E[count at y after t generations]` on a window
/// of radius `radius` around the origin.
pub fn expected_counts_discrete(
    start: &Site,
    kind: KernelKind,
    law: &OffspringLaw,
    t: u64,
    radius: i32,
) -> Result<ScalarGrid, OracleError> {
    let geom = BoxGeometry::new(start.dim(), radius)?;
    if i64::from(start.sup_norm()) + t as i64 > i64::from(radius) {
        return Err(OracleError::TruncationTooSmall {
            radius,
            steps: t,
            start: *start,
        });
    }
    let k = kind.move_count(geom.d);
    let share = law.mean() / k as f64;
    let survival = if kind == KernelKind::Generalized {
        law.survival()
    } else {
        0.0
    };
    let sites: Vec<Site> = geom.sites().collect();
    let mut m = ScalarGrid::filled(geom, 0.0);
    let i0 = m.index(start).expect("start inside window");
    m.values[i0] = 1.0;
    for _ in 0..t {
        let mut next = vec![0.0; m.values.len()];
        for (i, s) in sites.iter().enumerate() {
            let v = m.values[i];
            if v == 0.0 {
                continue;
            }
            for mv in 0..k {
                let j = site_index(&geom, &neighbor(s, kind, mv)).expect("window holds all steps");
                next[j] += share * v;
            }
            next[i] += survival * v;
        }
        m.values = next;
    }
    Ok(m)
}

/// Continuous-time mean field with its numerical error record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CtCounts {
    pub m: ScalarGrid,
    pub dt: f64,
    pub steps: u64,
    /// Sup-norm difference between the `dt` and `dt / 2` solutions.
    pub error_estimate: f64,
    pub total_mass: f64,
    /// `exp((2 d lambda - 1) t)`.
    pub exact_total_mass: f64,
}

/// Default step `min(0.01, 0.1 / (1 + 2 d lambda))`.
pub fn default_ct_step(d: usize, lambda: f64) -> f64 {
    0.01f64.min(0.1 / (1.0 + 2.0 * d as f64 * lambda))
}

/// Integrates `dm(x)/dt = -m(x) + lambda * sum_{|y-x|=1} m(y)` with classical
/// RK4 on the window of radius `radius` (zero outside), from `m_0 = 1_start`.
pub fn expected_counts_ct(
    start: &Site,
    lambda: f64,
    t: f64,
    radius: i32,
    dt: Option<f64>,
) -> Result<CtCounts, OracleError> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(OracleError::InvalidRate(lambda));
    }
    if !(t >= 0.0) || !t.is_finite() {
        return Err(OracleError::InvalidTime(t));
    }
    let geom = BoxGeometry::new(start.dim(), radius)?;
    if start.sup_norm() >= radius {
        return Err(OracleError::TruncationTooSmall {
            radius,
            steps: 0,
            start: *start,
        });
    }
    let d = geom.d;
    let spectral = 1.0 + 2.0 * d as f64 * lambda;
    // RK4 is stable on the real axis up to |h * eigenvalue| ~ 2.78
    let max_dt = 2.5 / spectral;
    let dt = dt.unwrap_or_else(|| default_ct_step(d, lambda));
    if !(dt > 0.0) || dt > max_dt {
        return Err(OracleError::UnstableStep { dt, max: max_dt });
    }
    let steps = if t == 0.0 { 0 } else { (t / dt).ceil() as u64 };
    let stencil: Vec<Vec<usize>> = geom
        .sites()
        .map(|s| {
            (0..2 * d)
                .filter_map(|mv| site_index(&geom, &neighbor(&s, KernelKind::Strict, mv)))
                .collect()
        })
        .collect();
    let mut init = vec![0.0; geom.volume()];
    init[site_index(&geom, start).expect("start inside window")] = 1.0;

    let coarse = rk4(&stencil, lambda, &init, t, steps);
    let fine = rk4(&stencil, lambda, &init, t, 2 * steps);
    let error_estimate = coarse
        .iter()
        .zip(&fine)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let total_mass = coarse.iter().sum();
    Ok(CtCounts {
        m: ScalarGrid { geom, values: coarse },
        dt: if steps == 0 { 0.0 } else { t / steps as f64 },
        steps,
        error_estimate,
        total_mass,
        exact_total_mass: ((spectral - 2.0) * t).exp(),
    })
}

fn rk4(stencil: &[Vec<usize>], lambda: f64, init: &[f64], t: f64, steps: u64) -> Vec<f64> {
    let deriv = |m: &[f64], out: &mut [f64]| {
        for (i, nb) in stencil.iter().enumerate() {
            out[i] = -m[i] + lambda * nb.iter().map(|&j| m[j]).sum::<f64>();
        }
    };
    let len = init.len();
    let mut m = init.to_vec();
    if steps == 0 {
        return m;
    }
    let h = t / steps as f64;
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len]);
    let mut tmp = vec![0.0; len];
    for _ in 0..steps {
        deriv(&m, &mut k1);
        for i in 0..len {
            tmp[i] = m[i] + 0.5 * h * k1[i];
        }
        deriv(&tmp, &mut k2);
        for i in 0..len {
            tmp[i] = m[i] + 0.5 * h * k2[i];
        }
        deriv(&tmp, &mut k3);
        for i in 0..len {
            tmp[i] = m[i] + h * k3[i];
        }
        deriv(&tmp, &mut k4);
        for i in 0..len {
            m[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    m
}

fn strict_planar_q(geom: &BoxGeometry, law: &OffspringLaw) -> Result<EscapeGrid, OracleError> {
    if geom.d != 2 {
        return Err(OracleError::NotPlanar);
    }
    escape_probability_grid(geom, KernelKind::Strict, law, DEFAULT_EPS, DEFAULT_MAX_ITER)
}

/// `|q(0,0) - f(q(1,0))|` for the strict planar walk.
pub fn check_root_identity(geom: &BoxGeometry, law: &OffspringLaw) -> Result<f64, OracleError> {
    let g = strict_planar_q(geom, law)?;
    let q00 = g.q.get(&Site::xy(0, 0)).expect("origin in box");
    let q10 = g.q.get(&Site::xy(1, 0)).expect("(1,0) in box");
    Ok((q00 - law.eval_pgf(q10)).abs())
}

/// `f(q(0,0)) - q(1,0)` for the strict planar walk.
pub fn check_neighbor_inequality(geom: &BoxGeometry, law: &OffspringLaw) -> Result<f64, OracleError> {
    let g = strict_planar_q(geom, law)?;
    let q00 = g.q.get(&Site::xy(0, 0)).expect("origin in box");
    let q10 = g.q.get(&Site::xy(1, 0)).expect("(1,0) in box");
    Ok(law.eval_pgf(q00) - q10)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::replica_rng;
    use crate::simulator::{Process, StepKernel};
    use proptest::prelude::*;

    fn law_b() -> OffspringLaw {
        OffspringLaw::from_probs(&[0.5, 0.0, 0.5]).unwrap()
    }

    fn law_c() -> OffspringLaw {
        OffspringLaw::from_probs(&[0.25, 0.25, 0.5]).unwrap()
    }

    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (f(lo) > 0.0) == (f(mid) > 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn index_matches_lexicographic_order() {
        let g = BoxGeometry::new(3, 2).unwrap();
        let grid = ScalarGrid::filled(g, 0.0);
        for (i, s) in g.sites().enumerate() {
            assert_eq!(grid.index(&s), Some(i));
        }
        assert_eq!(grid.index(&Site::new(&[3, 0, 0]).unwrap()), None);
    }

    #[test]
    fn unit_box_strict_escape_is_half() {
        let g = BoxGeometry::new(2, 1).unwrap();
        let e = escape_probability_grid(&g, KernelKind::Strict, &law_b(), DEFAULT_EPS, DEFAULT_MAX_ITER).unwrap();
        assert!((e.p.get(&Site::xy(0, 0)).unwrap() - 0.5).abs() < 1e-15);
        for s in g.sites().filter(|s| s.sup_norm() == 1) {
            assert_eq!(e.p.get(&s), Some(1.0));
        }
    }

    #[test]
    fn unit_box_lazy_escape_solves_scalar_fixed_point() {
        let law = law_b();
        let q = bisect(|q| law.eval_pgf(q / 5.0) - q, 0.0, 1.0);
        assert!((q - 0.505103).abs() < 1e-6);
        let g = BoxGeometry::new(2, 1).unwrap();
        let e = escape_probability_grid(&g, KernelKind::Lazy, &law, DEFAULT_EPS, DEFAULT_MAX_ITER).unwrap();
        assert!((e.q.get(&Site::xy(0, 0)).unwrap() - q).abs() < 1e-11);
        assert!((e.p.get(&Site::xy(0, 0)).unwrap() - 0.494897).abs() < 1e-6);
    }

    #[test]
    fn generalized_kernel_is_refused() {
        let g = BoxGeometry::new(2, 2).unwrap();
        assert_eq!(
            escape_probability_grid(&g, KernelKind::Generalized, &law_b(), 1e-12, 10),
            Err(OracleError::SurvivalKernel)
        );
    }

    #[test]
    fn non_convergence_reports_residual() {
        let g = BoxGeometry::new(2, 4).unwrap();
        match escape_probability_grid(&g, KernelKind::Strict, &law_b(), 1e-12, 3) {
            Err(OracleError::NotConverged { iterations, residual }) => {
                assert_eq!(iterations, 3);
                assert!(residual > 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cdf_layers_are_monotone_and_reach_the_escape_probability() {
        let g = BoxGeometry::new(2, 3).unwrap();
        let cdf = hitting_cdf_grid(&g, KernelKind::Strict, &law_c(), 400).unwrap();
        for s in g.sites() {
            let expect0 = if s.sup_norm() == 3 { 1.0 } else { 0.0 };
            assert_eq!(cdf.cdf(&s, 0), Some(expect0));
        }
        for w in cdf.layers.windows(2) {
            for (a, b) in w[0].values.iter().zip(&w[1].values) {
                assert!(b >= a);
            }
        }
        let e = escape_probability_grid(&g, KernelKind::Strict, &law_c(), DEFAULT_EPS, DEFAULT_MAX_ITER).unwrap();
        let last = cdf.layers.last().unwrap();
        for (a, b) in last.values.iter().zip(&e.p.values) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn cdf_matches_monte_carlo_at_small_times() {
        let g = BoxGeometry::new(2, 2).unwrap();
        let law = law_b();
        let cdf = hitting_cdf_grid(&g, KernelKind::Lazy, &law, 6).unwrap();
        let proc = Process::new(StepKernel::new(KernelKind::Lazy, 2).unwrap(), law).unwrap();
        let m = 20_000u64;
        let mut hits = [0u64; 7];
        for r in 0..m {
            let mut rng = replica_rng(11, r);
            let h = proc.run_hitting(Site::xy(0, 0), &g, 6, &mut rng).unwrap();
            if let Some(t) = h.tau.value() {
                for c in hits.iter_mut().skip(t as usize) {
                    *c += 1;
                }
            }
        }
        for t in [1u64, 2, 4, 6] {
            let (_, lo, hi) = crate::stats::estimate_prob(hits[t as usize], m, 0.001).unwrap();
            let exact = cdf.cdf(&Site::xy(0, 0), t).unwrap();
            assert!(lo <= exact && exact <= hi, "t={t}: {exact} not in [{lo}, {hi}]");
        }
    }

    #[test]
    fn escape_grids_increase_outwards() {
        for law in [OffspringLaw::from_probs(&[0.4, 0.4, 0.2]).unwrap(), law_b(), law_c()] {
            for n in 2..=4 {
                let g = BoxGeometry::new(2, n).unwrap();
                let e = escape_probability_grid(&g, KernelKind::Strict, &law, DEFAULT_EPS, DEFAULT_MAX_ITER).unwrap();
                let (checked, bad) = audit_increasing(&e.p, 1e-10);
                assert!(checked > 0);
                assert!(bad.is_empty(), "{bad:?}");
            }
        }
    }

    #[test]
    fn audit_flags_decreasing_grids() {
        let g = BoxGeometry::new(2, 2).unwrap();
        let mut grid = ScalarGrid::filled(g, 0.5);
        let i = grid.index(&Site::xy(1, 1)).unwrap();
        grid.values[i] = 0.1;
        let (checked, bad) = audit_increasing(&grid, 1e-10);
        // interior orthant sites (0,0),(0,1),(1,0),(1,1): 5 ordered pairs
        assert_eq!(checked, 5);
        assert_eq!(bad.len(), 3);
        assert!(bad.iter().all(|v| v.y == Site::xy(1, 1)));
    }

    #[test]
    fn identities_at_the_fixed_point() {
        for law in [law_b(), law_c()] {
            for n in 1..=4 {
                let g = BoxGeometry::new(2, n).unwrap();
                assert!(check_root_identity(&g, &law).unwrap() <= 1e-9);
                assert!(check_neighbor_inequality(&g, &law).unwrap() >= -1e-9);
            }
        }
        let dead = OffspringLaw::point_mass(0);
        let g = BoxGeometry::new(2, 3).unwrap();
        assert_eq!(check_root_identity(&g, &dead).unwrap(), 0.0);
        assert_eq!(check_neighbor_inequality(&g, &dead).unwrap(), 0.0);
        let e = escape_probability_grid(&g, KernelKind::Strict, &dead, DEFAULT_EPS, DEFAULT_MAX_ITER).unwrap();
        assert!(g.interior_sites().all(|s| e.q.get(&s) == Some(1.0)));
    }

    #[test]
    fn discrete_mean_field_values() {
        let m = expected_counts_discrete(&Site::xy(0, 0), KernelKind::Strict, &law_b(), 1, 3).unwrap();
        assert_eq!(m.get(&Site::xy(1, 0)), Some(0.25));
        assert_eq!(m.get(&Site::xy(0, 0)), Some(0.0));
        let one = OffspringLaw::point_mass(1);
        for t in 0..6 {
            let m = expected_counts_discrete(&Site::xy(1, -1), KernelKind::Lazy, &one, t, 7).unwrap();
            assert!((m.sum() - 1.0).abs() < 1e-14);
        }
        // generalized: total mean (mean + survival)^t
        let law = law_c().with_survival(0.3).unwrap();
        let m = expected_counts_discrete(&Site::xy(0, 0), KernelKind::Generalized, &law, 5, 5).unwrap();
        assert!((m.sum() - (1.25f64 + 0.3).powi(5)).abs() < 1e-12);
        assert!(matches!(
            expected_counts_discrete(&Site::xy(2, 0), KernelKind::Strict, &law_b(), 3, 4),
            Err(OracleError::TruncationTooSmall { .. })
        ));
    }

    #[test]
    fn discrete_mean_field_matches_one_step_enumeration() {
        // lazy, law c: each of 5 destinations gets mean / 5
        let m = expected_counts_discrete(&Site::xy(0, 0), KernelKind::Lazy, &law_c(), 1, 2).unwrap();
        for s in [Site::xy(0, 0), Site::xy(1, 0), Site::xy(-1, 0), Site::xy(0, 1), Site::xy(0, -1)] {
            assert!((m.get(&s).unwrap() - 0.25).abs() < 1e-15);
        }
        // two strict steps of law b return to the origin with mean 4 * (1/4)^2
        let m = expected_counts_discrete(&Site::xy(0, 0), KernelKind::Strict, &law_b(), 2, 2).unwrap();
        assert!((m.get(&Site::xy(0, 0)).unwrap() - 0.25).abs() < 1e-15);
        assert!((m.get(&Site::xy(1, 1)).unwrap() - 0.125).abs() < 1e-15);
        assert!((m.get(&Site::xy(2, 0)).unwrap() - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn discrete_mean_field_matches_simulation() {
        let law = law_b();
        let t = 4;
        let m = expected_counts_discrete(&Site::xy(0, 0), KernelKind::Strict, &law, t, 6).unwrap();
        let proc = Process::new(StepKernel::new(KernelKind::Strict, 2).unwrap(), law).unwrap();
        let probe = Site::xy(1, 1);
        let runs = 40_000u64;
        let samples: Vec<f64> = (0..runs)
            .map(|r| {
                let mut rng = replica_rng(3, r);
                proc.site_count_path(Site::xy(0, 0), t, probe, &mut rng).unwrap() as f64
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / runs as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (runs - 1) as f64;
        let exact = m.get(&probe).unwrap();
        assert!((mean - exact).abs() < 3.0 * (var / runs as f64).sqrt(), "{mean} vs {exact}");
        let a = m.get(&Site::xy(1, 1)).unwrap();
        let b = m.get(&Site::xy(2, 2)).unwrap();
        assert!(a >= b);
    }

    #[test]
    fn continuous_mean_field_total_mass_and_symmetry() {
        let r = expected_counts_ct(&Site::xy(0, 0), 0.2, 1.0, 12, None).unwrap();
        assert!(((r.total_mass - r.exact_total_mass) / r.exact_total_mass).abs() < 1e-8);
        assert!((r.exact_total_mass - (-0.2f64).exp()).abs() < 1e-15);
        assert!(r.error_estimate < 1e-10);
        let v = r.m.get(&Site::xy(1, 2)).unwrap();
        for s in [Site::xy(2, 1), Site::xy(-1, 2), Site::xy(-2, -1), Site::xy(1, -2)] {
            assert!((r.m.get(&s).unwrap() - v).abs() < 1e-15);
        }
    }

    #[test]
    fn continuous_mean_field_pure_death_limit() {
        let r = expected_counts_ct(&Site::xy(0, 0), 1e-9, 0.7, 4, None).unwrap();
        assert!((r.m.get(&Site::xy(0, 0)).unwrap() - (-0.7f64).exp()).abs() < 1e-8);
        assert!(r.m.get(&Site::xy(1, 0)).unwrap() < 1e-8);
    }

    #[test]
    fn continuous_mean_field_single_site_closed_form() {
        // first-order term: m(1,0) ~ e^{-t} * (lambda t) to leading order; compare
        // against the exact series e^{-t} * sum_k (lambda t)^k/k! * walks
        let lambda = 0.3;
        let t = 0.5;
        let r = expected_counts_ct(&Site::xy(0, 0), lambda, t, 14, None).unwrap();
        // m_t = e^{-t} exp(lambda t A) e_0; expand by counting lattice walks
        let mut walk = std::collections::HashMap::new();
        walk.insert((0i32, 0i32), 1.0f64);
        let mut series = 0.0;
        let mut coeff = 1.0;
        for k in 0..40 {
            series += coeff * walk.get(&(1, 0)).copied().unwrap_or(0.0);
            let mut next = std::collections::HashMap::new();
            for (&(x, y), &w) in &walk {
                for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                    *next.entry((x + dx, y + dy)).or_insert(0.0) += w;
                }
            }
            walk = next;
            coeff *= lambda * t / (k + 1) as f64;
        }
        let exact = (-t).exp() * series;
        assert!((r.m.get(&Site::xy(1, 0)).unwrap() - exact).abs() < 1e-10);
    }

    #[test]
    fn continuous_mean_field_input_checks() {
        assert!(expected_counts_ct(&Site::xy(0, 0), 0.0, 1.0, 5, None).is_err());
        assert!(expected_counts_ct(&Site::xy(0, 0), 0.2, -1.0, 5, None).is_err());
        assert!(matches!(
            expected_counts_ct(&Site::xy(0, 0), 0.2, 1.0, 5, Some(3.0)),
            Err(OracleError::UnstableStep { .. })
        ));
        let r = expected_counts_ct(&Site::xy(1, 1), 0.2, 0.0, 5, None).unwrap();
        assert_eq!(r.m.get(&Site::xy(1, 1)), Some(1.0));
        assert_eq!(r.m.sum(), 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn iteration_is_monotone_for_random_laws(
            w in prop::collection::vec(0.01f64..1.0, 2..5),
            n in 1i32..4,
            lazy in any::<bool>(),
        ) {
            let total: f64 = w.iter().sum();
            let law = OffspringLaw::from_probs(&w.iter().map(|x| x / total).collect::<Vec<_>>()).unwrap();
            let kind = if lazy { KernelKind::Lazy } else { KernelKind::Strict };
            let g = BoxGeometry::new(2, n).unwrap();
            // monotonicity is asserted inside every sweep
            let cdf = hitting_cdf_grid(&g, kind, &law, 50).unwrap();
            for layer in &cdf.layers {
                prop_assert!(layer.values.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}

//! Lattice geometry: sites of `Z^d`, the hypercube `{x : |x|_inf <= n}` with
//! its boundary and interior, the coordinatewise partial order, and the three
//! planar reflections used by the couplings.

use std::fmt;

use serde::{Serialize, Serializer};
use thiserror::Error;

/// Largest supported lattice dimension.
pub const MAX_DIM: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LatticeError {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("dimension {0} is outside the supported range 1..={MAX_DIM}")]
    UnsupportedDimension(usize),
    #[error("box radius must be at least 1")]
    ZeroRadius,
    #[error("{site} is not on the boundary of the box of radius {n}")]
    NotOnBoundary { site: Site, n: i32 },
    #[error("{site} lies outside the box of radius {n}")]
    OutsideBox { site: Site, n: i32 },
    #[error("operation requires a planar site, got dimension {0}")]
    NotPlanar(usize),
}

/// A point of the integer lattice `Z^d`.
///
/// Ordering is lexicographic in the coordinates, which is the canonical
/// processing order used everywhere randomness is consumed.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site {
    coords: [i32; MAX_DIM],
    dim: u8,
}

impl Site {
    pub fn new(coords: &[i32]) -> Result<Self, LatticeError> {
        if coords.is_empty() || coords.len() > MAX_DIM {
            return Err(LatticeError::UnsupportedDimension(coords.len()));
        }
        let mut buf = [0; MAX_DIM];
        buf[..coords.len()].copy_from_slice(coords);
        Ok(Site {
            coords: buf,
            dim: coords.len() as u8,
        })
    }

    /// Planar site `(x, y)`.
    pub const fn xy(x: i32, y: i32) -> Self {
        let mut coords = [0; MAX_DIM];
        coords[0] = x;
        coords[1] = y;
        Site { coords, dim: 2 }
    }

    pub fn origin(dim: usize) -> Result<Self, LatticeError> {
        Site::new(&vec![0; dim])
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn coords(&self) -> &[i32] {
        &self.coords[..self.dim()]
    }

    pub fn x(&self) -> i32 {
        self.coords[0]
    }

    pub fn y(&self) -> i32 {
        self.coords[1]
    }

    pub fn sup_norm(&self) -> i32 {
        self.coords().iter().map(|c| c.abs()).max().unwrap_or(0)
    }

    pub fn l1_norm(&self) -> i64 {
        self.coords().iter().map(|&c| i64::from(c.abs())).sum()
    }

    /// Coordinate sum modulo 2 (0 or 1).
    pub fn parity(&self) -> u8 {
        let s: i64 = self.coords().iter().map(|&c| i64::from(c)).sum();
        s.rem_euclid(2) as u8
    }

    /// The site moved by `delta` along `axis`.
    pub fn shifted(&self, axis: usize, delta: i32) -> Site {
        let mut out = *self;
        out.coords[axis] += delta;
        out
    }

    /// Translation by a planar displacement.
    pub fn offset2(&self, dx: i32, dy: i32) -> Site {
        Site::xy(self.coords[0] + dx, self.coords[1] + dy)
    }

    pub fn l1_distance(&self, other: &Site) -> i64 {
        self.coords()
            .iter()
            .zip(other.coords())
            .map(|(&a, &b)| i64::from((a - b).abs()))
            .sum()
    }

    fn require_dim(&self, dim: usize) -> Result<(), LatticeError> {
        if self.dim() != dim {
            return Err(LatticeError::DimensionMismatch {
                expected: dim,
                found: self.dim(),
            });
        }
        Ok(())
    }
}

impl fmt::Debug for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.coords().iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

impl Serialize for Site {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.coords().serialize(serializer)
    }
}

/// The hypercube of radius `n` in dimension `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BoxGeometry {
    pub d: usize,
    pub n: i32,
}

impl BoxGeometry {
    pub fn new(d: usize, n: i32) -> Result<Self, LatticeError> {
        if d == 0 || d > MAX_DIM {
            return Err(LatticeError::UnsupportedDimension(d));
        }
        if n < 1 {
            return Err(LatticeError::ZeroRadius);
        }
        Ok(BoxGeometry { d, n })
    }

    pub fn contains(&self, x: &Site) -> Result<bool, LatticeError> {
        x.require_dim(self.d)?;
        Ok(x.sup_norm() <= self.n)
    }

    pub fn boundary_contains(&self, x: &Site) -> Result<bool, LatticeError> {
        x.require_dim(self.d)?;
        Ok(x.sup_norm() == self.n)
    }

    pub fn interior_contains(&self, x: &Site) -> Result<bool, LatticeError> {
        x.require_dim(self.d)?;
        Ok(x.sup_norm() < self.n)
    }

    /// Number of sites, `(2n+1)^d`.
    pub fn volume(&self) -> usize {
        (2 * self.n as usize + 1).pow(self.d as u32)
    }

    /// All sites of the box in lexicographic order.
    pub fn sites(&self) -> impl Iterator<Item = Site> + '_ {
        let side = 2 * self.n as usize + 1;
        (0..self.volume()).map(move |mut idx| {
            let mut coords = [0i32; MAX_DIM];
            for axis in (0..self.d).rev() {
                coords[axis] = (idx % side) as i32 - self.n;
                idx /= side;
            }
            Site {
                coords,
                dim: self.d as u8,
            }
        })
    }

    pub fn interior_sites(&self) -> impl Iterator<Item = Site> + '_ {
        self.sites().filter(|s| s.sup_norm() < self.n)
    }
}

/// `x <= y` coordinatewise.
pub fn leq_partial(x: &Site, y: &Site) -> Result<bool, LatticeError> {
    y.require_dim(x.dim())?;
    Ok(x.coords().iter().zip(y.coords()).all(|(a, b)| a <= b))
}

/// Mirror across the vertical line `x = 1/2`: `(x, y) -> (1 - x, y)`.
pub fn reflect_phi(s: Site) -> Site {
    debug_assert_eq!(s.dim(), 2);
    Site::xy(1 - s.x(), s.y())
}

/// Mirror across the vertical line `x = 1`: `(x, y) -> (2 - x, y)`.
pub fn reflect_psi(s: Site) -> Site {
    debug_assert_eq!(s.dim(), 2);
    Site::xy(2 - s.x(), s.y())
}

/// Mirror across the anti-diagonal `x + y = 1`: `(x, y) -> (1 - y, 1 - x)`.
pub fn reflect_upsilon(s: Site) -> Site {
    debug_assert_eq!(s.dim(), 2);
    Site::xy(1 - s.y(), 1 - s.x())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Side {
    N,
    S,
    E,
    W,
}

/// Which square boundary `boundary_side` classifies against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryVariant {
    /// The box `[-n, n]^2`.
    Full,
    /// The punctured box `[-n+1, n]^2` minus its four corner vertices.
    Punctured,
}

/// Sides (in the order N, S, E, W) of the planar boundary containing `x`.
/// Corners of the full box belong to two sides.
pub fn boundary_side(
    geom: &BoxGeometry,
    x: &Site,
    variant: BoundaryVariant,
) -> Result<Vec<Side>, LatticeError> {
    if geom.d != 2 {
        return Err(LatticeError::NotPlanar(geom.d));
    }
    x.require_dim(2)?;
    let n = geom.n;
    let (lo, hi) = match variant {
        BoundaryVariant::Full => (-n, n),
        BoundaryVariant::Punctured => (-n + 1, n),
    };
    let inside = |c: i32| (lo..=hi).contains(&c);
    let member = match variant {
        BoundaryVariant::Full => inside(x.x()) && inside(x.y()),
        BoundaryVariant::Punctured => PuncturedBox { n }.contains(x),
    };
    let mut sides = Vec::with_capacity(2);
    if member {
        if x.y() == hi {
            sides.push(Side::N);
        }
        if x.y() == lo {
            sides.push(Side::S);
        }
        if x.x() == hi {
            sides.push(Side::E);
        }
        if x.x() == lo {
            sides.push(Side::W);
        }
    }
    if sides.is_empty() {
        return Err(LatticeError::NotOnBoundary { site: *x, n });
    }
    Ok(sides)
}

/// The square `[-n+1, n]^2`, centred at `(1/2, 1/2)`, with its four corner
/// vertices removed. `reflect_upsilon` maps it onto itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PuncturedBox {
    pub n: i32,
}

impl PuncturedBox {
    pub fn corners(&self) -> [Site; 4] {
        let n = self.n;
        [
            Site::xy(-n + 1, -n + 1),
            Site::xy(-n + 1, n),
            Site::xy(n, n),
            Site::xy(n, -n + 1),
        ]
    }

    pub fn contains(&self, x: &Site) -> bool {
        let n = self.n;
        let r = (-n + 1)..=n;
        x.dim() == 2 && r.contains(&x.x()) && r.contains(&x.y()) && !self.corners().contains(x)
    }

    pub fn sites(&self) -> Vec<Site> {
        let n = self.n;
        let mut out = Vec::new();
        for x in (-n + 1)..=n {
            for y in (-n + 1)..=n {
                let s = Site::xy(x, y);
                if self.contains(&s) {
                    out.push(s);
                }
            }
        }
        out
    }

    /// Sites of one side of the punctured boundary.
    pub fn side_sites(&self, side: Side) -> Vec<Site> {
        let n = self.n;
        self.sites()
            .into_iter()
            .filter(|s| match side {
                Side::N => s.y() == n,
                Side::S => s.y() == -n + 1,
                Side::E => s.x() == n,
                Side::W => s.x() == -n + 1,
            })
            .collect()
    }
}

/// Offspring placement rule of a kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    /// Children land on the parent site or one of its `2d` neighbours.
    Lazy,
    /// Children land on one of the `2d` neighbours.
    Strict,
    /// As `Strict`, and the parent itself persists with the law's survival
    /// probability.
    Generalized,
}

impl KernelKind {
    pub fn includes_self(self) -> bool {
        matches!(self, KernelKind::Lazy)
    }

    pub fn move_count(self, d: usize) -> usize {
        2 * d + usize::from(self.includes_self())
    }
}

/// Destinations of a child of a particle at `x`, in the normative order
/// `x` (lazy only), `x+e1`, `x-e1`, `x+e2`, `x-e2`, ...
pub fn neighbors(x: &Site, kind: KernelKind) -> Vec<Site> {
    let d = x.dim();
    let mut out = Vec::with_capacity(kind.move_count(d));
    if kind.includes_self() {
        out.push(*x);
    }
    for axis in 0..d {
        out.push(x.shifted(axis, 1));
        out.push(x.shifted(axis, -1));
    }
    out
}

/// Destination of move `index` (normative order) from `x`.
#[inline]
pub fn neighbor(x: &Site, kind: KernelKind, index: usize) -> Site {
    let index = if kind.includes_self() {
        if index == 0 {
            return *x;
        }
        index - 1
    } else {
        index
    };
    let axis = index / 2;
    let delta = if index % 2 == 0 { 1 } else { -1 };
    x.shifted(axis, delta)
}

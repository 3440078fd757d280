//! Dyadic grids of semi-open boxes as computable stand-ins for measurable
//! sets.
//!
//! A [`GridRegion`] holds the cells of a `2^depth`-per-axis subdivision of a
//! bounding box. Cells of a region that approximates some set `S` are either
//! certified inside `S` or only possibly intersecting it; the two counts give
//! the inner/outer measure bracket.

pub(crate) mod image;
pub(crate) mod text;

use std::collections::BTreeSet;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};

pub use image::{image_region, image_region_with_step, CellImage, ImageAnalysis};

pub const DEFAULT_CELL_BUDGET: u64 = 1 << 24;

static CELL_BUDGET: AtomicU64 = AtomicU64::new(DEFAULT_CELL_BUDGET);

/// Current process-wide cap on the number of cells a dense grid may have.
pub fn cell_budget() -> u64 {
    CELL_BUDGET.load(Ordering::Relaxed)
}

pub fn set_cell_budget(budget: u64) {
    CELL_BUDGET.store(budget.max(1), Ordering::Relaxed);
}

/// Checks that a full `n`-dimensional grid at `depth` fits in the budget and
/// in a 64-bit cell key. Returns the total number of cells.
pub fn check_budget(n: usize, depth: u32) -> Result<u64> {
    let bits = n as u64 * depth as u64;
    let budget = cell_budget();
    if bits >= 64 {
        return Err(Error::Budget {
            requested: if bits < 128 { 1u128 << bits } else { u128::MAX },
            budget,
        });
    }
    let total = 1u64 << bits;
    if total > budget {
        return Err(Error::Budget {
            requested: total as u128,
            budget,
        });
    }
    Ok(total)
}

/// Product of half-open intervals `[lower_i, upper_i)`.
#[derive(Clone, PartialEq)]
pub struct SemiOpenBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl fmt::Debug for SemiOpenBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let axes: Vec<String> = self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(a, b)| format!("[{a}, {b})"))
            .collect();
        write!(f, "{}", axes.join(" x "))
    }
}

impl SemiOpenBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::invalid("box corners must be non-empty and of equal length"));
        }
        for (a, b) in lower.iter().zip(&upper) {
            if !a.is_finite() || !b.is_finite() || a >= b {
                return Err(Error::invalid(format!("degenerate box axis [{a}, {b})")));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn unit(n: usize) -> Self {
        Self {
            lower: vec![0.0; n],
            upper: vec![1.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn side(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.side(a)).product()
    }

    pub fn diameter(&self) -> f64 {
        (0..self.dim()).map(|a| self.side(a).powi(2)).sum::<f64>().sqrt()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim()
            && p.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (a, b))| *a <= *x && *x < *b)
    }

    /// Corners of the closed box, bit `a` of the corner index selecting the
    /// upper end of axis `a`.
    pub fn corners(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        let n = self.dim();
        (0..1u64 << n).map(move |mask| {
            (0..n)
                .map(|a| if mask >> a & 1 == 1 { self.upper[a] } else { self.lower[a] })
                .collect()
        })
    }
}

/// Cells of a `2^depth`-per-axis dyadic subdivision of `bounds`.
///
/// Cells are keyed by their multi-index packed into a `u64` with axis 0 most
/// significant, so key order is lexicographic index order. `uncertain` is
/// the subset of cells that only possibly meet the approximated set; every
/// other cell is certified inside it.
#[derive(Clone, PartialEq)]
pub struct GridRegion {
    bounds: SemiOpenBox,
    depth: u32,
    cells: BTreeSet<u64>,
    uncertain: BTreeSet<u64>,
}

impl fmt::Debug for GridRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GridRegion")
            .field("bounds", &self.bounds)
            .field("depth", &self.depth)
            .field("cells", &self.cells.len())
            .field("uncertain", &self.uncertain.len())
            .finish()
    }
}

impl GridRegion {
    pub fn empty(bounds: SemiOpenBox, depth: u32) -> Result<Self> {
        if bounds.dim() as u64 * depth as u64 >= 64 {
            return Err(Error::Budget {
                requested: u128::MAX,
                budget: cell_budget(),
            });
        }
        Ok(Self {
            bounds,
            depth,
            cells: BTreeSet::new(),
            uncertain: BTreeSet::new(),
        })
    }

    /// A plain region (every cell certified) from explicit multi-indices.
    pub fn from_indices<I>(bounds: SemiOpenBox, depth: u32, indices: I) -> Result<Self>
    where
        I: IntoIterator,
        I::Item: AsRef<[u64]>,
    {
        let mut r = Self::empty(bounds, depth)?;
        for idx in indices {
            let key = r.encode(idx.as_ref())?;
            r.cells.insert(key);
        }
        Ok(r)
    }

    pub(crate) fn from_parts(
        bounds: SemiOpenBox,
        depth: u32,
        cells: BTreeSet<u64>,
        uncertain: BTreeSet<u64>,
    ) -> Self {
        debug_assert!(uncertain.is_subset(&cells));
        Self {
            bounds,
            depth,
            cells,
            uncertain,
        }
    }

    /// Same grid, no cells.
    pub fn cleared(&self) -> Self {
        Self {
            bounds: self.bounds.clone(),
            depth: self.depth,
            cells: BTreeSet::new(),
            uncertain: BTreeSet::new(),
        }
    }

    pub fn bounds(&self) -> &SemiOpenBox {
        &self.bounds
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn side_cells(&self) -> u64 {
        1u64 << self.depth
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn contains(&self, key: u64) -> bool {
        self.cells.contains(&key)
    }

    pub fn is_certified(&self, key: u64) -> bool {
        self.cells.contains(&key) && !self.uncertain.contains(&key)
    }

    /// All cell keys in index order.
    pub fn keys(&self) -> impl Iterator<Item = u64> + '_ {
        self.cells.iter().copied()
    }

    pub fn uncertain_keys(&self) -> impl Iterator<Item = u64> + '_ {
        self.uncertain.iter().copied()
    }

    pub fn same_grid(&self, other: &GridRegion) -> bool {
        self.depth == other.depth && self.bounds == other.bounds
    }

    pub fn encode(&self, idx: &[u64]) -> Result<u64> {
        if idx.len() != self.dim() {
            return Err(Error::invalid(format!(
                "cell index has {} components, grid has {} axes",
                idx.len(),
                self.dim()
            )));
        }
        let side = self.side_cells();
        let mut key = 0u64;
        for &i in idx {
            if i >= side {
                return Err(Error::invalid(format!("cell index {i} outside [0, {side})")));
            }
            key = (key << self.depth) | i;
        }
        Ok(key)
    }

    pub fn decode(&self, key: u64) -> Vec<u64> {
        let n = self.dim();
        let mask = self.side_cells() - 1;
        (0..n)
            .map(|a| (key >> (self.depth as usize * (n - 1 - a))) & mask)
            .collect()
    }

    /// Face neighbor of `key` along `axis` (`step` is -1 or +1), if it is on
    /// the grid. The neighbor need not be a member of the region.
    pub fn neighbor_key(&self, key: u64, axis: usize, step: i64) -> Option<u64> {
        let shift = self.depth as usize * (self.dim() - 1 - axis);
        let mask = self.side_cells() - 1;
        let i = (key >> shift) & mask;
        let j = i as i64 + step;
        if j < 0 || j as u64 > mask {
            return None;
        }
        Some((key & !(mask << shift)) | ((j as u64) << shift))
    }

    pub fn cell_side(&self, axis: usize) -> f64 {
        self.bounds.side(axis) / self.side_cells() as f64
    }

    pub fn cell_sides(&self) -> Vec<f64> {
        (0..self.dim()).map(|a| self.cell_side(a)).collect()
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_sides().iter().product()
    }

    pub fn cell_diameter(&self) -> f64 {
        self.cell_sides().iter().map(|s| s * s).sum::<f64>().sqrt()
    }

    pub fn cell_box(&self, key: u64) -> SemiOpenBox {
        let idx = self.decode(key);
        let mut lower = Vec::with_capacity(idx.len());
        let mut upper = Vec::with_capacity(idx.len());
        for (a, i) in idx.iter().enumerate() {
            let c = self.cell_side(a);
            lower.push(self.bounds.lower[a] + *i as f64 * c);
            upper.push(self.bounds.lower[a] + (*i + 1) as f64 * c);
        }
        SemiOpenBox { lower, upper }
    }

    pub fn cell_center(&self, key: u64) -> Vec<f64> {
        self.decode(key)
            .iter()
            .enumerate()
            .map(|(a, i)| self.bounds.lower[a] + (*i as f64 + 0.5) * self.cell_side(a))
            .collect()
    }

    /// Key of the grid cell containing `p`, whether or not it is a member.
    pub fn locate(&self, p: &[f64]) -> Option<u64> {
        if !self.bounds.contains(p) {
            return None;
        }
        let side = self.side_cells();
        let idx: Vec<u64> = p
            .iter()
            .enumerate()
            .map(|(a, x)| {
                let t = ((x - self.bounds.lower[a]) / self.cell_side(a)).floor();
                (t.max(0.0) as u64).min(side - 1)
            })
            .collect();
        self.encode(&idx).ok()
    }

    /// Diameter of the bounding box of the member cells.
    pub fn diameter(&self) -> f64 {
        if self.cells.is_empty() {
            return 0.0;
        }
        let n = self.dim();
        let mut lo = vec![u64::MAX; n];
        let mut hi = vec![0u64; n];
        for key in &self.cells {
            for (a, i) in self.decode(*key).into_iter().enumerate() {
                lo[a] = lo[a].min(i);
                hi[a] = hi[a].max(i);
            }
        }
        (0..n)
            .map(|a| ((hi[a] - lo[a] + 1) as f64 * self.cell_side(a)).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn inner_count(&self) -> usize {
        self.cells.len() - self.uncertain.len()
    }

    /// `(inner, outer)` measure bracket.
    pub fn measure(&self) -> (f64, f64) {
        let v = self.cell_volume();
        (self.inner_count() as f64 * v, self.cells.len() as f64 * v)
    }

    /// Plain region of the certified cells.
    pub fn interior(&self) -> Self {
        Self {
            bounds: self.bounds.clone(),
            depth: self.depth,
            cells: self.cells.difference(&self.uncertain).copied().collect(),
            uncertain: BTreeSet::new(),
        }
    }

    /// Plain region of all cells.
    pub fn closure(&self) -> Self {
        Self {
            bounds: self.bounds.clone(),
            depth: self.depth,
            cells: self.cells.clone(),
            uncertain: BTreeSet::new(),
        }
    }

    pub fn insert(&mut self, key: u64) {
        self.cells.insert(key);
        self.uncertain.remove(&key);
    }

    pub fn remove(&mut self, key: u64) -> bool {
        self.uncertain.remove(&key);
        self.cells.remove(&key)
    }

    pub fn union(&self, other: &GridRegion) -> Result<Self> {
        self.require_same_grid(other)?;
        let cells: BTreeSet<u64> = self.cells.union(&other.cells).copied().collect();
        let uncertain = cells
            .iter()
            .copied()
            .filter(|k| !self.is_certified(*k) && !other.is_certified(*k))
            .collect();
        Ok(Self::from_parts(self.bounds.clone(), self.depth, cells, uncertain))
    }

    pub fn difference(&self, other: &GridRegion) -> Result<Self> {
        self.require_same_grid(other)?;
        let cells: BTreeSet<u64> = self.cells.difference(&other.cells).copied().collect();
        let uncertain = self.uncertain.intersection(&cells).copied().collect();
        Ok(Self::from_parts(self.bounds.clone(), self.depth, cells, uncertain))
    }

    pub fn is_disjoint(&self, other: &GridRegion) -> bool {
        self.cells.is_disjoint(&other.cells)
    }

    fn require_same_grid(&self, other: &GridRegion) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::invalid("regions live on different grids"))
        }
    }

    /// Sub-region of the given keys, keeping certification status.
    pub fn restrict<I: IntoIterator<Item = u64>>(&self, keys: I) -> Self {
        let cells: BTreeSet<u64> = keys.into_iter().filter(|k| self.cells.contains(k)).collect();
        let uncertain = self.uncertain.intersection(&cells).copied().collect();
        Self::from_parts(self.bounds.clone(), self.depth, cells, uncertain)
    }
}

/// The full region: every cell of a `2^depth`-per-axis subdivision.
pub fn subdivide(bounds: &SemiOpenBox, depth: u32) -> Result<GridRegion> {
    let total = check_budget(bounds.dim(), depth)?;
    Ok(GridRegion {
        bounds: bounds.clone(),
        depth,
        cells: (0..total).collect(),
        uncertain: BTreeSet::new(),
    })
}

/// `(inner, outer)` measure bracket of a region.
pub fn region_measure(r: &GridRegion) -> (f64, f64) {
    r.measure()
}

/// How a cell sits relative to a set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Containment {
    Inside,
    Outside,
    Partial,
}

/// A set that can classify boxes against itself. `Inside` and `Outside`
/// must be certain up to measure zero; `Partial` is always allowed.
pub trait SetIndicator: Sync {
    fn classify(&self, cell: &SemiOpenBox) -> Containment;
}

/// Closed Euclidean ball.
#[derive(Debug, Clone)]
pub struct Ball {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl SetIndicator for Ball {
    fn classify(&self, cell: &SemiOpenBox) -> Containment {
        let mut near = 0.0;
        let mut far = 0.0;
        for (a, c) in self.center.iter().enumerate() {
            let (lo, hi) = (cell.lower[a], cell.upper[a]);
            let d_near = if *c < lo {
                lo - c
            } else if *c > hi {
                c - hi
            } else {
                0.0
            };
            let d_far = (c - lo).abs().max((hi - c).abs());
            near += d_near * d_near;
            far += d_far * d_far;
        }
        let r2 = self.radius * self.radius;
        if far <= r2 {
            Containment::Inside
        } else if near >= r2 {
            Containment::Outside
        } else {
            Containment::Partial
        }
    }
}

impl SetIndicator for SemiOpenBox {
    fn classify(&self, cell: &SemiOpenBox) -> Containment {
        let mut inside = true;
        for a in 0..self.dim() {
            if cell.upper[a] <= self.lower[a] || cell.lower[a] >= self.upper[a] {
                return Containment::Outside;
            }
            inside &= cell.lower[a] >= self.lower[a] && cell.upper[a] <= self.upper[a];
        }
        if inside {
            Containment::Inside
        } else {
            Containment::Partial
        }
    }
}

/// Rasterizes `set` onto the dyadic grid over `bounds`, refining only cells
/// the indicator classifies as `Partial`.
pub fn rasterize(bounds: &SemiOpenBox, depth: u32, set: &dyn SetIndicator) -> Result<GridRegion> {
    check_budget(bounds.dim(), depth)?;
    let mut region = GridRegion::empty(bounds.clone(), depth)?;
    let n = bounds.dim();
    let mut stack: Vec<(u32, Vec<u64>)> = vec![(0, vec![0; n])];
    while let Some((level, idx)) = stack.pop() {
        let span = 1u64 << (depth - level);
        let cell = {
            let lower = (0..n)
                .map(|a| bounds.lower[a] + (idx[a] * span) as f64 * region.cell_side(a))
                .collect();
            let upper = (0..n)
                .map(|a| bounds.lower[a] + ((idx[a] + 1) * span) as f64 * region.cell_side(a))
                .collect();
            SemiOpenBox { lower, upper }
        };
        match set.classify(&cell) {
            Containment::Outside => {}
            Containment::Inside => {
                let base: Vec<u64> = idx.iter().map(|i| i * span).collect();
                for_each_offset(n, span, |off| {
                    let full: Vec<u64> = base.iter().zip(off).map(|(b, o)| b + o).collect();
                    let key = region.encode(&full).expect("index in range");
                    region.cells.insert(key);
                });
            }
            Containment::Partial if level == depth => {
                let key = region.encode(&idx).expect("index in range");
                region.cells.insert(key);
                region.uncertain.insert(key);
            }
            Containment::Partial => {
                for mask in (0..1u64 << n).rev() {
                    let child = (0..n).map(|a| idx[a] * 2 + (mask >> a & 1)).collect();
                    stack.push((level + 1, child));
                }
            }
        }
    }
    Ok(region)
}

fn for_each_offset(n: usize, span: u64, mut f: impl FnMut(&[u64])) {
    let mut off = vec![0u64; n];
    loop {
        f(&off);
        let mut a = n;
        loop {
            if a == 0 {
                return;
            }
            a -= 1;
            off[a] += 1;
            if off[a] < span {
                break;
            }
            off[a] = 0;
        }
    }
}

/// A real-valued function on n-space with a human-readable label.
#[derive(Clone)]
pub struct ScalarField {
    evaluator: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    description: String,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("ScalarField").field(&self.description).finish()
    }
}

impl ScalarField {
    pub fn new(description: impl Into<String>, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            evaluator: Arc::new(f),
            description: description.into(),
        }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(format!("{c}"), move |_| c)
    }

    pub fn coordinate(axis: usize) -> Self {
        Self::new(format!("x{}", axis + 1), move |x| x[axis])
    }

    pub fn coordinate_product() -> Self {
        Self::new("prod(x)", |x| x.iter().product())
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.evaluator)(x)
    }

    pub fn plus(&self, other: &ScalarField) -> Self {
        let (a, b) = (self.clone(), other.clone());
        Self::new(format!("{} + {}", a.description, b.description), move |x| a.eval(x) + b.eval(x))
    }

    pub fn scaled(&self, s: f64) -> Self {
        let a = self.clone();
        Self::new(format!("{s} * {}", a.description), move |x| s * a.eval(x))
    }

    /// `x ↦ self(g(x))`.
    pub fn compose_with(&self, g: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        let a = self.clone();
        Self::new(format!("{} o F", a.description), move |x| a.eval(&g(x)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Integral {
    pub value: f64,
    /// Absolute change produced by the last refinement.
    pub est_error: f64,
}

/// Midpoint rule over the cells of `r`, then `refine_levels` successive
/// refinements that split every cell into `2^n` children. The value is the
/// finest sum.
pub fn integrate(f: &ScalarField, r: &GridRegion, refine_levels: u32) -> Result<Integral> {
    if refine_levels == 0 {
        return Err(Error::invalid("refine_levels must be at least 1"));
    }
    let keys: Vec<u64> = r.keys().collect();
    let sides = r.cell_sides();
    let n = r.dim();
    let mut previous = None;
    let mut value = 0.0;
    for level in 0..=refine_levels {
        let per_axis = 1u64 << level;
        let sub: Vec<f64> = sides.iter().map(|s| s / per_axis as f64).collect();
        let sub_volume: f64 = sub.iter().product();
        let partials: Vec<std::result::Result<f64, (u64, f64)>> = keys
            .par_iter()
            .map(|&key| {
                let cell = r.cell_box(key);
                let mut acc = 0.0;
                let mut p = vec![0.0; n];
                let mut bad = None;
                for_each_offset(n, per_axis, |off| {
                    for a in 0..n {
                        p[a] = cell.lower[a] + (off[a] as f64 + 0.5) * sub[a];
                    }
                    let v = f.eval(&p);
                    if !v.is_finite() && bad.is_none() {
                        bad = Some(v);
                    }
                    acc += v;
                });
                match bad {
                    Some(v) => Err((key, v)),
                    None => Ok(acc * sub_volume),
                }
            })
            .collect();
        let mut sum = 0.0;
        for p in partials {
            match p {
                Ok(v) => sum += v,
                Err((key, value)) => {
                    return Err(Error::NonFiniteField {
                        cell: r.decode(key),
                        value,
                    })
                }
            }
        }
        value = sum;
        if level < refine_levels {
            previous = Some(sum);
        }
    }
    Ok(Integral {
        value,
        est_error: previous.map_or(0.0, |p: f64| (value - p).abs()),
    })
}

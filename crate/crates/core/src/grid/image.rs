//! Inner/outer brackets for the image of a grid region under a nonlinear map.
//!
//! Each source cell is replaced by its affine model `F(c) + J (x - c)` plus a
//! defect `R`, the largest deviation of `F` from that model over the corners
//! and face centers of the cell. The model's bounding box, widened by
//! `1.5 R`, encloses the image of the cell; the union of these enclosures
//! gives the outer cells.
//!
//! Inner cells come from a degree argument. Enclosures of the region's
//! boundary faces, and of cells where the model is unreliable (singular or
//! orientation-reversing relative to a neighbor, or too curved for its size),
//! form a barrier. A target component that avoids the barrier and contains
//! the image of a reliable cell center lies inside the image.

use std::collections::{BTreeSet, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use super::{check_budget, GridRegion, SemiOpenBox};
use crate::diff::{default_step, derivative_operator, evaluate, evaluate_into, Transform};
use crate::error::{Error, Result};
use crate::linop::LinearMap;

const SAFETY: f64 = 1.5;

/// Affine model of `F` on one source cell.
#[derive(Debug, Clone)]
pub struct CellImage {
    pub key: u64,
    pub center_image: Vec<f64>,
    pub jacobian: LinearMap,
    /// Largest sampled `|F(p) - F(c) - J (p - c)|` over the cell.
    pub defect: f64,
    /// Closed box enclosing `F(cell)`.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// The model is invertible, consistently oriented with its face
    /// neighbors, and its deflated parallelepiped is non-empty.
    pub reliable: bool,
}

impl CellImage {
    fn slack(&self, center_scale: f64, width: f64) -> f64 {
        SAFETY * self.defect + 4.0 * f64::EPSILON * (center_scale + width)
    }

    /// Enclosure of the image of one closed face of the cell.
    fn face_enclosure(&self, sides: &[f64], axis: usize, sign: f64) -> (Vec<f64>, Vec<f64>) {
        let n = sides.len();
        let mut lower = vec![0.0; n];
        let mut upper = vec![0.0; n];
        for i in 0..n {
            let mid = self.center_image[i] + sign * 0.5 * sides[axis] * self.jacobian.get(i, axis);
            let half: f64 = (0..n)
                .filter(|&j| j != axis)
                .map(|j| 0.5 * sides[j] * self.jacobian.get(i, j).abs())
                .sum();
            let pad = self.slack(mid.abs(), half);
            lower[i] = mid - half - pad;
            upper[i] = mid + half + pad;
        }
        (lower, upper)
    }
}

fn model_cell(f: &dyn Transform, src: &GridRegion, key: u64, h: f64) -> Result<CellImage> {
    let n = src.dim();
    let c = src.cell_center(key);
    let sides = src.cell_sides();
    let fc = evaluate(f, &c)?;
    let j = derivative_operator(f, &c, h)?;

    let mut defect: f64 = 0.0;
    let mut p = vec![0.0; n];
    let mut fp = vec![0.0; n];
    let mut jd = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut probe = |d: &[f64], p: &mut Vec<f64>, fp: &mut Vec<f64>| -> Result<f64> {
        for a in 0..n {
            p[a] = c[a] + d[a];
        }
        evaluate_into(f, p, fp)?;
        j.apply_into(d, &mut jd);
        Ok((0..n)
            .map(|i| (fp[i] - fc[i] - jd[i]).powi(2))
            .sum::<f64>()
            .sqrt())
    };
    for mask in 0..(1u32 << n) {
        for a in 0..n {
            d[a] = if mask >> a & 1 == 1 { 0.5 } else { -0.5 } * sides[a];
        }
        defect = defect.max(probe(&d, &mut p, &mut fp)?);
    }
    for a in 0..n {
        for sign in [-0.5, 0.5] {
            d.iter_mut().for_each(|v| *v = 0.0);
            d[a] = sign * sides[a];
            defect = defect.max(probe(&d, &mut p, &mut fp)?);
        }
    }

    let mut lower = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let mut cell = CellImage {
        key,
        center_image: fc,
        jacobian: j,
        defect,
        lower: Vec::new(),
        upper: Vec::new(),
        reliable: false,
    };
    for i in 0..n {
        let half: f64 = (0..n)
            .map(|a| 0.5 * sides[a] * cell.jacobian.get(i, a).abs())
            .sum();
        let pad = cell.slack(cell.center_image[i].abs(), half);
        lower[i] = cell.center_image[i] - half - pad;
        upper[i] = cell.center_image[i] + half + pad;
    }
    cell.lower = lower;
    cell.upper = upper;
    cell.reliable = match cell.jacobian.inverse() {
        Some(inv) if cell.jacobian.determinant() != 0.0 => {
            // Distance from the model center to the nearest facet of J(cell).
            let inradius = (0..n)
                .map(|a| 0.5 * sides[a] / inv.row(a).iter().map(|v| v * v).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min);
            inradius > SAFETY * defect
        }
        _ => false,
    };
    Ok(cell)
}

/// Dense bitmap over target keys, settable from several threads.
struct AtomicBits(Vec<AtomicU64>);

impl AtomicBits {
    fn new(len: u64) -> Self {
        Self((0..len.div_ceil(64)).map(|_| AtomicU64::new(0)).collect())
    }

    fn set(&self, i: u64) {
        self.0[(i / 64) as usize].fetch_or(1 << (i % 64), Ordering::Relaxed);
    }

    fn into_plain(self) -> Vec<u64> {
        self.0.into_iter().map(AtomicU64::into_inner).collect()
    }
}

pub(crate) fn bit(words: &[u64], i: u64) -> bool {
    words[(i / 64) as usize] >> (i % 64) & 1 == 1
}

/// Per-source-cell models together with the target grid they are
/// rasterized on. Shared by image brackets and preimage counting.
#[derive(Debug, Clone)]
pub struct ImageAnalysis {
    pub cells: Vec<CellImage>,
    target: GridRegion,
    outer: Vec<u64>,
    blocked: Vec<u64>,
}

impl ImageAnalysis {
    pub fn new(f: &dyn Transform, src: &GridRegion, target_depth: u32, h: f64) -> Result<Self> {
        let n = src.dim();
        if f.dim() != n {
            return Err(Error::invalid(format!(
                "transform dimension {} does not match region dimension {n}",
                f.dim()
            )));
        }
        if src.is_empty() {
            return Err(Error::invalid("source region is empty"));
        }
        let half_side = 0.5 * src.cell_sides().iter().copied().fold(f64::INFINITY, f64::min);
        if !(h > 0.0 && h < half_side) {
            return Err(Error::invalid(format!(
                "step {h} must be positive and below half the cell side {half_side}"
            )));
        }
        let total = check_budget(n, target_depth)?;

        let keys: Vec<u64> = src.keys().collect();
        let mut cells = keys
            .par_iter()
            .map(|&k| model_cell(f, src, k, h))
            .collect::<Result<Vec<_>>>()?;

        // Orientation must agree across faces for the degree argument.
        let sign_of: std::collections::HashMap<u64, f64> = cells
            .iter()
            .map(|c| (c.key, c.jacobian.determinant().signum()))
            .collect();
        for c in &mut cells {
            if !c.reliable {
                continue;
            }
            let s = sign_of[&c.key];
            c.reliable = (0..n).all(|a| {
                [-1, 1].iter().all(|&step| {
                    src.neighbor_key(c.key, a, step)
                        .and_then(|k| sign_of.get(&k))
                        .is_none_or(|t| *t == s)
                })
            });
        }

        let mut lo = vec![f64::INFINITY; n];
        let mut hi = vec![f64::NEG_INFINITY; n];
        for c in &cells {
            for a in 0..n {
                lo[a] = lo[a].min(c.lower[a]);
                hi[a] = hi[a].max(c.upper[a]);
            }
        }
        for a in 0..n {
            if hi[a] <= lo[a] {
                let pad = 1e-9 * (1.0 + lo[a].abs());
                lo[a] -= pad;
                hi[a] += pad;
            }
        }
        let target = GridRegion::empty(SemiOpenBox::new(lo, hi)?, target_depth)?;

        let outer = AtomicBits::new(total);
        let blocked = AtomicBits::new(total);
        let sides = src.cell_sides();
        cells.par_iter().for_each(|c| {
            for_each_overlap(&target, &c.lower, &c.upper, |k| outer.set(k));
            if !c.reliable {
                for_each_overlap(&target, &c.lower, &c.upper, |k| blocked.set(k));
                return;
            }
            for a in 0..n {
                for (step, sign) in [(-1i64, -1.0), (1, 1.0)] {
                    let inside = src
                        .neighbor_key(c.key, a, step)
                        .is_some_and(|k| src.contains(k));
                    if !inside {
                        let (l, u) = c.face_enclosure(&sides, a, sign);
                        for_each_overlap(&target, &l, &u, |k| blocked.set(k));
                    }
                }
            }
        });

        Ok(Self {
            cells,
            target,
            outer: outer.into_plain(),
            blocked: blocked.into_plain(),
        })
    }

    /// The (empty) target grid.
    pub fn target(&self) -> &GridRegion {
        &self.target
    }

    pub fn is_outer(&self, key: u64) -> bool {
        bit(&self.outer, key)
    }

    /// Target cell whose interior meets the barrier.
    pub fn is_blocked(&self, key: u64) -> bool {
        bit(&self.blocked, key)
    }

    /// Calls `visit` with every target key whose open cell meets the closed
    /// box `[lower, upper]`.
    pub fn for_each_overlap(&self, lower: &[f64], upper: &[f64], visit: impl FnMut(u64)) {
        for_each_overlap(&self.target, lower, upper, visit)
    }

    /// Outer cells, with those certified by the barrier argument left out of
    /// the uncertain set.
    pub fn bracket(&self) -> GridRegion {
        let t = &self.target;
        let total = 1u64 << (t.dim() as u32 * t.depth());
        let mut label = vec![u32::MAX; total as usize];
        let mut inner = BTreeSet::new();
        let mut seeds: Vec<u64> = self
            .cells
            .iter()
            .filter(|c| c.reliable)
            .filter_map(|c| t.locate(&c.center_image))
            .filter(|&k| !self.is_blocked(k))
            .collect();
        seeds.sort_unstable();
        seeds.dedup();
        let mut queue = VecDeque::new();
        let mut component = Vec::new();
        for (id, seed) in seeds.into_iter().enumerate() {
            if label[seed as usize] != u32::MAX {
                continue;
            }
            label[seed as usize] = id as u32;
            queue.push_back(seed);
            component.clear();
            let mut all_outer = true;
            while let Some(k) = queue.pop_front() {
                component.push(k);
                all_outer &= self.is_outer(k);
                for a in 0..t.dim() {
                    for step in [-1, 1] {
                        if let Some(m) = t.neighbor_key(k, a, step) {
                            if label[m as usize] == u32::MAX && !self.is_blocked(m) {
                                label[m as usize] = id as u32;
                                queue.push_back(m);
                            }
                        }
                    }
                }
            }
            if all_outer {
                inner.extend(component.iter().copied());
            }
        }
        let cells: BTreeSet<u64> = (0..total).filter(|&k| self.is_outer(k)).collect();
        let uncertain = cells.difference(&inner).copied().collect();
        GridRegion::from_parts(t.bounds().clone(), t.depth(), cells, uncertain)
    }
}

fn overlap_range(target: &GridRegion, axis: usize, lo: f64, hi: f64) -> Option<(u64, u64)> {
    let b = target.bounds().lower()[axis];
    let side = target.cell_side(axis);
    let last = target.side_cells() as f64 - 1.0;
    let first = ((lo - b) / side).floor().max(0.0);
    let end = ((hi - b) / side).ceil() - 1.0;
    let end = end.min(last);
    if !(first <= end) {
        return None;
    }
    Some((first as u64, end as u64))
}

fn for_each_overlap(target: &GridRegion, lower: &[f64], upper: &[f64], mut visit: impl FnMut(u64)) {
    let n = target.dim();
    let mut ranges = Vec::with_capacity(n);
    for a in 0..n {
        match overlap_range(target, a, lower[a], upper[a]) {
            Some(r) => ranges.push(r),
            None => return,
        }
    }
    let depth = target.depth();
    let mut idx: Vec<u64> = ranges.iter().map(|r| r.0).collect();
    loop {
        visit(idx.iter().fold(0u64, |k, i| (k << depth) | i));
        let mut a = n;
        loop {
            if a == 0 {
                return;
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] <= ranges[a].1 {
                break;
            }
            idx[a] = ranges[a].0;
        }
    }
}

/// Default forward-difference step for cell models: small relative to the
/// region and well inside each cell.
pub(crate) fn model_step(src: &GridRegion) -> f64 {
    let quarter = 0.25 * src.cell_sides().iter().copied().fold(f64::INFINITY, f64::min);
    default_step(src.bounds()).min(quarter)
}

/// Bracket for `|F(src)|` on a `target_depth` grid over the image bounds.
pub fn image_region(f: &dyn Transform, src: &GridRegion, target_depth: u32) -> Result<GridRegion> {
    image_region_with_step(f, src, target_depth, model_step(src))
}

pub fn image_region_with_step(
    f: &dyn Transform,
    src: &GridRegion,
    target_depth: u32,
    h: f64,
) -> Result<GridRegion> {
    Ok(ImageAnalysis::new(f, src, target_depth, h)?.bracket())
}

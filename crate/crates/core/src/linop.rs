//! Linear selfmaps of n-space and their scale factors.
//!
//! Two independent routes to the scale factor live here: [`scale_factor_det`]
//! (elimination, used as the exact oracle) and [`scale_factor_boxcount`], which
//! rasterizes the images of a uniform subdivision of the unit box and returns
//! a certified inner/outer volume bracket.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::check_budget;

const POWER_ITERATIONS: usize = 200;
const POWER_TOLERANCE: f64 = 1e-10;

/// An `n x n` real matrix stored row-major: row `i` holds the dependence of
/// image coordinate `i` on the input coordinates.
#[derive(Clone, PartialEq)]
pub struct LinearMap {
    dim: usize,
    entries: Vec<f64>,
}

impl fmt::Debug for LinearMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: Vec<&[f64]> = self.entries.chunks(self.dim).collect();
        f.debug_tuple("LinearMap").field(&rows).finish()
    }
}

impl LinearMap {
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("linear map dimension must be at least 1"));
        }
        if entries.len() != dim * dim {
            return Err(Error::invalid(format!(
                "expected {} entries for a {dim}x{dim} map, got {}",
                dim * dim,
                entries.len()
            )));
        }
        if let Some(bad) = entries.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite matrix entry {bad}")));
        }
        Ok(Self { dim, entries })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.len();
        let mut entries = Vec::with_capacity(dim * dim);
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::invalid("matrix rows must all have length n"));
            }
            entries.extend_from_slice(row);
        }
        Self::new(dim, entries)
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(&vec![1.0; dim])
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let dim = diag.len();
        let mut entries = vec![0.0; dim * dim];
        for (i, d) in diag.iter().enumerate() {
            entries[i * dim + i] = *d;
        }
        Self { dim, entries }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            entries: vec![0.0; dim * dim],
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.dim + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.entries[row * self.dim + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.entries[row * self.dim..(row + 1) * self.dim]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.dim).map(|r| self.get(r, col)).collect()
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.apply_into(v, &mut out);
        out
    }

    pub fn apply_into(&self, v: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.row(r).iter().zip(v).map(|(a, b)| a * b).sum();
        }
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.dim);
        for r in 0..self.dim {
            for c in 0..self.dim {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    /// Matrix product `self * rhs` (apply `rhs` first).
    pub fn compose(&self, rhs: &LinearMap) -> Self {
        assert_eq!(self.dim, rhs.dim, "dimension mismatch");
        let n = self.dim;
        let mut out = Self::zeros(n);
        for r in 0..n {
            for c in 0..n {
                out.set(r, c, (0..n).map(|k| self.get(r, k) * rhs.get(k, c)).sum());
            }
        }
        out
    }

    pub fn add(&self, rhs: &LinearMap) -> Self {
        assert_eq!(self.dim, rhs.dim, "dimension mismatch");
        Self {
            dim: self.dim,
            entries: self.entries.iter().zip(&rhs.entries).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, rhs: &LinearMap) -> Self {
        assert_eq!(self.dim, rhs.dim, "dimension mismatch");
        Self {
            dim: self.dim,
            entries: self.entries.iter().zip(&rhs.entries).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            dim: self.dim,
            entries: self.entries.iter().map(|a| a * s).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    /// Signed determinant by elimination with partial pivoting. Ties between
    /// candidate pivots go to the lowest row index.
    pub fn determinant(&self) -> f64 {
        let n = self.dim;
        let mut a = self.entries.clone();
        let mut det = 1.0;
        for col in 0..n {
            let mut pivot = col;
            for r in col + 1..n {
                if a[r * n + col].abs() > a[pivot * n + col].abs() {
                    pivot = r;
                }
            }
            let p = a[pivot * n + col];
            if p == 0.0 {
                return 0.0;
            }
            if pivot != col {
                for c in 0..n {
                    a.swap(pivot * n + c, col * n + c);
                }
                det = -det;
            }
            det *= p;
            for r in col + 1..n {
                let f = a[r * n + col] / p;
                if f != 0.0 {
                    for c in col..n {
                        a[r * n + c] -= f * a[col * n + c];
                    }
                }
            }
        }
        det
    }

    /// Gauss-Jordan inverse; `None` when a pivot vanishes or the result is
    /// not finite.
    pub fn inverse(&self) -> Option<Self> {
        let n = self.dim;
        let mut a = self.entries.clone();
        let mut inv = Self::identity(n).entries;
        for col in 0..n {
            let mut pivot = col;
            for r in col + 1..n {
                if a[r * n + col].abs() > a[pivot * n + col].abs() {
                    pivot = r;
                }
            }
            let p = a[pivot * n + col];
            if p == 0.0 {
                return None;
            }
            if pivot != col {
                for c in 0..n {
                    a.swap(pivot * n + c, col * n + c);
                    inv.swap(pivot * n + c, col * n + c);
                }
            }
            for c in 0..n {
                a[col * n + c] /= p;
                inv[col * n + c] /= p;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let f = a[r * n + col];
                if f != 0.0 {
                    for c in 0..n {
                        a[r * n + c] -= f * a[col * n + c];
                        inv[r * n + c] -= f * inv[col * n + c];
                    }
                }
            }
        }
        inv.iter()
            .all(|v| v.is_finite())
            .then_some(Self { dim: n, entries: inv })
    }

    /// Row `j` of the adjugate: orthogonal to every column of `self` except
    /// column `j`, so it is the outward normal direction of the facets of the
    /// image parallelepiped that do not contain column `j`.
    pub fn adjugate_row(&self, j: usize) -> Vec<f64> {
        let n = self.dim;
        if n == 1 {
            return vec![1.0];
        }
        (0..n)
            .map(|i| {
                let mut minor = Vec::with_capacity((n - 1) * (n - 1));
                for r in (0..n).filter(|&r| r != i) {
                    for c in (0..n).filter(|&c| c != j) {
                        minor.push(self.get(r, c));
                    }
                }
                let m = LinearMap {
                    dim: n - 1,
                    entries: minor,
                };
                let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                sign * m.determinant()
            })
            .collect()
    }
}

fn validate(l: &LinearMap) -> Result<()> {
    if l.entries.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid("linear map has non-finite entries"))
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|a| *a /= norm);
    }
    norm
}

/// Largest singular value, i.e. the Lipschitz constant of `l`.
///
/// Power iteration on `LᵀL` from the normalized all-ones vector. The
/// coordinate vectors are tried as well so that a start orthogonal to the
/// top singular direction cannot hide it; the largest estimate wins.
pub fn operator_norm(l: &LinearMap) -> Result<f64> {
    validate(l)?;
    let n = l.dim();
    let gram = l.transpose().compose(l);
    let mut starts = vec![vec![1.0; n]];
    if n > 1 {
        for i in 0..n {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            starts.push(e);
        }
    }
    let mut best: f64 = 0.0;
    for mut v in starts {
        normalize(&mut v);
        let mut lambda = 0.0;
        let mut w = vec![0.0; n];
        for _ in 0..POWER_ITERATIONS {
            gram.apply_into(&v, &mut w);
            let rayleigh: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
            if normalize(&mut w) == 0.0 {
                lambda = 0.0;
                break;
            }
            std::mem::swap(&mut v, &mut w);
            let done = (rayleigh - lambda).abs() <= POWER_TOLERANCE * rayleigh.abs();
            lambda = rayleigh;
            if done {
                break;
            }
        }
        best = best.max(lambda.max(0.0).sqrt());
    }
    Ok(best)
}

/// `|det L|`, the exact scale factor.
pub fn scale_factor_det(l: &LinearMap) -> Result<f64> {
    validate(l)?;
    Ok(l.determinant().abs())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleBracket {
    pub inner: f64,
    pub outer: f64,
    pub subdivision_k: u32,
}

impl ScaleBracket {
    pub fn gap(&self) -> f64 {
        self.outer - self.inner
    }

    pub fn contains(&self, value: f64) -> bool {
        self.inner <= value && value <= self.outer
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.inner + self.outer)
    }
}

/// Separating-axis data for one candidate axis `w`.
struct Axis {
    w: Vec<f64>,
    /// Half-width of a target cell projected on `w`.
    cell_radius: f64,
    /// `min/max` of `w · L t` over `t` in the sub-box `[0, 1/k]^n`.
    support_lo: f64,
    support_hi: f64,
}

fn sat_axes(l: &LinearMap, side: f64, cell: &[f64]) -> Vec<Axis> {
    let n = l.dim();
    let columns: Vec<Vec<f64>> = (0..n).map(|j| l.column(j)).collect();
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for a in 0..n {
        let mut e = vec![0.0; n];
        e[a] = 1.0;
        dirs.push(e);
    }
    for j in 0..n {
        dirs.push(l.adjugate_row(j));
    }
    if n == 3 {
        for a in 0..3 {
            for c in &columns {
                let mut e = [0.0; 3];
                e[a] = 1.0;
                dirs.push(vec![
                    e[1] * c[2] - e[2] * c[1],
                    e[2] * c[0] - e[0] * c[2],
                    e[0] * c[1] - e[1] * c[0],
                ]);
            }
        }
    }
    let scale = l.frobenius_norm().max(1.0);
    dirs.into_iter()
        .filter(|w| w.iter().map(|x| x.abs()).fold(0.0, f64::max) > 1e-14 * scale)
        .map(|w| {
            let cell_radius = w.iter().zip(cell).map(|(a, c)| 0.5 * a.abs() * c).sum();
            let (mut lo, mut hi) = (0.0, 0.0);
            for c in &columns {
                let p = side * w.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
                lo += p.min(0.0);
                hi += p.max(0.0);
            }
            Axis {
                w,
                cell_radius,
                support_lo: lo,
                support_hi: hi,
            }
        })
        .collect()
}

/// Dense bitmap over a target grid, last axis contiguous.
struct ColumnBitmap {
    side: u64,
    words_per_column: usize,
    words: Vec<AtomicU64>,
}

impl ColumnBitmap {
    fn new(columns: u64, side: u64) -> Self {
        let words_per_column = side.div_ceil(64) as usize;
        let total = columns as usize * words_per_column;
        Self {
            side,
            words_per_column,
            words: (0..total).map(|_| AtomicU64::new(0)).collect(),
        }
    }

    fn fill(&self, column: u64, lo: u64, hi: u64) {
        let base = column as usize * self.words_per_column;
        let (mut k, hi) = (lo, hi.min(self.side - 1));
        while k <= hi {
            let word = (k / 64) as usize;
            let start = k % 64;
            let end = (hi - (word as u64) * 64).min(63);
            let width = end - start + 1;
            let mask = if width == 64 { u64::MAX } else { ((1u64 << width) - 1) << start };
            self.words[base + word].fetch_or(mask, Ordering::Relaxed);
            k = (word as u64 + 1) * 64;
        }
    }

    fn count(&self) -> u64 {
        self.words
            .par_iter()
            .map(|w| w.load(Ordering::Relaxed).count_ones() as u64)
            .sum()
    }

    fn count_range(&self, column: u64, lo: u64, hi: u64) -> u64 {
        let base = column as usize * self.words_per_column;
        let (mut k, hi, mut total) = (lo, hi.min(self.side - 1), 0);
        while k <= hi {
            let word = (k / 64) as usize;
            let start = k % 64;
            let end = (hi - (word as u64) * 64).min(63);
            let width = end - start + 1;
            let mask = if width == 64 { u64::MAX } else { ((1u64 << width) - 1) << start };
            total += (self.words[base + word].load(Ordering::Relaxed) & mask).count_ones() as u64;
            k = (word as u64 + 1) * 64;
        }
        total
    }
}

/// Index range of cells (centers at `lo + (k + 1/2) c`) whose center lies in
/// the open interval `(a, b)`.
fn open_center_range(a: f64, b: f64, lo: f64, c: f64, side: u64) -> Option<(u64, u64)> {
    let kmin = ((a - lo) / c - 0.5).floor() + 1.0;
    let kmax = ((b - lo) / c - 0.5).ceil() - 1.0;
    clamp_range(kmin, kmax, side)
}

fn clamp_range(kmin: f64, kmax: f64, side: u64) -> Option<(u64, u64)> {
    let kmin = kmin.max(0.0);
    let kmax = kmax.min(side as f64 - 1.0);
    (kmin <= kmax).then(|| (kmin as u64, kmax as u64))
}

/// Box-count bracket for the scale factor of `l`.
///
/// The unit box is cut into `k^n` sub-boxes of side `1/k`; each is mapped to
/// a parallelepiped and a target cell counts as OUTER when a separating-axis
/// test against some parallelepiped fails to separate it (strict overlap, so
/// cells touching the image only along a face are not counted). A cell is
/// INNER when it lies in the union of the closed images: the sub-boxes tile
/// the closed unit box, so that union is certified by the preimage of every
/// cell corner falling in the unit box.
///
/// The target grid is the bounding box of the image at `2^target_depth`
/// cells per axis, swept column by column along the last axis.
pub fn scale_factor_boxcount(l: &LinearMap, k: u32, target_depth: u32) -> Result<ScaleBracket> {
    validate(l)?;
    if k == 0 {
        return Err(Error::invalid("subdivision k must be at least 1"));
    }
    if target_depth == 0 {
        return Err(Error::invalid("target depth must be at least 1"));
    }
    let n = l.dim();
    check_budget(n, target_depth)?;
    let side = 1u64 << target_depth;

    let mut lo = vec![0.0f64; n];
    let mut hi = vec![0.0f64; n];
    for r in 0..n {
        for c in 0..n {
            let v = l.get(r, c);
            lo[r] += v.min(0.0);
            hi[r] += v.max(0.0);
        }
    }
    let extent: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| b - a).collect();
    if extent.iter().any(|e| *e <= 0.0) {
        return Ok(ScaleBracket {
            inner: 0.0,
            outer: 0.0,
            subdivision_k: k,
        });
    }
    let cell: Vec<f64> = extent.iter().map(|e| e / side as f64).collect();
    let cell_volume: f64 = cell.iter().product();

    let h = 1.0 / k as f64;
    let axes = sat_axes(l, h, &cell);
    let z = n - 1;
    let columns = side.pow(z as u32);
    let bitmap = ColumnBitmap::new(columns, side);

    // Sub-boxes are indexed in [0, k)^n; their image boxes are translates of
    // the bounding box of L[0, h]^n.
    let sub_count = (k as u64).pow(n as u32);
    let mut sub_lo = vec![0.0; n];
    let mut sub_hi = vec![0.0; n];
    for r in 0..n {
        for c in 0..n {
            let v = h * l.get(r, c);
            sub_lo[r] += v.min(0.0);
            sub_hi[r] += v.max(0.0);
        }
    }

    (0..sub_count).into_par_iter().for_each(|j| {
        let mut t = vec![0.0; n];
        let mut rem = j;
        for ti in t.iter_mut().rev() {
            *ti = (rem % k as u64) as f64 * h;
            rem /= k as u64;
        }
        let anchor = l.apply(&t);
        let centers: Vec<f64> = axes
            .iter()
            .map(|a| {
                let wa: f64 = a.w.iter().zip(&anchor).map(|(x, y)| x * y).sum();
                wa + 0.5 * (a.support_lo + a.support_hi)
            })
            .collect();
        let radii: Vec<f64> = axes
            .iter()
            .map(|a| a.cell_radius + 0.5 * (a.support_hi - a.support_lo))
            .collect();

        // Perpendicular index ranges covering this parallelepiped's bbox.
        let mut ranges = Vec::with_capacity(z);
        for b in 0..z {
            let pmin = anchor[b] + sub_lo[b];
            let pmax = anchor[b] + sub_hi[b];
            let imin = (((pmin - lo[b]) / cell[b]).floor() - 1.0).max(0.0) as u64;
            let imax = (((pmax - lo[b]) / cell[b]).floor() + 1.0).min(side as f64 - 1.0) as u64;
            if imin > imax {
                return;
            }
            ranges.push((imin, imax));
        }

        let mut idx: Vec<u64> = ranges.iter().map(|r| r.0).collect();
        let mut center = vec![0.0; z];
        loop {
            for b in 0..z {
                center[b] = lo[b] + (idx[b] as f64 + 0.5) * cell[b];
            }
            let mut zlo = f64::NEG_INFINITY;
            let mut zhi = f64::INFINITY;
            let mut empty = false;
            for (a, axis) in axes.iter().enumerate() {
                let perp: f64 = axis.w[..z].iter().zip(&center).map(|(x, y)| x * y).sum();
                let wz = axis.w[z];
                if wz == 0.0 {
                    if (perp - centers[a]).abs() >= radii[a] {
                        empty = true;
                        break;
                    }
                } else {
                    let mid = (centers[a] - perp) / wz;
                    let half = radii[a] / wz.abs();
                    zlo = zlo.max(mid - half);
                    zhi = zhi.min(mid + half);
                    if zlo >= zhi {
                        empty = true;
                        break;
                    }
                }
            }
            if !empty {
                if let Some((kmin, kmax)) = open_center_range(zlo, zhi, lo[z], cell[z], side) {
                    let column = idx.iter().fold(0u64, |acc, i| acc * side + i);
                    bitmap.fill(column, kmin, kmax);
                }
            }
            // Advance the perpendicular multi-index (odometer).
            let mut b = z;
            loop {
                if b == 0 {
                    return;
                }
                b -= 1;
                if idx[b] < ranges[b].1 {
                    idx[b] += 1;
                    break;
                }
                idx[b] = ranges[b].0;
            }
        }
    });

    let outer_count = bitmap.count();

    let inner_count: u64 = match l.inverse() {
        None => 0,
        Some(inv) => (0..columns)
            .into_par_iter()
            .map(|column| {
                let mut idx = vec![0u64; z];
                let mut rem = column;
                for b in (0..z).rev() {
                    idx[b] = rem % side;
                    rem /= side;
                }
                let mut zl = f64::NEG_INFINITY;
                let mut zh = f64::INFINITY;
                let mut corner = vec![0.0; z];
                for mask in 0..(1u64 << z) {
                    for b in 0..z {
                        let off = if mask >> b & 1 == 1 { 1.0 } else { 0.0 };
                        corner[b] = lo[b] + (idx[b] as f64 + off) * cell[b];
                    }
                    for i in 0..n {
                        let row = inv.row(i);
                        let perp: f64 = row[..z].iter().zip(&corner).map(|(a, b)| a * b).sum();
                        let mz = row[z];
                        if mz == 0.0 {
                            if !(0.0..=1.0).contains(&perp) {
                                return 0;
                            }
                        } else {
                            let (a, b) = ((0.0 - perp) / mz, (1.0 - perp) / mz);
                            zl = zl.max(a.min(b));
                            zh = zh.min(a.max(b));
                        }
                    }
                }
                if zl > zh {
                    return 0;
                }
                let kmin = ((zl - lo[z]) / cell[z]).ceil();
                let kmax = ((zh - lo[z]) / cell[z] - 1.0).floor();
                match clamp_range(kmin, kmax, side) {
                    Some((a, b)) => bitmap.count_range(column, a, b),
                    None => 0,
                }
            })
            .sum(),
    };

    Ok(ScaleBracket {
        inner: inner_count as f64 * cell_volume,
        outer: outer_count as f64 * cell_volume,
        subdivision_k: k,
    })
}

/// Largest change of `|det|` over `trials` seeded perturbations `P` with
/// entries uniform in `[-eta/n, eta/n]`, so that `‖P‖ <= eta`.
///
/// The same seed yields the same perturbation directions for every `eta`,
/// so a sweep over `eta` probes one fixed set of directions at shrinking
/// amplitude.
pub fn delta_perturbation_gap(l: &LinearMap, eta: f64, trials: usize, seed: u64) -> Result<f64> {
    validate(l)?;
    if !eta.is_finite() || eta < 0.0 {
        return Err(Error::invalid(format!("eta must be finite and non-negative, got {eta}")));
    }
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    if eta == 0.0 {
        return Ok(0.0);
    }
    let n = l.dim();
    let base = l.determinant().abs();
    let amplitude = eta / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let entries: Vec<f64> = (0..n * n)
            .map(|_| amplitude * rng.random_range(-1.0..=1.0))
            .collect();
        let p = LinearMap { dim: n, entries };
        worst = worst.max((l.add(&p).determinant().abs() - base).abs());
    }
    Ok(worst)
}

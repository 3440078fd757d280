//! Injectivity patches: small sets on which `F` stays within `(1 ± ε)` of
//! its linearization, greedy covers of a region by such sets, and the
//! resulting two-sided bounds on the image measure.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diff::{
    default_directions, derivative_operator, difference_jacobian, evaluate, jacobian_scale_field, sphere_directions,
    uniform_residual, within_tolerance, SharedTransform, Transform,
};
use crate::error::{Error, Result};
use crate::grid::image::model_step;
use crate::grid::text::{content_lines, parse_cell_tokens, parse_header};
use crate::grid::{image_region, integrate, region_measure, GridRegion, Integral};
use crate::linop::{operator_norm, LinearMap};

pub const DEFAULT_SAMPLES: usize = 512;
pub const DEFAULT_TAU0: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub center: Vec<f64>,
    /// δ: every cell's closure lies within `radius / 2` of `center`.
    pub radius: f64,
    pub epsilon: f64,
    pub cells: GridRegion,
    pub center_operator: LinearMap,
    pub certified: bool,
    pub injective_checked: bool,
}

impl Patch {
    /// Largest distance from the center to a point of a member cell's closure.
    pub fn reach(&self) -> f64 {
        self.cells
            .keys()
            .map(|k| far_corner_distance(&self.cells, k, &self.center))
            .fold(0.0, f64::max)
    }
}

/// Patches plus the cells no patch could take.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchCover {
    pub patches: Vec<Patch>,
    pub residual: GridRegion,
}

impl PatchCover {
    /// True when patches and residual are pairwise disjoint and their union
    /// is exactly `region`.
    pub fn partitions(&self, region: &GridRegion) -> bool {
        let mut seen = BTreeSet::new();
        let parts = self.patches.iter().map(|p| &p.cells).chain([&self.residual]);
        for part in parts {
            if !part.same_grid(region) {
                return false;
            }
            for k in part.keys() {
                if !seen.insert(k) {
                    return false;
                }
            }
        }
        seen.iter().copied().eq(region.keys())
    }

    pub fn residual_volume(&self) -> f64 {
        self.residual.len() as f64 * self.residual.cell_volume()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Certification {
    pub certified: bool,
    pub worst_ratio_low: f64,
    pub worst_ratio_high: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectivityCheck {
    pub injective: bool,
    pub witness: Option<(Vec<f64>, Vec<f64>)>,
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("epsilon must lie in (0, 1), got {epsilon}")))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn mix(seed: u64, key: u64) -> u64 {
    seed ^ key.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(n + 1);
    while v.len() < n {
        let u1 = 1.0 - rng.random::<f64>();
        let u2 = rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let t = std::f64::consts::TAU * u2;
        v.push(r * t.cos());
        v.push(r * t.sin());
    }
    v.truncate(n);
    v
}

fn ball_point(rng: &mut ChaCha8Rng, z: &[f64], delta: f64) -> Vec<f64> {
    let n = z.len();
    let mut g = gaussian(rng, n);
    let len = norm(&g).max(f64::MIN_POSITIVE);
    let r = delta * rng.random::<f64>().powf(1.0 / n as f64);
    g.iter_mut().zip(z).for_each(|(v, c)| *v = c + r * *v / len);
    g
}

/// Seeded point pairs in the open δ-ball around `z`; every fourth pair has
/// `z` itself as its second point.
pub fn sample_pairs(z: &[f64], delta: f64, samples: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    pair_stream(z, delta, seed).take(samples).collect()
}

fn pair_stream(z: &[f64], delta: f64, seed: u64) -> impl Iterator<Item = (Vec<f64>, Vec<f64>)> + '_ {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..).map(move |i| {
        let x = ball_point(&mut rng, z, delta);
        let y = if i % 4 == 0 {
            z.to_vec()
        } else {
            ball_point(&mut rng, z, delta)
        };
        (x, y)
    })
}

/// Checks `|Fx - Fy| / |J (x - y)|` against `[(1-ε)², (1+ε)²]` on the given
/// pairs. Coincident pairs are skipped.
pub fn certify_pairs(
    f: &dyn Transform,
    j: &LinearMap,
    pairs: &[(Vec<f64>, Vec<f64>)],
    epsilon: f64,
) -> Result<Certification> {
    check_epsilon(epsilon)?;
    scan_pairs(f, j, pairs.iter().cloned(), epsilon, false)
}

/// With `stop_early`, returns at the first ratio outside the band; the
/// reported extremes then cover only the pairs seen so far.
fn scan_pairs(
    f: &dyn Transform,
    j: &LinearMap,
    pairs: impl Iterator<Item = (Vec<f64>, Vec<f64>)>,
    epsilon: f64,
    stop_early: bool,
) -> Result<Certification> {
    let (lo, hi) = ((1.0 - epsilon).powi(2), (1.0 + epsilon).powi(2));
    let mut low = f64::INFINITY;
    let mut high = f64::NEG_INFINITY;
    for (x, y) in pairs {
        let d: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        if norm(&d) == 0.0 {
            continue;
        }
        let den = norm(&j.apply(&d));
        let num = distance(&evaluate(f, &x)?, &evaluate(f, &y)?);
        let ratio = num / den;
        low = low.min(ratio);
        high = high.max(ratio);
        if stop_early && !(lo..=hi).contains(&ratio) {
            break;
        }
    }
    if low > high {
        // No usable pair: nothing contradicts the inequality.
        low = 1.0;
        high = 1.0;
    }
    Ok(Certification {
        certified: low >= lo && high <= hi,
        worst_ratio_low: low,
        worst_ratio_high: high,
    })
}

fn probe_step(z: &[f64], delta: f64) -> f64 {
    (1e-6 * (1.0 + norm(z))).min(0.25 * delta)
}

fn require_invertible(z: &[f64], j: &LinearMap) -> Result<LinearMap> {
    let det = j.determinant();
    match j.inverse() {
        Some(inv) if det != 0.0 && det.is_finite() => Ok(inv),
        _ => Err(Error::NotInvertible {
            point: z.to_vec(),
            scale: det.abs(),
        }),
    }
}

pub fn certify_patch(
    f: &dyn Transform,
    z: &[f64],
    delta: f64,
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<Certification> {
    check_epsilon(epsilon)?;
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::invalid(format!("delta must be positive, got {delta}")));
    }
    if samples == 0 {
        return Err(Error::invalid("samples must be at least 1"));
    }
    let j = derivative_operator(f, z, probe_step(z, delta))?;
    require_invertible(z, &j)?;
    certify_pairs(f, &j, &sample_pairs(z, delta, samples, seed), epsilon)
}

fn random_point_in(rng: &mut ChaCha8Rng, r: &GridRegion, keys: &[u64]) -> Vec<f64> {
    let b = r.cell_box(keys[rng.random_range(0..keys.len())]);
    (0..r.dim())
        .map(|a| b.lower()[a] + rng.random::<f64>() * b.side(a))
        .collect()
}

fn newton_preimage(f: &dyn Transform, target: &[f64], start: Vec<f64>, h: f64) -> Option<Vec<f64>> {
    let mut y = start;
    for _ in 0..25 {
        let fy = evaluate(f, &y).ok()?;
        let res: Vec<f64> = fy.iter().zip(target).map(|(a, b)| a - b).collect();
        if norm(&res) < 1e-13 * (1.0 + norm(target)) {
            return Some(y);
        }
        let inv = derivative_operator(f, &y, h).ok()?.inverse()?;
        let step = inv.apply(&res);
        y.iter_mut().zip(&step).for_each(|(v, s)| *v -= s);
    }
    let fy = evaluate(f, &y).ok()?;
    (distance(&fy, target) < 1e-9 * (1.0 + norm(target))).then_some(y)
}

/// Looks for two distinct points of the patch with (numerically) the same
/// image: random pairs, plus a Newton search from each sample for a second
/// preimage of its image value. Works on uncertified patches too.
pub fn check_injective(f: &dyn Transform, p: &Patch, samples: usize, seed: u64) -> Result<InjectivityCheck> {
    let keys: Vec<u64> = p.cells.keys().collect();
    if keys.is_empty() {
        return Ok(InjectivityCheck {
            injective: true,
            witness: None,
        });
    }
    let h = model_step(&p.cells);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Points closer than this are not told apart: near a degenerate
    // derivative their images differ by less than the image tolerance even
    // though the map separates them.
    let separation = (1e-4 * p.cells.cell_diameter()).max(1e-7);
    let collapsed = |x: &[f64], y: &[f64], fx: &[f64], fy: &[f64]| {
        let d = distance(x, y);
        d > separation * (1.0 + norm(x)) && distance(fx, fy) < 1e-9 * (1.0 + d)
    };
    for _ in 0..samples {
        let x = random_point_in(&mut rng, &p.cells, &keys);
        let y0 = random_point_in(&mut rng, &p.cells, &keys);
        let fx = evaluate(f, &x)?;
        let fy0 = evaluate(f, &y0)?;
        if collapsed(&x, &y0, &fx, &fy0) {
            return Ok(InjectivityCheck {
                injective: false,
                witness: Some((x, y0)),
            });
        }
        if let Some(y) = newton_preimage(f, &fx, y0, h) {
            let inside = p.cells.locate(&y).is_some_and(|k| p.cells.contains(k));
            if inside {
                let fy = evaluate(f, &y)?;
                if collapsed(&x, &y, &fx, &fy) {
                    return Ok(InjectivityCheck {
                        injective: false,
                        witness: Some((x, y)),
                    });
                }
            }
        }
    }
    Ok(InjectivityCheck {
        injective: true,
        witness: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecomposeOptions {
    pub epsilon: f64,
    pub max_rounds: u32,
    pub samples: usize,
    pub seed: u64,
    /// Cells with `|det F'|` at or below this go to the residual.
    pub tau0: f64,
    /// Difference step for derivatives; defaults to a step well inside a
    /// cell.
    pub step: Option<f64>,
}

impl DecomposeOptions {
    pub fn new(epsilon: f64, max_rounds: u32) -> Self {
        Self {
            epsilon,
            max_rounds,
            samples: DEFAULT_SAMPLES,
            seed: 42,
            tau0: DEFAULT_TAU0,
            step: None,
        }
    }
}

struct CellInfo {
    jacobian: LinearMap,
    inverse: Option<LinearMap>,
    usable: bool,
}

fn far_corner_distance(r: &GridRegion, key: u64, z: &[f64]) -> f64 {
    let b = r.cell_box(key);
    (0..r.dim())
        .map(|a| {
            let d = (b.lower()[a] - z[a]).abs().max((b.upper()[a] - z[a]).abs());
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Region cells whose closure lies within `reach` of `z`, in key order.
fn cells_within(r: &GridRegion, z: &[f64], reach: f64) -> Vec<u64> {
    let n = r.dim();
    let last = r.side_cells() as i64 - 1;
    let mut ranges = Vec::with_capacity(n);
    for a in 0..n {
        let s = r.cell_side(a);
        let b = r.bounds().lower()[a];
        let first = (((z[a] - reach - b) / s).ceil() as i64).max(0);
        let end = ((((z[a] + reach - b) / s).floor() as i64) - 1).min(last);
        if first > end {
            return Vec::new();
        }
        ranges.push((first as u64, end as u64));
    }
    let mut idx: Vec<u64> = ranges.iter().map(|r| r.0).collect();
    let mut out = Vec::new();
    loop {
        let key = idx.iter().fold(0u64, |k, i| (k << r.depth()) | i);
        if r.contains(key) && far_corner_distance(r, key, z) < reach {
            out.push(key);
        }
        let mut a = n;
        loop {
            if a == 0 {
                return out;
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

/// `‖(J_m - J_c) J_c⁻¹‖ ≤ ε`, i.e. `|J_m v|` within `(1 ± ε)` of `|J_c v|`
/// for every `v`.
fn derivative_close(jm: &LinearMap, jc: &LinearMap, inv_c: &LinearMap, epsilon: f64) -> bool {
    let m = jm.sub(jc).compose(inv_c);
    m.frobenius_norm() <= epsilon || operator_norm(&m).is_ok_and(|v| v <= epsilon)
}

/// The Newton search per sample is costly; certification already rules out
/// nearby collisions, so the cover uses a lighter injectivity pass.
fn injectivity_samples(samples: usize) -> usize {
    (samples / 8).max(32)
}

/// Greedy cover of `r` by certified, injectivity-checked patches with the
/// default sample count, seed and threshold.
pub fn decompose_injective(f: &dyn Transform, r: &GridRegion, epsilon: f64, max_rounds: u32) -> Result<PatchCover> {
    decompose_with(f, r, &DecomposeOptions::new(epsilon, max_rounds))
}

/// Cells are visited in key order. An unassigned cell seeds patches of
/// radius `diam(r) / 2^k`, `k = 0..=max_rounds`, until one certifies, every
/// absorbed cell's derivative is within `ε` of the center's, and no
/// injectivity witness turns up. The patch takes every unassigned cell
/// within `δ/2` of the seed center. A seed that never succeeds goes to the
/// residual, as do cells that are flat (`|det F'| ≤ τ₀`), fail the
/// uniformity check or cannot be evaluated.
pub fn decompose_with(f: &dyn Transform, r: &GridRegion, opts: &DecomposeOptions) -> Result<PatchCover> {
    check_epsilon(opts.epsilon)?;
    if opts.samples == 0 {
        return Err(Error::invalid("samples must be at least 1"));
    }
    if f.dim() != r.dim() {
        return Err(Error::invalid("transform and region dimensions differ"));
    }
    let keys: Vec<u64> = r.keys().collect();
    let h = opts.step.unwrap_or_else(|| model_step(r));
    let directions = sphere_directions(r.dim(), default_directions(r.dim()));
    let info: Vec<Option<CellInfo>> = keys
        .par_iter()
        .map(|&k| {
            let c = r.cell_center(k);
            let jacobian = derivative_operator(f, &c, h).ok()?;
            let estimate = difference_jacobian(f, &c, h).ok()?;
            let smooth = within_tolerance(uniform_residual(f, &c, &estimate, h, &directions).ok()?, &estimate);
            let det = jacobian.determinant().abs();
            let inverse = jacobian.inverse();
            let usable = smooth && det > opts.tau0 && inverse.is_some();
            Some(CellInfo {
                jacobian,
                inverse,
                usable,
            })
        })
        .collect();
    let index_of = |k: u64| keys.binary_search(&k).expect("member keys come from the region");

    let diam = r.diameter();
    let cell_diam = r.cell_diameter();
    let mut assigned = vec![false; keys.len()];
    let mut patches = Vec::new();
    let mut residual = r.cleared();

    for (i, &k) in keys.iter().enumerate() {
        if assigned[i] {
            continue;
        }
        assigned[i] = true;
        let Some(ci) = info[i].as_ref().filter(|c| c.usable) else {
            residual.insert(k);
            continue;
        };
        let inv_c = ci.inverse.as_ref().expect("usable cells are invertible");
        let z = r.cell_center(k);
        let seed = mix(opts.seed, k);
        let mut accepted = None;
        for round in 0..=opts.max_rounds {
            let delta = diam / 2f64.powi(round as i32);
            if delta < cell_diam {
                break;
            }
            let pairs = pair_stream(&z, delta, seed).take(opts.samples);
            match scan_pairs(f, &ci.jacobian, pairs, opts.epsilon, true) {
                Ok(c) if c.certified => {}
                Ok(_) => continue,
                Err(_) => break,
            }
            let mut members: Vec<u64> = cells_within(r, &z, 0.5 * delta)
                .into_iter()
                .filter(|&m| m != k && !assigned[index_of(m)])
                .collect();
            // At δ equal to the cell diameter the seed sits exactly on the
            // reach and rounding may drop it.
            let at = members.partition_point(|&m| m < k);
            members.insert(at, k);
            let close = members.iter().all(|&m| {
                info[index_of(m)]
                    .as_ref()
                    .is_some_and(|cm| cm.usable && derivative_close(&cm.jacobian, &ci.jacobian, inv_c, opts.epsilon))
            });
            if !close {
                continue;
            }
            let mut patch = Patch {
                center: z.clone(),
                radius: delta,
                epsilon: opts.epsilon,
                cells: r.restrict(members.iter().copied()),
                center_operator: ci.jacobian.clone(),
                certified: true,
                injective_checked: false,
            };
            match check_injective(f, &patch, injectivity_samples(opts.samples), seed) {
                Ok(c) if c.injective => {
                    patch.injective_checked = true;
                    accepted = Some((patch, members));
                    break;
                }
                _ => continue,
            }
        }
        match accepted {
            Some((patch, members)) => {
                for m in members {
                    assigned[index_of(m)] = true;
                }
                patches.push(patch);
            }
            None => residual.insert(k),
        }
    }
    Ok(PatchCover { patches, residual })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sandwich {
    /// `(1-ε)^{2n} ∫ |det F'|` over the patch.
    pub lower: f64,
    /// Inner/outer measure of the patch image.
    pub image_bracket: (f64, f64),
    /// `(1+ε)^{2n} ∫ |det F'|`.
    pub upper: f64,
    pub integral: Integral,
}

impl Sandwich {
    pub fn overlaps(&self) -> bool {
        self.image_bracket.0 <= self.upper && self.lower <= self.image_bracket.1
    }
}

pub fn sandwich_bounds(f: &SharedTransform, p: &Patch, target_depth: u32, h: f64) -> Result<Sandwich> {
    if !(p.certified && p.injective_checked) {
        return Err(Error::Precondition(
            "sandwich bounds need a certified, injectivity-checked patch".into(),
        ));
    }
    let field = jacobian_scale_field(f.clone(), &p.cells, h)?;
    let integral = integrate(&field, &p.cells, 1)?;
    let n = p.cells.dim() as i32;
    let image_bracket = region_measure(&image_region(&**f, &p.cells, target_depth)?);
    Ok(Sandwich {
        lower: (1.0 - p.epsilon).powi(2 * n) * integral.value,
        image_bracket,
        upper: (1.0 + p.epsilon).powi(2 * n) * integral.value,
        integral,
    })
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl PatchCover {
    /// Text form: the grid header, then per patch a `patch` line followed by
    /// its cell lines, then `residual` and the residual cells.
    ///
    /// ```text
    /// patch center=<c,..> delta=<d> eps=<e> certified=<0|1> injective=<0|1> operator=<row-major,..>
    /// ```
    pub fn to_text(&self) -> String {
        let mut out = self.residual.header_line();
        out.push('\n');
        for p in &self.patches {
            writeln!(
                out,
                "patch center={} delta={} eps={} certified={} injective={} operator={}",
                join(&p.center),
                p.radius,
                p.epsilon,
                p.certified as u8,
                p.injective_checked as u8,
                join(p.center_operator.entries()),
            )
            .unwrap();
            p.cells.write_cells(&mut out);
        }
        out.push_str("residual\n");
        self.residual.write_cells(&mut out);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = content_lines(text);
        let (line_no, header) = lines
            .next()
            .ok_or_else(|| Error::parse(1, "missing `bounds` header"))?;
        let grid = parse_header(line_no, header)?;
        let mut patches: Vec<Patch> = Vec::new();
        let mut residual: Option<GridRegion> = None;
        let mut seen = BTreeSet::new();
        for (line_no, line) in lines {
            let mut tokens = line.split_whitespace();
            match tokens.next() {
                Some("patch") => {
                    if residual.is_some() {
                        return Err(Error::parse(line_no, "patch after the residual section"));
                    }
                    let rest: Vec<&str> = tokens.collect();
                    patches.push(parse_patch_line(&grid, line_no, &rest)?);
                }
                Some("residual") => {
                    if tokens.next().is_some() || residual.is_some() {
                        return Err(Error::parse(line_no, "malformed `residual` line"));
                    }
                    residual = Some(grid.cleared());
                }
                Some("cell") => {
                    let rest: Vec<&str> = tokens.collect();
                    let (key, outer) = parse_cell_tokens(&grid, line_no, &rest)?;
                    if outer {
                        return Err(Error::parse(line_no, "cover cells cannot be marked `outer`"));
                    }
                    if !seen.insert(key) {
                        return Err(Error::parse(line_no, "cell listed twice"));
                    }
                    match (&mut residual, patches.last_mut()) {
                        (Some(r), _) => r.insert(key),
                        (None, Some(p)) => {
                            if far_corner_distance(&grid, key, &p.center) > p.radius {
                                return Err(Error::parse(line_no, "cell lies outside the patch radius"));
                            }
                            p.cells.insert(key)
                        }
                        (None, None) => return Err(Error::parse(line_no, "cell before any patch")),
                    }
                }
                _ => return Err(Error::parse(line_no, "expected `patch`, `cell` or `residual`")),
            }
        }
        let residual = residual.ok_or_else(|| Error::parse(text.lines().count().max(1), "missing `residual` section"))?;
        Ok(Self { patches, residual })
    }
}

fn parse_patch_line(grid: &GridRegion, line_no: usize, tokens: &[&str]) -> Result<Patch> {
    let n = grid.dim();
    let mut center = None;
    let mut delta = None;
    let mut eps = None;
    let mut certified = None;
    let mut injective = false;
    let mut operator = None;
    let reals = |v: &str| -> Result<Vec<f64>> {
        v.split(',')
            .map(|t| {
                t.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::parse(line_no, format!("bad number `{t}`")))
            })
            .collect()
    };
    let flag = |v: &str| match v {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(Error::parse(line_no, format!("flag must be 0 or 1, got `{v}`"))),
    };
    for t in tokens {
        let (k, v) = t
            .split_once('=')
            .ok_or_else(|| Error::parse(line_no, format!("expected key=value, got `{t}`")))?;
        let dup = match k {
            "center" => center.replace(reals(v)?).is_some(),
            "delta" => delta.replace(reals(v)?).is_some(),
            "eps" => eps.replace(reals(v)?).is_some(),
            "certified" => certified.replace(flag(v)?).is_some(),
            "injective" => {
                injective = flag(v)?;
                false
            }
            "operator" => operator.replace(reals(v)?).is_some(),
            _ => return Err(Error::parse(line_no, format!("unknown patch field `{k}`"))),
        };
        if dup {
            return Err(Error::parse(line_no, format!("field `{k}` given twice")));
        }
    }
    let missing = |name: &str| Error::parse(line_no, format!("patch lacks `{name}`"));
    let center = center.ok_or_else(|| missing("center"))?;
    if center.len() != n {
        return Err(Error::parse(line_no, format!("center needs {n} coordinates")));
    }
    let single = |v: Option<Vec<f64>>, name: &str| -> Result<f64> {
        match v.as_deref() {
            Some([x]) => Ok(*x),
            Some(_) => Err(Error::parse(line_no, format!("`{name}` takes one value"))),
            None => Err(missing(name)),
        }
    };
    let radius = single(delta, "delta")?;
    let epsilon = single(eps, "eps")?;
    if radius <= 0.0 {
        return Err(Error::parse(line_no, "delta must be positive"));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::parse(line_no, "eps must lie in (0, 1)"));
    }
    let certified = certified.ok_or_else(|| missing("certified"))?;
    let center_operator = match operator {
        Some(e) => LinearMap::new(n, e).map_err(|e| Error::parse(line_no, e.to_string()))?,
        None if certified => return Err(Error::parse(line_no, "certified patch needs `operator`")),
        None => LinearMap::zeros(n),
    };
    if certified && center_operator.determinant() == 0.0 {
        return Err(Error::parse(line_no, "certified patch has a singular operator"));
    }
    if injective && !certified {
        return Err(Error::parse(line_no, "injective flag requires certification"));
    }
    Ok(Patch {
        center,
        radius,
        epsilon,
        cells: grid.cleared(),
        center_operator,
        certified,
        injective_checked: injective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::FnTransform;
    use crate::grid::{subdivide, SemiOpenBox};

    fn sq() -> FnTransform {
        FnTransform::new(1, "x^2", |x, o| o[0] = x[0] * x[0])
            .with_jacobian(|x| LinearMap::diagonal(&[2.0 * x[0]]))
    }

    fn fold() -> FnTransform {
        FnTransform::new(1, "|x|", |x, o| o[0] = x[0].abs())
    }

    #[test]
    fn linear_ratios_are_one() {
        let l = LinearMap::from_rows(&[[2.0, 1.0], [0.5, 3.0]]).unwrap();
        let c = certify_patch(&FnTransform::linear(l), &[0.2, 0.1], 5.0, 0.01, 256, 7).unwrap();
        assert!(c.certified);
        assert!((c.worst_ratio_low - 1.0).abs() < 1e-12);
        assert!((c.worst_ratio_high - 1.0).abs() < 1e-12);
    }

    #[test]
    fn square_near_one_certifies() {
        let c = certify_patch(&sq(), &[1.0], 0.1, 0.2, 512, 1).unwrap();
        assert!(c.certified);
        assert!(c.worst_ratio_low >= 0.9 - 1e-12 && c.worst_ratio_high <= 1.1 + 1e-12);
    }

    #[test]
    fn straddling_fold_fails() {
        let c = certify_patch(&fold(), &[0.05], 0.2, 0.1, 512, 3).unwrap();
        assert!(!c.certified);
        assert!(c.worst_ratio_low < 0.5);
    }

    #[test]
    fn singular_center_is_an_error() {
        let err = certify_patch(&sq(), &[0.0], 0.1, 0.1, 16, 0).unwrap_err();
        assert!(matches!(err, Error::NotInvertible { .. }));
        assert!(certify_patch(&sq(), &[1.0], 0.1, 1.0, 16, 0).is_err());
    }

    #[test]
    fn pairs_stay_in_ball_and_are_seeded() {
        let z = [0.5, -1.0, 2.0];
        let a = sample_pairs(&z, 0.3, 100, 9);
        assert_eq!(a, sample_pairs(&z, 0.3, 100, 9));
        assert_ne!(a, sample_pairs(&z, 0.3, 100, 10));
        for (i, (x, y)) in a.iter().enumerate() {
            assert!(distance(x, &z) < 0.3 && distance(y, &z) < 0.3);
            assert_eq!(i % 4 == 0, y[..] == z[..]);
        }
    }

    #[test]
    fn fold_witness_found_on_forced_check() {
        let r = subdivide(&SemiOpenBox::new(vec![-1.0], vec![1.0]).unwrap(), 4).unwrap();
        let straddle = r.restrict(r.keys().filter(|&k| (4..12).contains(&k)));
        let p = Patch {
            center: vec![0.0],
            radius: 1.0,
            epsilon: 0.1,
            cells: straddle,
            center_operator: LinearMap::identity(1),
            certified: false,
            injective_checked: false,
        };
        let res = check_injective(&fold(), &p, 64, 5).unwrap();
        let (x, y) = res.witness.expect("fold pairs collapse");
        assert!(!res.injective);
        assert!((x[0] + y[0]).abs() < 1e-9 && x[0].abs() > 1e-6);
    }

    #[test]
    fn linear_cover_has_no_residual() {
        let l = LinearMap::from_rows(&[[1.0, 0.5], [0.0, 2.0]]).unwrap();
        let r = subdivide(&SemiOpenBox::unit(2), 4).unwrap();
        let cover = decompose_injective(&FnTransform::linear(l), &r, 0.1, 6).unwrap();
        assert!(cover.partitions(&r));
        assert!(cover.residual.is_empty());
        for p in &cover.patches {
            assert!(p.certified && p.injective_checked);
            assert!(p.reach() < 0.5 * p.radius);
        }
    }

    #[test]
    fn fold_cover_leaves_the_crease() {
        let r = subdivide(&SemiOpenBox::new(vec![-1.0], vec![1.0]).unwrap(), 8).unwrap();
        let cover = decompose_injective(&fold(), &r, 0.1, 12).unwrap();
        assert!(cover.partitions(&r));
        assert!(!cover.residual.is_empty());
        for k in cover.residual.keys() {
            assert!(r.cell_center(k)[0].abs() < 0.05, "{:?}", r.cell_center(k));
        }
        for p in &cover.patches {
            let xs: Vec<f64> = p.cells.keys().map(|k| r.cell_center(k)[0]).collect();
            assert!(xs.iter().all(|x| *x > 0.0) || xs.iter().all(|x| *x < 0.0));
        }
    }

    #[test]
    fn sandwich_requires_certification() {
        let r = subdivide(&SemiOpenBox::unit(1), 2).unwrap();
        let p = Patch {
            center: vec![0.5],
            radius: 2.0,
            epsilon: 0.1,
            cells: r,
            center_operator: LinearMap::identity(1),
            certified: true,
            injective_checked: false,
        };
        let err = sandwich_bounds(&sq().shared(), &p, 6, 1e-6).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn sandwich_for_linear_patch() {
        let l = LinearMap::from_rows(&[[2.0, 0.3], [0.1, 1.0]]).unwrap();
        let r = subdivide(&SemiOpenBox::unit(2), 4).unwrap();
        let p = Patch {
            center: vec![0.5, 0.5],
            radius: 2.0,
            epsilon: 0.01,
            cells: r,
            center_operator: l.clone(),
            certified: true,
            injective_checked: true,
        };
        let s = sandwich_bounds(&FnTransform::linear(l.clone()).shared(), &p, 8, 1e-6).unwrap();
        let det = l.determinant();
        assert!((s.integral.value - det).abs() < 1e-12);
        assert!(s.lower < det && det < s.upper);
        assert!(s.image_bracket.0 <= det && det <= s.image_bracket.1);
        assert!(s.overlaps());
    }

    #[test]
    fn cover_text_roundtrip() {
        let r = subdivide(&SemiOpenBox::new(vec![-1.0], vec![1.0]).unwrap(), 5).unwrap();
        let cover = decompose_injective(&fold(), &r, 0.1, 8).unwrap();
        let text = cover.to_text();
        assert!(text.starts_with("bounds -1 1 depth 5\npatch center="));
        assert_eq!(PatchCover::from_text(&text).unwrap(), cover);
    }

    #[test]
    fn cover_text_rejects_malformed() {
        let head = "bounds 0 1 depth 2\n";
        for body in [
            "cell 0\nresidual\n",
            "patch center=0.5 delta=1 eps=0.1 certified=0\ncell 0\ncell 0\nresidual\n",
            "patch center=0.5 delta=1 eps=1.5 certified=0\nresidual\n",
            "patch center=0.5 delta=1 eps=0.1 certified=1\nresidual\n",
            "patch center=0.5,1 delta=1 eps=0.1 certified=0\nresidual\n",
            "patch center=0.5 delta=1 eps=0.1 certified=0 color=red\nresidual\n",
            "patch center=0.1 delta=0.2 eps=0.1 certified=0\ncell 3\nresidual\n",
            "patch center=0.5 delta=1 eps=0.1 certified=0\n",
            "residual\npatch center=0.5 delta=1 eps=0.1 certified=0\n",
            "residual\ncell 1 outer\n",
        ] {
            assert!(PatchCover::from_text(&format!("{head}{body}")).is_err(), "{body}");
        }
    }
}

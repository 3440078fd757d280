//! Acceptance run: one PASS/FAIL line per criterion. Exits non-zero if any
//! criterion fails.

use std::f64::consts::PI;
use std::time::Instant;

use covtool_core::diff::{derivative_estimate, difference_jacobian, Transform};
use covtool_core::grid::{image_region, region_measure, set_cell_budget, subdivide, ScalarField};
use covtool_core::indicatrix::indicatrix_identity;
use covtool_core::linop::{delta_perturbation_gap, operator_norm, scale_factor_boxcount, LinearMap};
use covtool_core::patches::{check_injective, decompose_with, sandwich_bounds, DecomposeOptions};
use covtool_core::verify::{change_of_variable_check, zero_set_outer_measure};
use covtool_core::zoo::{lookup, representatives};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg)
    }
}

/// Seeded maps with entries uniform in [-1, 1] and condition number at most 4.
fn random_maps(n: usize, count: usize, seed: u64) -> Vec<(LinearMap, DMatrix<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    while out.len() < count {
        let entries: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let m = DMatrix::from_row_slice(n, n, &entries);
        let sv = m.singular_values();
        let cond = sv.max() / sv.min();
        if cond.is_finite() && cond <= 4.0 {
            out.push((LinearMap::new(n, entries).unwrap(), m));
        }
    }
    out
}

fn all_maps() -> Vec<(LinearMap, DMatrix<f64>)> {
    let mut maps = random_maps(2, 20, 2024);
    maps.extend(random_maps(3, 10, 2025));
    maps
}

fn scale_factor_oracle() -> Outcome {
    set_cell_budget(1 << 27);
    let start = Instant::now();
    let mut worst = [0.0f64; 2];
    for (l, m) in all_maps() {
        let n = l.dim();
        let det = m.determinant().abs();
        let b = scale_factor_boxcount(&l, 16, 9).map_err(|e| e.to_string())?;
        ensure(b.inner <= det && det <= b.outer, format!("{l:?}: det {det} outside [{}, {}]", b.inner, b.outer))?;
        let rel = b.gap() / det;
        worst[n - 2] = worst[n - 2].max(rel);
        let limit = if n == 2 { 0.05 } else { 0.12 };
        ensure(rel < limit, format!("{l:?}: relative gap {rel:.4} >= {limit}"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 30.0, format!("took {secs:.1} s"))?;
    Ok(format!(
        "worst relative gap 2-D {:.4}, 3-D {:.4}, {secs:.1} s",
        worst[0], worst[1]
    ))
}

fn delta_continuity() -> Outcome {
    let mut worst_ratio: f64 = 0.0;
    for (i, (l, _)) in all_maps().into_iter().enumerate() {
        let n = l.dim() as i32;
        let norm = operator_norm(&l).map_err(|e| e.to_string())?;
        let mut prev = f64::INFINITY;
        for eta in [1e-2, 1e-3, 1e-4] {
            let gap = delta_perturbation_gap(&l, eta, 64, 7 + i as u64).map_err(|e| e.to_string())?;
            let bound = 10.0 * eta * (1.0 + norm).powi(n - 1);
            ensure(gap < prev, format!("map {i}: gap {gap} did not decrease at eta {eta}"))?;
            ensure(gap < bound, format!("map {i}: gap {gap} >= bound {bound}"))?;
            worst_ratio = worst_ratio.max(gap / bound);
            prev = gap;
        }
    }
    Ok(format!("largest gap/bound {worst_ratio:.3}"))
}

fn analytic_error(f: &dyn Transform, z: &[f64], h: f64) -> f64 {
    let est = difference_jacobian(f, z, h).unwrap();
    let exact = f.jacobian(z).unwrap();
    operator_norm(&est.sub(&exact)).unwrap()
}

fn derivative_order() -> Outcome {
    let polar = lookup("polar", None).unwrap();
    let warp = lookup("sinewarp:0.3", None).unwrap();
    let mut points = Vec::new();
    for i in 0..5 {
        for j in 0..5 {
            points.push((&polar, vec![0.2 + 0.2 * i as f64, 0.3 + 1.2 * j as f64]));
            points.push((&warp, vec![0.1 + 0.2 * i as f64, 0.3 + 0.6 * j as f64]));
        }
    }
    let (mut lo, mut hi, mut worst_res) = (f64::INFINITY, 0.0f64, 0.0f64);
    for (e, z) in &points {
        let f = &*e.transform;
        let ratio = analytic_error(f, z, 5e-4) / analytic_error(f, z, 1e-3);
        ensure((0.3..=0.7).contains(&ratio), format!("{} at {z:?}: ratio {ratio}", f.label()))?;
        lo = lo.min(ratio);
        hi = hi.max(ratio);
        let res = derivative_estimate(f, z, 1e-5, 64).unwrap().uniform_residual;
        ensure(res < 1e-3, format!("{} at {z:?}: residual {res}", f.label()))?;
        worst_res = worst_res.max(res);
    }
    let fold = lookup("fold", None).unwrap();
    let kink = derivative_estimate(&*fold.transform, &[0.0, 0.5], 1e-5, 64)
        .unwrap()
        .uniform_residual;
    ensure(kink >= 0.5, format!("fold residual {kink} < 0.5"))?;
    Ok(format!(
        "{} points, error ratios in [{lo:.3}, {hi:.3}], max residual {worst_res:.2e}, fold residual {kink:.3}",
        points.len()
    ))
}

fn injective_identity() -> Outcome {
    let start = Instant::now();
    let e = lookup("polar", None).unwrap();
    let src = subdivide(&e.default_domain, 9).unwrap();
    let r = change_of_variable_check(&e.transform, &src, &ScalarField::constant(1.0), 9, 1e-6)
        .map_err(|e| e.to_string())?;
    let (lo, hi) = r.lhs_bracket.unwrap();
    ensure((r.lhs - PI).abs() < 0.02, format!("lhs {} off by more than 0.02", r.lhs))?;
    ensure((r.rhs - PI).abs() < 0.02, format!("rhs {} off by more than 0.02", r.rhs))?;
    ensure(r.sandwich_overlaps(0.05, 2), format!("bracket [{lo}, {hi}] misses the sandwich of {}", r.rhs))?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 20.0, format!("took {secs:.1} s"))?;
    Ok(format!("lhs {:.5} in [{lo:.5}, {hi:.5}], rhs {:.5}, {secs:.1} s", r.lhs, r.rhs))
}

fn indicatrix() -> Outcome {
    let mut parts = Vec::new();
    for name in ["fold", "square"] {
        let e = lookup(name, Some(1)).unwrap();
        let src = subdivide(&e.default_domain, 8).unwrap();
        let r = indicatrix_identity(&e.transform, &src, 8, 1e-6).map_err(|e| e.to_string())?;
        ensure((r.lhs - 2.0).abs() < 0.05, format!("{name}: lhs {}", r.lhs))?;
        ensure(r.gap() < 0.05, format!("{name}: |lhs - rhs| = {}", r.gap()))?;
        ensure(r.flagged_volume < 0.05, format!("{name}: flagged volume {}", r.flagged_volume))?;
        parts.push(format!(
            "{name} lhs {:.4} rhs {:.4} flagged {:.4}",
            r.lhs, r.rhs, r.flagged_volume
        ));
    }
    Ok(parts.join("; "))
}

fn zero_set() -> Outcome {
    let e = lookup("squash", None).unwrap();
    let mut values = Vec::new();
    for depth in 6..=10 {
        let src = subdivide(&e.default_domain, depth).unwrap();
        values.push(zero_set_outer_measure(&e.transform, &src, 1e-2, 1e-6).map_err(|e| e.to_string())?);
    }
    ensure(values.windows(2).all(|w| w[1] <= w[0]), format!("not non-increasing: {values:?}"))?;
    let last = *values.last().unwrap();
    ensure((0.005..=0.02).contains(&last), format!("depth 10 value {last} not within factor 2 of 0.01"))?;
    Ok(format!("depths 6..10: {values:?}"))
}

fn decomposition() -> Outcome {
    let start = Instant::now();
    let mut total_patches = 0;
    for spec in representatives() {
        let e = lookup(spec, None).unwrap();
        let f = &*e.transform;
        let src = subdivide(&e.default_domain, 8).unwrap();
        let opts = DecomposeOptions::new(0.1, 12);
        let cover = decompose_with(f, &src, &opts).map_err(|e| e.to_string())?;
        ensure(cover.partitions(&src), format!("{spec}: cover is not a partition"))?;
        for (i, p) in cover.patches.iter().enumerate() {
            let check = check_injective(f, p, 64, 99 + i as u64).map_err(|e| e.to_string())?;
            ensure(check.injective, format!("{spec}: patch {i} has witness {:?}", check.witness))?;
        }
        let again = decompose_with(f, &src, &opts).map_err(|e| e.to_string())?;
        ensure(again == cover && again.to_text() == cover.to_text(), format!("{spec}: rerun differs"))?;
        total_patches += cover.patches.len();
    }
    Ok(format!(
        "{} transforms, {total_patches} patches, {:.1} s",
        representatives().len(),
        start.elapsed().as_secs_f64()
    ))
}

fn sandwich() -> Outcome {
    let e = lookup("sinewarp:0.1", None).unwrap();
    let src = subdivide(&e.default_domain, 9).unwrap();
    let cover = decompose_with(&*e.transform, &src, &DecomposeOptions::new(0.05, 12)).map_err(|e| e.to_string())?;
    let certified: Vec<_> = cover.patches.iter().filter(|p| p.certified).collect();
    ensure(!certified.is_empty(), "no certified patches".into())?;
    for (i, p) in certified.iter().enumerate() {
        let s = sandwich_bounds(&e.transform, p, 9, 1e-6).map_err(|e| e.to_string())?;
        ensure(s.overlaps(), format!("patch {i}: [{}, {}] vs {:?}", s.lower, s.upper, s.image_bracket))?;
    }
    Ok(format!(
        "{} certified patches, residual volume {:.4}",
        certified.len(),
        cover.residual_volume()
    ))
}

fn linear_exactness() -> Outcome {
    let depth = 8;
    let mut worst: f64 = 0.0;
    for spec in ["identity", "rotation:0.3", "rotation:pi/4", "rotation:2", "shear:0.5", "shear:-1.5"] {
        let e = lookup(spec, None).unwrap();
        let l = e.linear.clone().unwrap();
        let det = l.determinant().abs();
        let perimeter = 2.0 * (0..2).map(|c| l.column(c).iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>();
        let slack = 2f64.powi(2 - depth as i32) * perimeter;
        let src = subdivide(&e.default_domain, depth).unwrap();
        let (inner, outer) = region_measure(&image_region(&*e.transform, &src, depth).unwrap());
        ensure(inner <= det && det <= outer, format!("{spec}: {det} outside [{inner}, {outer}]"))?;
        ensure(outer - inner < slack, format!("{spec}: gap {} >= slack {slack}", outer - inner))?;
        if spec.starts_with("rotation") {
            ensure((0.5 * (inner + outer) - 1.0).abs() < slack, format!("{spec}: measure not preserved"))?;
        }
        worst = worst.max((outer - inner) / slack);
    }
    Ok(format!("largest gap/slack {worst:.3}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("scale factor box count brackets |det|", scale_factor_oracle),
        ("scale factor is continuous", delta_continuity),
        ("one-sided differences are first order", derivative_order),
        ("injective identity for polar coordinates", injective_identity),
        ("indicatrix identity for folds", indicatrix),
        ("zero set measure break-off", zero_set),
        ("decompositions are exact and reproducible", decomposition),
        ("sandwich bounds hold patchwise", sandwich),
        ("linear maps scale volume exactly", linear_exactness),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {}: PASS: {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL: {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

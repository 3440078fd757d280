//! End-to-end checks of `∫_{F(E)} φ = ∫_E φ(F) |det F'|` and of the
//! measure-zero claim for the set where `|det F'|` vanishes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::diff::{derivative_operator, evaluate, SharedTransform};
use crate::error::{Error, Result};
use crate::grid::image::model_step;
use crate::grid::{integrate, GridRegion, ImageAnalysis, ScalarField};
use crate::patches::DEFAULT_TAU0;

/// How the left-hand side is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    /// `∫ φ` over the image bracket. Refuses maps that visibly fold.
    Injective,
    /// `∫ N φ` with the Banach indicatrix `N`.
    Indicatrix,
    /// Injective when no unflagged target cell has two preimage groups,
    /// indicatrix otherwise.
    Auto,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub transform: String,
    pub region: String,
    pub lhs: f64,
    pub rhs: f64,
    /// Inner/outer values when the left side is a bracketed measure.
    pub lhs_bracket: Option<(f64, f64)>,
    pub abs_gap: f64,
    pub rel_gap: f64,
    pub depth: u32,
    pub route: Route,
    pub notes: String,
}

impl VerificationReport {
    fn new(transform: String, region: String, lhs: f64, rhs: f64, depth: u32, route: Route) -> Self {
        let abs_gap = (lhs - rhs).abs();
        Self {
            transform,
            region,
            lhs,
            rhs,
            lhs_bracket: None,
            abs_gap,
            rel_gap: abs_gap / rhs.abs().max(1.0),
            depth,
            route,
            notes: String::new(),
        }
    }

    /// Whether the bracket meets `[(1-ε)^{2n} rhs, (1+ε)^{2n} rhs]`.
    pub fn sandwich_overlaps(&self, epsilon: f64, n: usize) -> bool {
        let lo = (1.0 - epsilon).powi(2 * n as i32) * self.rhs;
        let hi = (1.0 + epsilon).powi(2 * n as i32) * self.rhs;
        let (a, b) = self.lhs_bracket.unwrap_or((self.lhs, self.lhs));
        a <= hi && lo <= b
    }
}

/// `z ↦ φ(F(z)) |det F'(z)|`; evaluation failures become NaN and are
/// reported by the integrator with the cell index.
pub fn pullback_density(f: &SharedTransform, phi: &ScalarField, h: f64) -> ScalarField {
    let (f, phi) = (f.clone(), phi.clone());
    let label = format!("{} o F |det F'|", phi.description());
    ScalarField::new(label, move |z| {
        let (Ok(fz), Ok(j)) = (evaluate(&*f, z), derivative_operator(&*f, z, h)) else {
            return f64::NAN;
        };
        phi.eval(&fz) * j.determinant().abs()
    })
}

fn region_label(src: &GridRegion) -> String {
    let b = src.bounds();
    let mut s = String::new();
    for a in 0..src.dim() {
        if a > 0 {
            s.push('x');
        }
        write!(s, "[{},{})", b.lower()[a], b.upper()[a]).unwrap();
    }
    write!(s, " {} cells", src.len()).unwrap();
    s
}

/// Largest preimage-group count over unflagged target cells.
fn max_clean_multiplicity(analysis: &ImageAnalysis, src: &GridRegion) -> u32 {
    let grid = crate::indicatrix::indicatrix_from(analysis, src);
    grid.counts
        .iter()
        .filter(|(k, _)| !grid.flagged.contains(k))
        .map(|(_, &n)| n)
        .max()
        .unwrap_or(0)
}

/// [`change_of_variable_check_with`] on the injective route.
pub fn change_of_variable_check(
    f: &SharedTransform,
    src: &GridRegion,
    phi: &ScalarField,
    depth: u32,
    h: f64,
) -> Result<VerificationReport> {
    change_of_variable_check_with(f, src, phi, depth, h, Route::Injective)
}

/// Compares the image-side integral of `phi` at target `depth` with
/// `∫_src φ(F) |det F'|`.
///
/// On the injective route a map whose image has unflagged cells reached
/// from two separate parts of `src` is rejected with a precondition error.
pub fn change_of_variable_check_with(
    f: &SharedTransform,
    src: &GridRegion,
    phi: &ScalarField,
    depth: u32,
    h: f64,
    route: Route,
) -> Result<VerificationReport> {
    let analysis = ImageAnalysis::new(&**f, src, depth, model_step(src))?;
    let multiplicity = max_clean_multiplicity(&analysis, src);
    let route = match route {
        Route::Auto if multiplicity > 1 => Route::Indicatrix,
        Route::Auto => Route::Injective,
        Route::Injective if multiplicity > 1 => {
            return Err(Error::Precondition(format!(
                "{} is not injective on the region (image cells with {multiplicity} preimage groups); \
                 use the indicatrix route",
                f.label()
            )))
        }
        r => r,
    };
    let rhs = integrate(&pullback_density(f, phi, h), src, 1)?;
    let mut notes = format!("rhs_err={:.3e}", rhs.est_error);
    let report = match route {
        Route::Injective => {
            let image = analysis.bracket();
            let outer = integrate(phi, &image, 1)?.value;
            let inner_region = image.restrict(image.keys().filter(|&k| image.is_certified(k)));
            let inner = integrate(phi, &inner_region, 1)?.value;
            let (lo, hi) = (inner.min(outer), inner.max(outer));
            let mut r = VerificationReport::new(f.label(), region_label(src), 0.5 * (lo + hi), rhs.value, depth, route);
            r.lhs_bracket = Some((lo, hi));
            r
        }
        _ => {
            let grid = crate::indicatrix::indicatrix_from(&analysis, src);
            let mut by_count: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
            for (&k, &n) in &grid.counts {
                by_count.entry(n).or_default().push(k);
            }
            let mut lhs = 0.0;
            for (n, keys) in by_count {
                lhs += n as f64 * integrate(phi, &grid.target.restrict(keys), 1)?.value;
            }
            write!(notes, " flagged_volume={:.6}", grid.flagged_volume()).unwrap();
            VerificationReport::new(f.label(), region_label(src), lhs, rhs.value, depth, route)
        }
    };
    Ok(VerificationReport { notes, ..report })
}

/// `1`, the first coordinate, and the product of all coordinates.
pub fn default_phis() -> Vec<ScalarField> {
    vec![
        ScalarField::constant(1.0),
        ScalarField::coordinate(0),
        ScalarField::coordinate_product(),
    ]
}

/// Total volume of cells of `src` on which `|det F'|` drops below `tau` at
/// the center or at some corner.
///
/// Taking the minimum over the closed cell rather than the midpoint value
/// keeps the estimate from growing when a cell is split.
pub fn zero_set_outer_measure(f: &SharedTransform, src: &GridRegion, tau: f64, h: f64) -> Result<f64> {
    if !(tau > DEFAULT_TAU0) || !tau.is_finite() {
        return Err(Error::invalid(format!("tau must exceed {DEFAULT_TAU0}, got {tau}")));
    }
    if !(h > 0.0) {
        return Err(Error::invalid(format!("step must be positive, got {h}")));
    }
    let keys: Vec<u64> = src.keys().collect();
    let hits: Vec<Result<bool>> = keys
        .par_iter()
        .map(|&k| {
            let b = src.cell_box(k);
            let probe = |z: &[f64]| -> Result<f64> { Ok(derivative_operator(&**f, z, h)?.determinant().abs()) };
            if probe(&src.cell_center(k))? < tau {
                return Ok(true);
            }
            for c in b.corners() {
                if probe(&c)? < tau {
                    return Ok(true);
                }
            }
            Ok(false)
        })
        .collect();
    let mut count = 0u64;
    for h in hits {
        count += h? as u64;
    }
    Ok(count as f64 * src.cell_volume())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::FnTransform;
    use crate::grid::{subdivide, SemiOpenBox};
    use crate::linop::LinearMap;
    use crate::zoo::lookup;

    #[test]
    fn identity_is_exact_for_any_phi() {
        let id = FnTransform::linear(LinearMap::identity(2)).shared();
        let src = subdivide(&SemiOpenBox::unit(2), 6).unwrap();
        for phi in default_phis() {
            let r = change_of_variable_check(&id, &src, &phi, 6, 1e-6).unwrap();
            let (lo, hi) = r.lhs_bracket.unwrap();
            assert!(lo <= r.rhs + 1e-12 && r.rhs <= hi + 1e-12, "{r:?}");
            assert!(r.abs_gap < 2f64.powi(-4), "{r:?}");
        }
    }

    #[test]
    fn linear_scales_volume() {
        let l = LinearMap::from_rows(&[[1.5, 0.5], [0.0, 2.0]]).unwrap();
        let f = FnTransform::linear(l).shared();
        let src = subdivide(&SemiOpenBox::unit(2), 6).unwrap();
        let r = change_of_variable_check(&f, &src, &ScalarField::constant(1.0), 7, 1e-6).unwrap();
        assert!((r.rhs - 3.0).abs() < 1e-12);
        let (lo, hi) = r.lhs_bracket.unwrap();
        assert!(lo <= 3.0 && 3.0 <= hi);
        assert!(r.sandwich_overlaps(0.01, 2));
    }

    #[test]
    fn fold_needs_indicatrix_route() {
        let e = lookup("fold", Some(1)).unwrap();
        let src = subdivide(&e.default_domain, 7).unwrap();
        let one = ScalarField::constant(1.0);
        let err = change_of_variable_check(&e.transform, &src, &one, 7, 1e-6).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
        let r = change_of_variable_check_with(&e.transform, &src, &one, 7, 1e-6, Route::Auto).unwrap();
        assert_eq!(r.route, Route::Indicatrix);
        assert!(r.lhs_bracket.is_none());
        assert!(r.abs_gap < 0.05, "{r:?}");
        // ∫ y N(y) dy over [0,1) with N = 2 is 1 = ∫ |x| over [-1,1).
        let x = ScalarField::coordinate(0);
        let r = change_of_variable_check_with(&e.transform, &src, &x, 7, 1e-6, Route::Indicatrix).unwrap();
        assert!((r.rhs - 1.0).abs() < 1e-3 && r.abs_gap < 0.05, "{r:?}");
    }

    #[test]
    fn zero_set_examples() {
        let l = lookup("linear:2,0,0,1", None).unwrap();
        let src = subdivide(&SemiOpenBox::unit(2), 5).unwrap();
        assert_eq!(zero_set_outer_measure(&l.transform, &src, 1.0, 1e-6).unwrap(), 0.0);
        let constant = FnTransform::new(2, "const", |_, o| o.fill(0.5)).shared();
        let m = zero_set_outer_measure(&constant, &src, 0.01, 1e-6).unwrap();
        assert_eq!(m, 1.0);
        assert!(zero_set_outer_measure(&constant, &src, 1e-7, 1e-6).is_err());
    }

    #[test]
    fn squash_zero_set_shrinks() {
        let e = lookup("squash", None).unwrap();
        let mut last = f64::INFINITY;
        for depth in 4..=8 {
            let src = subdivide(&e.default_domain, depth).unwrap();
            let m = zero_set_outer_measure(&e.transform, &src, 0.01, 1e-6).unwrap();
            assert!(m <= last && m >= 0.01, "depth {depth}: {m}");
            last = m;
        }
    }
}

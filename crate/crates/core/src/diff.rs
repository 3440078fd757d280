//! One-sided difference quotients, the derivative as a linear operator, and
//! the scale-factor field `z ↦ |det F'(z)|`.

use std::f64::consts::TAU;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{GridRegion, ScalarField, SemiOpenBox};
use crate::linop::{operator_norm, LinearMap};

/// A map of n-space into itself.
///
/// Implementations must be safe to evaluate from several threads at once;
/// grid sweeps evaluate cells in parallel.
pub trait Transform: Send + Sync {
    fn dim(&self) -> usize;

    fn label(&self) -> String;

    /// Writes `F(x)` into `out`. Both slices have length `dim()`.
    fn apply(&self, x: &[f64], out: &mut [f64]);

    /// Closed-form derivative, when known.
    fn jacobian(&self, _x: &[f64]) -> Option<LinearMap> {
        None
    }

    /// Box (taken closed) outside of which the map must not be evaluated.
    fn domain(&self) -> Option<&SemiOpenBox> {
        None
    }
}

pub type SharedTransform = Arc<dyn Transform>;

type MapFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
type JacobianFn = dyn Fn(&[f64]) -> LinearMap + Send + Sync;

/// A [`Transform`] built from closures.
#[derive(Clone)]
pub struct FnTransform {
    dim: usize,
    label: String,
    map: Arc<MapFn>,
    jacobian: Option<Arc<JacobianFn>>,
    domain: Option<SemiOpenBox>,
}

impl fmt::Debug for FnTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnTransform")
            .field("dim", &self.dim)
            .field("label", &self.label)
            .field("analytic_jacobian", &self.jacobian.is_some())
            .finish()
    }
}

impl FnTransform {
    pub fn new(
        dim: usize,
        label: impl Into<String>,
        map: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            label: label.into(),
            map: Arc::new(map),
            jacobian: None,
            domain: None,
        }
    }

    pub fn with_jacobian(mut self, j: impl Fn(&[f64]) -> LinearMap + Send + Sync + 'static) -> Self {
        self.jacobian = Some(Arc::new(j));
        self
    }

    pub fn with_domain(mut self, domain: SemiOpenBox) -> Self {
        self.domain = Some(domain);
        self
    }

    pub fn linear(l: LinearMap) -> Self {
        let dim = l.dim();
        let jl = l.clone();
        Self::new(dim, format!("linear{:?}", l.entries()), move |x, out| l.apply_into(x, out))
            .with_jacobian(move |_| jl.clone())
    }

    pub fn shared(self) -> SharedTransform {
        Arc::new(self)
    }
}

impl Transform for FnTransform {
    fn dim(&self) -> usize {
        self.dim
    }

    fn label(&self) -> String {
        self.label.clone()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        (self.map)(x, out)
    }

    fn jacobian(&self, x: &[f64]) -> Option<LinearMap> {
        self.jacobian.as_ref().map(|j| j(x))
    }

    fn domain(&self) -> Option<&SemiOpenBox> {
        self.domain.as_ref()
    }
}

fn in_closed_domain(f: &dyn Transform, x: &[f64]) -> bool {
    match f.domain() {
        None => true,
        Some(d) => x
            .iter()
            .enumerate()
            .all(|(a, v)| d.lower()[a] <= *v && *v <= d.upper()[a]),
    }
}

/// `F(x)` with domain and finiteness checks.
pub fn evaluate(f: &dyn Transform, x: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; f.dim()];
    evaluate_into(f, x, &mut out)?;
    Ok(out)
}

pub fn evaluate_into(f: &dyn Transform, x: &[f64], out: &mut [f64]) -> Result<()> {
    if x.len() != f.dim() {
        return Err(Error::invalid(format!(
            "point has {} coordinates, transform has dimension {}",
            x.len(),
            f.dim()
        )));
    }
    if !in_closed_domain(f, x) {
        return Err(Error::DomainExit { point: x.to_vec() });
    }
    f.apply(x, out);
    if out.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Evaluation {
            point: x.to_vec(),
            reason: format!("non-finite value {out:?}"),
        })
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn offset(z: &[f64], h: f64, u: &[f64]) -> Vec<f64> {
    z.iter().zip(u).map(|(a, b)| a + h * b).collect()
}

fn check_step(h: f64) -> Result<()> {
    if h.is_finite() && h > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("step must be positive and finite, got {h}")))
    }
}

/// `1e-5` times the diameter of the domain.
pub fn default_step(domain: &SemiOpenBox) -> f64 {
    1e-5 * domain.diameter()
}

/// Uniform residual above which a point is treated as non-differentiable.
pub fn differentiability_tolerance(j: &LinearMap) -> f64 {
    1e-3 * (1.0 + operator_norm(j).unwrap_or(f64::INFINITY))
}

/// Number of sampled directions used for the uniformity check by default.
pub fn default_directions(n: usize) -> usize {
    match n {
        1 => 2,
        2 => 64,
        _ => 256,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionalDerivative {
    pub value: Vec<f64>,
    pub converged: bool,
}

/// One-sided quotients `(F(z + h u) - F(z)) / h` for `h = h0, h0/2, ...`
/// (`levels` of them). Converged when the last two agree to
/// `1e-6 (1 + |value|)`; a single level never counts as converged.
pub fn directional_derivative(
    f: &dyn Transform,
    z: &[f64],
    u: &[f64],
    h0: f64,
    levels: u32,
) -> Result<DirectionalDerivative> {
    check_step(h0)?;
    if levels == 0 {
        return Err(Error::invalid("levels must be at least 1"));
    }
    if u.len() != f.dim() || (norm(u) - 1.0).abs() > 1e-12 {
        return Err(Error::invalid(format!("direction {u:?} is not a unit vector")));
    }
    let fz = evaluate(f, z)?;
    let mut previous: Option<Vec<f64>> = None;
    let mut value = Vec::new();
    for level in 0..levels {
        let h = h0 / (1u64 << level.min(62)) as f64;
        let fx = evaluate(f, &offset(z, h, u))?;
        let q: Vec<f64> = fx.iter().zip(&fz).map(|(a, b)| (a - b) / h).collect();
        if level + 1 < levels {
            previous = Some(q.clone());
        }
        value = q;
    }
    let converged = previous.is_some_and(|p| {
        let diff: Vec<f64> = p.iter().zip(&value).map(|(a, b)| a - b).collect();
        norm(&diff) < 1e-6 * (1.0 + norm(&value))
    });
    Ok(DirectionalDerivative { value, converged })
}

/// Derivative at `point` assembled from coordinate one-sided quotients, with
/// the worst linearization error over sampled unit directions.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeEstimate {
    pub point: Vec<f64>,
    pub operator: LinearMap,
    pub step: f64,
    /// `max_v |F(z + h v) - F(z) - h J v| / h` over the sampled `v`.
    pub uniform_residual: f64,
    pub directions_sampled: usize,
}

impl DerivativeEstimate {
    pub fn is_differentiable(&self) -> bool {
        within_tolerance(self.uniform_residual, &self.operator)
    }
}

/// `residual <= differentiability_tolerance(j)`, skipping the norm when the
/// residual is below the smallest possible tolerance.
pub fn within_tolerance(residual: f64, j: &LinearMap) -> bool {
    residual <= 1e-3 || residual <= differentiability_tolerance(j)
}

/// Forward-difference Jacobian with step `h`.
pub fn difference_jacobian(f: &dyn Transform, z: &[f64], h: f64) -> Result<LinearMap> {
    check_step(h)?;
    let n = f.dim();
    let fz = evaluate(f, z)?;
    let mut j = LinearMap::zeros(n);
    let mut e = vec![0.0; n];
    for c in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[c] = 1.0;
        let fx = evaluate(f, &offset(z, h, &e))?;
        for r in 0..n {
            j.set(r, c, (fx[r] - fz[r]) / h);
        }
    }
    Ok(j)
}

/// Analytic Jacobian when the transform has one, otherwise the
/// forward-difference estimate.
pub fn derivative_operator(f: &dyn Transform, z: &[f64], h: f64) -> Result<LinearMap> {
    match f.jacobian(z) {
        Some(j) if j.entries().iter().all(|v| v.is_finite()) => Ok(j),
        Some(_) => Err(Error::Evaluation {
            point: z.to_vec(),
            reason: "analytic Jacobian is not finite".into(),
        }),
        None => difference_jacobian(f, z, h),
    }
}

pub fn derivative_estimate(
    f: &dyn Transform,
    z: &[f64],
    h: f64,
    n_directions: usize,
) -> Result<DerivativeEstimate> {
    if n_directions == 0 {
        return Err(Error::invalid("n_directions must be at least 1"));
    }
    let operator = difference_jacobian(f, z, h)?;
    let dirs = sphere_directions(f.dim(), n_directions);
    let uniform_residual = uniform_residual(f, z, &operator, h, &dirs)?;
    Ok(DerivativeEstimate {
        point: z.to_vec(),
        operator,
        step: h,
        uniform_residual,
        directions_sampled: dirs.len(),
    })
}

/// `max_v |F(z + h v) - F(z) - h J v| / h` over `directions`.
pub fn uniform_residual(
    f: &dyn Transform,
    z: &[f64],
    j: &LinearMap,
    h: f64,
    directions: &[Vec<f64>],
) -> Result<f64> {
    let fz = evaluate(f, z)?;
    let mut worst: f64 = 0.0;
    let mut jv = vec![0.0; f.dim()];
    for v in directions {
        let fx = evaluate(f, &offset(z, h, v))?;
        j.apply_into(v, &mut jv);
        let err: f64 = fx
            .iter()
            .zip(&fz)
            .zip(&jv)
            .map(|((a, b), c)| {
                let d = a - b - h * c;
                d * d
            })
            .sum::<f64>()
            .sqrt();
        worst = worst.max(err / h);
    }
    Ok(worst)
}

/// Deterministic covering of the unit sphere in n-space.
///
/// One dimension has only the two directions `±1`; the circle uses equally
/// spaced angles; the 2-sphere uses a Fibonacci lattice; higher dimensions
/// push an additive golden-ratio sequence through Box-Muller and normalize.
pub fn sphere_directions(n: usize, count: usize) -> Vec<Vec<f64>> {
    match n {
        0 => Vec::new(),
        1 => [1.0, -1.0].iter().take(count.min(2)).map(|s| vec![*s]).collect(),
        2 => (0..count)
            .map(|i| {
                let t = TAU * i as f64 / count as f64;
                vec![t.cos(), t.sin()]
            })
            .collect(),
        3 => {
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            (0..count)
                .map(|i| {
                    let z = 1.0 - (2 * i + 1) as f64 / count as f64;
                    let r = (1.0 - z * z).max(0.0).sqrt();
                    let phi = golden * i as f64;
                    vec![r * phi.cos(), r * phi.sin(), z]
                })
                .collect()
        }
        _ => {
            let m = n + n % 2;
            // Generalized golden ratio: the positive root of x^(m+1) = x + 1.
            let mut g = 2.0f64;
            for _ in 0..64 {
                g = (1.0 + g).powf(1.0 / (m as f64 + 1.0));
            }
            let alphas: Vec<f64> = (1..=m).map(|k| g.powi(-(k as i32))).collect();
            (1..=count)
                .map(|i| {
                    let u: Vec<f64> = alphas
                        .iter()
                        .map(|a| (0.5 + a * i as f64).fract().clamp(1e-12, 1.0 - 1e-12))
                        .collect();
                    let mut v: Vec<f64> = u
                        .chunks(2)
                        .flat_map(|p| {
                            let r = (-2.0 * p[0].ln()).sqrt();
                            let t = TAU * p[1];
                            [r * t.cos(), r * t.sin()]
                        })
                        .take(n)
                        .collect();
                    let len = norm(&v);
                    v.iter_mut().for_each(|x| *x /= len);
                    v
                })
                .collect()
        }
    }
}

/// `z ↦ |det F'(z)|`, using the analytic Jacobian when present. Evaluation
/// failures surface as non-finite values, which integration reports with
/// the offending cell.
pub fn jacobian_scale_field(f: SharedTransform, r: &GridRegion, h: f64) -> Result<ScalarField> {
    check_step(h)?;
    let half_side = 0.5 * r.cell_sides().iter().copied().fold(f64::INFINITY, f64::min);
    if h >= half_side {
        return Err(Error::invalid(format!(
            "step {h} must be smaller than half the cell side {half_side}"
        )));
    }
    let label = format!("|det {}'|", f.label());
    Ok(ScalarField::new(label, move |z| {
        derivative_operator(&*f, z, h)
            .map(|j| j.determinant().abs())
            .unwrap_or(f64::NAN)
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfTestReport {
    /// Largest `‖J_analytic - J_estimated‖ / tolerance` over the sample.
    pub worst_ratio: f64,
    pub points: usize,
    pub passed: bool,
}

/// Compares the analytic Jacobian with forward differences on a
/// `per_axis^n` lattice of interior points of `domain`.
pub fn self_test(f: &dyn Transform, domain: &SemiOpenBox, per_axis: usize) -> Result<Option<SelfTestReport>> {
    let n = f.dim();
    let h = default_step(domain);
    let total = per_axis.pow(n as u32);
    let mut worst: f64 = 0.0;
    for i in 0..total {
        let mut rem = i;
        let z: Vec<f64> = (0..n)
            .map(|a| {
                let k = rem % per_axis;
                rem /= per_axis;
                domain.lower()[a] + (k as f64 + 0.5) / per_axis as f64 * domain.side(a)
            })
            .collect();
        let Some(analytic) = f.jacobian(&z) else {
            return Ok(None);
        };
        let est = difference_jacobian(f, &z, h)?;
        let diff = operator_norm(&analytic.sub(&est))?;
        worst = worst.max(diff / differentiability_tolerance(&analytic));
    }
    Ok(Some(SelfTestReport {
        worst_ratio: worst,
        points: total,
        passed: worst <= 1.0,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_1d() -> FnTransform {
        FnTransform::new(1, "x^2", |x, o| o[0] = x[0] * x[0])
            .with_jacobian(|x| LinearMap::diagonal(&[2.0 * x[0]]))
    }

    fn abs_1d() -> FnTransform {
        FnTransform::new(1, "|x|", |x, o| o[0] = x[0].abs())
    }

    fn polar() -> FnTransform {
        FnTransform::new(2, "polar", |x, o| {
            o[0] = x[0] * x[1].cos();
            o[1] = x[0] * x[1].sin();
        })
    }

    #[test]
    fn directional_linear_is_exact() {
        let l = LinearMap::from_rows(&[[2.0, 1.0], [0.5, -1.0]]).unwrap();
        let f = FnTransform::linear(l.clone());
        let u = [0.6, 0.8];
        let d = directional_derivative(&f, &[0.3, -0.2], &u, 1e-3, 6).unwrap();
        assert!(d.converged);
        for (a, b) in d.value.iter().zip(l.apply(&u)) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn directional_square_and_abs() {
        let d = directional_derivative(&square_1d(), &[1.0], &[1.0], 1e-4, 8).unwrap();
        assert!(d.converged && (d.value[0] - 2.0).abs() < 1e-5);
        // One-sided limit of |-h| / h.
        let d = directional_derivative(&abs_1d(), &[0.0], &[-1.0], 1e-3, 5).unwrap();
        assert!(d.converged);
        assert_eq!(d.value[0], 1.0);
    }

    #[test]
    fn directional_rejects_bad_input() {
        assert!(directional_derivative(&abs_1d(), &[0.0], &[2.0], 1e-3, 3).is_err());
        assert!(directional_derivative(&abs_1d(), &[0.0], &[1.0], 0.0, 3).is_err());
        assert!(directional_derivative(&abs_1d(), &[0.0], &[1.0], 1e-3, 0).is_err());
        let single = directional_derivative(&abs_1d(), &[0.5], &[1.0], 1e-3, 1).unwrap();
        assert!(!single.converged);
    }

    #[test]
    fn domain_exit_is_reported() {
        let f = abs_1d().with_domain(SemiOpenBox::new(vec![-1.0], vec![1.0]).unwrap());
        let err = directional_derivative(&f, &[1.0], &[1.0], 0.1, 2).unwrap_err();
        assert!(matches!(err, Error::DomainExit { .. }));
    }

    #[test]
    fn non_finite_values_are_reported() {
        let f = FnTransform::new(1, "log", |x, o| o[0] = x[0].ln());
        assert!(matches!(evaluate(&f, &[-1.0]), Err(Error::Evaluation { .. })));
    }

    #[test]
    fn estimate_linear() {
        let l = LinearMap::from_rows(&[[2.0, 1.0], [0.5, -1.0]]).unwrap();
        let est = derivative_estimate(&FnTransform::linear(l.clone()), &[1.0, 2.0], 0.0625, 64).unwrap();
        assert!(est.operator.sub(&l).frobenius_norm() < 1e-12);
        assert!(est.uniform_residual < 1e-12);
        assert_eq!(est.directions_sampled, 64);
    }

    #[test]
    fn estimate_polar_at_unit_radius() {
        let est = derivative_estimate(&polar(), &[1.0, 0.0], 1e-5, 64).unwrap();
        assert!(est.operator.sub(&LinearMap::identity(2)).frobenius_norm() < 1e-4);
        assert!((est.operator.determinant() - 1.0).abs() < 1e-4);
        assert!(est.is_differentiable());
    }

    #[test]
    fn estimate_flags_kink() {
        let est = derivative_estimate(&abs_1d(), &[0.0], 1e-5, 8).unwrap();
        assert_eq!(est.operator.get(0, 0), 1.0);
        assert!(est.uniform_residual >= 1.0);
        assert!(!est.is_differentiable());
    }

    #[test]
    fn directions_are_unit_and_distinct() {
        for (n, count) in [(1, 5), (2, 64), (3, 256), (4, 100), (5, 40)] {
            let dirs = sphere_directions(n, count);
            assert_eq!(dirs.len(), if n == 1 { 2 } else { count });
            for d in &dirs {
                assert!((norm(d) - 1.0).abs() < 1e-12, "n={n}");
            }
        }
    }

    #[test]
    fn scale_field_matches_radius() {
        let b = SemiOpenBox::new(vec![0.0, 0.0], vec![1.0, TAU]).unwrap();
        let r = crate::grid::subdivide(&b, 3).unwrap();
        let field = jacobian_scale_field(polar().shared(), &r, 1e-6).unwrap();
        for z in [[0.3, 1.0], [0.9, 4.0]] {
            assert!((field.eval(&z) - z[0]).abs() < 1e-5);
        }
        assert!(jacobian_scale_field(polar().shared(), &r, 0.1).is_err());
    }

    #[test]
    fn self_test_detects_wrong_jacobian() {
        let d = SemiOpenBox::new(vec![-1.0], vec![1.0]).unwrap();
        let ok = self_test(&square_1d(), &d, 7).unwrap().unwrap();
        assert!(ok.passed);
        let wrong = FnTransform::new(1, "x^2", |x, o| o[0] = x[0] * x[0])
            .with_jacobian(|x| LinearMap::diagonal(&[x[0]]));
        assert!(!self_test(&wrong, &d, 7).unwrap().unwrap().passed);
        assert!(self_test(&abs_1d(), &d, 3).unwrap().is_none());
    }
}

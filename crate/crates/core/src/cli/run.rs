use crate::diff::{default_directions, derivative_estimate, derivative_operator, self_test, SharedTransform};
use crate::error::{Error, Result};
use crate::grid::{subdivide, GridRegion};
use crate::indicatrix::indicatrix_identity;
use crate::linop::{scale_factor_boxcount, scale_factor_det};
use crate::patches::{decompose_with, sandwich_bounds, DecomposeOptions, PatchCover};
use crate::verify::{change_of_variable_check_with, zero_set_outer_measure, Route};

use super::config::{ExperimentConfig, Mode};
use super::report::{emit, ReportRow};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_TOLERANCE: i32 = 2;

/// Sub-boxes per axis for the scale-factor box count.
const SCALE_K: u32 = 16;
/// Lattice points per axis for the derivative probe.
const DIFF_POINTS: usize = 5;

/// Allowed relative gap for identity checks in dimension `n`.
pub fn gap_tolerance(n: usize) -> f64 {
    if n <= 2 {
        0.05
    } else {
        0.12
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub rows: Vec<ReportRow>,
    /// One message per row or check that missed its tolerance.
    pub failures: Vec<String>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            EXIT_OK
        } else {
            EXIT_TOLERANCE
        }
    }
}

/// Reads `COVTOOL_CELL_BUDGET` when set.
pub fn apply_budget_env() -> Result<()> {
    match std::env::var("COVTOOL_CELL_BUDGET") {
        Ok(v) => {
            let b: u64 = v
                .trim()
                .parse()
                .ok()
                .filter(|&b| b > 0)
                .ok_or_else(|| Error::invalid(format!("COVTOOL_CELL_BUDGET must be a positive integer, got `{v}`")))?;
            crate::grid::set_cell_budget(b);
            Ok(())
        }
        Err(_) => Ok(()),
    }
}

/// Runs every depth of the experiment on a pool of `cfg.threads` workers.
pub fn execute(cfg: &ExperimentConfig) -> Result<Outcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| {
        let mut out = Outcome {
            rows: Vec::new(),
            failures: Vec::new(),
        };
        for depth in cfg.depths() {
            let row = run_depth(cfg, depth, &mut out.failures)?;
            out.rows.push(row);
        }
        if cfg.mode == Mode::Zeroset {
            for w in out.rows.windows(2) {
                let (a, b) = (w[0].lhs.unwrap_or(0.0), w[1].lhs.unwrap_or(0.0));
                if b > a + 1e-12 {
                    out.failures
                        .push(format!("zero-set estimate grew from {a} at depth {} to {b} at depth {}", w[0].depth, w[1].depth));
                }
            }
        }
        Ok(out)
    })
}

/// Executes, writes the report and maps the result to an exit code.
/// Errors are printed to standard error.
pub fn run_experiment(cfg: &ExperimentConfig) -> i32 {
    let outcome = match execute(cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ERROR;
        }
    };
    if let Err(e) = emit(&outcome.rows, cfg.format, &cfg.output) {
        eprintln!("error: {e}");
        return EXIT_ERROR;
    }
    for f in &outcome.failures {
        eprintln!("tolerance: {f}");
    }
    outcome.exit_code()
}

fn base_row(cfg: &ExperimentConfig, depth: u32) -> ReportRow {
    ReportRow {
        mode: cfg.mode.name().into(),
        transform: cfg.transform.clone(),
        depth,
        ..Default::default()
    }
}

fn source(cfg: &ExperimentConfig, depth: u32) -> Result<GridRegion> {
    subdivide(&cfg.domain, depth)
}

fn run_depth(cfg: &ExperimentConfig, depth: u32, failures: &mut Vec<String>) -> Result<ReportRow> {
    let f: &SharedTransform = &cfg.entry.transform;
    let n = cfg.domain.dim();
    let row = base_row(cfg, depth);
    let row = match cfg.mode {
        Mode::Scale => {
            let (l, note) = match &cfg.entry.linear {
                Some(l) => (l.clone(), "linear"),
                None => (derivative_operator(&**f, &cfg.domain.center(), cfg.h)?, "derivative at domain center"),
            };
            let b = scale_factor_boxcount(&l, SCALE_K, depth)?;
            let det = scale_factor_det(&l)?;
            let row = ReportRow {
                lhs: Some(b.midpoint()),
                lhs_inner: Some(b.inner),
                lhs_outer: Some(b.outer),
                rhs: Some(det),
                notes: format!("{note}; k={SCALE_K}"),
                ..row
            }
            .with_gaps();
            if !b.contains(det) {
                failures.push(format!("depth {depth}: |det| {det} outside [{}, {}]", b.inner, b.outer));
            }
            row
        }
        Mode::Diff => {
            let dirs = default_directions(n);
            let mut worst: f64 = 0.0;
            let mut rough = 0;
            let total = DIFF_POINTS.pow(n as u32);
            for i in 0..total {
                let mut rem = i;
                let z: Vec<f64> = (0..n)
                    .map(|a| {
                        let k = rem % DIFF_POINTS;
                        rem /= DIFF_POINTS;
                        cfg.domain.lower()[a] + (k as f64 + 0.5) / DIFF_POINTS as f64 * cfg.domain.side(a)
                    })
                    .collect();
                let est = derivative_estimate(&**f, &z, cfg.h, dirs)?;
                worst = worst.max(est.uniform_residual);
                rough += usize::from(!est.is_differentiable());
            }
            let mut notes = format!("points={total} nondifferentiable={rough}");
            if let Some(t) = self_test(&**f, &cfg.domain, DIFF_POINTS)? {
                notes.push_str(&format!(" jacobian_self_test_ratio={:.3e}", t.worst_ratio));
                if !t.passed {
                    failures.push(format!("analytic Jacobian disagrees with differences (ratio {})", t.worst_ratio));
                }
            }
            ReportRow {
                lhs: Some(worst),
                notes,
                ..row
            }
        }
        Mode::Decompose => {
            let src = source(cfg, depth)?;
            let cover = decompose(cfg, &src, depth)?;
            if !cover.partitions(&src) {
                failures.push(format!("depth {depth}: patches and residual do not partition the region"));
            }
            let certified = cover.patches.iter().filter(|p| p.certified).count();
            let unchecked = cover.patches.iter().filter(|p| !p.injective_checked).count();
            if unchecked > 0 {
                failures.push(format!("depth {depth}: {unchecked} patches failed the injectivity check"));
            }
            let total = src.len() as f64 * src.cell_volume();
            let residual = cover.residual_volume();
            ReportRow {
                epsilon: Some(cfg.epsilon),
                lhs: Some(total - residual),
                rhs: Some(total),
                residual_volume: Some(residual),
                notes: format!("patches={} certified={certified}", cover.patches.len()),
                ..row
            }
            .with_gaps()
        }
        Mode::Sandwich => {
            let src = source(cfg, depth)?;
            let cover = decompose(cfg, &src, depth)?;
            let (mut inner, mut outer, mut rhs) = (0.0, 0.0, 0.0);
            let (mut used, mut missed) = (0, 0);
            for p in cover.patches.iter().filter(|p| p.certified && p.injective_checked) {
                let s = sandwich_bounds(f, p, depth, cfg.h)?;
                inner += s.image_bracket.0;
                outer += s.image_bracket.1;
                rhs += s.integral.value;
                used += 1;
                missed += usize::from(!s.overlaps());
            }
            if missed > 0 {
                failures.push(format!("depth {depth}: {missed} of {used} patches miss their sandwich"));
            }
            ReportRow {
                epsilon: Some(cfg.epsilon),
                lhs: Some(0.5 * (inner + outer)),
                lhs_inner: Some(inner),
                lhs_outer: Some(outer),
                rhs: Some(rhs),
                residual_volume: Some(cover.residual_volume()),
                notes: format!("patches={used} sandwich_misses={missed}"),
                ..row
            }
            .with_gaps()
        }
        Mode::Indicatrix => {
            let src = source(cfg, depth)?;
            let id = indicatrix_identity(f, &src, depth, cfg.h)?;
            let row = ReportRow {
                lhs: Some(id.lhs),
                rhs: Some(id.rhs),
                notes: format!(
                    "lhs_unflagged={:.6} flagged_volume={:.6}",
                    id.lhs_unflagged, id.flagged_volume
                ),
                ..row
            }
            .with_gaps();
            check_gap(&row, n, failures);
            row
        }
        Mode::Verify => {
            let src = source(cfg, depth)?;
            let phi = cfg.phi.field();
            let r = change_of_variable_check_with(f, &src, &phi, depth, cfg.h, Route::Auto)?;
            let route = match r.route {
                Route::Injective => "injective",
                _ => "indicatrix",
            };
            let row = ReportRow {
                lhs: Some(r.lhs),
                lhs_inner: r.lhs_bracket.map(|b| b.0),
                lhs_outer: r.lhs_bracket.map(|b| b.1),
                rhs: Some(r.rhs),
                abs_gap: Some(r.abs_gap),
                rel_gap: Some(r.rel_gap),
                notes: format!("route={route} phi={} {}", phi.description(), r.notes),
                ..row
            };
            check_gap(&row, n, failures);
            row
        }
        Mode::Zeroset => {
            let src = source(cfg, depth)?;
            let m = zero_set_outer_measure(f, &src, cfg.tau, cfg.h)?;
            ReportRow {
                lhs: Some(m),
                notes: format!("tau={}", cfg.tau),
                ..row
            }
        }
    };
    Ok(row)
}

fn decompose(cfg: &ExperimentConfig, src: &GridRegion, depth: u32) -> Result<PatchCover> {
    let opts = DecomposeOptions {
        seed: cfg.seed,
        step: Some(cfg.h),
        ..DecomposeOptions::new(cfg.epsilon, depth)
    };
    decompose_with(&*cfg.entry.transform, src, &opts)
}

fn check_gap(row: &ReportRow, n: usize, failures: &mut Vec<String>) {
    let gap = row.rel_gap.unwrap_or(f64::INFINITY);
    if !(gap <= gap_tolerance(n)) {
        failures.push(format!(
            "depth {}: relative gap {gap} exceeds {}",
            row.depth,
            gap_tolerance(n)
        ));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::config::parse_config;

    fn run(text: &str) -> Outcome {
        execute(&parse_config(text).unwrap()).unwrap()
    }

    #[test]
    fn linear_scale_brackets_det() {
        let o = run("transform = linear:2,0.5,0.25,1\nmode = scale\ndepth = 7");
        assert_eq!(o.exit_code(), EXIT_OK, "{:?}", o.failures);
        let r = &o.rows[0];
        assert_eq!(r.rhs, Some(1.875));
        assert!(r.lhs_inner.unwrap() <= 1.875 && 1.875 <= r.lhs_outer.unwrap());
    }

    #[test]
    fn fold_indicatrix_in_one_dimension() {
        let o = run("transform = fold\ndomain = -1 1\nmode = indicatrix");
        assert_eq!(o.exit_code(), EXIT_OK, "{:?}", o.failures);
        assert!((o.rows[0].lhs.unwrap() - 2.0).abs() < 0.05);
    }

    #[test]
    fn sweep_gives_one_row_per_depth() {
        let o = run("transform = squash\nmode = zeroset\nsweep = 3..6");
        let depths: Vec<u32> = o.rows.iter().map(|r| r.depth).collect();
        assert_eq!(depths, vec![3, 4, 5, 6]);
        assert_eq!(o.exit_code(), EXIT_OK, "{:?}", o.failures);
    }

    #[test]
    fn diff_flags_the_fold() {
        let o = run("transform = fold\ndomain = -1 1\nmode = diff");
        assert!(o.rows[0].notes.contains("nondifferentiable=1"), "{}", o.rows[0].notes);
        let o = run("transform = polar\nmode = diff");
        assert!(o.rows[0].notes.contains("nondifferentiable=0"), "{}", o.rows[0].notes);
        assert_eq!(o.exit_code(), EXIT_OK);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let a = run("transform = sinewarp:0.3\nmode = decompose\ndepth = 4");
        let b = run("transform = sinewarp:0.3\nmode = decompose\ndepth = 4\nthreads = 3");
        assert_eq!(a, b);
    }
}

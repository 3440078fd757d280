//! The Banach indicatrix `N(y)` on a target grid and the cumulated identity
//! `∫ N(y) dy = ∫_E |det F'|`.
//!
//! `N` at a target cell is the number of connected groups of source
//! cells whose image enclosures meet it. Target cells touched by the image
//! of the region's boundary, or of cells where the linear model is
//! unreliable, are flagged: their count depends on the grid.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::diff::{jacobian_scale_field, SharedTransform, Transform};
use crate::error::{Error, Result};
use crate::grid::image::model_step;
use crate::grid::text::{content_lines, parse_cell_tokens, parse_header};
use crate::grid::{integrate, GridRegion, ImageAnalysis};

#[derive(Debug, Clone, PartialEq)]
pub struct IndicatrixGrid {
    /// Target cells with `N > 0`.
    pub target: GridRegion,
    pub counts: BTreeMap<u64, u32>,
    pub flagged: BTreeSet<u64>,
}

impl IndicatrixGrid {
    pub fn count(&self, key: u64) -> u32 {
        self.counts.get(&key).copied().unwrap_or(0)
    }

    /// `Σ N × cell volume`.
    pub fn integral(&self) -> f64 {
        let total: u64 = self.counts.values().map(|&c| c as u64).sum();
        total as f64 * self.target.cell_volume()
    }

    pub fn flagged_volume(&self) -> f64 {
        self.flagged.len() as f64 * self.target.cell_volume()
    }

    /// `Σ N × cell volume` over unflagged cells only.
    pub fn unflagged_integral(&self) -> f64 {
        let total: u64 = self
            .counts
            .iter()
            .filter(|(k, _)| !self.flagged.contains(k))
            .map(|(_, &c)| c as u64)
            .sum();
        total as f64 * self.target.cell_volume()
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn components(src: &GridRegion, members: &[u64]) -> u32 {
    let local: HashMap<u64, usize> = members.iter().enumerate().map(|(i, &k)| (k, i)).collect();
    let mut parent: Vec<usize> = (0..members.len()).collect();
    let mut count = members.len() as u32;
    let n = src.dim();
    let offsets = 3usize.pow(n as u32);
    for (i, &k) in members.iter().enumerate() {
        for code in 0..offsets {
            let Some(m) = offset_key(src, k, code) else {
                continue;
            };
            if let Some(&j) = local.get(&m) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri] = rj;
                    count -= 1;
                }
            }
        }
    }
    count
}

/// The cell shifted by `-1`, `0` or `+1` per axis, the shifts being the
/// base-3 digits of `code`; `None` off the grid or for the zero shift.
fn offset_key(src: &GridRegion, key: u64, mut code: usize) -> Option<u64> {
    let mut k = key;
    let mut moved = false;
    for a in 0..src.dim() {
        let step = (code % 3) as i64 - 1;
        code /= 3;
        if step != 0 {
            k = src.neighbor_key(k, a, step)?;
            moved = true;
        }
    }
    moved.then_some(k)
}

pub fn banach_indicatrix(f: &dyn Transform, src: &GridRegion, target_depth: u32) -> Result<IndicatrixGrid> {
    let analysis = ImageAnalysis::new(f, src, target_depth, model_step(src))?;
    Ok(indicatrix_from(&analysis, src))
}

pub(crate) fn indicatrix_from(analysis: &ImageAnalysis, src: &GridRegion) -> IndicatrixGrid {
    let mut hits: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    for c in &analysis.cells {
        analysis.for_each_overlap(&c.lower, &c.upper, |t| hits.entry(t).or_default().push(c.key));
    }
    let counted: Vec<(u64, u32)> = hits
        .par_iter()
        .map(|(&t, members)| (t, components(src, members)))
        .collect();
    let mut target = analysis.target().cleared();
    let mut counts = BTreeMap::new();
    let mut flagged = BTreeSet::new();
    for (t, n) in counted {
        target.insert(t);
        counts.insert(t, n);
        if analysis.is_blocked(t) {
            flagged.insert(t);
        }
    }
    IndicatrixGrid {
        target,
        counts,
        flagged,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndicatrixIdentity {
    /// `Σ N × cell volume` over all target cells.
    pub lhs: f64,
    /// `∫_src |det F'|`.
    pub rhs: f64,
    pub rhs_error: f64,
    /// Same sum restricted to unflagged cells.
    pub lhs_unflagged: f64,
    pub flagged_volume: f64,
    pub grid: IndicatrixGrid,
}

impl IndicatrixIdentity {
    pub fn gap(&self) -> f64 {
        (self.lhs - self.rhs).abs()
    }
}

pub fn indicatrix_identity(
    f: &SharedTransform,
    src: &GridRegion,
    target_depth: u32,
    h: f64,
) -> Result<IndicatrixIdentity> {
    let grid = banach_indicatrix(&**f, src, target_depth)?;
    let field = jacobian_scale_field(f.clone(), src, h)?;
    let rhs = integrate(&field, src, 1)?;
    Ok(IndicatrixIdentity {
        lhs: grid.integral(),
        rhs: rhs.value,
        rhs_error: rhs.est_error,
        lhs_unflagged: grid.unflagged_integral(),
        flagged_volume: grid.flagged_volume(),
        grid,
    })
}

impl IndicatrixGrid {
    /// The grid header, then `y_cell <indices> N=<count>` per cell with
    /// `N > 0`, suffixed ` flagged` on boundary-layer cells.
    pub fn to_text(&self) -> String {
        let mut out = self.target.header_line();
        out.push('\n');
        for (&k, n) in &self.counts {
            out.push_str("y_cell");
            for i in self.target.decode(k) {
                write!(out, " {i}").unwrap();
            }
            write!(out, " N={n}").unwrap();
            if self.flagged.contains(&k) {
                out.push_str(" flagged");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = content_lines(text);
        let (line_no, header) = lines
            .next()
            .ok_or_else(|| Error::parse(1, "missing `bounds` header"))?;
        let mut target = parse_header(line_no, header)?;
        let mut counts = BTreeMap::new();
        let mut flagged = BTreeSet::new();
        for (line_no, line) in lines {
            let mut tokens: Vec<&str> = line.split_whitespace().collect();
            if tokens.first() != Some(&"y_cell") {
                return Err(Error::parse(line_no, "expected a `y_cell` line"));
            }
            let is_flagged = tokens.last() == Some(&"flagged");
            if is_flagged {
                tokens.pop();
            }
            let n = tokens
                .pop()
                .and_then(|t| t.strip_prefix("N="))
                .ok_or_else(|| Error::parse(line_no, "missing `N=<count>`"))?;
            let n: u32 = n
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::parse(line_no, format!("count must be a positive integer, got `{n}`")))?;
            let (key, outer) = parse_cell_tokens(&target, line_no, &tokens[1..])?;
            if outer {
                return Err(Error::parse(line_no, "unexpected `outer` marker"));
            }
            if counts.insert(key, n).is_some() {
                return Err(Error::parse(line_no, "cell listed twice"));
            }
            target.insert(key);
            if is_flagged {
                flagged.insert(key);
            }
        }
        Ok(Self {
            target,
            counts,
            flagged,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::FnTransform;
    use crate::grid::{subdivide, SemiOpenBox};
    use crate::linop::LinearMap;

    fn sym() -> SemiOpenBox {
        SemiOpenBox::new(vec![-1.0], vec![1.0]).unwrap()
    }

    #[test]
    fn identity_counts_one() {
        let id = FnTransform::linear(LinearMap::identity(2)).shared();
        let src = subdivide(&SemiOpenBox::unit(2), 5).unwrap();
        let res = indicatrix_identity(&id, &src, 5, 1e-6).unwrap();
        assert!(res.grid.counts.values().all(|&n| n == 1));
        assert!((res.rhs - 1.0).abs() < 1e-12);
        assert!((res.lhs - 1.0).abs() < 0.2, "{}", res.lhs);
    }

    #[test]
    fn fold_counts_two_inside() {
        let fold = FnTransform::new(1, "|x|", |x, o| o[0] = x[0].abs());
        let src = subdivide(&sym(), 8).unwrap();
        let g = banach_indicatrix(&fold, &src, 8).unwrap();
        for (&k, &n) in &g.counts {
            let y = g.target.cell_center(k)[0];
            if (0.05..0.95).contains(&y) {
                assert_eq!(n, 2, "y={y}");
            }
        }
    }

    #[test]
    fn square_identity_one_dimensional() {
        let sq = FnTransform::new(1, "x^2", |x, o| o[0] = x[0] * x[0])
            .with_jacobian(|x| LinearMap::diagonal(&[2.0 * x[0]]))
            .shared();
        let src = subdivide(&sym(), 8).unwrap();
        let res = indicatrix_identity(&sq, &src, 8, 1e-6).unwrap();
        assert!((res.rhs - 2.0).abs() < 1e-3);
        assert!(res.gap() < 0.05, "{res:?}");
        assert!(res.flagged_volume < 0.05);
    }

    #[test]
    fn components_include_corner_neighbors() {
        let src = subdivide(&SemiOpenBox::unit(2), 2).unwrap();
        let k = |i: u64, j: u64| src.encode(&[i, j]).unwrap();
        assert_eq!(components(&src, &[k(0, 0), k(0, 1), k(1, 1)]), 1);
        assert_eq!(components(&src, &[k(0, 0), k(1, 1)]), 1);
        assert_eq!(components(&src, &[k(0, 0), k(2, 2)]), 2);
        assert_eq!(components(&src, &[k(0, 0), k(3, 3), k(0, 3)]), 3);
    }

    #[test]
    fn dump_roundtrip_and_errors() {
        let fold = FnTransform::new(1, "|x|", |x, o| o[0] = x[0].abs());
        let g = banach_indicatrix(&fold, &subdivide(&sym(), 4).unwrap(), 4).unwrap();
        let text = g.to_text();
        assert!(text.lines().nth(1).unwrap().starts_with("y_cell 0 N="));
        assert_eq!(IndicatrixGrid::from_text(&text).unwrap(), g);
        for bad in [
            "bounds 0 1 depth 2\ny_cell 0",
            "bounds 0 1 depth 2\ny_cell 0 N=0",
            "bounds 0 1 depth 2\ny_cell 0 N=x",
            "bounds 0 1 depth 2\ny_cell 9 N=1",
            "bounds 0 1 depth 2\ny_cell 1 N=1\ny_cell 1 N=2",
            "bounds 0 1 depth 2\ncell 1",
        ] {
            assert!(IndicatrixGrid::from_text(bad).is_err(), "{bad}");
        }
    }
}

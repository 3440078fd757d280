//! Line-oriented text form of grid regions.
//!
//! ```text
//! bounds <lo_1> .. <lo_n> <hi_1> .. <hi_n> depth <d>
//! cell <i_1> .. <i_n>
//! cell <i_1> .. <i_n> outer
//! ```
//!
//! The `outer` marker flags a cell that only possibly meets the approximated
//! set. Blank lines and `#` comments are ignored when reading.

use std::fmt::Write as _;

use super::{GridRegion, SemiOpenBox};
use crate::error::{Error, Result};

impl GridRegion {
    pub fn header_line(&self) -> String {
        let mut s = String::from("bounds");
        for v in self.bounds.lower().iter().chain(self.bounds.upper()) {
            write!(s, " {v}").unwrap();
        }
        write!(s, " depth {}", self.depth).unwrap();
        s
    }

    pub fn cell_line(&self, key: u64) -> String {
        let mut s = String::from("cell");
        for i in self.decode(key) {
            write!(s, " {i}").unwrap();
        }
        if self.uncertain.contains(&key) {
            s.push_str(" outer");
        }
        s
    }

    /// Cell lines only, in index order, each newline-terminated.
    pub fn write_cells(&self, out: &mut String) {
        for key in self.keys() {
            out.push_str(&self.cell_line(key));
            out.push('\n');
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = self.header_line();
        out.push('\n');
        self.write_cells(&mut out);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = content_lines(text);
        let (line_no, header) = lines
            .next()
            .ok_or_else(|| Error::parse(1, "missing `bounds` header"))?;
        let mut region = parse_header(line_no, header)?;
        for (line_no, line) in lines {
            let parsed = parse_cell_line(&region, line_no, line)?;
            insert_unique(&mut region, line_no, parsed)?;
        }
        Ok(region)
    }
}

pub(crate) fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub(crate) fn parse_header(line_no: usize, line: &str) -> Result<GridRegion> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.first() != Some(&"bounds") {
        return Err(Error::parse(line_no, "expected `bounds` header"));
    }
    let depth_at = tokens
        .iter()
        .position(|t| *t == "depth")
        .ok_or_else(|| Error::parse(line_no, "header lacks `depth`"))?;
    if depth_at + 2 != tokens.len() {
        return Err(Error::parse(line_no, "`depth` must be followed by exactly one value"));
    }
    let coords = &tokens[1..depth_at];
    if coords.is_empty() || coords.len() % 2 != 0 {
        return Err(Error::parse(line_no, "bounds need n lower and n upper values"));
    }
    let values = coords
        .iter()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::parse(line_no, format!("bad bound `{t}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = values.len() / 2;
    let bounds = SemiOpenBox::new(values[..n].to_vec(), values[n..].to_vec())
        .map_err(|e| Error::parse(line_no, e.to_string()))?;
    let depth: u32 = tokens[depth_at + 1]
        .parse()
        .map_err(|_| Error::parse(line_no, format!("bad depth `{}`", tokens[depth_at + 1])))?;
    GridRegion::empty(bounds, depth).map_err(|e| Error::parse(line_no, e.to_string()))
}

/// Parses the tokens after `cell`: `<indices> [outer]`.
pub(crate) fn parse_cell_tokens(region: &GridRegion, line_no: usize, tokens: &[&str]) -> Result<(u64, bool)> {
    let n = region.dim();
    let (idx_tokens, outer) = match tokens.len() {
        l if l == n => (tokens, false),
        l if l == n + 1 && tokens[n] == "outer" => (&tokens[..n], true),
        _ => return Err(Error::parse(line_no, format!("expected {n} cell indices"))),
    };
    let idx = idx_tokens
        .iter()
        .map(|t| {
            t.parse::<u64>()
                .map_err(|_| Error::parse(line_no, format!("bad cell index `{t}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let key = region
        .encode(&idx)
        .map_err(|e| Error::parse(line_no, e.to_string()))?;
    Ok((key, outer))
}

fn parse_cell_line(region: &GridRegion, line_no: usize, line: &str) -> Result<(u64, bool)> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.first() != Some(&"cell") {
        return Err(Error::parse(line_no, "expected a `cell` line"));
    }
    parse_cell_tokens(region, line_no, &tokens[1..])
}

pub(crate) fn insert_unique(region: &mut GridRegion, line_no: usize, (key, outer): (u64, bool)) -> Result<()> {
    if !region.cells.insert(key) {
        return Err(Error::parse(line_no, "duplicate cell"));
    }
    if outer {
        region.uncertain.insert(key);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{rasterize, subdivide, Ball};

    #[test]
    fn plain_region_text() {
        let r = subdivide(&SemiOpenBox::unit(2), 1).unwrap();
        let text = r.to_text();
        assert_eq!(
            text,
            "bounds 0 0 1 1 depth 1\ncell 0 0\ncell 0 1\ncell 1 0\ncell 1 1\n"
        );
        assert_eq!(GridRegion::from_text(&text).unwrap(), r);
    }

    #[test]
    fn approximated_region_roundtrip() {
        let bounds = SemiOpenBox::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let disk = Ball {
            center: vec![0.1, 0.0],
            radius: 0.7,
        };
        let r = rasterize(&bounds, 4, &disk).unwrap();
        let back = GridRegion::from_text(&r.to_text()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.measure(), r.measure());
    }

    #[test]
    fn rejects_malformed() {
        for bad in [
            "",
            "cell 0 0",
            "bounds 0 1 depth",
            "bounds 0 0 1 depth 1",
            "bounds 0 0 1 1 depth x",
            "bounds 1 0 0 1 depth 1",
            "bounds 0 0 1 1 depth 1\ncell 0 2",
            "bounds 0 0 1 1 depth 1\ncell 0",
            "bounds 0 0 1 1 depth 1\ncell 0 0 inner",
            "bounds 0 0 1 1 depth 1\ncell 0 0\ncell 0 0",
            "bounds 0 0 1 1 depth 40",
        ] {
            assert!(GridRegion::from_text(bad).is_err(), "accepted {bad:?}");
        }
    }

    #[test]
    fn error_carries_line_number() {
        let err = GridRegion::from_text("# dump\nbounds 0 1 depth 2\n\ncell 9").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
    }
}

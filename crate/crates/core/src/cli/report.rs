//! CSV and JSON reports, one row per run.

use std::io::Write;

use serde::Serialize;

use super::config::Format;
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 12] = [
    "mode",
    "transform",
    "depth",
    "epsilon",
    "lhs",
    "lhs_inner",
    "lhs_outer",
    "rhs",
    "abs_gap",
    "rel_gap",
    "residual_volume",
    "notes",
];

/// Missing values print as empty CSV fields and JSON `null`.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ReportRow {
    pub mode: String,
    pub transform: String,
    pub depth: u32,
    pub epsilon: Option<f64>,
    pub lhs: Option<f64>,
    pub lhs_inner: Option<f64>,
    pub lhs_outer: Option<f64>,
    pub rhs: Option<f64>,
    pub abs_gap: Option<f64>,
    pub rel_gap: Option<f64>,
    pub residual_volume: Option<f64>,
    pub notes: String,
}

impl ReportRow {
    /// Fills both gaps from `lhs` and `rhs`; the relative gap divides by
    /// `max(1, |rhs|)`.
    pub fn with_gaps(mut self) -> Self {
        if let (Some(l), Some(r)) = (self.lhs, self.rhs) {
            let gap = (l - r).abs();
            self.abs_gap = Some(gap);
            self.rel_gap = Some(gap / r.abs().max(1.0));
        }
        self
    }

    fn fields(&self) -> [String; 12] {
        let num = |v: Option<f64>| v.map(format_g12).unwrap_or_default();
        [
            self.mode.clone(),
            self.transform.clone(),
            self.depth.to_string(),
            num(self.epsilon),
            num(self.lhs),
            num(self.lhs_inner),
            num(self.lhs_outer),
            num(self.rhs),
            num(self.abs_gap),
            num(self.rel_gap),
            num(self.residual_volume),
            self.notes.clone(),
        ]
    }

    fn rounded(&self) -> Self {
        let r = |v: Option<f64>| v.map(|x| format_g12(x).parse().unwrap_or(x));
        Self {
            epsilon: r(self.epsilon),
            lhs: r(self.lhs),
            lhs_inner: r(self.lhs_inner),
            lhs_outer: r(self.lhs_outer),
            rhs: r(self.rhs),
            abs_gap: r(self.abs_gap),
            rel_gap: r(self.rel_gap),
            residual_volume: r(self.residual_volume),
            ..self.clone()
        }
    }
}

/// Twelve significant digits in the style of C's `%.12g`.
pub fn format_g12(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.11e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..12).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{mantissa}e{sign}{:02}", exp.abs());
    }
    let decimals = (11 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn render(rows: &[ReportRow], format: Format) -> Result<String> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let io = |e: csv::Error| Error::invalid(format!("csv: {e}"));
            w.write_record(CSV_HEADER).map_err(io)?;
            for r in rows {
                w.write_record(r.fields()).map_err(io)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        Format::Json => {
            #[derive(Serialize)]
            struct Doc {
                rows: Vec<ReportRow>,
            }
            let doc = Doc {
                rows: rows.iter().map(ReportRow::rounded).collect(),
            };
            let mut s = serde_json::to_string(&doc).map_err(|e| Error::invalid(format!("json: {e}")))?;
            s.push('\n');
            Ok(s)
        }
    }
}

/// Writes to standard output for `-`, else to the named file.
pub fn emit(rows: &[ReportRow], format: Format, output: &str) -> Result<()> {
    let text = render(rows, format)?;
    if output == "-" {
        let mut out = std::io::stdout().lock();
        out.write_all(text.as_bytes())
            .and_then(|_| out.flush())
            .map_err(|source| Error::Io {
                path: "<stdout>".into(),
                source,
            })
    } else {
        std::fs::write(output, text).map_err(|source| Error::Io {
            path: output.into(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g12_matches_c() {
        for (v, s) in [
            (std::f64::consts::PI, "3.14159265359"),
            (0.0, "0"),
            (1.0, "1"),
            (-2.5, "-2.5"),
            (1e-5, "1e-05"),
            (1.5e-6, "1.5e-06"),
            (0.0001, "0.0001"),
            (123456789012.0, "123456789012"),
            (1234567890123.0, "1.23456789012e+12"),
            (0.1 + 0.2, "0.3"),
            (99999999999.95, "99999999999.9"),
            (999999999999.5, "1e+12"),
        ] {
            assert_eq!(format_g12(v), s, "{v}");
        }
    }

    fn row() -> ReportRow {
        ReportRow {
            mode: "verify".into(),
            transform: "polar".into(),
            depth: 9,
            lhs: Some(3.14),
            rhs: Some(std::f64::consts::PI),
            notes: "a, b".into(),
            ..Default::default()
        }
        .with_gaps()
    }

    #[test]
    fn csv_layout() {
        let text = render(&[row()], Format::Csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
        assert_eq!(
            lines.next().unwrap(),
            "verify,polar,9,,3.14,,,3.14159265359,0.00159265358979,0.000506957382897,,\"a, b\""
        );
        assert!(text.ends_with('\n'));
    }

    #[test]
    fn emit_writes_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        emit(&[row()], Format::Csv, path.to_str().unwrap()).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), render(&[row()], Format::Csv).unwrap());
        let missing = dir.path().join("no/such/dir.csv");
        assert!(matches!(
            emit(&[row()], Format::Csv, missing.to_str().unwrap()),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn json_mirror() {
        let text = render(&[row()], Format::Json).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let r = &v["rows"][0];
        assert_eq!(r["rhs"], 3.14159265359);
        assert!(r["epsilon"].is_null());
        assert_eq!(r["depth"], 9);
        assert_eq!(r.as_object().unwrap().len(), CSV_HEADER.len());
    }
}

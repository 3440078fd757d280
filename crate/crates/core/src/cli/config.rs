//! `key = value` experiment configs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::{check_budget, ScalarField, SemiOpenBox};
use crate::zoo::{lookup, parse_real, ZooEntry};

pub const KEYS: [&str; 13] = [
    "transform", "mode", "domain", "depth", "epsilon", "tau", "h", "seed", "format", "output", "threads", "sweep",
    "phi",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Scale,
    Diff,
    Decompose,
    Sandwich,
    Indicatrix,
    Verify,
    Zeroset,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::Scale,
        Mode::Diff,
        Mode::Decompose,
        Mode::Sandwich,
        Mode::Indicatrix,
        Mode::Verify,
        Mode::Zeroset,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Scale => "scale",
            Mode::Diff => "diff",
            Mode::Decompose => "decompose",
            Mode::Sandwich => "sandwich",
            Mode::Indicatrix => "indicatrix",
            Mode::Verify => "verify",
            Mode::Zeroset => "zeroset",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(format!("unknown format `{s}` (csv or json)")),
        }
    }
}

/// Integrand for the verify mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phi {
    One,
    FirstCoordinate,
    Product,
}

impl Phi {
    pub fn field(self) -> ScalarField {
        match self {
            Phi::One => ScalarField::constant(1.0),
            Phi::FirstCoordinate => ScalarField::coordinate(0),
            Phi::Product => ScalarField::coordinate_product(),
        }
    }
}

impl FromStr for Phi {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "1" => Ok(Phi::One),
            "x1" => Ok(Phi::FirstCoordinate),
            "prod" => Ok(Phi::Product),
            _ => Err(format!("unknown phi `{s}` (1, x1 or prod)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub transform: String,
    pub entry: ZooEntry,
    pub domain: SemiOpenBox,
    pub mode: Mode,
    pub depth: u32,
    pub epsilon: f64,
    pub tau: f64,
    pub h: f64,
    pub seed: u64,
    pub format: Format,
    /// `-` for standard output.
    pub output: String,
    pub threads: usize,
    /// Inclusive depth range; `None` runs `depth` alone.
    pub sweep: Option<(u32, u32)>,
    pub phi: Phi,
}

impl ExperimentConfig {
    pub fn depths(&self) -> Vec<u32> {
        match self.sweep {
            Some((a, b)) => (a..=b).collect(),
            None => vec![self.depth],
        }
    }
}

/// Raw key/value pairs with the line each came from (0 for overrides).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, (usize, String)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::parse(line_no, "expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::parse(line_no, format!("unknown key `{key}`")));
            }
            if value.is_empty() {
                return Err(Error::parse(line_no, format!("`{key}` has no value")));
            }
            if raw.entries.contains_key(key) {
                return Err(Error::parse(line_no, format!("`{key}` given twice")));
            }
            raw.entries.insert(key.to_string(), (line_no, value.to_string()));
        }
        Ok(raw)
    }

    /// Sets or replaces a key, as a command-line flag does.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(Error::invalid(format!("unknown key `{key}`")));
        }
        self.entries.insert(key.to_string(), (0, value.into()));
        Ok(())
    }

    fn get(&self, key: &str) -> Option<(usize, &str)> {
        self.entries.get(key).map(|(l, v)| (*l, v.as_str()))
    }

    fn value<T>(&self, key: &str, default: T, parse: impl Fn(&str) -> std::result::Result<T, String>) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some((line, v)) => parse(v).map_err(|m| located(line, format!("`{key}`: {m}"))),
        }
    }

    pub fn build(&self) -> Result<ExperimentConfig> {
        let (t_line, transform) = self
            .get("transform")
            .ok_or_else(|| Error::invalid("`transform` is required"))?;
        let domain = match self.get("domain") {
            Some((line, v)) => Some(parse_domain(v).map_err(|m| located(line, format!("`domain`: {m}")))?),
            None => None,
        };
        let entry = lookup(transform, domain.as_ref().map(SemiOpenBox::dim)).map_err(|e| match e {
            Error::UnknownTransform { .. } => e,
            other => located(t_line, other.to_string()),
        })?;
        let domain = domain.unwrap_or_else(|| entry.default_domain.clone());

        let mode = self.value("mode", Mode::Verify, |v| v.parse())?;
        let depth = self.value("depth", 8u32, |v| v.parse().map_err(|_| format!("bad integer `{v}`")))?;
        let epsilon = self.value("epsilon", 0.05, real)?;
        let tau = self.value("tau", 0.01, real)?;
        let h = self.value("h", 1e-5, real)?;
        let seed = self.value("seed", 42u64, |v| v.parse().map_err(|_| format!("bad integer `{v}`")))?;
        let format = self.value("format", Format::Csv, |v| v.parse())?;
        let output = self.value("output", "-".to_string(), |v| Ok(v.to_string()))?;
        let threads = self.value("threads", 1usize, |v| {
            v.parse().ok().filter(|t| *t >= 1).ok_or_else(|| format!("expected a positive integer, got `{v}`"))
        })?;
        let sweep = match self.get("sweep") {
            None => None,
            Some((line, v)) => Some(parse_sweep(v).map_err(|m| located(line, format!("`sweep`: {m}")))?),
        };
        let phi = self.value("phi", Phi::One, |v| v.parse())?;

        let line_of = |k: &str| self.get(k).map_or(0, |(l, _)| l);
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(located(line_of("epsilon"), format!("epsilon must lie in (0, 1), got {epsilon}")));
        }
        if !(tau > crate::patches::DEFAULT_TAU0) {
            return Err(located(line_of("tau"), format!("tau must exceed 1e-6, got {tau}")));
        }
        if !(h > 0.0) {
            return Err(located(line_of("h"), format!("h must be positive, got {h}")));
        }
        let n = domain.dim();
        let deepest = sweep.map_or(depth, |(_, b)| b);
        check_budget(n, deepest).map_err(|e| located(line_of(if sweep.is_some() { "sweep" } else { "depth" }), e.to_string()))?;

        Ok(ExperimentConfig {
            transform: transform.to_string(),
            entry,
            domain,
            mode,
            depth,
            epsilon,
            tau,
            h,
            seed,
            format,
            output,
            threads,
            sweep,
            phi,
        })
    }
}

fn located(line: usize, message: String) -> Error {
    if line == 0 {
        Error::InvalidInput(message)
    } else {
        Error::Parse { line, message }
    }
}

fn real(v: &str) -> std::result::Result<f64, String> {
    parse_real(v).ok_or_else(|| format!("bad number `{v}`"))
}

/// `lo_1 hi_1 lo_2 hi_2 ...`
pub fn parse_domain(v: &str) -> std::result::Result<SemiOpenBox, String> {
    let values = v.split_whitespace().map(real).collect::<std::result::Result<Vec<_>, _>>()?;
    if values.is_empty() || values.len() % 2 != 0 {
        return Err("expected pairs `lo hi` per axis".into());
    }
    let (lower, upper): (Vec<f64>, Vec<f64>) = values.chunks(2).map(|p| (p[0], p[1])).unzip();
    SemiOpenBox::new(lower, upper).map_err(|e| e.to_string())
}

/// `a..b` with `a <= b`.
pub fn parse_sweep(v: &str) -> std::result::Result<(u32, u32), String> {
    let (a, b) = v.split_once("..").ok_or("expected `a..b`")?;
    let a: u32 = a.trim().parse().map_err(|_| format!("bad depth `{a}`"))?;
    let b: u32 = b.trim().parse().map_err(|_| format!("bad depth `{b}`"))?;
    if a > b {
        return Err(format!("empty range {a}..{b}"));
    }
    Ok((a, b))
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    RawConfig::parse(text)?.build()
}

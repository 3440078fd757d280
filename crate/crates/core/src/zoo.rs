//! Built-in transforms, looked up by name.
//!
//! | name | map | default domain |
//! |---|---|---|
//! | `identity` | `x` | unit box |
//! | `linear:a,b,c,d` | row-major 2×2 matrix | unit square |
//! | `rotation:t` | rotation by `t` radians | unit square |
//! | `shear:s` | `(x + s y, y)` | unit square |
//! | `polar` | `(r cos t, r sin t)` | `[0,1)×[0,2π)` |
//! | `fold` | `|x_1|`, other axes fixed | `[-1,1)^n` |
//! | `square` | `x_1²`, other axes fixed | `[-1,1)^n` |
//! | `squash` | `(x², y)` | `[-1,1)×[0,1)` |
//! | `sinewarp:a` | `(x + a sin y, y)` | unit square |
//!
//! Parameters accept plain reals and multiples of `pi` (`pi`, `2pi`,
//! `-pi/2`).

use std::f64::consts::PI;
use std::sync::Arc;

use crate::diff::{SharedTransform, Transform};
use crate::error::{Error, Result};
use crate::grid::SemiOpenBox;
use crate::linop::LinearMap;

pub const NAMES: [&str; 9] = [
    "identity",
    "linear:<a,b,c,d>",
    "rotation:<angle>",
    "shear:<s>",
    "polar",
    "fold",
    "square",
    "squash",
    "sinewarp:<a>",
];

#[derive(Debug, Clone)]
enum Kind {
    Linear(LinearMap),
    Polar,
    Fold,
    Square,
    SineWarp(f64),
}

#[derive(Debug, Clone)]
pub struct ZooTransform {
    kind: Kind,
    dim: usize,
    label: String,
}

impl Transform for ZooTransform {
    fn dim(&self) -> usize {
        self.dim
    }

    fn label(&self) -> String {
        self.label.clone()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
        match &self.kind {
            Kind::Linear(l) => l.apply_into(x, out),
            Kind::Polar => {
                let (s, c) = x[1].sin_cos();
                out[0] = x[0] * c;
                out[1] = x[0] * s;
            }
            Kind::Fold => out[0] = x[0].abs(),
            Kind::Square => out[0] = x[0] * x[0],
            Kind::SineWarp(a) => out[0] = x[0] + a * x[1].sin(),
        }
    }

    fn jacobian(&self, x: &[f64]) -> Option<LinearMap> {
        let mut j = LinearMap::identity(self.dim);
        match &self.kind {
            Kind::Linear(l) => return Some(l.clone()),
            Kind::Polar => {
                let (s, c) = x[1].sin_cos();
                j = LinearMap::from_rows(&[[c, -x[0] * s], [s, x[0] * c]]).ok()?;
            }
            Kind::Fold => return None,
            Kind::Square => j.set(0, 0, 2.0 * x[0]),
            Kind::SineWarp(a) => j.set(0, 1, a * x[1].cos()),
        }
        Some(j)
    }
}

/// A registry transform with the domain it is meant to be studied on.
#[derive(Clone)]
pub struct ZooEntry {
    pub transform: SharedTransform,
    pub default_domain: SemiOpenBox,
    /// The matrix, for linear entries.
    pub linear: Option<LinearMap>,
}

impl std::fmt::Debug for ZooEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ZooEntry")
            .field("transform", &self.transform.label())
            .field("default_domain", &self.default_domain)
            .finish()
    }
}

/// Parses a real, allowing `pi` with an optional integer or real factor in
/// front and an optional `/divisor` after.
pub fn parse_real(text: &str) -> Option<f64> {
    let t = text.trim();
    if let Ok(v) = t.parse::<f64>() {
        return v.is_finite().then_some(v);
    }
    let (num, den) = match t.split_once('/') {
        Some((a, b)) => (a, b.trim().parse::<f64>().ok().filter(|d| *d != 0.0)?),
        None => (t, 1.0),
    };
    let factor = num.trim().strip_suffix("pi")?.trim().trim_end_matches('*');
    let factor = match factor {
        "" | "+" => 1.0,
        "-" => -1.0,
        f => f.parse::<f64>().ok()?,
    };
    let v = factor * PI / den;
    v.is_finite().then_some(v)
}

fn param(name: &str, spec: &str, raw: Option<&str>) -> Result<f64> {
    let raw = raw.ok_or_else(|| Error::invalid(format!("`{name}` needs a parameter, e.g. `{name}:0.5`")))?;
    parse_real(raw).ok_or_else(|| Error::invalid(format!("bad parameter in `{spec}`")))
}

fn unknown(name: &str) -> Error {
    Error::UnknownTransform {
        name: name.to_string(),
        known: NAMES.iter().map(|s| s.to_string()).collect(),
    }
}

fn boxed(lower: Vec<f64>, upper: Vec<f64>) -> SemiOpenBox {
    SemiOpenBox::new(lower, upper).expect("registry domains are valid")
}

/// Looks up `spec` (`name` or `name:params`). `dim` applies to the
/// dimension-generic entries (`identity`, `fold`, `square`) and defaults
/// to 2; fixed-dimension entries reject any other value.
pub fn lookup(spec: &str, dim: Option<usize>) -> Result<ZooEntry> {
    let spec = spec.trim();
    let (name, raw) = match spec.split_once(':') {
        Some((a, b)) => (a.trim(), Some(b.trim())),
        None => (spec, None),
    };
    let generic = matches!(name, "identity" | "fold" | "square");
    let n = dim.unwrap_or(2);
    if n == 0 {
        return Err(Error::invalid("dimension must be at least 1"));
    }
    if !generic && n != 2 {
        if NAMES.iter().any(|k| k.split(':').next() == Some(name)) {
            return Err(Error::invalid(format!("`{name}` is only defined in dimension 2")));
        }
        return Err(unknown(name));
    }
    if matches!(name, "identity" | "polar" | "fold" | "square" | "squash") && raw.is_some() {
        return Err(Error::invalid(format!("`{name}` takes no parameters")));
    }
    let unit = SemiOpenBox::unit(n);
    let sym = boxed(vec![-1.0; n], vec![1.0; n]);
    let (kind, domain) = match name {
        "identity" => (Kind::Linear(LinearMap::identity(n)), unit),
        "linear" => {
            let raw = raw.ok_or_else(|| Error::invalid("`linear` needs four entries, e.g. `linear:2,0,0,1`"))?;
            let entries = raw
                .split(',')
                .map(|t| parse_real(t).ok_or_else(|| Error::invalid(format!("bad entry `{t}` in `{spec}`"))))
                .collect::<Result<Vec<_>>>()?;
            if entries.len() != 4 {
                return Err(Error::invalid(format!("`linear` needs 4 entries, got {}", entries.len())));
            }
            (Kind::Linear(LinearMap::new(2, entries)?), unit)
        }
        "rotation" => {
            let t = param(name, spec, raw)?;
            let (s, c) = t.sin_cos();
            (Kind::Linear(LinearMap::from_rows(&[[c, -s], [s, c]])?), unit)
        }
        "shear" => {
            let s = param(name, spec, raw)?;
            (Kind::Linear(LinearMap::from_rows(&[[1.0, s], [0.0, 1.0]])?), unit)
        }
        "polar" => (Kind::Polar, boxed(vec![0.0, 0.0], vec![1.0, 2.0 * PI])),
        "fold" => (Kind::Fold, sym),
        "square" => (Kind::Square, sym),
        "squash" => (Kind::Square, boxed(vec![-1.0, 0.0], vec![1.0, 1.0])),
        "sinewarp" => (Kind::SineWarp(param(name, spec, raw)?), unit),
        _ => return Err(unknown(name)),
    };
    let linear = match &kind {
        Kind::Linear(l) => Some(l.clone()),
        _ => None,
    };
    let transform = ZooTransform {
        kind,
        dim: n,
        label: spec.to_string(),
    };
    Ok(ZooEntry {
        transform: Arc::new(transform),
        default_domain: domain,
        linear,
    })
}

/// One representative spec per registry entry, for smoke tests.
pub fn representatives() -> Vec<&'static str> {
    vec![
        "identity",
        "linear:2,0.5,0.25,1",
        "rotation:0.7",
        "shear:0.5",
        "polar",
        "fold",
        "square",
        "squash",
        "sinewarp:0.3",
    ]
}

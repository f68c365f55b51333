//! Circle packings in the unit square and their text encoding.
//!
//! A candidate file holds one circle per line as three decimals `x y r`.
//! Blank lines and lines starting with `#` are ignored.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Geometric tolerance for containment and non-overlap.
pub const TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub x: f64,
    pub y: f64,
    pub r: f64,
}

impl Circle {
    pub fn new(x: f64, y: f64, r: f64) -> Self {
        Self { x, y, r }
    }

    pub fn center_distance(&self, other: &Circle) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Largest radius this center admits inside the unit square.
    pub fn wall_clearance(&self) -> f64 {
        self.x.min(1.0 - self.x).min(self.y).min(1.0 - self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Parse,
    Containment,
    Overlap,
    Nonpositive,
}

/// One broken validity constraint. `indices` are zero-based circle positions
/// (or one-based line numbers for parse errors); `magnitude` is how far the
/// constraint is exceeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub indices: Vec<usize>,
    pub magnitude: f64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl Violation {
    pub fn parse(line: usize, detail: impl Into<String>) -> Self {
        Self {
            kind: ViolationKind::Parse,
            indices: vec![line],
            magnitude: 0.0,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CirclePacking {
    pub circles: Vec<Circle>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl CirclePacking {
    pub fn new(circles: Vec<Circle>) -> Self {
        Self { circles }
    }

    pub fn len(&self) -> usize {
        self.circles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.circles.is_empty()
    }

    /// Sum of radii in input order.
    pub fn sum_of_radii(&self) -> f64 {
        self.circles.iter().map(|c| c.r).sum()
    }

    /// Every constraint the packing breaks at tolerance `tol`.
    pub fn violations(&self, tol: f64) -> Vec<Violation> {
        let mut out = Vec::new();
        for (i, c) in self.circles.iter().enumerate() {
            if !(c.x.is_finite() && c.y.is_finite() && c.r.is_finite()) {
                out.push(Violation {
                    kind: ViolationKind::Parse,
                    indices: vec![i],
                    magnitude: f64::INFINITY,
                    detail: "non-finite value".into(),
                });
                continue;
            }
            if c.r <= 0.0 {
                out.push(Violation {
                    kind: ViolationKind::Nonpositive,
                    indices: vec![i],
                    magnitude: -c.r,
                    detail: String::new(),
                });
            }
            let excess = [c.r - c.x, c.x + c.r - 1.0, c.r - c.y, c.y + c.r - 1.0]
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max);
            if excess > tol {
                out.push(Violation {
                    kind: ViolationKind::Containment,
                    indices: vec![i],
                    magnitude: excess,
                    detail: String::new(),
                });
            }
        }
        for i in 0..self.circles.len() {
            for j in (i + 1)..self.circles.len() {
                let (a, b) = (&self.circles[i], &self.circles[j]);
                let overlap = a.r + b.r - a.center_distance(b);
                if overlap > tol {
                    out.push(Violation {
                        kind: ViolationKind::Overlap,
                        indices: vec![i, j],
                        magnitude: overlap,
                        detail: String::new(),
                    });
                }
            }
        }
        out
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.violations(tol).is_empty()
    }

    /// Canonical text encoding. Values use the shortest representation that
    /// parses back to the same `f64`.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.circles.len() * 64);
        for c in &self.circles {
            s.push_str(&format!("{} {} {}\n", c.x, c.y, c.r));
        }
        s
    }

    /// Multiplies every radius by `factor`.
    pub fn scale_radii(&mut self, factor: f64) {
        for c in &mut self.circles {
            c.r *= factor;
        }
    }
}

impl FromStr for CirclePacking {
    type Err = ParseError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut circles = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(ParseError {
                    line: idx + 1,
                    message: format!("expected 3 fields `x y r`, found {}", fields.len()),
                });
            }
            let mut vals = [0.0f64; 3];
            for (slot, field) in vals.iter_mut().zip(&fields) {
                *slot = field.parse().map_err(|_| ParseError {
                    line: idx + 1,
                    message: format!("not a decimal: {field:?}"),
                })?;
            }
            circles.push(Circle::new(vals[0], vals[1], vals[2]));
        }
        Ok(Self { circles })
    }
}

impl fmt::Display for CirclePacking {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// A valid but deliberately loose starting packing: circles on a square grid,
/// each at 60% of its cell's inscribed radius.
pub fn grid_seed(n: usize) -> CirclePacking {
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    let rows = n.div_ceil(cols).max(1);
    let cell = 1.0 / cols.max(rows) as f64;
    let r = 0.6 * cell / 2.0;
    let circles = (0..n)
        .map(|i| {
            let (row, col) = (i / cols, i % cols);
            Circle::new((col as f64 + 0.5) * cell, (row as f64 + 0.5) * cell, r)
        })
        .collect();
    CirclePacking { circles }
}

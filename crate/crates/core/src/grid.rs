//! Periodic 1D domains, cell-centered grids, nested refinements and the field
//! containers shared by the solvers.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// The interval `[a, b]`, treated as periodic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain1D {
    a: f64,
    b: f64,
}

impl Domain1D {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && a < b) {
            return invalid(format!("domain needs finite a < b, got [{a}, {b}]"));
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn length(&self) -> f64 {
        self.b - self.a
    }

    pub fn periodic(&self) -> bool {
        true
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.a && x <= self.b
    }

    /// Maps `x` to `[0, 1]` relative to this domain.
    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.a) / self.length()
    }
}

/// Uniform cell-centered grid: `point_i = a + (i + 1/2) dx` with `dx = (b - a)/n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    domain: Domain1D,
    n: usize,
    dx: f64,
    points: Vec<f64>,
}

impl Grid1D {
    pub fn uniform(domain: Domain1D, n: usize) -> Result<Self> {
        if n < 2 {
            return invalid(format!("grid needs at least 2 points, got {n}"));
        }
        let dx = domain.length() / n as f64;
        let points = (0..n).map(|i| domain.a + (i as f64 + 0.5) * dx).collect();
        Ok(Self {
            domain,
            n,
            dx,
            points,
        })
    }

    pub fn domain(&self) -> Domain1D {
        self.domain
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Largest distance from any domain point to its nearest grid point.
    pub fn fill_distance(&self) -> f64 {
        self.dx / 2.0
    }

    /// Index of the cell containing `x`; `x = b` belongs to the last cell.
    pub fn cell_of(&self, x: f64) -> Result<usize> {
        if !self.domain.contains(x) {
            return Err(Error::OutOfDomain {
                x,
                a: self.domain.a,
                b: self.domain.b,
            });
        }
        Ok((((x - self.domain.a) / self.dx).floor() as usize).min(self.n - 1))
    }
}

pub fn make_uniform_grid(domain: Domain1D, n: usize) -> Result<Grid1D> {
    Grid1D::uniform(domain, n)
}

/// Nested sequence of grids with `n = base_n * 2^i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    domain: Domain1D,
    levels: Vec<Grid1D>,
}

impl Refinement {
    pub fn domain(&self) -> Domain1D {
        self.domain
    }

    pub fn levels(&self) -> &[Grid1D] {
        &self.levels
    }

    /// First level whose fill distance is below `eps`.
    pub fn level_finer_than(&self, eps: f64) -> Option<&Grid1D> {
        self.levels.iter().find(|g| g.fill_distance() < eps)
    }
}

pub fn make_refinement(domain: Domain1D, base_n: usize, levels: usize) -> Result<Refinement> {
    if base_n < 2 || levels < 1 {
        return invalid(format!(
            "refinement needs base_n >= 2 and levels >= 1, got {base_n}, {levels}"
        ));
    }
    let levels = (0..levels)
        .map(|i| {
            let n = base_n
                .checked_mul(1usize << i)
                .ok_or_else(|| Error::InvalidArgument("refinement level overflows".into()))?;
            Grid1D::uniform(domain, n)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Refinement { domain, levels })
}

/// Step function with values `values[j]` on `[breakpoints[j], breakpoints[j+1])`,
/// closed at the right end of the domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseConstantField {
    breakpoints: Vec<f64>,
    values: Vec<f64>,
}

impl PiecewiseConstantField {
    pub fn new(breakpoints: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return invalid("piecewise field needs at least one piece");
        }
        if breakpoints.len() != values.len() + 1 {
            return invalid(format!(
                "{} pieces need {} breakpoints, got {}",
                values.len(),
                values.len() + 1,
                breakpoints.len()
            ));
        }
        if breakpoints.iter().chain(&values).any(|v| !v.is_finite()) {
            return invalid("piecewise field entries must be finite");
        }
        if breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("breakpoints must be strictly increasing");
        }
        Ok(Self {
            breakpoints,
            values,
        })
    }

    pub fn constant(domain: Domain1D, value: f64) -> Result<Self> {
        Self::new(vec![domain.a, domain.b], vec![value])
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pieces(&self) -> usize {
        self.values.len()
    }

    pub fn domain(&self) -> Domain1D {
        Domain1D {
            a: self.breakpoints[0],
            b: *self.breakpoints.last().unwrap(),
        }
    }

    /// Breakpoints strictly inside the domain.
    pub fn interior_breakpoints(&self) -> &[f64] {
        &self.breakpoints[1..self.breakpoints.len() - 1]
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        let d = self.domain();
        if !d.contains(x) {
            return Err(Error::OutOfDomain { x, a: d.a, b: d.b });
        }
        // Count interior breakpoints <= x: half-open pieces, closed at b.
        let j = self.interior_breakpoints().partition_point(|&bp| bp <= x);
        Ok(self.values[j])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            breakpoints: Vec<f64>,
            values: Vec<f64>,
        }
        let raw: Raw = serde_json::from_str(s)?;
        Self::new(raw.breakpoints, raw.values)
    }
}

pub fn eval_piecewise(field: &PiecewiseConstantField, x: f64) -> Result<f64> {
    field.eval(x)
}

/// One real value per grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarField1D {
    grid: Grid1D,
    values: Vec<f64>,
}

impl ScalarField1D {
    pub fn new(grid: Grid1D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n() {
            return invalid(format!(
                "field has {} values for a {}-point grid",
                values.len(),
                grid.n()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("field values must be finite");
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: &Grid1D, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = grid.points().iter().map(|&x| f(x)).collect();
        Self::new(grid.clone(), values)
    }

    pub fn constant(grid: &Grid1D, value: f64) -> Result<Self> {
        Self::new(grid.clone(), vec![value; grid.n()])
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,value")?;
        for (x, v) in self.grid.points().iter().zip(&self.values) {
            writeln!(w, "{x:e},{v:e}")?;
        }
        Ok(())
    }
}

/// Relative L2 distance `||a - b|| / ||b||`.
pub fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

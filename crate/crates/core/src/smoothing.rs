//! Continuous tanh surrogate for piecewise-constant functions.
//!
//! Each interior breakpoint `a_j` gets a shifted, scaled tanh step living on
//! `[y_j, y_{j+1}]`, where `y_j` is the midpoint of the `j`-th piece. Segments
//! are glued left to right: a constant correction is added to each segment so
//! that it takes exactly the value of its left neighbour at their shared
//! midpoint.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{Domain1D, PiecewiseConstantField};

/// `alpha/2 + (alpha/2) tanh(k x)`.
pub fn heaviside_tanh(x: f64, k: f64, alpha: f64) -> f64 {
    alpha / 2.0 + (alpha / 2.0) * (k * x).tanh()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub lo: f64,
    pub hi: f64,
    pub left_value: f64,
    pub right_value: f64,
    pub breakpoint: f64,
    pub correction: f64,
}

impl Segment {
    /// Uncorrected step `omega_j + H_k(x - a_j; omega_{j+1} - omega_j)`.
    fn raw(&self, x: f64, k: f64) -> f64 {
        self.left_value + heaviside_tanh(x - self.breakpoint, k, self.right_value - self.left_value)
    }

    fn value(&self, x: f64, k: f64) -> f64 {
        self.raw(x, k) + self.correction
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothApprox {
    k: f64,
    domain: Domain1D,
    segments: Vec<Segment>,
}

impl SmoothApprox {
    pub fn build(phi: &PiecewiseConstantField, k: f64) -> Result<Self> {
        if !(k > 0.0 && k.is_finite()) {
            return invalid(format!("sharpness k must be positive, got {k}"));
        }
        let domain = phi.domain();
        let bp = phi.breakpoints();
        let w = phi.values();
        let m = w.len();
        if m == 1 {
            let seg = Segment {
                lo: domain.a(),
                hi: domain.b(),
                left_value: w[0],
                right_value: w[0],
                breakpoint: domain.a(),
                correction: 0.0,
            };
            return Ok(Self {
                k,
                domain,
                segments: vec![seg],
            });
        }
        // midpoints y_1..y_m of each piece
        let mids: Vec<f64> = bp.windows(2).map(|p| 0.5 * (p[0] + p[1])).collect();
        let mut segments: Vec<Segment> = Vec::with_capacity(m - 1);
        for j in 0..m - 1 {
            let lo = if j == 0 { domain.a() } else { mids[j] };
            let hi = if j == m - 2 { domain.b() } else { mids[j + 1] };
            let mut seg = Segment {
                lo,
                hi,
                left_value: w[j],
                right_value: w[j + 1],
                breakpoint: bp[j + 1],
                correction: 0.0,
            };
            if let Some(prev) = segments.last() {
                seg.correction = prev.value(lo, k) - seg.raw(lo, k);
            }
            segments.push(seg);
        }
        Ok(Self {
            k,
            domain,
            segments,
        })
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn domain(&self) -> Domain1D {
        self.domain
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Shared endpoints between consecutive segments.
    pub fn midpoints(&self) -> Vec<f64> {
        self.segments.iter().skip(1).map(|s| s.lo).collect()
    }

    pub fn evaluate(&self, x: f64) -> Result<f64> {
        if !self.domain.contains(x) {
            return Err(Error::OutOfDomain {
                x,
                a: self.domain.a(),
                b: self.domain.b(),
            });
        }
        // a shared midpoint belongs to the segment on its left
        let idx = self
            .segments
            .partition_point(|s| s.hi < x)
            .min(self.segments.len() - 1);
        Ok(self.segments[idx].value(x, self.k))
    }

    /// `|left(y_j) - right(y_j)|` at every shared midpoint.
    pub fn midpoint_jumps(&self) -> Vec<f64> {
        self.segments
            .windows(2)
            .map(|p| (p[0].value(p[0].hi, self.k) - p[1].value(p[1].lo, self.k)).abs())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

pub fn build(phi: &PiecewiseConstantField, k: f64) -> Result<SmoothApprox> {
    SmoothApprox::build(phi, k)
}

pub fn evaluate(approx: &SmoothApprox, x: f64) -> Result<f64> {
    approx.evaluate(x)
}

/// Max `|A_k phi - phi|` over `probe_n` uniform samples of `[a, b]`, skipping
/// samples within `delta` of an interior breakpoint.
pub fn sup_error_outside(
    phi: &PiecewiseConstantField,
    approx: &SmoothApprox,
    delta: f64,
    probe_n: usize,
) -> Result<f64> {
    let min_width = phi
        .breakpoints()
        .windows(2)
        .map(|p| p[1] - p[0])
        .fold(f64::INFINITY, f64::min);
    if !(delta > 0.0) || (phi.pieces() > 1 && delta >= 0.5 * min_width) {
        return invalid(format!(
            "delta {delta} must be positive and below half the narrowest piece ({min_width})"
        ));
    }
    if probe_n < 2 {
        return invalid("need at least two probe points");
    }
    let d = phi.domain();
    let interior = phi.interior_breakpoints();
    let mut worst = 0.0f64;
    for i in 0..probe_n {
        let x = d.a() + d.length() * i as f64 / (probe_n - 1) as f64;
        if interior.iter().any(|&b| (x - b).abs() < delta) {
            continue;
        }
        worst = worst.max((approx.evaluate(x)? - phi.eval(x)?).abs());
    }
    Ok(worst)
}

//! Uniform time grid and the L1 discretisation of the Caputo derivative.
//!
//! On a grid `t_n = n dt` the L1 scheme approximates
//!
//! ```text
//! D^a v(t_n) ~ dt^{-a} / Gamma(2 - a) * sum_{k=0}^{n-1} b_k (v^{n-k} - v^{n-k-1}),
//! b_k = (k + 1)^{1-a} - k^{1-a}.
//! ```
//!
//! For a series with `v^0 = 0` this is a lower-triangular Toeplitz operator
//! acting on `v^1..v^nt` with diagonal `b_0` and sub-diagonals
//! `b_j - b_{j-1}` (see [`CaputoWeights::toeplitz`]).

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalGrid {
    horizon: f64,
    steps: usize,
    alpha: f64,
}

impl TemporalGrid {
    pub fn new(horizon: f64, steps: usize, alpha: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::invalid("time grid needs at least one step"));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invalid(format!(
                "fractional order must lie in (0, 1), got {alpha}"
            )));
        }
        Ok(Self {
            horizon,
            steps,
            alpha,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, n: usize) -> f64 {
        if n == self.steps {
            self.horizon
        } else {
            n as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|n| self.time(n)).collect()
    }

    /// Composite trapezoid weights on `t_0..t_nt`.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let dt = self.dt();
        (0..=self.steps)
            .map(|n| if n == 0 || n == self.steps { 0.5 * dt } else { dt })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaputoWeights {
    b: Vec<f64>,
    scale: f64,
}

/// L1 weights `b_0..b_{nt-1}` and the leading factor `dt^{-a}/Gamma(2-a)`.
pub fn caputo_weights(grid: &TemporalGrid) -> CaputoWeights {
    let e = 1.0 - grid.alpha();
    let b = (0..grid.steps())
        .map(|k| {
            let k = k as f64;
            (k + 1.0).powf(e) - k.powf(e)
        })
        .collect();
    let scale = grid.dt().powf(-grid.alpha()) / gamma(2.0 - grid.alpha());
    CaputoWeights { b, scale }
}

impl CaputoWeights {
    pub fn coefficients(&self) -> &[f64] {
        &self.b
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Toeplitz entries `l_0 = b_0`, `l_j = b_j - b_{j-1}` (negative for j >= 1).
    pub fn toeplitz(&self) -> Vec<f64> {
        let mut l = Vec::with_capacity(self.b.len());
        l.push(self.b[0]);
        for j in 1..self.b.len() {
            l.push(self.b[j] - self.b[j - 1]);
        }
        l
    }

    /// Checks `b_0 = 1`, positivity, strict decrease and the telescoping sum.
    pub fn check_invariants(&self, tol: f64) -> std::result::Result<(), String> {
        check_weight_invariants(&self.b, tol)
    }
}

pub(crate) fn check_weight_invariants(b: &[f64], tol: f64) -> std::result::Result<(), String> {
    if b.is_empty() {
        return Err("empty weight array".into());
    }
    if (b[0] - 1.0).abs() > tol {
        return Err(format!("b_0 = {} differs from 1", b[0]));
    }
    for (k, w) in b.iter().enumerate() {
        if *w <= 0.0 {
            return Err(format!("b_{k} = {w} is not positive"));
        }
    }
    for k in 1..b.len() {
        if b[k] >= b[k - 1] {
            return Err(format!("weights not strictly decreasing at k = {k}"));
        }
    }
    // sum_{k<n} b_k = n^{1-a}; recover the exponent from b_1 when available
    if b.len() > 1 {
        let e = (b[1] + 1.0).log2();
        let mut sum = 0.0;
        for (k, w) in b.iter().enumerate() {
            sum += w;
            let n = (k + 1) as f64;
            let expect = n.powf(e);
            if (sum - expect).abs() > tol * expect.max(1.0) {
                return Err(format!(
                    "telescoping sum fails at n = {}: {sum} vs {expect}",
                    k + 1
                ));
            }
        }
    }
    Ok(())
}

/// Applies the L1 approximation of the Caputo derivative to a sampled series.
pub fn caputo_apply(samples: &[f64], grid: &TemporalGrid) -> Result<Vec<f64>> {
    if samples.len() != grid.steps() + 1 {
        return Err(Error::DimensionMismatch {
            what: "time series length",
            expected: grid.steps() + 1,
            actual: samples.len(),
        });
    }
    if samples[0] != 0.0 {
        return Err(Error::invalid(format!(
            "series must vanish at t = 0, got {}",
            samples[0]
        )));
    }
    let w = caputo_weights(grid);
    let b = w.coefficients();
    let mut out = vec![0.0; samples.len()];
    for n in 1..samples.len() {
        let mut acc = 0.0;
        for k in 0..n {
            acc += b[k] * (samples[n - k] - samples[n - k - 1]);
        }
        out[n] = w.scale() * acc;
    }
    Ok(out)
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nodal values of the degradation coefficient together with its admissible box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientField {
    values: Vec<f64>,
    q_min: f64,
    q_max: f64,
}

impl CoefficientField {
    pub fn new(values: Vec<f64>, q_min: f64, q_max: f64) -> Result<Self> {
        if !(q_min >= 0.0) || !(q_max >= q_min) || !q_max.is_finite() {
            return Err(Error::invalid(format!(
                "invalid coefficient bounds [{q_min}, {q_max}]"
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("coefficient value {v}")));
        }
        Ok(Self {
            values,
            q_min,
            q_max,
        })
    }

    /// Field with bounds wide enough to contain every value (lower bound 0).
    pub fn unbounded(values: Vec<f64>) -> Self {
        let q_max = values.iter().cloned().fold(0.0f64, f64::max).max(1.0) * 1e6;
        Self {
            values,
            q_min: 0.0,
            q_max,
        }
    }

    pub fn zeros(len: usize, q_min: f64, q_max: f64) -> Result<Self> {
        Self::new(vec![q_min; len], q_min, q_max)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.q_min, self.q_max)
    }

    pub fn with_values(&self, values: Vec<f64>) -> Self {
        Self {
            values,
            q_min: self.q_min,
            q_max: self.q_max,
        }
    }

    /// Clips every value into `[q_min, q_max]`.
    pub fn project(&mut self) {
        for v in &mut self.values {
            *v = v.clamp(self.q_min, self.q_max);
        }
    }

    pub fn is_admissible(&self) -> bool {
        self.values
            .iter()
            .all(|v| *v >= self.q_min && *v <= self.q_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldKind {
    Direct,
    Sensitivity,
    SecondOrderSensitivity,
    Adjoint,
}

/// Nodal solution on every time level.
///
/// Forward fields store `t_0..t_nt`. Adjoint fields are stored in reversed
/// time `tau = T - t`: level 0 holds the terminal condition and level `p`
/// is the multiplier paired with forward step `nt + 1 - p`, which is how the
/// transpose of the L1 Toeplitz operator lines up. Use [`SpaceTimeField::step`]
/// to read any field in forward step order.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    kind: FieldKind,
    levels: Vec<Vec<f64>>,
    time_reversed: bool,
}

impl SpaceTimeField {
    pub(crate) fn new(kind: FieldKind, levels: Vec<Vec<f64>>, time_reversed: bool) -> Self {
        Self {
            kind,
            levels,
            time_reversed,
        }
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn is_time_reversed(&self) -> bool {
        self.time_reversed
    }

    /// Stored levels in storage order.
    pub fn levels(&self) -> &[Vec<f64>] {
        &self.levels
    }

    pub fn level(&self, k: usize) -> &[f64] {
        &self.levels[k]
    }

    pub fn steps(&self) -> usize {
        self.levels.len() - 1
    }

    /// Values paired with forward step `n` (1..=nt for adjoint fields).
    pub fn step(&self, n: usize) -> &[f64] {
        if self.time_reversed {
            &self.levels[self.steps() + 1 - n]
        } else {
            &self.levels[n]
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.levels
            .iter()
            .flat_map(|l| l.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn min_value(&self) -> f64 {
        self.levels
            .iter()
            .flat_map(|l| l.iter())
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_clips() {
        let mut q = CoefficientField::new(vec![-1.0, 0.5, 3.0], 0.0, 1.0).unwrap();
        assert!(!q.is_admissible());
        q.project();
        assert_eq!(q.values(), &[0.0, 0.5, 1.0]);
        assert!(q.is_admissible());
    }

    #[test]
    fn bad_bounds_rejected() {
        assert!(CoefficientField::new(vec![0.0], -1.0, 1.0).is_err());
        assert!(CoefficientField::new(vec![0.0], 2.0, 1.0).is_err());
        assert!(CoefficientField::new(vec![f64::NAN], 0.0, 1.0).is_err());
    }

    #[test]
    fn reversed_step_indexing() {
        let levels = (0..5).map(|k| vec![k as f64]).collect();
        let f = SpaceTimeField::new(FieldKind::Adjoint, levels, true);
        assert_eq!(f.step(1), &[4.0]);
        assert_eq!(f.step(4), &[1.0]);
        assert_eq!(f.level(0), &[0.0]);
    }
}

#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn projection_is_admissible_and_idempotent(
            values in prop::collection::vec(-5.0f64..5.0, 1..60),
            lo in 0.0f64..1.0,
            width in 0.0f64..3.0,
        ) {
            let mut f = CoefficientField::new(values.clone(), lo, lo + width).unwrap();
            f.project();
            prop_assert!(f.is_admissible());
            let once = f.values().to_vec();
            f.project();
            prop_assert_eq!(f.values(), &once[..]);
            for (v, p) in values.iter().zip(&once) {
                if *v >= lo && *v <= lo + width {
                    prop_assert_eq!(v, p);
                }
            }
        }
    }
}

//! Self-checks of the numerical building blocks, shared by the `validate`
//! command and the acceptance tests.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use statrs::function::gamma::gamma;

use crate::caputo::{caputo_weights, check_weight_invariants, TemporalGrid};
use crate::error::Result;
use crate::fem::{DiffusionTensor, FemSpace};
use crate::field::{CoefficientField, FieldKind};
use crate::forward::{BasisKind, ForwardModel, MeasurementMatrix, ObservationKind, SourceSystem, TemporalProfile, WeightFunction};
use crate::inversion::{evaluate, sensitivity_directional, ObjectiveConfig};
use crate::mesh::{build_mesh, Segment};
use crate::solver::{Dirichlet, Load, TfdeSolver};
use crate::uq::{
    assemble_jacobian, assemble_jacobian_by_columns, confidence_interval, sample_posterior, skewness,
    PosteriorModel,
};

/// Max nodal error of the L1/FEM solve of `u = t^2 x(1-x)` (A = 1, q = 1, T = 1).
pub fn manufactured_error(alpha: f64, nt: usize, elements: usize) -> Result<f64> {
    let space = Arc::new(FemSpace::new(build_mesh(1, elements)?, DiffusionTensor::identity())?);
    let grid = TemporalGrid::new(1.0, nt, alpha)?;
    let solver = TfdeSolver::new(space.clone(), grid, &vec![1.0; elements + 1])?;
    let g = |x: f64| x * (1.0 - x);
    let da = 2.0 / gamma(3.0 - alpha);
    // f = D^a u - u_xx + u
    let shape = space.load_from_fn(|x| g(x[0]));
    let two = space.load_from_fn(|_| 2.0);
    let levels = grid
        .times()
        .iter()
        .map(|&t| {
            shape
                .iter()
                .zip(&two)
                .map(|(a, b)| (da * t.powf(2.0 - alpha) + t * t) * a + t * t * b)
                .collect()
        })
        .collect();
    let sol = solver.solve(&Load::Levels(levels), &Dirichlet::Homogeneous, FieldKind::Direct)?;
    let mut err = 0.0f64;
    for (n, u) in sol.field.levels().iter().enumerate() {
        let t = grid.time(n);
        for (v, c) in u.iter().zip(space.mesh().coords()) {
            err = err.max((v - t * t * g(c[0])).abs());
        }
    }
    Ok(err)
}

/// Observed orders between consecutive refinements in `nts`.
pub fn temporal_orders(alpha: f64, nts: &[usize], elements: usize) -> Result<Vec<f64>> {
    let e = nts
        .iter()
        .map(|&nt| manufactured_error(alpha, nt, elements))
        .collect::<Result<Vec<_>>>()?;
    Ok((1..nts.len())
        .map(|k| (e[k - 1] / e[k]).ln() / (nts[k] as f64 / nts[k - 1] as f64).ln())
        .collect())
}

/// Euclidean adjoint derivative of the data misfit `(1/2)|F(q) - data|^2`,
/// optionally with the adjoint boundary data negated.
fn misfit_derivative(model: &ForwardModel, q: &[f64], data: &MeasurementMatrix, flip: bool) -> Result<(f64, Vec<f64>)> {
    let eval = evaluate(model, q, data, &ObjectiveConfig::new(0.0)?)?;
    let residual: Vec<f64> = if flip {
        eval.residual.iter().map(|r| -r).collect()
    } else {
        eval.residual.clone()
    };
    Ok((eval.objective, model.adjoint_action(&eval.bundle, &residual)?))
}

/// Best relative error, over `h` in `hs` (relative to `|q|_inf`), between the
/// adjoint directional derivative of `J` and central differences.
pub fn gradient_fd_error(
    model: &ForwardModel,
    q: &[f64],
    dq: &[f64],
    data: &MeasurementMatrix,
    mu: f64,
    hs: &[f64],
) -> Result<f64> {
    gradient_fd_error_impl(model, q, dq, data, mu, hs, false)
}

fn gradient_fd_error_impl(
    model: &ForwardModel,
    q: &[f64],
    dq: &[f64],
    data: &MeasurementMatrix,
    mu: f64,
    hs: &[f64],
    flip: bool,
) -> Result<f64> {
    let space = model.space();
    let cfg = ObjectiveConfig::new(mu)?;
    let (_, g) = misfit_derivative(model, q, data, flip)?;
    let analytic = g.iter().zip(dq).map(|(a, b)| a * b).sum::<f64>() + mu * space.nodal_inner(q, dq);
    let scale = q.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let mut best = f64::INFINITY;
    for &h in hs {
        let step = h * scale;
        let shifted = |s: f64| -> Vec<f64> { q.iter().zip(dq).map(|(a, b)| a + s * b).collect() };
        let jp = evaluate(model, &shifted(step), data, &cfg)?.objective;
        let jm = evaluate(model, &shifted(-step), data, &cfg)?.objective;
        let fd = (jp - jm) / (2.0 * step);
        best = best.min((analytic - fd).abs() / fd.abs().max(analytic.abs()).max(1e-300));
    }
    Ok(best)
}

/// Relative gap in `sum_ij r_ij (F'(q) dq)_ij = int (g - mu q) dq`.
pub fn duality_gap(model: &ForwardModel, q: &[f64], dq: &[f64], data: &MeasurementMatrix) -> Result<f64> {
    let eval = evaluate(model, q, data, &ObjectiveConfig::new(0.0)?)?;
    let field = CoefficientField::unbounded(q.to_vec());
    let s = sensitivity_directional(model, &field, dq)?;
    let lhs: f64 = eval.residual.iter().zip(&s).map(|(a, b)| a * b).sum();
    let g = model.adjoint_action(&eval.bundle, &eval.residual)?;
    let rhs: f64 = g.iter().zip(dq).map(|(a, b)| a * b).sum();
    Ok((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationCheck {
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<ValidationCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// One JSON object per line.
    pub fn to_json_lines(&self) -> String {
        self.checks
            .iter()
            .map(|c| serde_json::to_string(c).expect("check serializes") + "\n")
            .collect()
    }
}

/// Deliberate defects for mutation testing of the suite itself.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Mutations {
    /// Negate the boundary data of the adjoint problem.
    pub flip_adjoint_sign: bool,
    /// Feed the Caputo weights to the invariant check in reversed order.
    pub reverse_weight_order: bool,
}

fn record(checks: &mut Vec<ValidationCheck>, name: &str, outcome: Result<std::result::Result<String, String>>) {
    let (passed, detail) = match outcome {
        Ok(Ok(d)) => (true, d),
        Ok(Err(d)) => (false, d),
        Err(e) => (false, format!("error: {e}")),
    };
    checks.push(ValidationCheck {
        check: name.to_string(),
        passed,
        detail,
    });
}

fn small_model(seg: Segment) -> Result<ForwardModel> {
    let mesh = build_mesh(1, 30)?;
    let grid = TemporalGrid::new(1.0, 20, 0.3)?;
    let sources = SourceSystem::new(BasisKind::Trigonometric, 3, &mesh, &grid, &TemporalProfile::Linear)?;
    let space = Arc::new(FemSpace::new(mesh, DiffusionTensor::identity())?);
    ForwardModel::new(space, grid, sources, &WeightFunction::OneMinusT, &[seg], ObservationKind::AverageFlux)
}

fn random_pair(model: &ForwardModel, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let coords = model.space().mesh().coords();
    let (a, b, c): (f64, f64, f64) = (rng.gen_range(0.1..1.0), rng.gen_range(0.0..1.0), rng.gen_range(1.0..4.0));
    let q = coords.iter().map(|x| a * (c * x[0] + b).sin().abs() + 0.05).collect();
    let dq = coords.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
    (q, dq)
}

pub fn validate_suite() -> ValidationReport {
    validate_with(Mutations::default())
}

pub fn validate_with(m: Mutations) -> ValidationReport {
    let mut checks = Vec::new();

    record(&mut checks, "caputo weights: b_0 = 1, positive, strictly decreasing, telescoping sum", (|| {
        for alpha in [0.1, 0.3, 0.5, 0.9] {
            let w = caputo_weights(&TemporalGrid::new(1.0, 100, alpha)?);
            let mut b = w.coefficients().to_vec();
            if m.reverse_weight_order {
                b.reverse();
            }
            if let Err(e) = check_weight_invariants(&b, 1e-12) {
                return Ok(Err(format!("alpha {alpha}: {e}")));
            }
        }
        Ok(Ok("alpha in {0.1, 0.3, 0.5, 0.9}, nt = 100".into()))
    })());

    record(&mut checks, "manufactured solution: temporal order within 0.3 of 2 - alpha", (|| {
        let mut detail = Vec::new();
        for alpha in [0.3, 0.7] {
            let orders = temporal_orders(alpha, &[26, 51, 101], 400)?;
            detail.push(format!("alpha {alpha}: {orders:.3?}"));
            if orders.iter().any(|o| (o - (2.0 - alpha)).abs() > 0.3) {
                return Ok(Err(detail.join("; ")));
            }
        }
        Ok(Ok(detail.join("; ")))
    })());

    record(&mut checks, "adjoint gradient matches central differences (rel < 1e-3)", (|| {
        let model = small_model(Segment::Right)?;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut worst = 0.0f64;
        for _ in 0..3 {
            let (truth, _) = random_pair(&model, &mut rng);
            let data = model.forward_map(&CoefficientField::unbounded(truth))?;
            let (q, dq) = random_pair(&model, &mut rng);
            let e = gradient_fd_error_impl(&model, &q, &dq, &data, 1e-3, &[1e-3, 1e-4, 1e-5], m.flip_adjoint_sign)?;
            worst = worst.max(e);
        }
        let d = format!("worst best-h relative error {worst:.2e}");
        Ok(if worst < 1e-3 { Ok(d) } else { Err(d) })
    })());

    record(&mut checks, "adjoint/sensitivity duality (rel < 1e-6)", (|| {
        let model = small_model(Segment::Left)?;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (truth, _) = random_pair(&model, &mut rng);
        let data = model.forward_map(&CoefficientField::unbounded(truth))?;
        let (q, dq) = random_pair(&model, &mut rng);
        let gap = if m.flip_adjoint_sign {
            let eval = evaluate(&model, &q, &data, &ObjectiveConfig::new(0.0)?)?;
            let s = sensitivity_directional(&model, &CoefficientField::unbounded(q.clone()), &dq)?;
            let lhs: f64 = eval.residual.iter().zip(&s).map(|(a, b)| a * b).sum();
            let neg: Vec<f64> = eval.residual.iter().map(|r| -r).collect();
            let rhs: f64 = model.adjoint_action(&eval.bundle, &neg)?.iter().zip(&dq).map(|(a, b)| a * b).sum();
            (lhs - rhs).abs() / lhs.abs().max(rhs.abs())
        } else {
            duality_gap(&model, &q, &dq, &data)?
        };
        let d = format!("relative gap {gap:.2e}");
        Ok(if gap < 1e-6 { Ok(d) } else { Err(d) })
    })());

    record(&mut checks, "jacobian: adjoint rows equal sensitivity columns (rel < 1e-6)", (|| {
        let model = small_model(Segment::Right)?;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (q, _) = random_pair(&model, &mut rng);
        let field = CoefficientField::unbounded(q);
        let rows = assemble_jacobian(&model, &field)?;
        let cols = assemble_jacobian_by_columns(&model, &field)?;
        let rel = (&rows - &cols).abs().max() / cols.abs().max();
        let d = format!("max relative difference {rel:.2e}");
        Ok(if rel < 1e-6 { Ok(d) } else { Err(d) })
    })());

    record(&mut checks, "posterior sampler: covariance within 5%, mean within 3 sqrt(tr C / Ne)", (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = DMatrix::from_fn(6, 15, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q_map: Vec<f64> = (0..15).map(|i| 0.1 * i as f64).collect();
        let pm = PosteriorModel::new(&q_map, p, 0.1, 0.05)?;
        let ens = sample_posterior(&pm, 10_000, 21)?;
        let c = pm.covariance();
        let rel = (&ens.covariance().expect("tracked") - c).norm() / c.norm();
        let dist = (DVector::from_column_slice(ens.mean()) - DVector::from_column_slice(&q_map)).norm();
        let bound = 3.0 * (c.trace() / 10_000.0).sqrt();
        let d = format!("covariance rel {rel:.3}, mean distance {dist:.2e} (bound {bound:.2e})");
        Ok(if rel < 0.05 && dist <= bound { Ok(d) } else { Err(d) })
    })());

    record(&mut checks, "confidence axes shrink with n and mu, grow with delta", (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = DMatrix::from_fn(4, 10, |_, _| rng.sample::<f64, _>(StandardNormal));
        let axes = |mu: f64, delta: f64, n: usize| -> Result<Vec<f64>> {
            Ok(confidence_interval(&PosteriorModel::new(&[0.0; 10], p.clone(), mu, delta)?, 0.95, n)?.axes)
        };
        let base = axes(0.1, 0.01, 100)?;
        let ok = [axes(0.1, 0.01, 200)?, axes(0.2, 0.01, 100)?, axes(0.1, 0.005, 100)?]
            .iter()
            .all(|v| v.iter().zip(&base).all(|(a, b)| a < b));
        Ok(if ok { Ok("n, mu, delta each varied once".into()) } else { Err("an axis failed to shrink".into()) })
    })());

    record(&mut checks, "skewness flips sign under reflection", (|| {
        let space = FemSpace::new(build_mesh(1, 200)?, DiffusionTensor::identity())?;
        let xs: Vec<f64> = space.mesh().coords().iter().map(|c| c[0]).collect();
        let f: Vec<f64> = xs.iter().map(|x| x * x * (1.0 - x)).collect();
        let r: Vec<f64> = xs.iter().map(|x| (1.0 - x) * (1.0 - x) * x).collect();
        let (a, b) = (skewness(&space, &f)?.beta(0), skewness(&space, &r)?.beta(0));
        let d = format!("beta {a:.6} vs {b:.6}");
        Ok(if (a + b).abs() < 1e-10 && a != 0.0 { Ok(d) } else { Err(d) })
    })());

    ValidationReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_unmutated() {
        let rep = validate_suite();
        for c in &rep.checks {
            assert!(c.passed, "{}: {}", c.check, c.detail);
        }
        assert_eq!(rep.to_json_lines().lines().count(), rep.checks.len());
    }

    #[test]
    fn flipped_adjoint_sign_is_caught() {
        let rep = validate_with(Mutations {
            flip_adjoint_sign: true,
            ..Mutations::default()
        });
        let failed: Vec<&str> = rep.checks.iter().filter(|c| !c.passed).map(|c| c.check.as_str()).collect();
        assert!(failed.iter().any(|c| c.starts_with("adjoint gradient")), "{failed:?}");
        assert!(failed.iter().any(|c| c.starts_with("adjoint/sensitivity")));
        assert!(!failed.iter().any(|c| c.starts_with("caputo")));
    }

    #[test]
    fn reversed_weights_are_caught() {
        let rep = validate_with(Mutations {
            reverse_weight_order: true,
            ..Mutations::default()
        });
        let bad = rep.checks.iter().find(|c| c.check.starts_with("caputo")).unwrap();
        assert!(!bad.passed);
        assert!(bad.detail.contains("b_0"));
        assert_eq!(rep.checks.iter().filter(|c| !c.passed).count(), 1);
    }
}

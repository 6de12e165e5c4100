//! Tikhonov functional, adjoint gradient and projected conjugate gradients.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::FemSpace;
use crate::field::CoefficientField;
use crate::forward::{ForwardModel, MeasurementMatrix, StateBundle};

/// Choice of the regularization parameter from the noise level `delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MuRule {
    SqrtDelta,
    Delta,
    DeltaThreeHalves,
    DeltaSquared,
    Explicit(f64),
}

impl MuRule {
    pub fn resolve(self, delta: f64) -> f64 {
        match self {
            MuRule::SqrtDelta => delta.sqrt(),
            MuRule::Delta => delta,
            MuRule::DeltaThreeHalves => delta.powf(1.5),
            MuRule::DeltaSquared => delta * delta,
            MuRule::Explicit(mu) => mu,
        }
    }

    /// Accepts the labels produced by [`MuRule::label`] and the snake-case names.
    pub fn parse(text: &str) -> Result<Self> {
        match text.trim().to_ascii_lowercase().as_str() {
            "delta^0.5" | "delta^1/2" | "sqrt_delta" => Ok(MuRule::SqrtDelta),
            "delta" | "delta^1" => Ok(MuRule::Delta),
            "delta^1.5" | "delta^3/2" | "delta_three_halves" => Ok(MuRule::DeltaThreeHalves),
            "delta^2" | "delta_squared" => Ok(MuRule::DeltaSquared),
            other => other
                .parse::<f64>()
                .ok()
                .filter(|v| *v >= 0.0 && v.is_finite())
                .map(MuRule::Explicit)
                .ok_or_else(|| Error::invalid(format!("unknown regularization rule `{text}`"))),
        }
    }

    pub fn label(self) -> String {
        match self {
            MuRule::SqrtDelta => "delta^0.5".into(),
            MuRule::Delta => "delta".into(),
            MuRule::DeltaThreeHalves => "delta^1.5".into(),
            MuRule::DeltaSquared => "delta^2".into(),
            MuRule::Explicit(mu) => format!("{mu:e}"),
        }
    }
}

/// `J(q) = (1/s) |F(q) - data|_s^s + (mu/r) |q|_{L^r}^r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub mu: f64,
    pub s: f64,
    pub r: f64,
}

impl ObjectiveConfig {
    pub fn new(mu: f64) -> Result<Self> {
        Self::with_exponents(mu, 2.0, 2.0)
    }

    pub fn with_exponents(mu: f64, s: f64, r: f64) -> Result<Self> {
        if !(mu >= 0.0) || !mu.is_finite() {
            return Err(Error::invalid(format!("regularization parameter must be >= 0, got {mu}")));
        }
        if !(s >= 1.0) || !(r > 1.0) {
            return Err(Error::invalid(format!("exponents need s >= 1 and r > 1, got s={s}, r={r}")));
        }
        Ok(Self { mu, s, r })
    }

    fn require_quadratic(&self) -> Result<()> {
        if self.s != 2.0 || self.r != 2.0 {
            return Err(Error::invalid("gradient and CGM are implemented for s = r = 2 only"));
        }
        Ok(())
    }
}

/// States, prediction and residual at one coefficient field.
pub struct Evaluation {
    pub bundle: StateBundle,
    pub predicted: Vec<f64>,
    pub residual: Vec<f64>,
    pub objective: f64,
}

fn penalty(space: &FemSpace, q: &[f64], r: f64) -> f64 {
    let vals: Vec<f64> = q.iter().map(|v| v.abs().powf(r)).collect();
    space.integrate(&vals) / r
}

pub fn evaluate(
    model: &ForwardModel,
    q: &[f64],
    data: &MeasurementMatrix,
    cfg: &ObjectiveConfig,
) -> Result<Evaluation> {
    let bundle = model.states(q)?;
    let predicted = model.measurements(&bundle, crate::flux::FluxMethod::Variational)?;
    if predicted.len() != data.len() {
        return Err(Error::DimensionMismatch {
            what: "measurement data",
            expected: predicted.len(),
            actual: data.len(),
        });
    }
    let residual: Vec<f64> = predicted
        .values()
        .iter()
        .zip(data.values())
        .map(|(a, b)| a - b)
        .collect();
    let misfit: f64 = residual.iter().map(|v| v.abs().powf(cfg.s)).sum::<f64>() / cfg.s;
    let objective = misfit + cfg.mu * penalty(model.space(), q, cfg.r);
    Ok(Evaluation {
        bundle,
        predicted: predicted.values().to_vec(),
        residual,
        objective,
    })
}

pub fn objective(
    model: &ForwardModel,
    q: &CoefficientField,
    data: &MeasurementMatrix,
    cfg: &ObjectiveConfig,
) -> Result<f64> {
    Ok(evaluate(model, q.values(), data, cfg)?.objective)
}

/// L^2 gradient representer from an evaluation: `P^T r / w + mu q`.
pub fn gradient_at(model: &ForwardModel, eval: &Evaluation, q: &[f64], mu: f64) -> Result<Vec<f64>> {
    let euclid = model.adjoint_action(&eval.bundle, &eval.residual)?;
    Ok(euclid
        .iter()
        .zip(model.space().nodal_weights())
        .zip(q)
        .map(|((g, w), qm)| g / w + mu * qm)
        .collect())
}

pub fn gradient(
    model: &ForwardModel,
    q: &CoefficientField,
    data: &MeasurementMatrix,
    cfg: &ObjectiveConfig,
) -> Result<Vec<f64>> {
    cfg.require_quadratic()?;
    let eval = evaluate(model, q.values(), data, cfg)?;
    gradient_at(model, &eval, q.values(), cfg.mu)
}

/// Derivative of every measurement in direction `dq`.
pub fn sensitivity_directional(model: &ForwardModel, q: &CoefficientField, dq: &[f64]) -> Result<Vec<f64>> {
    if dq.len() != q.len() {
        return Err(Error::DimensionMismatch {
            what: "perturbation",
            expected: q.len(),
            actual: dq.len(),
        });
    }
    let bundle = model.states(q.values())?;
    model.sensitivity(&bundle, dq)
}

/// `|est - truth|_{L^2} / |truth|_{L^2}`.
pub fn relative_error(space: &FemSpace, estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() || truth.len() != space.node_count() {
        return Err(Error::DimensionMismatch {
            what: "field length",
            expected: space.node_count(),
            actual: estimate.len().min(truth.len()),
        });
    }
    let norm = space.l2_norm(truth);
    if norm == 0.0 {
        return Err(Error::invalid("relative error of a zero reference field"));
    }
    let diff: Vec<f64> = estimate.iter().zip(truth).map(|(a, b)| a - b).collect();
    Ok(space.l2_norm(&diff) / norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgmOptions {
    pub eps: f64,
    pub max_iter: usize,
}

impl Default for CgmOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgmRecord {
    pub iter: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub step_change: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone)]
pub struct CgmResult {
    pub q: CoefficientField,
    pub log: Vec<CgmRecord>,
    pub converged: bool,
}

impl CgmResult {
    pub fn final_objective(&self) -> Option<f64> {
        self.log.last().map(|r| r.objective)
    }

    /// CSV `iter,J,grad_norm,E_k,beta,gamma`.
    pub fn write_log(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "iter,J,grad_norm,E_k,beta,gamma")?;
        for r in &self.log {
            writeln!(
                w,
                "{},{:e},{:e},{:e},{:e},{:e}",
                r.iter, r.objective, r.grad_norm, r.step_change, r.beta, r.gamma
            )?;
        }
        Ok(())
    }
}

const MAX_HALVINGS: usize = 40;

/// Projected nonlinear conjugate gradients with Fletcher-Reeves conjugacy and
/// the Gauss-Newton step length along each direction. A step that raises the
/// objective is halved until it does not.
pub fn run_cgm(
    model: &ForwardModel,
    q0: &CoefficientField,
    data: &MeasurementMatrix,
    cfg: &ObjectiveConfig,
    opts: &CgmOptions,
) -> Result<CgmResult> {
    cfg.require_quadratic()?;
    let space = model.space().clone();
    let mu = cfg.mu;
    let mut q = q0.clone();
    q.project();
    let mut eval = evaluate(model, q.values(), data, cfg)?;
    let mut g = gradient_at(model, &eval, q.values(), mu)?;
    let mut d_prev: Vec<f64> = Vec::new();
    let mut g_prev_sq = 0.0;
    let mut log = Vec::new();
    let mut converged = false;

    for k in 0..opts.max_iter {
        let g_sq = space.nodal_inner(&g, &g);
        if g_sq == 0.0 {
            converged = true;
            break;
        }
        let mut gamma = if k == 0 { 0.0 } else { g_sq / g_prev_sq };
        if k > 0 && g_sq > 100.0 * g_prev_sq {
            gamma = 0.0;
        }
        let mut d: Vec<f64> = if gamma == 0.0 {
            g.iter().map(|v| -v).collect()
        } else {
            g.iter().zip(&d_prev).map(|(gv, dv)| -gv + gamma * dv).collect()
        };
        if space.nodal_inner(&g, &d) >= 0.0 {
            gamma = 0.0;
            d = g.iter().map(|v| -v).collect();
        }

        let s = model.sensitivity(&eval.bundle, &d)?;
        let num: f64 = eval.residual.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>()
            + mu * space.nodal_inner(q.values(), &d);
        let den: f64 = s.iter().map(|v| v * v).sum::<f64>() + mu * space.nodal_inner(&d, &d);
        let mut beta = -num / den;
        if !beta.is_finite() {
            return Err(Error::NonFinite(format!(
                "CGM step length at iteration {k}: numerator {num}, denominator {den}"
            )));
        }

        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let mut trial = q.with_values(
                q.values().iter().zip(&d).map(|(a, b)| a + beta * b).collect(),
            );
            trial.project();
            let e = evaluate(model, trial.values(), data, cfg)?;
            if e.objective <= eval.objective {
                accepted = Some((trial, e));
                break;
            }
            beta *= 0.5;
        }
        let Some((q_new, e_new)) = accepted else {
            // no decrease along the direction: stationary to working precision
            log::debug!("cgm: no admissible step at iteration {k}");
            converged = true;
            break;
        };
        let change = q_new
            .values()
            .iter()
            .zip(q.values())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        log.push(CgmRecord {
            iter: k + 1,
            objective: e_new.objective,
            grad_norm: g_sq.sqrt(),
            step_change: change,
            beta,
            gamma,
        });
        log::debug!("cgm iter {} J={:e} E={:e}", k + 1, e_new.objective, change);
        q = q_new;
        eval = e_new;
        d_prev = d;
        g_prev_sq = g_sq;
        if change <= opts.eps {
            converged = true;
            break;
        }
        g = gradient_at(model, &eval, q.values(), mu)?;
    }
    Ok(CgmResult { q, log, converged })
}


#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn explicit_mu_round_trips(v in 1e-12f64..1e3) {
            let rule = MuRule::Explicit(v);
            prop_assert_eq!(MuRule::parse(&rule.label()).unwrap(), rule);
            prop_assert_eq!(rule.resolve(0.5), v);
        }
    }
}

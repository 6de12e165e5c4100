//! Laplace approximation at the MAP point: Jacobian, Gaussian posterior,
//! sampling, confidence regions and skewness of reconstructed fields.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_lr;

use crate::error::{Error, Result};
use crate::fem::FemSpace;
use crate::field::{CoefficientField, FieldKind};
use crate::forward::ForwardModel;
use crate::mesh::Dimension;
use crate::solver::Dirichlet;

/// `P[r][m] = d(measurement r) / d(q_m)`, one adjoint solve per measurement.
pub fn assemble_jacobian(model: &ForwardModel, q: &CoefficientField) -> Result<DMatrix<f64>> {
    let bundle = model.states(q.values())?;
    let bl = model.block_len();
    let rows = model.source_count() * bl;
    let grads = (0..rows)
        .into_par_iter()
        .map(|r| {
            let mut block = vec![0.0; bl];
            block[r % bl] = 1.0;
            model.source_adjoint_action(&bundle, r / bl, &block)
        })
        .collect::<Result<Vec<_>>>()?;
    let m = model.space().node_count();
    Ok(DMatrix::from_fn(rows, m, |r, c| grads[r][c]))
}

/// Column-wise Jacobian from one sensitivity solve per node (reference path).
pub fn assemble_jacobian_by_columns(model: &ForwardModel, q: &CoefficientField) -> Result<DMatrix<f64>> {
    let bundle = model.states(q.values())?;
    let m = model.space().node_count();
    let cols = (0..m)
        .into_par_iter()
        .map(|c| {
            let mut e = vec![0.0; m];
            e[c] = 1.0;
            let blocks = bundle
                .states
                .iter()
                .map(|s| {
                    let load = bundle.solver.sensitivity_load(&e, &s.field)?;
                    let sens = bundle.solver.solve(&load, &Dirichlet::Homogeneous, FieldKind::Sensitivity)?;
                    model.observe(&sens)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(blocks.concat())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_fn(cols[0].len(), m, |r, c| cols[c][r]))
}

/// `C = delta^2 (mu I + P'P)^{-1}` and its lower Cholesky factor.
pub fn posterior_covariance(p: &DMatrix<f64>, mu: f64, delta: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(mu > 0.0) || !(delta > 0.0) {
        return Err(Error::invalid(format!("posterior needs mu > 0 and delta > 0, got {mu}, {delta}")));
    }
    let m = p.ncols();
    let mut precision = p.tr_mul(p);
    for i in 0..m {
        precision[(i, i)] += mu;
    }
    let chol = precision
        .cholesky()
        .ok_or_else(|| Error::SingularSystem("posterior precision".into()))?;
    let mut cov = chol.inverse() * (delta * delta);
    // symmetrize rounding before factoring
    for i in 0..m {
        for j in 0..i {
            let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let l = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularSystem("posterior covariance".into()))?
        .unpack();
    Ok((cov, l))
}

/// Eigenvalues of `P'P` in decreasing order (`ncols` values, trailing zeros),
/// obtained from the small matrix `P P'`.
pub fn ptp_eigenvalues(p: &DMatrix<f64>) -> Vec<f64> {
    let small = p * p.transpose();
    let mut ev: Vec<f64> = small.symmetric_eigenvalues().iter().map(|v| v.max(0.0)).collect();
    ev.sort_by(|a, b| b.partial_cmp(a).expect("finite eigenvalues"));
    ev.resize(p.ncols().max(ev.len()), 0.0);
    ev.truncate(p.ncols());
    ev
}

/// Gaussian posterior `N(q_MAP, C)`.
#[derive(Debug, Clone)]
pub struct PosteriorModel {
    q_map: DVector<f64>,
    jacobian: DMatrix<f64>,
    delta: f64,
    mu: f64,
    covariance: DMatrix<f64>,
    factor: DMatrix<f64>,
    ptp_eigs: Vec<f64>,
}

impl PosteriorModel {
    pub fn new(q_map: &[f64], jacobian: DMatrix<f64>, mu: f64, delta: f64) -> Result<Self> {
        if jacobian.ncols() != q_map.len() {
            return Err(Error::DimensionMismatch {
                what: "jacobian columns",
                expected: q_map.len(),
                actual: jacobian.ncols(),
            });
        }
        let (covariance, factor) = posterior_covariance(&jacobian, mu, delta)?;
        let ptp_eigs = ptp_eigenvalues(&jacobian);
        Ok(Self {
            q_map: DVector::from_column_slice(q_map),
            jacobian,
            delta,
            mu,
            covariance,
            factor,
            ptp_eigs,
        })
    }

    pub fn q_map(&self) -> &[f64] {
        self.q_map.as_slice()
    }

    pub fn jacobian(&self) -> &DMatrix<f64> {
        &self.jacobian
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn dim(&self) -> usize {
        self.q_map.len()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Lower factor `L` with `C = L L'`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// Eigenvalues of `P'P`, decreasing.
    pub fn ptp_eigenvalues(&self) -> &[f64] {
        &self.ptp_eigs
    }

    /// `delta^2 / (mu + lambda_j(P'P))`, decreasing in `j` reversed (largest first).
    pub fn covariance_eigenvalues(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .ptp_eigs
            .iter()
            .map(|l| self.delta * self.delta / (self.mu + l))
            .collect();
        v.reverse();
        v
    }

    pub fn marginal_sd(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.covariance[(i, i)].sqrt()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOptions {
    pub count: usize,
    pub seed: u64,
    pub keep_samples: bool,
    pub track_covariance: bool,
}

impl EnsembleOptions {
    pub fn new(count: usize, seed: u64) -> Self {
        Self {
            count,
            seed,
            keep_samples: true,
            track_covariance: true,
        }
    }
}

/// Moments of a sample ensemble `q_MAP + L z`.
#[derive(Debug, Clone)]
pub struct PosteriorEnsemble {
    seed: u64,
    count: usize,
    mean: DVector<f64>,
    /// Sum of squared deviations from the running mean.
    scatter: Option<DMatrix<f64>>,
    /// Per-node sum of squared deviations.
    sq: DVector<f64>,
    samples: Option<DMatrix<f64>>,
}

const BLOCK: usize = 256;

pub fn sample_posterior(model: &PosteriorModel, count: usize, seed: u64) -> Result<PosteriorEnsemble> {
    sample_posterior_with(model, &EnsembleOptions::new(count, seed))
}

/// Draws `count` samples in blocks from one seeded stream (deterministic);
/// running mean and scatter use the pairwise block update.
pub fn sample_posterior_with(model: &PosteriorModel, opts: &EnsembleOptions) -> Result<PosteriorEnsemble> {
    if opts.count == 0 {
        return Err(Error::invalid("ensemble needs at least one sample"));
    }
    let m = model.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut ens = PosteriorEnsemble {
        seed: opts.seed,
        count: 0,
        mean: DVector::zeros(m),
        scatter: opts.track_covariance.then(|| DMatrix::zeros(m, m)),
        sq: DVector::zeros(m),
        samples: opts.keep_samples.then(|| DMatrix::zeros(m, opts.count)),
    };
    let mut done = 0;
    while done < opts.count {
        let b = BLOCK.min(opts.count - done);
        let z = DMatrix::from_fn(m, b, |_, _| StandardNormal.sample(&mut rng));
        let mut x = &model.factor * z;
        for mut col in x.column_iter_mut() {
            col += &model.q_map;
        }
        ens.absorb(&x);
        if let Some(s) = ens.samples.as_mut() {
            s.columns_mut(done, b).copy_from(&x);
        }
        done += b;
    }
    Ok(ens)
}

impl PosteriorEnsemble {
    fn absorb(&mut self, x: &DMatrix<f64>) {
        let nb = x.ncols() as f64;
        let na = self.count as f64;
        let block_mean = x.column_mean();
        let mut centered = x.clone();
        for mut col in centered.column_iter_mut() {
            col -= &block_mean;
        }
        let delta = &block_mean - &self.mean;
        let w = na * nb / (na + nb);
        if let Some(s) = self.scatter.as_mut() {
            s.gemm(1.0, &centered, &centered.transpose(), 1.0);
            s.ger(w, &delta, &delta, 1.0);
        }
        for i in 0..self.sq.len() {
            self.sq[i] += centered.row(i).norm_squared() + w * delta[i] * delta[i];
        }
        self.mean += delta * (nb / (na + nb));
        self.count += x.ncols();
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    /// Unbiased sample covariance, when tracked.
    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        let denom = (self.count.max(2) - 1) as f64;
        self.scatter.as_ref().map(|s| s / denom)
    }

    pub fn sd(&self) -> Vec<f64> {
        let denom = (self.count.max(2) - 1) as f64;
        self.sq.iter().map(|v| (v / denom).sqrt()).collect()
    }

    /// Samples as columns, when kept.
    pub fn samples(&self) -> Option<&DMatrix<f64>> {
        self.samples.as_ref()
    }

    /// Little-endian dump: `u64 M`, `u64 Ne`, `u64` byte length of `meta`,
    /// the `meta` bytes, then row-major `Ne x M` f64 values.
    pub fn write_raw(&self, mut w: impl Write, meta: &str) -> Result<()> {
        let s = self
            .samples
            .as_ref()
            .ok_or_else(|| Error::invalid("samples were not kept"))?;
        w.write_all(&(s.nrows() as u64).to_le_bytes())?;
        w.write_all(&(s.ncols() as u64).to_le_bytes())?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(meta.as_bytes())?;
        // column-major storage: each column is one sample, i.e. one output row
        for v in s.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

/// Upper-tail quantile: `x` with `P(chi2_dof <= x) = prob`.
pub fn chi_square_quantile(dof: usize, prob: f64) -> Result<f64> {
    if dof == 0 || !(prob > 0.0 && prob < 1.0) {
        return Err(Error::invalid(format!("chi-square quantile needs dof >= 1 and 0 < p < 1, got {dof}, {prob}")));
    }
    let k = dof as f64 / 2.0;
    let cdf = |x: f64| gamma_lr(k, x / 2.0);
    let mut lo = 0.0;
    let mut hi = dof as f64 + 10.0 * (2.0 * dof as f64).sqrt() + 10.0;
    while cdf(hi) < prob {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < prob {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReport {
    pub confidence: f64,
    pub samples: usize,
    pub chi2: f64,
    /// `delta sqrt(chi2 / (n (mu + lambda_j(P'P))))`, largest first.
    pub axes: Vec<f64>,
    /// Extent of the ellipsoid along each nodal coordinate, `sqrt(chi2 C_mm / n)`.
    pub half_widths: Vec<f64>,
}

/// Confidence ellipsoid of the `n`-sample mean around `q_MAP`.
pub fn confidence_interval(model: &PosteriorModel, confidence: f64, n: usize) -> Result<ConfidenceReport> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::invalid(format!("confidence must lie in (0, 1), got {confidence}")));
    }
    if n == 0 {
        return Err(Error::invalid("confidence region needs n >= 1"));
    }
    let chi2 = chi_square_quantile(model.dim(), confidence)?;
    let nf = n as f64;
    let mut axes: Vec<f64> = model
        .ptp_eigs
        .iter()
        .map(|l| model.delta * (chi2 / (nf * (model.mu + l))).sqrt())
        .collect();
    axes.reverse();
    let half_widths = (0..model.dim())
        .map(|i| (chi2 * model.covariance[(i, i)] / nf).sqrt())
        .collect();
    Ok(ConfidenceReport {
        confidence,
        samples: n,
        chi2,
        axes,
        half_widths,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisMoments {
    pub mean: f64,
    pub sd: f64,
    pub third: f64,
    pub skewness: f64,
}

/// Moments of the normalized field read as a probability density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewnessReport {
    pub weights: Vec<f64>,
    /// One entry per coordinate axis (x, then y in 2D).
    pub axes: Vec<AxisMoments>,
}

impl SkewnessReport {
    pub fn beta(&self, axis: usize) -> f64 {
        self.axes[axis].skewness
    }
}

/// Skewness of `q / int q` along each axis (2D: of the marginal densities).
/// Negative nodal values are clipped to zero before normalizing.
pub fn skewness(space: &FemSpace, field: &[f64]) -> Result<SkewnessReport> {
    if field.len() != space.node_count() {
        return Err(Error::DimensionMismatch {
            what: "field length",
            expected: space.node_count(),
            actual: field.len(),
        });
    }
    if field.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("skewness input".into()));
    }
    let raw: Vec<f64> = field
        .iter()
        .zip(space.nodal_weights())
        .map(|(v, w)| v.max(0.0) * w)
        .collect();
    let mass: f64 = raw.iter().sum();
    if !(mass > 0.0) {
        return Err(Error::invalid("field has no positive mass to normalize"));
    }
    let weights: Vec<f64> = raw.iter().map(|v| v / mass).collect();
    let coords = space.mesh().coords();
    let dims = match space.mesh().dimension() {
        Dimension::One => 1,
        Dimension::Two => 2,
    };
    let axes = (0..dims)
        .map(|a| {
            let mean: f64 = weights.iter().zip(coords).map(|(p, c)| p * c[a]).sum();
            let (mut m2, mut m3) = (0.0, 0.0);
            for (p, c) in weights.iter().zip(coords) {
                let d = c[a] - mean;
                m2 += p * d * d;
                m3 += p * d * d * d;
            }
            let sd = m2.sqrt();
            AxisMoments {
                mean,
                sd,
                third: m3,
                skewness: if sd > 0.0 { m3 / (sd * sd * sd) } else { 0.0 },
            }
        })
        .collect();
    Ok(SkewnessReport { weights, axes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caputo::TemporalGrid;
    use crate::fem::DiffusionTensor;
    use crate::forward::{BasisKind, ObservationKind, SourceSystem, TemporalProfile, WeightFunction};
    use crate::mesh::{build_mesh, Segment};
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    use std::sync::Arc;

    fn model(n: usize, nt: usize, nb: usize) -> ForwardModel {
        let mesh = build_mesh(1, n).unwrap();
        let grid = TemporalGrid::new(1.0, nt, 0.3).unwrap();
        let sources = SourceSystem::new(BasisKind::Trigonometric, nb, &mesh, &grid, &TemporalProfile::Linear).unwrap();
        let space = Arc::new(FemSpace::new(mesh, DiffusionTensor::identity()).unwrap());
        ForwardModel::new(space, grid, sources, &WeightFunction::OneMinusT, &[Segment::Right], ObservationKind::AverageFlux).unwrap()
    }

    fn field(m: &ForwardModel, f: impl Fn(f64) -> f64) -> CoefficientField {
        CoefficientField::unbounded(m.space().mesh().coords().iter().map(|c| f(c[0])).collect())
    }

    #[test]
    fn chi_square_against_distribution_oracle() {
        let q = chi_square_quantile(1, 0.95).unwrap();
        assert!((q - 3.841_458_820_694_124).abs() < 1e-9);
        for dof in [1usize, 2, 7, 50, 301, 2601] {
            for p in [0.5, 0.9, 0.95, 0.99] {
                let x = chi_square_quantile(dof, p).unwrap();
                let cdf = ChiSquared::new(dof as f64).unwrap().cdf(x);
                assert!((cdf - p).abs() < 1e-10, "dof {dof} p {p}");
            }
        }
        assert!(chi_square_quantile(0, 0.5).is_err());
        assert!(chi_square_quantile(3, 1.0).is_err());
    }

    #[test]
    fn row_and_column_jacobians_agree() {
        let m = model(20, 10, 3);
        let q = field(&m, |x| x * (1.0 - x) + 0.1);
        let rows = assemble_jacobian(&m, &q).unwrap();
        let cols = assemble_jacobian_by_columns(&m, &q).unwrap();
        let scale = cols.abs().max();
        assert!((&rows - &cols).abs().max() < 1e-9 * scale);
        // P dq equals the directional sensitivity
        let dq: Vec<f64> = (0..21).map(|i| ((i * 37) % 11) as f64 / 11.0 - 0.5).collect();
        let pd = &rows * DVector::from_column_slice(&dq);
        let sens = crate::inversion::sensitivity_directional(&m, &q, &dq).unwrap();
        for (a, b) in pd.iter().zip(&sens) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1e-12));
        }
    }

    #[test]
    fn jacobian_entries_match_finite_differences() {
        let m = model(30, 15, 2);
        let q = field(&m, |x| x * x);
        let p = assemble_jacobian(&m, &q).unwrap();
        for (r, node) in [(0, 29), (1, 20), (2, 15), (3, 25), (1, 28)] {
            let h = 1e-4;
            let mut qp = q.values().to_vec();
            let mut qm = q.values().to_vec();
            qp[node] += h;
            qm[node] -= h;
            let fp = m.forward_map(&q.with_values(qp)).unwrap();
            let fm = m.forward_map(&q.with_values(qm)).unwrap();
            let fd = (fp.values()[r] - fm.values()[r]) / (2.0 * h);
            assert!(((p[(r, node)] - fd) / fd).abs() < 1e-3, "({r},{node}) {} vs {fd}", p[(r, node)]);
        }
    }

    #[test]
    fn prior_only_posterior() {
        let p = DMatrix::zeros(4, 6);
        let (c, l) = posterior_covariance(&p, 0.5, 0.1).unwrap();
        let expect = DMatrix::identity(6, 6) * (0.01 / 0.5);
        assert!((&c - &expect).abs().max() < 1e-15);
        assert!((&l * l.transpose() - &c).abs().max() < 1e-15);
        assert!(posterior_covariance(&p, 0.0, 0.1).is_err());
        assert!(posterior_covariance(&p, 1.0, 0.0).is_err());
    }

    fn random_jacobian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn penalty_dominance() {
        let p = random_jacobian(6, 15, 1);
        let norm = p.tr_mul(&p).symmetric_eigenvalues().max();
        let mu = 1e6 * norm;
        let (c, _) = posterior_covariance(&p, mu, 0.3).unwrap();
        let prior = 0.09 / mu;
        for i in 0..15 {
            assert!((c[(i, i)] / prior - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn covariance_eigenvalue_formula() {
        let p = random_jacobian(10, 40, 2) * 0.3;
        let (mu, delta) = (0.05, 0.02);
        let model = PosteriorModel::new(&vec![0.0; 40], p.clone(), mu, delta).unwrap();
        let mut direct: Vec<f64> = model.covariance().symmetric_eigenvalues().iter().cloned().collect();
        direct.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let formula = model.covariance_eigenvalues();
        for j in (0..10).chain(30..40) {
            assert!((direct[j] / formula[j] - 1.0).abs() < 1e-8, "j {j}");
        }
        let lmax = model.ptp_eigenvalues()[0];
        assert!(direct[39] >= delta * delta / (mu + lmax) - 1e-12);
    }

    #[test]
    fn sampler_moments_and_determinism() {
        let p = random_jacobian(4, 12, 3) * 0.5;
        let q_map: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
        let model = PosteriorModel::new(&q_map, p, 0.2, 0.1).unwrap();
        let ens = sample_posterior(&model, 10_000, 7).unwrap();
        let c = model.covariance();
        let emp = ens.covariance().unwrap();
        let rel = (&emp - c).norm() / c.norm();
        assert!(rel < 0.05, "{rel}");
        let bound = 3.0 * (c.trace() / 10_000.0).sqrt();
        let dist = (DVector::from_column_slice(ens.mean()) - DVector::from_column_slice(&q_map)).norm();
        assert!(dist <= bound);
        let again = sample_posterior(&model, 10_000, 7).unwrap();
        assert_eq!(ens.mean(), again.mean());
        // streaming without storage reproduces the same moments
        let lean = sample_posterior_with(&model, &EnsembleOptions { count: 10_000, seed: 7, keep_samples: false, track_covariance: false }).unwrap();
        assert_eq!(lean.mean(), ens.mean());
        for (a, b) in lean.sd().iter().zip(ens.sd()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (i, s) in ens.sd().iter().enumerate() {
            assert!((s * s - emp[(i, i)]).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_covariance_variance() {
        let p = DMatrix::zeros(2, 5);
        let model = PosteriorModel::new(&[0.0; 5], p, 4.0, 1.0).unwrap();
        let ens = sample_posterior(&model, 10_000, 11).unwrap();
        for s in ens.sd() {
            assert!((s * s / 0.25 - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn raw_dump_layout() {
        let model = PosteriorModel::new(&[1.0, 2.0, 3.0], DMatrix::zeros(1, 3), 1.0, 0.1).unwrap();
        let ens = sample_posterior(&model, 4, 0).unwrap();
        let mut buf = Vec::new();
        ens.write_raw(&mut buf, "seed=0").unwrap();
        assert_eq!(buf.len(), 24 + 6 + 8 * 12);
        assert_eq!(u64::from_le_bytes(buf[0..8].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 4);
        assert_eq!(u64::from_le_bytes(buf[16..24].try_into().unwrap()), 6);
        assert_eq!(&buf[24..30], b"seed=0");
        let first = f64::from_le_bytes(buf[30..38].try_into().unwrap());
        assert_eq!(first, ens.samples().unwrap()[(0, 0)]);
    }

    #[test]
    fn confidence_axes_monotone() {
        let p = random_jacobian(6, 20, 5);
        let base = |mu: f64, delta: f64, n: usize| {
            let m = PosteriorModel::new(&[0.0; 20], p.clone(), mu, delta).unwrap();
            confidence_interval(&m, 0.95, n).unwrap()
        };
        let a = base(0.1, 0.01, 100);
        let b = base(0.1, 0.01, 200);
        for (x, y) in a.axes.iter().zip(&b.axes) {
            assert!((x / y - 2f64.sqrt()).abs() < 1e-12);
        }
        let c = base(0.2, 0.01, 100);
        let d = base(0.1, 0.005, 100);
        for j in 0..20 {
            assert!(c.axes[j] < a.axes[j]);
            assert!(d.axes[j] < a.axes[j]);
            assert!(c.half_widths[j] < a.half_widths[j]);
        }
        let m = PosteriorModel::new(&[0.0; 20], p, 0.1, 0.01).unwrap();
        assert!(confidence_interval(&m, 1.0, 10).is_err());
        assert!(confidence_interval(&m, 0.95, 0).is_err());
    }

    fn fine_space(d: usize, n: usize) -> FemSpace {
        FemSpace::new(build_mesh(d, n).unwrap(), DiffusionTensor::identity()).unwrap()
    }

    #[test]
    fn symmetric_and_reflected_densities() {
        let space = fine_space(1, 300);
        let xs: Vec<f64> = space.mesh().coords().iter().map(|c| c[0]).collect();
        let sym: Vec<f64> = xs.iter().map(|x| x * (1.0 - x)).collect();
        assert!(skewness(&space, &sym).unwrap().beta(0).abs() < 1e-10);
        let q: Vec<f64> = xs.iter().map(|x| x * x * (1.0 - x * x)).collect();
        let r: Vec<f64> = xs.iter().map(|x| (1.0 - x) * (1.0 - x) * (1.0 - (1.0 - x) * (1.0 - x))).collect();
        let (a, b) = (skewness(&space, &q).unwrap().beta(0), skewness(&space, &r).unwrap().beta(0));
        assert!(a < 0.0);
        assert!((a + b).abs() < 1e-10);
        let w: f64 = skewness(&space, &q).unwrap().weights.iter().sum();
        assert!((w - 1.0).abs() < 1e-14);
    }

    // Triangular(0, 1, 1/4): sqrt(2)(a+b-2c)(2a-b-c)(a-2b+c) / (5 (a^2+b^2+c^2-ab-ac-bc)^{3/2}).
    #[test]
    fn triangular_density_skewness() {
        let space = fine_space(1, 400);
        let tri: Vec<f64> = space
            .mesh()
            .coords()
            .iter()
            .map(|c| if c[0] <= 0.25 { c[0] / 0.25 } else { (1.0 - c[0]) / 0.75 })
            .collect();
        let (a, b, c) = (0.0f64, 1.0f64, 0.25f64);
        let num = 2f64.sqrt() * (a + b - 2.0 * c) * (2.0 * a - b - c) * (a - 2.0 * b + c);
        let den = 5.0 * (a * a + b * b + c * c - a * b - a * c - b * c).powf(1.5);
        let beta = skewness(&space, &tri).unwrap().beta(0);
        assert!(beta > 0.0);
        assert!((beta - num / den).abs() < 1e-3, "{beta} vs {}", num / den);
    }

    #[test]
    fn marginal_skewness_in_two_dimensions() {
        let space = fine_space(2, 40);
        let f: Vec<f64> = space
            .mesh()
            .coords()
            .iter()
            .map(|c| c[0] * (1.0 - c[0]) * c[1] * c[1] * (1.0 - c[1]))
            .collect();
        let rep = skewness(&space, &f).unwrap();
        assert_eq!(rep.axes.len(), 2);
        assert!(rep.beta(0).abs() < 1e-10);
        assert!(rep.beta(1) < 0.0);
    }

    #[test]
    fn skewness_rejects_massless_fields() {
        let space = fine_space(1, 10);
        assert!(skewness(&space, &[0.0; 11]).is_err());
        assert!(skewness(&space, &[-1.0; 11]).is_err());
        assert!(skewness(&space, &[1.0; 5]).is_err());
    }
}

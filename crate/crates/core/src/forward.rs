//! Measurement map `q -> Phi`: weighted boundary-flux functionals of the 2N
//! states driven by `phi_j(x) v_i(t)`.
//!
//! Stretched ordering of measurements is source-major,
//! `(1,1), .., (1,N), (2,1), .., (2,N)`; each source contributes a block of
//! `block_len` values (1 for average flux, `levels * nodes` for direct traces,
//! level-major).

use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::caputo::{caputo_apply, TemporalGrid};
use crate::error::{Error, Result};
use crate::fem::FemSpace;
use crate::field::{CoefficientField, FieldKind};
use crate::flux::{boundary_flux, FluxMethod};
use crate::mesh::{Dimension, Segment, SpatialMesh};
use crate::solver::{Dirichlet, Load, TfdeSolution, TfdeSolver};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    Trigonometric,
    Polynomial,
}

/// Temporal profile `v` of the source; `v(0)` must vanish.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalProfile {
    /// `v(t) = t`, with analytic Caputo derivative `t^{1-a} / Gamma(2-a)`.
    Linear,
    /// Values on the time grid; the Caputo derivative is taken with the L1 scheme.
    Sampled(Vec<f64>),
}

/// Spatial basis functions at the nodes and the two temporal profiles.
#[derive(Debug, Clone)]
pub struct SourceSystem {
    kind: BasisKind,
    spatial: Vec<Vec<f64>>,
    temporal: [Vec<f64>; 2],
}

fn trig_1d(k: usize, x: f64) -> f64 {
    let freq = trig_freq(k);
    let arg = 2.0 * std::f64::consts::PI * freq as f64 * x;
    match k {
        0 => 1.0,
        _ if k % 2 == 1 => arg.cos(),
        _ => arg.sin(),
    }
}

fn trig_freq(k: usize) -> usize {
    k.div_ceil(2)
}

/// Index pairs of 2D tensor-product basis functions ordered by
/// (total frequency, y index, x index).
fn tensor_indices(kind: BasisKind, n: usize) -> Vec<(usize, usize)> {
    let freq = |k: usize| match kind {
        BasisKind::Trigonometric => trig_freq(k),
        BasisKind::Polynomial => k,
    };
    let mut pairs: Vec<(usize, usize)> = (0..=2 * n)
        .flat_map(|a| (0..=2 * n).map(move |b| (a, b)))
        .collect();
    pairs.sort_by_key(|&(a, b)| (freq(a) + freq(b), b, a));
    pairs.truncate(n);
    pairs
}

impl SourceSystem {
    pub fn new(
        kind: BasisKind,
        count: usize,
        mesh: &SpatialMesh,
        grid: &TemporalGrid,
        profile: &TemporalProfile,
    ) -> Result<Self> {
        if count == 0 {
            return Err(Error::invalid("source system needs at least one basis function"));
        }
        let eval = |k: usize, x: f64| match kind {
            BasisKind::Trigonometric => trig_1d(k, x),
            BasisKind::Polynomial => x.powi(k as i32),
        };
        let spatial = match mesh.dimension() {
            Dimension::One => (0..count)
                .map(|k| mesh.coords().iter().map(|c| eval(k, c[0])).collect())
                .collect(),
            Dimension::Two => tensor_indices(kind, count)
                .into_iter()
                .map(|(a, b)| mesh.coords().iter().map(|c| eval(a, c[0]) * eval(b, c[1])).collect())
                .collect(),
        };
        let alpha = grid.alpha();
        let temporal = match profile {
            TemporalProfile::Linear => {
                let t = grid.times();
                let d = t.iter().map(|t| t.powf(1.0 - alpha) / gamma(2.0 - alpha)).collect();
                [t, d]
            }
            TemporalProfile::Sampled(v) => {
                let d = caputo_apply(v, grid)?;
                [v.clone(), d]
            }
        };
        Ok(Self {
            kind,
            spatial,
            temporal,
        })
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    /// Number of spatial basis functions `N`.
    pub fn count(&self) -> usize {
        self.spatial.len()
    }

    pub fn spatial(&self, j: usize) -> &[f64] {
        &self.spatial[j]
    }

    /// `v_1 = v` (i = 0) or `v_2 = D^a v` (i = 1) on the time grid.
    pub fn temporal(&self, i: usize) -> &[f64] {
        &self.temporal[i]
    }
}

/// Weight `h(x, t)` of the average-flux functional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightFunction {
    /// `h = 1 - t`.
    OneMinusT,
    Constant(f64),
    /// `values[n][k]` on level `n` at the k-th observed node (sorted node order).
    Sampled(Vec<Vec<f64>>),
}

impl WeightFunction {
    fn sample(&self, nodes: &[usize], grid: &TemporalGrid) -> Result<Vec<Vec<f64>>> {
        let levels = grid.steps() + 1;
        let out: Vec<Vec<f64>> = match self {
            WeightFunction::OneMinusT => (0..levels)
                .map(|n| vec![1.0 - grid.time(n); nodes.len()])
                .collect(),
            WeightFunction::Constant(c) => vec![vec![*c; nodes.len()]; levels],
            WeightFunction::Sampled(v) => {
                if v.len() != levels || v.iter().any(|r| r.len() != nodes.len()) {
                    return Err(Error::invalid(format!(
                        "sampled weight must be {levels} x {} values",
                        nodes.len()
                    )));
                }
                v.clone()
            }
        };
        if out.iter().flatten().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("weight function must be finite and nonnegative"));
        }
        if out.iter().flatten().all(|v| *v == 0.0) {
            return Err(Error::invalid("weight function vanishes identically"));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ObservationKind {
    /// One weighted space-time integral per source.
    #[default]
    AverageFlux,
    /// Pointwise flux traces on the observed nodes at every level.
    DirectFlux,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub epsilon: f64,
    pub delta: f64,
    pub seed: u64,
}

/// Stretched measurement vector with its layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementMatrix {
    kind: ObservationKind,
    basis_count: usize,
    block_len: usize,
    values: Vec<f64>,
    noise: Option<NoiseRecord>,
}

impl MeasurementMatrix {
    pub fn new(kind: ObservationKind, basis_count: usize, block_len: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != 2 * basis_count * block_len {
            return Err(Error::DimensionMismatch {
                what: "measurement values",
                expected: 2 * basis_count * block_len,
                actual: values.len(),
            });
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("measurement value {v}")));
        }
        Ok(Self {
            kind,
            basis_count,
            block_len,
            values,
            noise: None,
        })
    }

    pub fn kind(&self) -> ObservationKind {
        self.kind
    }

    pub fn basis_count(&self) -> usize {
        self.basis_count
    }

    pub fn block_len(&self) -> usize {
        self.block_len
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

    pub fn noise(&self) -> Option<&NoiseRecord> {
        self.noise.as_ref()
    }

    /// Entry `(i, j)` (1-based) of an average-flux matrix.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.values[((i - 1) * self.basis_count + (j - 1)) * self.block_len]
    }

    pub fn block(&self, source: usize) -> &[f64] {
        &self.values[source * self.block_len..(source + 1) * self.block_len]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn distance(&self, other: &MeasurementMatrix) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// CSV with header `i,j,value` (average flux) or `i,j,level,node,value`.
    pub fn write_csv(&self, mut w: impl Write, nodes: &[usize]) -> Result<()> {
        let n = self.basis_count;
        match self.kind {
            ObservationKind::AverageFlux => {
                writeln!(w, "i,j,value")?;
                for (k, v) in self.values.iter().enumerate() {
                    writeln!(w, "{},{},{:e}", k / n + 1, k % n + 1, v)?;
                }
            }
            ObservationKind::DirectFlux => {
                writeln!(w, "i,j,level,node,value")?;
                let per_level = nodes.len().max(1);
                for (k, v) in self.values.iter().enumerate() {
                    let src = k / self.block_len;
                    let r = k % self.block_len;
                    let node = nodes.get(r % per_level).copied().unwrap_or(r % per_level);
                    writeln!(w, "{},{},{},{},{:e}", src / n + 1, src % n + 1, r / per_level, node, v)?;
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }
}

/// `phi^delta = phi + max|phi| eps zeta` with independent standard normal `zeta`
/// per entry; records `delta = |phi^delta - phi|_2`.
pub fn add_noise(clean: &MeasurementMatrix, epsilon: f64, seed: u64) -> Result<MeasurementMatrix> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid(format!("noise level must be nonnegative, got {epsilon}")));
    }
    let scale = clean.max_abs() * epsilon;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = clean
        .values
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + scale * z
        })
        .collect();
    let mut noisy = clean.clone();
    noisy.values = values;
    noisy.noise = Some(NoiseRecord {
        epsilon,
        delta: noisy.distance(clean),
        seed,
    });
    Ok(noisy)
}

/// Observed part of the boundary with precomputed quadrature data.
#[derive(Debug, Clone)]
pub struct Observation {
    segments: Vec<Segment>,
    nodes: Vec<usize>,
    /// `h(x_k, t_n)`.
    weight: Vec<Vec<f64>>,
    /// Boundary measure of each node's hat function.
    node_measure: Vec<f64>,
    time_weights: Vec<f64>,
}

impl Observation {
    pub fn new(
        mesh: &SpatialMesh,
        grid: &TemporalGrid,
        segments: &[Segment],
        weight: &WeightFunction,
    ) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::invalid("observed boundary is empty"));
        }
        let nodes = mesh.nodes_on(segments)?;
        let weight = weight.sample(&nodes, grid)?;
        Ok(Self {
            segments: segments.to_vec(),
            node_measure: nodes.iter().map(|&b| mesh.boundary_weight(b)).collect(),
            nodes,
            weight,
            time_weights: grid.trapezoid_weights(),
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn weight(&self) -> &[Vec<f64>] {
        &self.weight
    }
}

/// The 2N states of one coefficient field.
pub struct StateBundle {
    pub solver: TfdeSolver,
    pub states: Vec<TfdeSolution>,
}

/// Forward operator on a fixed mesh, grid, source system and observation.
pub struct ForwardModel {
    space: Arc<FemSpace>,
    grid: TemporalGrid,
    sources: SourceSystem,
    loads: Vec<Load>,
    observation: Observation,
    kind: ObservationKind,
}

impl ForwardModel {
    pub fn new(
        space: Arc<FemSpace>,
        grid: TemporalGrid,
        sources: SourceSystem,
        weight: &WeightFunction,
        segments: &[Segment],
        kind: ObservationKind,
    ) -> Result<Self> {
        let observation = Observation::new(space.mesh(), &grid, segments, weight)?;
        if sources.temporal(0).len() != grid.steps() + 1 {
            return Err(Error::DimensionMismatch {
                what: "temporal profile",
                expected: grid.steps() + 1,
                actual: sources.temporal(0).len(),
            });
        }
        let mut loads = Vec::with_capacity(2 * sources.count());
        for i in 0..2 {
            for j in 0..sources.count() {
                loads.push(Load::separable_nodal(
                    &space,
                    sources.spatial(j),
                    sources.temporal(i).to_vec(),
                ));
            }
        }
        Ok(Self {
            space,
            grid,
            sources,
            loads,
            observation,
            kind,
        })
    }

    pub fn space(&self) -> &Arc<FemSpace> {
        &self.space
    }

    pub fn grid(&self) -> &TemporalGrid {
        &self.grid
    }

    pub fn sources(&self) -> &SourceSystem {
        &self.sources
    }

    pub fn observation(&self) -> &Observation {
        &self.observation
    }

    pub fn kind(&self) -> ObservationKind {
        self.kind
    }

    pub fn source_count(&self) -> usize {
        self.loads.len()
    }

    pub fn block_len(&self) -> usize {
        match self.kind {
            ObservationKind::AverageFlux => 1,
            ObservationKind::DirectFlux => (self.grid.steps() + 1) * self.observation.nodes.len(),
        }
    }

    pub fn load(&self, source: usize) -> &Load {
        &self.loads[source]
    }

    pub fn solver(&self, q: &[f64]) -> Result<TfdeSolver> {
        TfdeSolver::new(Arc::clone(&self.space), self.grid, q)
    }

    /// Solves all 2N direct problems (in parallel, results in source order).
    pub fn states(&self, q: &[f64]) -> Result<StateBundle> {
        let solver = self.solver(q)?;
        let states = self
            .loads
            .par_iter()
            .map(|l| solver.solve(l, &Dirichlet::Homogeneous, FieldKind::Direct))
            .collect::<Result<Vec<_>>>()?;
        Ok(StateBundle { solver, states })
    }

    /// Measurement block of one solved state (variational flux).
    pub fn observe(&self, sol: &TfdeSolution) -> Result<Vec<f64>> {
        let obs = &self.observation;
        let reactions = sol.reactions_on(&obs.nodes)?;
        Ok(match self.kind {
            ObservationKind::AverageFlux => {
                let mut acc = 0.0;
                for (n, r) in reactions.iter().enumerate().skip(1) {
                    let s: f64 = r.iter().zip(&obs.weight[n]).map(|(a, h)| a * h).sum();
                    acc += obs.time_weights[n] * s;
                }
                vec![acc]
            }
            ObservationKind::DirectFlux => reactions
                .iter()
                .flat_map(|r| r.iter().zip(&obs.node_measure).map(|(a, s)| a / s))
                .collect(),
        })
    }

    /// Measurement block from one-sided finite-difference fluxes.
    pub fn observe_finite_difference(&self, sol: &TfdeSolution) -> Result<Vec<f64>> {
        let obs = &self.observation;
        let mesh = self.space.mesh();
        let levels = self.grid.steps() + 1;
        // per-node flux and boundary quadrature weight accumulated over segments
        let mut flux = vec![vec![0.0; obs.nodes.len()]; levels];
        let mut wsum = vec![0.0; obs.nodes.len()];
        let mut count = vec![0usize; obs.nodes.len()];
        let mut integral = vec![0.0; levels];
        for &seg in &obs.segments {
            let seg_nodes = mesh.segment_nodes(seg)?;
            let seg_w = mesh.segment_weights(seg)?;
            let fd = boundary_flux(&sol.field, &self.space, seg)?;
            for (k, &b) in seg_nodes.iter().enumerate() {
                let pos = obs.nodes.binary_search(&b).expect("segment node is observed");
                wsum[pos] += seg_w[k];
                count[pos] += 1;
                for n in 0..levels {
                    flux[n][pos] += fd[n][k];
                    integral[n] += seg_w[k] * obs.weight[n][pos] * fd[n][k];
                }
            }
        }
        Ok(match self.kind {
            ObservationKind::AverageFlux => {
                vec![integral.iter().zip(&obs.time_weights).map(|(a, w)| a * w).sum()]
            }
            ObservationKind::DirectFlux => flux
                .iter()
                .flat_map(|r| r.iter().zip(&count).map(|(a, c)| a / *c as f64).collect::<Vec<_>>())
                .collect(),
        })
    }

    pub fn measurements(&self, bundle: &StateBundle, method: FluxMethod) -> Result<MeasurementMatrix> {
        let blocks = bundle
            .states
            .iter()
            .map(|s| match method {
                FluxMethod::Variational => self.observe(s),
                FluxMethod::FiniteDifference => self.observe_finite_difference(s),
            })
            .collect::<Result<Vec<_>>>()?;
        MeasurementMatrix::new(
            self.kind,
            self.sources.count(),
            self.block_len(),
            blocks.concat(),
        )
    }

    /// `F(q)` with the variational flux.
    pub fn forward_map(&self, q: &CoefficientField) -> Result<MeasurementMatrix> {
        self.forward_map_with(q, FluxMethod::Variational)
    }

    pub fn forward_map_with(&self, q: &CoefficientField, method: FluxMethod) -> Result<MeasurementMatrix> {
        let bundle = self.states(q.values())?;
        self.measurements(&bundle, method)
    }

    /// Adjoint boundary data whose multiplier is the exact transpose of the
    /// measurement map, applied to a residual block.
    pub fn adjoint_data(&self, residual: &[f64]) -> Dirichlet {
        let obs = &self.observation;
        let levels = self.grid.steps() + 1;
        let nb = obs.nodes.len();
        let values = match self.kind {
            ObservationKind::AverageFlux => (0..levels)
                .map(|n| {
                    obs.weight[n]
                        .iter()
                        .map(|h| obs.time_weights[n] * h * residual[0])
                        .collect()
                })
                .collect(),
            ObservationKind::DirectFlux => (0..levels)
                .map(|n| (0..nb).map(|k| residual[n * nb + k] / obs.node_measure[k]).collect())
                .collect(),
        };
        Dirichlet::Levels {
            nodes: obs.nodes.clone(),
            values,
        }
    }

    /// Directional derivative of all measurements in direction `dq`
    /// (one sensitivity solve per source).
    pub fn sensitivity(&self, bundle: &StateBundle, dq: &[f64]) -> Result<Vec<f64>> {
        let blocks = bundle
            .states
            .par_iter()
            .map(|s| {
                let load = bundle.solver.sensitivity_load(dq, &s.field)?;
                let sens = bundle
                    .solver
                    .solve(&load, &Dirichlet::Homogeneous, FieldKind::Sensitivity)?;
                self.observe(&sens)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(blocks.concat())
    }

    /// `P^T r` in the Euclidean nodal sense: `sum_n lambda^n' R_m u^n` summed
    /// over sources, where `lambda` solves the adjoint problem with data from
    /// the residual block of each source.
    pub fn adjoint_action(&self, bundle: &StateBundle, residual: &[f64]) -> Result<Vec<f64>> {
        let bl = self.block_len();
        let parts = (0..bundle.states.len())
            .into_par_iter()
            .map(|s| self.source_adjoint_action(bundle, s, &residual[s * bl..(s + 1) * bl]))
            .collect::<Result<Vec<_>>>()?;
        let mut out = vec![0.0; self.space.node_count()];
        for p in parts {
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
        Ok(out)
    }

    /// Contribution of one source's residual block to [`Self::adjoint_action`].
    pub fn source_adjoint_action(&self, bundle: &StateBundle, source: usize, block: &[f64]) -> Result<Vec<f64>> {
        if block.iter().all(|v| *v == 0.0) {
            return Ok(vec![0.0; self.space.node_count()]);
        }
        let adj = bundle.solver.solve_adjoint(&Load::Zero, &self.adjoint_data(block))?;
        let state = &bundle.states[source].field;
        let mut acc = self.space.kernel_accumulator();
        for n in 1..=self.grid.steps() {
            acc.add(state.step(n), adj.field.step(n), 1.0);
        }
        Ok(acc.finish())
    }
}

/// Unweighted flux traces on the observed nodes for every source.
pub fn direct_flux_data(model: &ForwardModel, q: &CoefficientField) -> Result<MeasurementMatrix> {
    let direct = ForwardModel::new(
        Arc::clone(&model.space),
        model.grid,
        model.sources.clone(),
        &WeightFunction::Constant(1.0),
        &model.observation.segments,
        ObservationKind::DirectFlux,
    )?;
    direct.forward_map(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::DiffusionTensor;
    use crate::mesh::build_mesh;

    fn model(n: usize, nt: usize, seg: Segment, kind: ObservationKind) -> ForwardModel {
        let mesh = build_mesh(1, n).unwrap();
        let grid = TemporalGrid::new(1.0, nt, 0.3).unwrap();
        let sources = SourceSystem::new(BasisKind::Trigonometric, 5, &mesh, &grid, &TemporalProfile::Linear).unwrap();
        let space = Arc::new(FemSpace::new(mesh, DiffusionTensor::identity()).unwrap());
        ForwardModel::new(space, grid, sources, &WeightFunction::OneMinusT, &[seg], kind).unwrap()
    }

    fn field(m: &ForwardModel, f: impl Fn(f64) -> f64) -> CoefficientField {
        CoefficientField::unbounded(m.space().mesh().coords().iter().map(|c| f(c[0])).collect())
    }

    #[test]
    fn trig_basis_order() {
        let xs = [0.0, 0.125, 0.25];
        let vals: Vec<Vec<f64>> = (0..5).map(|k| xs.iter().map(|&x| trig_1d(k, x)).collect()).collect();
        assert_eq!(vals[0], vec![1.0; 3]);
        assert!((vals[1][2] - 0.0).abs() < 1e-15); // cos(pi/2)
        assert!((vals[2][1] - (0.5f64).sqrt()).abs() < 1e-15); // sin(pi/4)
        assert!((vals[3][1] - 0.0).abs() < 1e-15); // cos(pi/2)
        assert!((vals[4][2] - 0.0).abs() < 1e-15); // sin(pi)
        assert_eq!(tensor_indices(BasisKind::Trigonometric, 5), vec![(0, 0), (1, 0), (2, 0), (0, 1), (0, 2)]);
    }

    #[test]
    fn zero_profile_gives_zero_data() {
        let mesh = build_mesh(1, 20).unwrap();
        let grid = TemporalGrid::new(1.0, 10, 0.3).unwrap();
        let sources = SourceSystem::new(
            BasisKind::Polynomial,
            3,
            &mesh,
            &grid,
            &TemporalProfile::Sampled(vec![0.0; 11]),
        )
        .unwrap();
        let space = Arc::new(FemSpace::new(mesh, DiffusionTensor::identity()).unwrap());
        let m = ForwardModel::new(space, grid, sources, &WeightFunction::OneMinusT, &[Segment::Right], ObservationKind::AverageFlux).unwrap();
        let phi = m.forward_map(&field(&m, |x| x)).unwrap();
        assert!(phi.values().iter().all(|v| *v == 0.0));
        assert_eq!(phi.len(), 6);
    }

    #[test]
    fn reflection_symmetry() {
        let left = model(60, 20, Segment::Left, ObservationKind::AverageFlux);
        let right = model(60, 20, Segment::Right, ObservationKind::AverageFlux);
        let q = field(&left, |x| x * (1.0 - x));
        let a = left.forward_map(&q).unwrap();
        let b = right.forward_map(&q).unwrap();
        // phi_1 = 1 and phi_2 = cos(2 pi x) are symmetric about x = 1/2
        for i in 1..=2 {
            for j in [1, 2, 4] {
                assert!((a.entry(i, j) - b.entry(i, j)).abs() < 1e-12 * a.max_abs(), "({i},{j})");
            }
            // sin(2 pi x) is antisymmetric
            assert!((a.entry(i, 3) + b.entry(i, 3)).abs() < 1e-12 * a.max_abs());
        }
    }

    #[test]
    fn finite_difference_and_variational_flux_agree() {
        let m = model(300, 50, Segment::Right, ObservationKind::AverageFlux);
        let q = field(&m, |x| x * x * (1.0 - x * x));
        let var = m.forward_map_with(&q, FluxMethod::Variational).unwrap();
        let fd = m.forward_map_with(&q, FluxMethod::FiniteDifference).unwrap();
        let rel = var.distance(&fd) / var.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(rel < 1e-3, "{rel}");
    }

    #[test]
    fn direct_traces_integrate_to_average() {
        let m = model(40, 20, Segment::Right, ObservationKind::AverageFlux);
        let q = field(&m, |x| 0.5 * x);
        let avg = m.forward_map(&q).unwrap();
        let direct = direct_flux_data(&m, &q).unwrap();
        assert_eq!(direct.len(), 21 * 10);
        let w = m.grid().trapezoid_weights();
        for s in 0..10 {
            let tr = direct.block(s);
            let integral: f64 = (0..21).map(|n| w[n] * (1.0 - m.grid().time(n)) * tr[n]).sum();
            assert!((integral - avg.values()[s]).abs() < 1e-10 * avg.max_abs());
        }
    }

    #[test]
    fn noise_statistics_and_determinism() {
        let clean = MeasurementMatrix::new(ObservationKind::AverageFlux, 1, 1, vec![2.0, -4.0]).unwrap();
        let same = add_noise(&clean, 0.0, 3).unwrap();
        assert_eq!(same.values(), clean.values());
        assert_eq!(same.noise().unwrap().delta, 0.0);
        let a = add_noise(&clean, 1e-3, 42).unwrap();
        let b = add_noise(&clean, 1e-3, 42).unwrap();
        assert_eq!(a.values(), b.values());
        assert!((a.noise().unwrap().delta - a.distance(&clean)).abs() < 1e-18);

        let draws = 100_000;
        let mut s = 0.0;
        let mut s2 = 0.0;
        for seed in 0..draws {
            let v = add_noise(&clean, 1e-3, seed).unwrap().values()[0] - 2.0;
            s += v;
            s2 += v * v;
        }
        let mean = s / draws as f64;
        let sd = (s2 / draws as f64 - mean * mean).sqrt();
        assert!((sd / 4e-3 - 1.0).abs() < 0.02, "{sd}");
    }

    #[test]
    fn rejects_empty_boundary_and_negative_weight() {
        let mesh = build_mesh(1, 10).unwrap();
        let grid = TemporalGrid::new(1.0, 4, 0.3).unwrap();
        assert!(Observation::new(&mesh, &grid, &[], &WeightFunction::OneMinusT).is_err());
        assert!(Observation::new(&mesh, &grid, &[Segment::Left], &WeightFunction::Constant(-1.0)).is_err());
        assert!(Observation::new(&mesh, &grid, &[Segment::Left], &WeightFunction::Constant(0.0)).is_err());
    }

    #[test]
    fn csv_layout() {
        let m = MeasurementMatrix::new(ObservationKind::AverageFlux, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf, &[]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().next(), Some("i,j,value"));
        assert_eq!(s.lines().nth(3), Some("2,1,3e0"));
        let back: MeasurementMatrix = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }
}

#[cfg(test)]
mod map_properties {
    use super::*;
    use crate::experiment::{ExperimentConfig, OneOrMany, Setup};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn example1(elements: usize, steps: usize) -> (Setup, ForwardModel) {
        let mut cfg = ExperimentConfig::example(1).unwrap();
        cfg.mesh.elements = elements;
        cfg.time.steps = steps;
        cfg.noise.epsilon = OneOrMany::One(0.0);
        let setup = Setup::new(&cfg).unwrap();
        let job = cfg.jobs().unwrap().remove(0);
        let model = setup.model(&job).unwrap();
        (setup, model)
    }

    /// Smooth admissible coefficient drawn from a few sine modes.
    fn random_q(rng: &mut ChaCha8Rng, xs: &[f64], q_max: f64) -> Vec<f64> {
        let modes: Vec<(f64, f64)> = (1..=3).map(|k| (rng.gen_range(0.0..1.0), k as f64)).collect();
        let norm: f64 = modes.iter().map(|m| m.0).sum::<f64>().max(1e-12);
        xs.iter()
            .map(|x| q_max * modes.iter().map(|(a, k)| a * (k * std::f64::consts::PI * x).sin().abs()).sum::<f64>() / norm)
            .collect()
    }

    fn eval(model: &ForwardModel, q: &[f64]) -> MeasurementMatrix {
        model.forward_map(&CoefficientField::unbounded(q.to_vec())).unwrap()
    }

    fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn lipschitz_ratio_stable_under_refinement() {
        let mut worst = Vec::new();
        for elements in [50, 100, 200] {
            let (setup, model) = example1(elements, 50);
            let xs: Vec<f64> = setup.space.mesh().coords().iter().map(|c| c[0]).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut ratio = 0.0f64;
            for _ in 0..20 {
                let a = random_q(&mut rng, &xs, setup.q_max);
                let b = random_q(&mut rng, &xs, setup.q_max);
                ratio = ratio.max(eval(&model, &a).distance(&eval(&model, &b)) / sup_distance(&a, &b));
            }
            assert!(ratio.is_finite() && ratio > 0.0);
            worst.push(ratio);
        }
        for w in worst.windows(2) {
            assert!((w[1] / w[0] - 1.0).abs() < 0.2, "{worst:?}");
        }
    }

    #[test]
    fn distinct_coefficients_give_distinct_data() {
        let (setup, model) = example1(100, 50);
        let xs: Vec<f64> = setup.space.mesh().coords().iter().map(|c| c[0]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut pairs = 0;
        while pairs < 10 {
            let a = random_q(&mut rng, &xs, setup.q_max);
            let b = random_q(&mut rng, &xs, setup.q_max);
            if sup_distance(&a, &b) < 0.05 {
                continue;
            }
            pairs += 1;
            let d = eval(&model, &a).distance(&eval(&model, &b));
            assert!(d >= 1e-8, "pair {pairs}: distance {d:e}");
        }
    }

    #[test]
    fn data_converge_under_time_refinement() {
        let (setup, coarse) = example1(300, 100);
        let (_, fine) = example1(300, 200);
        let a = eval(&coarse, &setup.truth);
        let b = eval(&fine, &setup.truth);
        let scale = a.max_abs();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 5e-3 * scale, "{x} vs {y}");
        }
    }
}

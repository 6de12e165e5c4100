//! Implicit L1 time stepping for the fractional diffusion equation.
//!
//! Each level solves, on interior nodes,
//!
//! ```text
//! (c M + K + R(q)) u^n = F^n - c M sum_{m=1}^{n-1} l_{n-m} u^m
//! ```
//!
//! with `l` the Toeplitz entries of the L1 weights. The matrix does not depend
//! on `n`, so it is factored once per coefficient field. Boundary values are
//! prescribed (zero unless Dirichlet data is given) and eliminated by lifting.

use std::sync::Arc;

use nalgebra::DVector;
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix, CsrMatrix};

use crate::caputo::{caputo_weights, TemporalGrid};
use crate::error::{Error, Result};
use crate::fem::{combine, row_dot, spmv, DiffusionTensor, FemSpace};
use crate::field::{CoefficientField, FieldKind, SpaceTimeField};
use crate::mesh::SpatialMesh;

/// Right-hand side as FEM load vectors (already integrated against the basis).
#[derive(Debug, Clone)]
pub enum Load {
    Zero,
    /// `spatial * temporal[n]`.
    Separable {
        spatial: Vec<f64>,
        temporal: Vec<f64>,
    },
    /// One load vector per time level `0..=nt`.
    Levels(Vec<Vec<f64>>),
}

impl Load {
    /// Load of the nodal function `phi` times the temporal profile.
    pub fn separable_nodal(space: &FemSpace, phi: &[f64], temporal: Vec<f64>) -> Self {
        Load::Separable {
            spatial: space.load_vector(phi),
            temporal,
        }
    }

    fn write(&self, n: usize, out: &mut [f64]) {
        match self {
            Load::Zero => out.fill(0.0),
            Load::Separable { spatial, temporal } => {
                let v = temporal[n];
                for (o, s) in out.iter_mut().zip(spatial) {
                    *o = s * v;
                }
            }
            Load::Levels(levels) => out.copy_from_slice(&levels[n]),
        }
    }

    fn check(&self, nodes: usize, levels: usize) -> Result<()> {
        let bad = |what, expected, actual| Err(Error::DimensionMismatch { what, expected, actual });
        match self {
            Load::Zero => Ok(()),
            Load::Separable { spatial, temporal } => {
                if spatial.len() != nodes {
                    return bad("load vector", nodes, spatial.len());
                }
                if temporal.len() != levels {
                    return bad("temporal profile", levels, temporal.len());
                }
                Ok(())
            }
            Load::Levels(l) => {
                if l.len() != levels {
                    return bad("load levels", levels, l.len());
                }
                match l.iter().find(|v| v.len() != nodes) {
                    Some(v) => bad("load vector", nodes, v.len()),
                    None => Ok(()),
                }
            }
        }
    }
}

/// Prescribed boundary values; nodes not listed are held at zero.
#[derive(Debug, Clone)]
pub enum Dirichlet {
    Homogeneous,
    /// `values[n][k]` is the value at `nodes[k]` on level `n`.
    Levels {
        nodes: Vec<usize>,
        values: Vec<Vec<f64>>,
    },
}

impl Dirichlet {
    fn write(&self, n: usize, out: &mut [f64]) {
        if let Dirichlet::Levels { nodes, values } = self {
            for (&i, v) in nodes.iter().zip(&values[n]) {
                out[i] = *v;
            }
        }
    }
}

/// Solution levels plus the discrete boundary reactions on every level.
///
/// The reaction at boundary node `b` is the residual of its (unused) equation,
/// `[c M sum_m l_{n-m} u^m + (K + R) u^n - F^n]_b`, i.e. the boundary flux
/// tested against the hat function of `b`.
#[derive(Debug, Clone)]
pub struct TfdeSolution {
    pub field: SpaceTimeField,
    boundary: Arc<Vec<usize>>,
    reactions: Vec<Vec<f64>>,
}

impl TfdeSolution {
    pub fn boundary_nodes(&self) -> &[usize] {
        &self.boundary
    }

    /// Reactions per level (storage order of the field) for the given nodes.
    pub fn reactions_on(&self, nodes: &[usize]) -> Result<Vec<Vec<f64>>> {
        let pos: Vec<usize> = nodes
            .iter()
            .map(|n| {
                self.boundary
                    .binary_search(n)
                    .map_err(|_| Error::invalid(format!("node {n} is not on the boundary")))
            })
            .collect::<Result<_>>()?;
        Ok(self
            .reactions
            .iter()
            .map(|r| pos.iter().map(|&p| r[p]).collect())
            .collect())
    }
}

/// Factored time-stepping operator for one coefficient field.
pub struct TfdeSolver {
    space: Arc<FemSpace>,
    grid: TemporalGrid,
    toeplitz: Vec<f64>,
    scale: f64,
    q: Vec<f64>,
    reaction: CsrMatrix<f64>,
    system: CsrMatrix<f64>,
    interior: Vec<usize>,
    boundary: Arc<Vec<usize>>,
    factor: CscCholesky<f64>,
}

impl std::fmt::Debug for TfdeSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TfdeSolver")
            .field("nodes", &self.space.node_count())
            .field("grid", &self.grid)
            .finish_non_exhaustive()
    }
}

impl TfdeSolver {
    pub fn new(space: Arc<FemSpace>, grid: TemporalGrid, q: &[f64]) -> Result<Self> {
        if let Some(v) = q.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("coefficient value {v}")));
        }
        let reaction = space.reaction(q)?;
        let weights = caputo_weights(&grid);
        let scale = weights.scale();
        let system = combine(
            &[(scale, space.mass()), (1.0, space.stiffness()), (1.0, &reaction)],
            space.pattern(),
        );
        let mesh = space.mesh();
        let interior = mesh.interior_nodes();
        let boundary = Arc::new(mesh.boundary_nodes());
        let mut local = vec![usize::MAX; mesh.node_count()];
        for (k, &i) in interior.iter().enumerate() {
            local[i] = k;
        }
        let mut coo = CooMatrix::new(interior.len(), interior.len());
        for (i, j, v) in system.triplet_iter() {
            if local[i] != usize::MAX && local[j] != usize::MAX {
                coo.push(local[i], local[j], *v);
            }
        }
        let csc = CscMatrix::from(&coo);
        let factor = CscCholesky::factor(&csc)
            .map_err(|e| Error::SingularSystem(format!("time-stepping matrix: {e}")))?;
        Ok(Self {
            toeplitz: weights.toeplitz(),
            scale,
            q: q.to_vec(),
            reaction,
            system,
            interior,
            boundary,
            factor,
            space,
            grid,
        })
    }

    pub fn space(&self) -> &Arc<FemSpace> {
        &self.space
    }

    pub fn grid(&self) -> &TemporalGrid {
        &self.grid
    }

    pub fn coefficient(&self) -> &[f64] {
        &self.q
    }

    pub fn reaction_matrix(&self) -> &CsrMatrix<f64> {
        &self.reaction
    }

    /// Forward solve from the zero initial state.
    pub fn solve(&self, load: &Load, dirichlet: &Dirichlet, kind: FieldKind) -> Result<TfdeSolution> {
        self.march(load, dirichlet, kind, false)
    }

    /// Adjoint solve. Load and Dirichlet data are indexed by forward step
    /// `n = 1..=nt`; the result is stored in reversed time (see
    /// [`SpaceTimeField::step`]), with the terminal state at level 0.
    pub fn solve_adjoint(&self, load: &Load, dirichlet: &Dirichlet) -> Result<TfdeSolution> {
        self.march(load, dirichlet, FieldKind::Adjoint, true)
    }

    /// Load `-R(dq) u^n` of the sensitivity problem in direction `dq`.
    pub fn sensitivity_load(&self, dq: &[f64], state: &SpaceTimeField) -> Result<Load> {
        let r = self.space.reaction(dq)?;
        Ok(Load::Levels(
            state
                .levels()
                .iter()
                .map(|u| {
                    let mut out = vec![0.0; u.len()];
                    spmv(&r, u, &mut out);
                    out.iter_mut().for_each(|v| *v = -*v);
                    out
                })
                .collect(),
        ))
    }

    /// Load `-R(dq1) s2 - R(dq2) s1` of the second-order sensitivity problem.
    pub fn second_order_load(
        &self,
        dq1: &[f64],
        s1: &SpaceTimeField,
        dq2: &[f64],
        s2: &SpaceTimeField,
    ) -> Result<Load> {
        let Load::Levels(mut a) = self.sensitivity_load(dq1, s2)? else {
            unreachable!()
        };
        let Load::Levels(b) = self.sensitivity_load(dq2, s1)? else {
            unreachable!()
        };
        for (x, y) in a.iter_mut().zip(&b) {
            for (u, v) in x.iter_mut().zip(y) {
                *u += v;
            }
        }
        Ok(Load::Levels(a))
    }

    fn march(
        &self,
        load: &Load,
        dirichlet: &Dirichlet,
        kind: FieldKind,
        reversed: bool,
    ) -> Result<TfdeSolution> {
        let nn = self.space.node_count();
        let nt = self.grid.steps();
        load.check(nn, nt + 1)?;
        if let Dirichlet::Levels { nodes, values } = dirichlet {
            if values.len() != nt + 1 {
                return Err(Error::DimensionMismatch {
                    what: "dirichlet levels",
                    expected: nt + 1,
                    actual: values.len(),
                });
            }
            if let Some(v) = values.iter().find(|v| v.len() != nodes.len()) {
                return Err(Error::DimensionMismatch {
                    what: "dirichlet values",
                    expected: nodes.len(),
                    actual: v.len(),
                });
            }
            if let Some(n) = nodes.iter().find(|n| self.boundary.binary_search(n).is_err()) {
                return Err(Error::invalid(format!("dirichlet node {n} is not on the boundary")));
            }
        }
        // in reversed mode storage level p carries forward data of step nt + 1 - p
        let source_index = |p: usize| if reversed { nt + 1 - p } else { p };

        let mass = self.space.mass();
        let mut levels: Vec<Vec<f64>> = Vec::with_capacity(nt + 1);
        levels.push(vec![0.0; nn]);
        let mut reactions = Vec::with_capacity(nt + 1);
        reactions.push(vec![0.0; self.boundary.len()]);

        let mut hist = vec![0.0; nn];
        let mut mhist = vec![0.0; nn];
        let mut f = vec![0.0; nn];
        let mut rhs = DVector::zeros(self.interior.len());
        for p in 1..=nt {
            hist.fill(0.0);
            for m in 1..p {
                let w = self.toeplitz[p - m];
                for (h, u) in hist.iter_mut().zip(&levels[m]) {
                    *h += w * u;
                }
            }
            spmv(mass, &hist, &mut mhist);
            let src = source_index(p);
            load.write(src, &mut f);
            let mut u = vec![0.0; nn];
            dirichlet.write(src, &mut u);
            for (k, &i) in self.interior.iter().enumerate() {
                rhs[k] = f[i] - self.scale * mhist[i] - row_dot(&self.system, i, &u);
            }
            self.factor.solve_mut(&mut rhs);
            for (k, &i) in self.interior.iter().enumerate() {
                u[i] = rhs[k];
            }
            if let Some(pos) = u.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "{kind:?} solve produced {} at node {pos}, level {p}",
                    u[pos]
                )));
            }
            reactions.push(
                self.boundary
                    .iter()
                    .map(|&b| row_dot(&self.system, b, &u) + self.scale * mhist[b] - f[b])
                    .collect(),
            );
            levels.push(u);
        }
        Ok(TfdeSolution {
            field: SpaceTimeField::new(kind, levels, reversed),
            boundary: Arc::clone(&self.boundary),
            reactions,
        })
    }
}

/// One-shot solve: assembles, factors and marches.
#[allow(clippy::too_many_arguments)]
pub fn solve_tfde(
    mesh: &SpatialMesh,
    grid: &TemporalGrid,
    tensor: &DiffusionTensor,
    q: &CoefficientField,
    source: &Load,
    dirichlet: &Dirichlet,
    kind: FieldKind,
) -> Result<SpaceTimeField> {
    let space = Arc::new(FemSpace::new(mesh.clone(), tensor.clone())?);
    let solver = TfdeSolver::new(space, *grid, q.values())?;
    let sol = match kind {
        FieldKind::Adjoint => solver.solve_adjoint(source, dirichlet)?,
        _ => solver.solve(source, dirichlet, kind)?,
    };
    Ok(sol.field)
}

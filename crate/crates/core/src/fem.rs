//! Linear (1D) and bilinear (2D) finite elements on uniform meshes.
//!
//! All matrices share one sparsity pattern (node adjacency through elements),
//! so sums like `c M + K + R(q)` are formed by adding value arrays.
//! Quadrature is two-point Gauss per axis, exact for the cubic integrands of
//! the q-weighted mass matrix; consequently `R(1) == M` to rounding.

use std::fmt;
use std::sync::Arc;

use nalgebra_sparse::pattern::SparsityPattern;
use nalgebra_sparse::CsrMatrix;

use crate::error::{Error, Result};
use crate::field::CoefficientField;
use crate::mesh::{Dimension, SpatialMesh};

type TensorFn = dyn Fn([f64; 2]) -> [[f64; 2]; 2] + Send + Sync;

/// Symmetric, uniformly elliptic diffusion matrix `A(x)`.
#[derive(Clone)]
pub struct DiffusionTensor {
    f: Arc<TensorFn>,
    lambda0: f64,
}

impl fmt::Debug for DiffusionTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffusionTensor")
            .field("lambda0", &self.lambda0)
            .finish_non_exhaustive()
    }
}

impl DiffusionTensor {
    pub fn identity() -> Self {
        Self::constant([[1.0, 0.0], [0.0, 1.0]])
    }

    pub fn constant(a: [[f64; 2]; 2]) -> Self {
        let tr = a[0][0] + a[1][1];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        let disc = ((tr * tr) / 4.0 - det).max(0.0).sqrt();
        let lambda0 = tr / 2.0 - disc;
        Self {
            f: Arc::new(move |_| a),
            lambda0,
        }
    }

    pub fn from_fn(
        f: impl Fn([f64; 2]) -> [[f64; 2]; 2] + Send + Sync + 'static,
        lambda0: f64,
    ) -> Self {
        Self {
            f: Arc::new(f),
            lambda0,
        }
    }

    pub fn at(&self, x: [f64; 2]) -> [[f64; 2]; 2] {
        (self.f)(x)
    }

    pub fn ellipticity(&self) -> f64 {
        self.lambda0
    }

    fn check_at(&self, x: [f64; 2], dim: Dimension) -> Result<()> {
        let a = self.at(x);
        let bad = match dim {
            Dimension::One => a[0][0] < self.lambda0 || self.lambda0 <= 0.0,
            Dimension::Two => {
                let sym = (a[0][1] - a[1][0]).abs() <= 1e-14 * (a[0][1].abs() + 1.0);
                let tr = a[0][0] + a[1][1];
                let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
                let min_eig = tr / 2.0 - ((tr * tr) / 4.0 - det).max(0.0).sqrt();
                !sym || min_eig < self.lambda0 * (1.0 - 1e-12) || self.lambda0 <= 0.0
            }
        };
        if bad {
            return Err(Error::invalid(format!(
                "diffusion tensor {a:?} at {x:?} is not symmetric with ellipticity {}",
                self.lambda0
            )));
        }
        Ok(())
    }
}

/// Reference data shared by every element of a uniform mesh.
#[derive(Debug, Clone)]
struct ElementQuadrature {
    offsets: Vec<[f64; 2]>,
    weights: Vec<f64>,
    shape: Vec<Vec<f64>>,
    grad: Vec<Vec<[f64; 2]>>,
}

impl ElementQuadrature {
    fn new(mesh: &SpatialMesh) -> Self {
        let h = mesh.spacing();
        let g = 0.5 / 3f64.sqrt();
        let gauss = [0.5 - g, 0.5 + g];
        match mesh.dimension() {
            Dimension::One => {
                let mut q = Self::empty();
                for &s in &gauss {
                    q.offsets.push([s * h, 0.0]);
                    q.weights.push(0.5 * h);
                    q.shape.push(vec![1.0 - s, s]);
                    q.grad.push(vec![[-1.0 / h, 0.0], [1.0 / h, 0.0]]);
                }
                q
            }
            Dimension::Two => {
                let mut q = Self::empty();
                for &sy in &gauss {
                    for &sx in &gauss {
                        q.offsets.push([sx * h, sy * h]);
                        q.weights.push(0.25 * h * h);
                        // local order (0,0) (1,0) (1,1) (0,1)
                        q.shape.push(vec![
                            (1.0 - sx) * (1.0 - sy),
                            sx * (1.0 - sy),
                            sx * sy,
                            (1.0 - sx) * sy,
                        ]);
                        q.grad.push(vec![
                            [-(1.0 - sy) / h, -(1.0 - sx) / h],
                            [(1.0 - sy) / h, -sx / h],
                            [sy / h, sx / h],
                            [-sy / h, (1.0 - sx) / h],
                        ]);
                    }
                }
                q
            }
        }
    }

    fn empty() -> Self {
        Self {
            offsets: Vec::new(),
            weights: Vec::new(),
            shape: Vec::new(),
            grad: Vec::new(),
        }
    }

    fn len(&self) -> usize {
        self.weights.len()
    }
}

/// Mesh, diffusion tensor and the q-independent FEM matrices.
#[derive(Debug, Clone)]
pub struct FemSpace {
    mesh: SpatialMesh,
    tensor: DiffusionTensor,
    pattern: SparsityPattern,
    mass: CsrMatrix<f64>,
    stiffness: CsrMatrix<f64>,
    lumped: Vec<f64>,
    quad: ElementQuadrature,
}

/// Matrices of the weak form for one coefficient field.
#[derive(Debug, Clone)]
pub struct FemOperators {
    pub mass: CsrMatrix<f64>,
    pub stiffness: CsrMatrix<f64>,
    pub reaction: CsrMatrix<f64>,
}

/// Assembles mass, stiffness and q-weighted mass matrices.
pub fn assemble_fem(
    mesh: &SpatialMesh,
    tensor: &DiffusionTensor,
    q: &CoefficientField,
) -> Result<FemOperators> {
    let space = FemSpace::new(mesh.clone(), tensor.clone())?;
    let reaction = space.reaction(q.values())?;
    Ok(FemOperators {
        mass: space.mass.clone(),
        stiffness: space.stiffness.clone(),
        reaction,
    })
}

impl FemSpace {
    pub fn new(mesh: SpatialMesh, tensor: DiffusionTensor) -> Result<Self> {
        let pattern = build_pattern(&mesh);
        let quad = ElementQuadrature::new(&mesh);
        let mut space = Self {
            mass: CsrMatrix::zeros(0, 0),
            stiffness: CsrMatrix::zeros(0, 0),
            lumped: Vec::new(),
            mesh,
            tensor,
            pattern,
            quad,
        };
        space.mass = space.assemble(|_, qp, a, b| {
            space.quad.weights[qp] * space.quad.shape[qp][a] * space.quad.shape[qp][b]
        });
        // spot-check the tensor at every quadrature point of a few elements
        let ne = space.mesh.element_count();
        for e in [0, ne / 2, ne - 1] {
            let origin = space.mesh.coord(space.mesh.element(e)[0]);
            for off in &space.quad.offsets {
                space
                    .tensor
                    .check_at([origin[0] + off[0], origin[1] + off[1]], space.mesh.dimension())?;
            }
        }
        space.stiffness = space.assemble(|e, qp, a, b| {
            let origin = space.mesh.coord(space.mesh.element(e)[0]);
            let off = space.quad.offsets[qp];
            let am = space.tensor.at([origin[0] + off[0], origin[1] + off[1]]);
            let ga = space.quad.grad[qp][a];
            let gb = space.quad.grad[qp][b];
            let mut s = 0.0;
            for k in 0..2 {
                for l in 0..2 {
                    s += am[k][l] * gb[l] * ga[k];
                }
            }
            space.quad.weights[qp] * s
        });
        space.lumped = row_sums(&space.mass);
        Ok(space)
    }

    pub fn mesh(&self) -> &SpatialMesh {
        &self.mesh
    }

    pub fn tensor(&self) -> &DiffusionTensor {
        &self.tensor
    }

    pub fn mass(&self) -> &CsrMatrix<f64> {
        &self.mass
    }

    pub fn stiffness(&self) -> &CsrMatrix<f64> {
        &self.stiffness
    }

    /// Nodal quadrature weights (row sums of the mass matrix).
    pub fn nodal_weights(&self) -> &[f64] {
        &self.lumped
    }

    pub fn node_count(&self) -> usize {
        self.mesh.node_count()
    }

    /// q-weighted mass matrix `R(q)_ab = int q N_a N_b` with q interpolated.
    pub fn reaction(&self, q: &[f64]) -> Result<CsrMatrix<f64>> {
        if q.len() != self.node_count() {
            return Err(Error::DimensionMismatch {
                what: "coefficient field",
                expected: self.node_count(),
                actual: q.len(),
            });
        }
        Ok(self.assemble(|e, qp, a, b| {
            let nodes = self.mesh.element(e);
            let shape = &self.quad.shape[qp];
            let qh: f64 = nodes.iter().zip(shape).map(|(&n, s)| q[n] * s).sum();
            self.quad.weights[qp] * qh * shape[a] * shape[b]
        }))
    }

    /// `int f dx` by nodal quadrature.
    pub fn integrate(&self, f: &[f64]) -> f64 {
        f.iter().zip(&self.lumped).map(|(a, w)| a * w).sum()
    }

    /// `int f g dx` by nodal quadrature.
    pub fn nodal_inner(&self, f: &[f64], g: &[f64]) -> f64 {
        f.iter()
            .zip(g)
            .zip(&self.lumped)
            .map(|((a, b), w)| a * b * w)
            .sum()
    }

    /// `L^2` norm of the interpolant (consistent mass).
    pub fn l2_norm(&self, f: &[f64]) -> f64 {
        let mut mf = vec![0.0; f.len()];
        spmv(&self.mass, f, &mut mf);
        f.iter().zip(&mf).map(|(a, b)| a * b).sum::<f64>().max(0.0).sqrt()
    }

    /// Consistent load vector `M f` of a nodal function.
    pub fn load_vector(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; f.len()];
        spmv(&self.mass, f, &mut out);
        out
    }

    /// Load vector `int f N_a dx` of a pointwise function by element quadrature
    /// (exact for f of degree <= 2 per axis).
    pub fn load_from_fn(&self, f: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
        let mut out = vec![0.0; self.node_count()];
        for e in 0..self.mesh.element_count() {
            let nodes = self.mesh.element(e);
            let origin = self.mesh.coord(nodes[0]);
            for qp in 0..self.quad.len() {
                let off = self.quad.offsets[qp];
                let fv = self.quad.weights[qp] * f([origin[0] + off[0], origin[1] + off[1]]);
                for (a, &n) in nodes.iter().enumerate() {
                    out[n] += fv * self.quad.shape[qp][a];
                }
            }
        }
        out
    }

    /// Accumulates `int N_m u w dx` over many `(u, w, weight)` pairs.
    pub fn kernel_accumulator(&self) -> KernelAccumulator<'_> {
        KernelAccumulator {
            space: self,
            products: vec![0.0; self.mesh.element_count() * self.quad.len()],
        }
    }

    pub(crate) fn pattern(&self) -> &SparsityPattern {
        &self.pattern
    }

    fn assemble(&self, local: impl Fn(usize, usize, usize, usize) -> f64) -> CsrMatrix<f64> {
        let offsets = self.pattern.major_offsets();
        let indices = self.pattern.minor_indices();
        let mut values = vec![0.0; indices.len()];
        let k = self.mesh.nodes_per_element();
        for e in 0..self.mesh.element_count() {
            let nodes = self.mesh.element(e);
            for a in 0..k {
                let row = nodes[a];
                let cols = &indices[offsets[row]..offsets[row + 1]];
                for b in 0..k {
                    let mut v = 0.0;
                    for qp in 0..self.quad.len() {
                        v += local(e, qp, a, b);
                    }
                    let pos = cols.binary_search(&nodes[b]).expect("pattern covers element");
                    values[offsets[row] + pos] += v;
                }
            }
        }
        CsrMatrix::try_from_pattern_and_values(self.pattern.clone(), values)
            .expect("values match pattern")
    }
}

pub struct KernelAccumulator<'a> {
    space: &'a FemSpace,
    products: Vec<f64>,
}

impl KernelAccumulator<'_> {
    pub fn add(&mut self, u: &[f64], w: &[f64], weight: f64) {
        let mesh = &self.space.mesh;
        let quad = &self.space.quad;
        let nq = quad.len();
        for e in 0..mesh.element_count() {
            let nodes = mesh.element(e);
            for qp in 0..nq {
                let shape = &quad.shape[qp];
                let mut uh = 0.0;
                let mut wh = 0.0;
                for (a, &n) in nodes.iter().enumerate() {
                    uh += shape[a] * u[n];
                    wh += shape[a] * w[n];
                }
                self.products[e * nq + qp] += weight * uh * wh;
            }
        }
    }

    pub fn finish(self) -> Vec<f64> {
        let mesh = &self.space.mesh;
        let quad = &self.space.quad;
        let nq = quad.len();
        let mut out = vec![0.0; mesh.node_count()];
        for e in 0..mesh.element_count() {
            for (a, &n) in mesh.element(e).iter().enumerate() {
                let mut s = 0.0;
                for qp in 0..nq {
                    s += quad.weights[qp] * quad.shape[qp][a] * self.products[e * nq + qp];
                }
                out[n] += s;
            }
        }
        out
    }
}

fn build_pattern(mesh: &SpatialMesh) -> SparsityPattern {
    let n = mesh.node_count();
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
    for e in 0..mesh.element_count() {
        let nodes = mesh.element(e);
        for &a in nodes {
            rows[a].extend_from_slice(nodes);
        }
    }
    let mut offsets = Vec::with_capacity(n + 1);
    let mut indices = Vec::new();
    offsets.push(0);
    for r in &mut rows {
        r.sort_unstable();
        r.dedup();
        indices.extend_from_slice(r);
        offsets.push(indices.len());
    }
    SparsityPattern::try_from_offsets_and_indices(n, n, offsets, indices)
        .expect("valid element pattern")
}

fn row_sums(a: &CsrMatrix<f64>) -> Vec<f64> {
    a.row_iter().map(|r| r.values().iter().sum()).collect()
}

/// `y = A x`.
pub(crate) fn spmv(a: &CsrMatrix<f64>, x: &[f64], y: &mut [f64]) {
    let (offsets, cols, vals) = a.csr_data();
    for (r, yr) in y.iter_mut().enumerate() {
        let mut s = 0.0;
        for k in offsets[r]..offsets[r + 1] {
            s += vals[k] * x[cols[k]];
        }
        *yr = s;
    }
}

/// Row `r` of `A x`.
pub(crate) fn row_dot(a: &CsrMatrix<f64>, r: usize, x: &[f64]) -> f64 {
    let (offsets, cols, vals) = a.csr_data();
    (offsets[r]..offsets[r + 1]).map(|k| vals[k] * x[cols[k]]).sum()
}

/// Linear combination of matrices sharing one pattern.
pub(crate) fn combine(terms: &[(f64, &CsrMatrix<f64>)], pattern: &SparsityPattern) -> CsrMatrix<f64> {
    let nnz = pattern.nnz();
    let mut values = vec![0.0; nnz];
    for (c, m) in terms {
        debug_assert_eq!(m.nnz(), nnz);
        for (v, x) in values.iter_mut().zip(m.values()) {
            *v += c * x;
        }
    }
    CsrMatrix::try_from_pattern_and_values(pattern.clone(), values).expect("shared pattern")
}

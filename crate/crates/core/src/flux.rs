//! Conormal boundary flux of a nodal solution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::FemSpace;
use crate::field::{FieldKind, SpaceTimeField};
use crate::mesh::{Dimension, Segment};
use crate::solver::TfdeSolution;

/// How boundary fluxes are recovered from a discrete solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FluxMethod {
    /// Residual of the boundary equations (consistent with the discrete adjoint).
    #[default]
    Variational,
    /// One-sided second-order differences along the inward normal.
    FiniteDifference,
}

/// `A grad u . n` on the nodes of `segment`, per stored level.
///
/// The normal derivative uses `(3 u_0 - 4 u_1 + u_2) / 2h` along the inward
/// normal; the tangential derivative (needed for anisotropic tensors) uses
/// central differences along the segment, one-sided at its ends.
pub fn boundary_flux(
    field: &SpaceTimeField,
    space: &FemSpace,
    segment: Segment,
) -> Result<Vec<Vec<f64>>> {
    if field.kind() == FieldKind::Adjoint {
        return Err(Error::invalid("boundary flux is defined for forward fields only"));
    }
    let mesh = space.mesh();
    let nodes = mesh.segment_nodes(segment)?;
    let h = mesh.spacing();
    let normal = segment.outward_normal();
    let tangent = match segment {
        Segment::Bottom | Segment::Top => [1.0, 0.0],
        Segment::Left | Segment::Right => [0.0, 1.0],
    };
    let stencils: Vec<[usize; 3]> = nodes.iter().map(|&b| mesh.inward_stencil(b, segment)).collect();
    let conormal: Vec<[f64; 2]> = nodes
        .iter()
        .map(|&b| {
            let a = space.tensor().at(mesh.coord(b));
            [
                normal[0] * a[0][0] + normal[1] * a[1][0],
                normal[0] * a[0][1] + normal[1] * a[1][1],
            ]
        })
        .collect();
    let two_d = mesh.dimension() == Dimension::Two;
    let last = nodes.len().saturating_sub(1);

    Ok(field
        .levels()
        .iter()
        .map(|u| {
            (0..nodes.len())
                .map(|k| {
                    let [s0, s1, s2] = stencils[k];
                    let dn = (3.0 * u[s0] - 4.0 * u[s1] + u[s2]) / (2.0 * h);
                    let dt = if two_d {
                        let v = |i: usize| u[nodes[i]];
                        if k == 0 {
                            (-3.0 * v(0) + 4.0 * v(1) - v(2)) / (2.0 * h)
                        } else if k == last {
                            (3.0 * v(last) - 4.0 * v(last - 1) + v(last - 2)) / (2.0 * h)
                        } else {
                            (v(k + 1) - v(k - 1)) / (2.0 * h)
                        }
                    } else {
                        0.0
                    };
                    let g = [
                        dn * normal[0] + dt * tangent[0],
                        dn * normal[1] + dt * tangent[1],
                    ];
                    conormal[k][0] * g[0] + conormal[k][1] * g[1]
                })
                .collect()
        })
        .collect())
}

/// Pointwise flux from boundary reactions: reaction divided by the boundary
/// measure of each node's hat function.
pub fn variational_flux(
    solution: &TfdeSolution,
    space: &FemSpace,
    nodes: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let mesh = space.mesh();
    let scale: Vec<f64> = nodes.iter().map(|&b| 1.0 / mesh.boundary_weight(b)).collect();
    Ok(solution
        .reactions_on(nodes)?
        .into_iter()
        .map(|r| r.iter().zip(&scale).map(|(a, s)| a * s).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caputo::TemporalGrid;
    use crate::fem::DiffusionTensor;
    use crate::mesh::build_mesh;
    use crate::solver::{Dirichlet, Load, TfdeSolver};
    use statrs::function::gamma::gamma;
    use std::sync::Arc;

    fn field_of(levels: Vec<Vec<f64>>) -> SpaceTimeField {
        SpaceTimeField::new(FieldKind::Direct, levels, false)
    }

    #[test]
    fn linear_field_has_unit_outward_flux() {
        let space = FemSpace::new(build_mesh(1, 10).unwrap(), DiffusionTensor::identity()).unwrap();
        let x: Vec<f64> = space.mesh().coords().iter().map(|c| c[0]).collect();
        let f = field_of(vec![vec![0.0; 11], x]);
        let right = boundary_flux(&f, &space, Segment::Right).unwrap();
        let left = boundary_flux(&f, &space, Segment::Left).unwrap();
        assert!((right[1][0] - 1.0).abs() < 1e-12);
        assert!((left[1][0] + 1.0).abs() < 1e-12);
        assert_eq!(right[0][0], 0.0);
    }

    #[test]
    fn anisotropic_tensor_uses_tangential_part() {
        let t = DiffusionTensor::constant([[2.0, 0.5], [0.5, 1.0]]);
        let space = FemSpace::new(build_mesh(2, 6).unwrap(), t).unwrap();
        // u = x + 3y: grad = (1, 3), A grad = (3.5, 3.5)
        let u: Vec<f64> = space.mesh().coords().iter().map(|c| c[0] + 3.0 * c[1]).collect();
        let f = field_of(vec![u]);
        for (seg, expect) in [
            (Segment::Right, 3.5),
            (Segment::Left, -3.5),
            (Segment::Top, 3.5),
            (Segment::Bottom, -3.5),
        ] {
            for v in &boundary_flux(&f, &space, seg).unwrap()[0] {
                assert!((v - expect).abs() < 1e-10, "{seg:?}: {v}");
            }
        }
    }

    #[test]
    fn rejects_adjoint_and_foreign_segments() {
        let space = FemSpace::new(build_mesh(1, 4).unwrap(), DiffusionTensor::identity()).unwrap();
        let adj = SpaceTimeField::new(FieldKind::Adjoint, vec![vec![0.0; 5]], true);
        assert!(boundary_flux(&adj, &space, Segment::Left).is_err());
        let f = field_of(vec![vec![0.0; 5]]);
        assert!(boundary_flux(&f, &space, Segment::Top).is_err());
    }

    // u = t^2 x(1-x): outward flux u_x(1, T) = -T^2, and -u_x(0, t) = -t^2 on the left.
    #[test]
    fn manufactured_flux_at_right_end() {
        let alpha = 0.5;
        let space = Arc::new(FemSpace::new(build_mesh(1, 200).unwrap(), DiffusionTensor::identity()).unwrap());
        let grid = TemporalGrid::new(1.0, 100, alpha).unwrap();
        let solver = TfdeSolver::new(space.clone(), grid, &vec![1.0; 201]).unwrap();
        let shape = space.load_from_fn(|x| x[0] * (1.0 - x[0]));
        let two = space.load_from_fn(|_| 2.0);
        let da = 2.0 / gamma(3.0 - alpha);
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
        let sol = solver
            .solve(&Load::Levels(levels), &Dirichlet::Homogeneous, FieldKind::Direct)
            .unwrap();
        let fd = boundary_flux(&sol.field, &space, Segment::Right).unwrap();
        assert!((fd[100][0] + 1.0).abs() < 1e-3, "{}", fd[100][0]);
        let var = variational_flux(&sol, &space, &[200]).unwrap();
        assert!((var[100][0] + 1.0).abs() < 1e-3, "{}", var[100][0]);
        let mid = variational_flux(&sol, &space, &[0]).unwrap();
        assert!((mid[50][0] + 0.25).abs() < 1e-3);
    }
}

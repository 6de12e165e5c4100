//! Uniform meshes of the unit interval and the unit square.
//!
//! Nodes of the 2D mesh are numbered row by row: node `(i, j)` at
//! `(i h, j h)` has index `j (n + 1) + i`. Boundary segments follow the
//! usual convention for the square: `Bottom` (y = 0), `Right` (x = 1),
//! `Top` (y = 1), `Left` (x = 0). In 1D only `Left` (x = 0) and `Right`
//! (x = 1) exist.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dimension {
    One,
    Two,
}

impl Dimension {
    pub fn from_usize(d: usize) -> Result<Self> {
        match d {
            1 => Ok(Dimension::One),
            2 => Ok(Dimension::Two),
            _ => Err(Error::invalid(format!("dimension must be 1 or 2, got {d}"))),
        }
    }

    pub fn as_usize(self) -> usize {
        match self {
            Dimension::One => 1,
            Dimension::Two => 2,
        }
    }
}

/// A labelled part of the boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Segment {
    Left,
    Right,
    Bottom,
    Top,
}

impl Segment {
    /// Outward unit normal.
    pub fn outward_normal(self) -> [f64; 2] {
        match self {
            Segment::Left => [-1.0, 0.0],
            Segment::Right => [1.0, 0.0],
            Segment::Bottom => [0.0, -1.0],
            Segment::Top => [0.0, 1.0],
        }
    }

    /// Parses either a geometric name (`left`, `right`, `bottom`, `top`) or the
    /// numbered labels `L0`/`L1` (1D) and `L1`..`L4` (2D).
    pub fn parse(label: &str, dim: Dimension) -> Result<Self> {
        let lower = label.trim().to_ascii_lowercase();
        let seg = match (lower.as_str(), dim) {
            ("left", _) => Some(Segment::Left),
            ("right", _) => Some(Segment::Right),
            ("bottom", Dimension::Two) => Some(Segment::Bottom),
            ("top", Dimension::Two) => Some(Segment::Top),
            ("l0", Dimension::One) => Some(Segment::Left),
            ("l1", Dimension::One) => Some(Segment::Right),
            ("l1", Dimension::Two) => Some(Segment::Bottom),
            ("l2", Dimension::Two) => Some(Segment::Right),
            ("l3", Dimension::Two) => Some(Segment::Top),
            ("l4", Dimension::Two) => Some(Segment::Left),
            _ => None,
        };
        seg.ok_or_else(|| {
            Error::invalid(format!(
                "unknown boundary segment `{label}` for a {}D mesh",
                dim.as_usize()
            ))
        })
    }

    pub fn label(self, dim: Dimension) -> &'static str {
        match (self, dim) {
            (Segment::Left, Dimension::One) => "L0",
            (Segment::Right, Dimension::One) => "L1",
            (Segment::Bottom, _) => "L1",
            (Segment::Right, Dimension::Two) => "L2",
            (Segment::Top, _) => "L3",
            (Segment::Left, Dimension::Two) => "L4",
        }
    }

    pub fn all(dim: Dimension) -> Vec<Segment> {
        match dim {
            Dimension::One => vec![Segment::Left, Segment::Right],
            Dimension::Two => vec![Segment::Bottom, Segment::Right, Segment::Top, Segment::Left],
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpatialMesh {
    dim: Dimension,
    per_side: usize,
    h: f64,
    coords: Vec<[f64; 2]>,
    connectivity: Vec<usize>,
    nodes_per_element: usize,
    labels: Vec<Vec<Segment>>,
}

/// Builds a uniform mesh with `elements_per_side` elements along each axis.
pub fn build_mesh(dimension: usize, elements_per_side: usize) -> Result<SpatialMesh> {
    SpatialMesh::uniform(Dimension::from_usize(dimension)?, elements_per_side)
}

impl SpatialMesh {
    pub fn uniform(dim: Dimension, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid(format!(
                "elements_per_side must be at least 2, got {n}"
            )));
        }
        let h = 1.0 / n as f64;
        let coord = |i: usize| if i == n { 1.0 } else { i as f64 * h };
        match dim {
            Dimension::One => {
                let coords: Vec<[f64; 2]> = (0..=n).map(|i| [coord(i), 0.0]).collect();
                let connectivity = (0..n).flat_map(|e| [e, e + 1]).collect();
                let mut labels = vec![Vec::new(); n + 1];
                labels[0].push(Segment::Left);
                labels[n].push(Segment::Right);
                Ok(Self {
                    dim,
                    per_side: n,
                    h,
                    coords,
                    connectivity,
                    nodes_per_element: 2,
                    labels,
                })
            }
            Dimension::Two => {
                let side = n + 1;
                let mut coords = Vec::with_capacity(side * side);
                let mut labels = Vec::with_capacity(side * side);
                for j in 0..side {
                    for i in 0..side {
                        coords.push([coord(i), coord(j)]);
                        let mut l = Vec::new();
                        if j == 0 {
                            l.push(Segment::Bottom);
                        }
                        if i == n {
                            l.push(Segment::Right);
                        }
                        if j == n {
                            l.push(Segment::Top);
                        }
                        if i == 0 {
                            l.push(Segment::Left);
                        }
                        labels.push(l);
                    }
                }
                let mut connectivity = Vec::with_capacity(4 * n * n);
                for j in 0..n {
                    for i in 0..n {
                        let n00 = j * side + i;
                        // counter-clockwise: (0,0) (1,0) (1,1) (0,1)
                        connectivity.extend_from_slice(&[n00, n00 + 1, n00 + side + 1, n00 + side]);
                    }
                }
                Ok(Self {
                    dim,
                    per_side: n,
                    h,
                    coords,
                    connectivity,
                    nodes_per_element: 4,
                    labels,
                })
            }
        }
    }

    pub fn dimension(&self) -> Dimension {
        self.dim
    }

    pub fn elements_per_side(&self) -> usize {
        self.per_side
    }

    /// Uniform element size.
    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn node_count(&self) -> usize {
        self.coords.len()
    }

    pub fn element_count(&self) -> usize {
        self.connectivity.len() / self.nodes_per_element
    }

    pub fn nodes_per_element(&self) -> usize {
        self.nodes_per_element
    }

    pub fn element(&self, e: usize) -> &[usize] {
        let k = self.nodes_per_element;
        &self.connectivity[e * k..(e + 1) * k]
    }

    /// Length (1D) or area (2D) of an element.
    pub fn element_measure(&self, _e: usize) -> f64 {
        match self.dim {
            Dimension::One => self.h,
            Dimension::Two => self.h * self.h,
        }
    }

    pub fn coord(&self, node: usize) -> [f64; 2] {
        self.coords[node]
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn labels(&self, node: usize) -> &[Segment] {
        &self.labels[node]
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        !self.labels[node].is_empty()
    }

    pub fn boundary_nodes(&self) -> Vec<usize> {
        (0..self.node_count()).filter(|&i| self.is_boundary(i)).collect()
    }

    pub fn interior_nodes(&self) -> Vec<usize> {
        (0..self.node_count()).filter(|&i| !self.is_boundary(i)).collect()
    }

    pub fn has_segment(&self, seg: Segment) -> bool {
        Segment::all(self.dim).contains(&seg)
    }

    /// Nodes of one segment ordered along the segment, corners included.
    pub fn segment_nodes(&self, seg: Segment) -> Result<Vec<usize>> {
        if !self.has_segment(seg) {
            return Err(Error::invalid(format!(
                "segment {seg:?} is not part of a {}D boundary",
                self.dim.as_usize()
            )));
        }
        let n = self.per_side;
        Ok(match self.dim {
            Dimension::One => match seg {
                Segment::Left => vec![0],
                _ => vec![n],
            },
            Dimension::Two => {
                let side = n + 1;
                match seg {
                    Segment::Bottom => (0..side).collect(),
                    Segment::Top => (0..side).map(|i| n * side + i).collect(),
                    Segment::Left => (0..side).map(|j| j * side).collect(),
                    Segment::Right => (0..side).map(|j| j * side + n).collect(),
                }
            }
        })
    }

    /// Sorted union of the nodes of several segments.
    pub fn nodes_on(&self, segments: &[Segment]) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for &s in segments {
            out.extend(self.segment_nodes(s)?);
        }
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }

    /// Three nodes starting at `node` and stepping along the inward normal of `seg`.
    pub fn inward_stencil(&self, node: usize, seg: Segment) -> [usize; 3] {
        let stride = match self.dim {
            Dimension::One => 1isize,
            Dimension::Two => match seg {
                Segment::Left | Segment::Right => 1,
                Segment::Bottom | Segment::Top => (self.per_side + 1) as isize,
            },
        };
        let dir = match seg {
            Segment::Left | Segment::Bottom => stride,
            Segment::Right | Segment::Top => -stride,
        };
        let n0 = node as isize;
        [node, (n0 + dir) as usize, (n0 + 2 * dir) as usize]
    }

    /// Integral of the boundary hat function of `node` over the whole boundary
    /// (1 for 1D endpoints).
    pub fn boundary_weight(&self, node: usize) -> f64 {
        match self.dim {
            Dimension::One => {
                if self.is_boundary(node) {
                    1.0
                } else {
                    0.0
                }
            }
            Dimension::Two => {
                let k = self.labels[node].len();
                match k {
                    0 => 0.0,
                    // corners touch one half-element on each adjacent edge
                    _ => self.h,
                }
            }
        }
    }

    /// Trapezoid weights along a segment (1 for a 1D endpoint).
    pub fn segment_weights(&self, seg: Segment) -> Result<Vec<f64>> {
        let nodes = self.segment_nodes(seg)?;
        Ok(match self.dim {
            Dimension::One => vec![1.0],
            Dimension::Two => {
                let last = nodes.len() - 1;
                (0..nodes.len())
                    .map(|k| if k == 0 || k == last { 0.5 * self.h } else { self.h })
                    .collect()
            }
        })
    }
}

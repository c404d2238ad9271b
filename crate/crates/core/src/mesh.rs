//! Interval grids and axis-aligned quadrilateral meshes.
//!
//! Cells are boxes described by a lower corner and per-axis extents. Faces
//! carry a unit normal `+e_axis`; a cell sees the face on its lower side with
//! outward sign `-1` and the face on its upper side with outward sign `+1`.
//! Local face `l` of a cell lies on axis `l / 2`, side `l % 2`.
//!
//! Faces are numbered lexicographically by their center coordinates so that
//! assembled matrices are reproducible from run to run.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Physical point. One-dimensional meshes only use the first component.
pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BoundaryLabel {
    Interior,
    Dirichlet,
    Neumann,
}

impl BoundaryLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            BoundaryLabel::Interior => "interior",
            BoundaryLabel::Dirichlet => "dirichlet",
            BoundaryLabel::Neumann => "neumann",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Cell {
    pub lower: Point,
    pub extent: Point,
    /// Global face ids indexed by local face number `2 * axis + side`.
    pub faces: [usize; 4],
}

impl Cell {
    pub fn center(&self) -> Point {
        [
            self.lower[0] + 0.5 * self.extent[0],
            self.lower[1] + 0.5 * self.extent[1],
        ]
    }

    pub fn measure(&self, dim: usize) -> f64 {
        self.extent[..dim].iter().product()
    }

    pub fn diameter(&self, dim: usize) -> f64 {
        self.extent[..dim].iter().map(|h| h * h).sum::<f64>().sqrt()
    }

    /// Maps reference coordinates in `[0, 1]^d` to the physical cell.
    pub fn map_from_reference(&self, reference: &Point) -> Point {
        [
            self.lower[0] + self.extent[0] * reference[0],
            self.lower[1] + self.extent[1] * reference[1],
        ]
    }

    pub fn map_to_reference(&self, dim: usize, x: &Point) -> Point {
        let mut r = [0.0; 2];
        for a in 0..dim {
            r[a] = (x[a] - self.lower[a]) / self.extent[a];
        }
        r
    }

    /// Outward normal sign of local face `l`.
    pub fn outward_sign(local_face: usize) -> f64 {
        if local_face % 2 == 0 {
            -1.0
        } else {
            1.0
        }
    }

    /// Center of local face `l`.
    pub fn face_center(&self, local_face: usize) -> Point {
        let axis = local_face / 2;
        let mut c = self.center();
        c[axis] = self.lower[axis] + (local_face % 2) as f64 * self.extent[axis];
        c
    }
}

#[derive(Clone, Debug)]
pub struct Face {
    /// Axis of the unit normal `e_axis`.
    pub axis: usize,
    /// Coordinate of the face along its normal axis.
    pub position: f64,
    /// Lower end and length of the face along its tangential axis (2D only).
    pub tangent_lower: f64,
    pub tangent_extent: f64,
    /// Adjacent cells on the lower and upper side along the normal axis.
    pub cells: [Option<usize>; 2],
    pub label: BoundaryLabel,
}

impl Face {
    pub fn center(&self, dim: usize) -> Point {
        let mut c = [0.0; 2];
        c[self.axis] = self.position;
        if dim == 2 {
            c[1 - self.axis] = self.tangent_lower + 0.5 * self.tangent_extent;
        }
        c
    }

    pub fn normal(&self) -> Point {
        let mut n = [0.0; 2];
        n[self.axis] = 1.0;
        n
    }

    /// (d-1)-dimensional measure; a point face has measure one.
    pub fn measure(&self, dim: usize) -> f64 {
        if dim == 1 {
            1.0
        } else {
            self.tangent_extent
        }
    }

    pub fn is_boundary(&self) -> bool {
        self.cells[0].is_none() || self.cells[1].is_none()
    }

    /// Maps a reference face coordinate in `[0, 1]` to the physical face.
    pub fn map_from_reference(&self, dim: usize, t: f64) -> Point {
        let mut p = [0.0; 2];
        p[self.axis] = self.position;
        if dim == 2 {
            p[1 - self.axis] = self.tangent_lower + self.tangent_extent * t;
        }
        p
    }
}

#[derive(Clone, Debug)]
pub struct Mesh {
    dim: usize,
    cells: Vec<Cell>,
    faces: Vec<Face>,
    lower: Point,
    upper: Point,
}

impl Mesh {
    /// Tensor-product mesh from strictly increasing breakpoints per axis.
    pub fn from_breakpoints(axes: &[Vec<f64>]) -> Result<Self> {
        let dim = axes.len();
        if !(1..=2).contains(&dim) {
            return Err(Error::InvalidArgument(format!(
                "mesh dimension must be 1 or 2, got {dim}"
            )));
        }
        for (a, pts) in axes.iter().enumerate() {
            if pts.len() < 2 {
                return Err(Error::InvalidArgument(format!(
                    "axis {a} needs at least two breakpoints"
                )));
            }
            if pts.iter().any(|x| !x.is_finite()) || pts.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::InvalidArgument(format!(
                    "breakpoints on axis {a} must be finite and strictly increasing"
                )));
            }
        }

        let nx = axes[0].len() - 1;
        let ny = if dim == 2 { axes[1].len() - 1 } else { 1 };
        let ys: &[f64] = if dim == 2 { &axes[1] } else { &[0.0, 0.0] };

        let mut cells = Vec::with_capacity(nx * ny);
        for i in 0..nx {
            for j in 0..ny {
                let lower = [axes[0][i], ys[j]];
                let extent = if dim == 2 {
                    [axes[0][i + 1] - axes[0][i], ys[j + 1] - ys[j]]
                } else {
                    [axes[0][i + 1] - axes[0][i], 1.0]
                };
                cells.push(Cell {
                    lower,
                    extent,
                    faces: [usize::MAX; 4],
                });
            }
        }
        let cell_id = |i: usize, j: usize| i * ny + j;

        let label_for = |lo: Option<usize>, hi: Option<usize>| {
            if lo.is_some() && hi.is_some() {
                BoundaryLabel::Interior
            } else {
                BoundaryLabel::Dirichlet
            }
        };

        // (face, owner cells with local face numbers)
        let mut faces: Vec<(Face, Vec<(usize, usize)>)> = Vec::new();
        // faces normal to x
        for i in 0..=nx {
            for j in 0..ny {
                let lo = (i > 0).then(|| cell_id(i - 1, j));
                let hi = (i < nx).then(|| cell_id(i, j));
                let (tl, te) = if dim == 2 {
                    (ys[j], ys[j + 1] - ys[j])
                } else {
                    (0.0, 1.0)
                };
                let mut owners = Vec::new();
                if let Some(c) = lo {
                    owners.push((c, 1));
                }
                if let Some(c) = hi {
                    owners.push((c, 0));
                }
                faces.push((
                    Face {
                        axis: 0,
                        position: axes[0][i],
                        tangent_lower: tl,
                        tangent_extent: te,
                        cells: [lo, hi],
                        label: label_for(lo, hi),
                    },
                    owners,
                ));
            }
        }
        if dim == 2 {
            for i in 0..nx {
                for j in 0..=ny {
                    let lo = (j > 0).then(|| cell_id(i, j - 1));
                    let hi = (j < ny).then(|| cell_id(i, j));
                    let mut owners = Vec::new();
                    if let Some(c) = lo {
                        owners.push((c, 3));
                    }
                    if let Some(c) = hi {
                        owners.push((c, 2));
                    }
                    faces.push((
                        Face {
                            axis: 1,
                            position: ys[j],
                            tangent_lower: axes[0][i],
                            tangent_extent: axes[0][i + 1] - axes[0][i],
                            cells: [lo, hi],
                            label: label_for(lo, hi),
                        },
                        owners,
                    ));
                }
            }
        }

        faces.sort_by(|(f, _), (g, _)| {
            let (cf, cg) = (f.center(dim), g.center(dim));
            cf[0]
                .partial_cmp(&cg[0])
                .unwrap_or(Ordering::Equal)
                .then(cf[1].partial_cmp(&cg[1]).unwrap_or(Ordering::Equal))
        });

        let mut out_faces = Vec::with_capacity(faces.len());
        for (id, (face, owners)) in faces.into_iter().enumerate() {
            for (c, l) in owners {
                cells[c].faces[l] = id;
            }
            out_faces.push(face);
        }

        let lower = [axes[0][0], ys[0]];
        let upper = [*axes[0].last().unwrap(), *ys.last().unwrap()];
        Ok(Mesh {
            dim,
            cells,
            faces: out_faces,
            lower,
            upper,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    pub fn cell(&self, id: usize) -> &Cell {
        &self.cells[id]
    }

    pub fn face(&self, id: usize) -> &Face {
        &self.faces[id]
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn faces_per_cell(&self) -> usize {
        2 * self.dim
    }

    pub fn bounds(&self) -> (Point, Point) {
        (self.lower, self.upper)
    }

    pub fn domain_measure(&self) -> f64 {
        (0..self.dim)
            .map(|a| self.upper[a] - self.lower[a])
            .product()
    }

    /// Sorted node coordinates of a 1D mesh.
    pub fn nodes_1d(&self) -> Vec<f64> {
        let mut x: Vec<f64> = self.faces.iter().map(|f| f.position).collect();
        x.sort_by(|a, b| a.partial_cmp(b).unwrap());
        x
    }

    /// Relabels boundary faces. The closure must not return `Interior`.
    pub fn set_boundary_labels(
        &mut self,
        mut label: impl FnMut(&Face, Point) -> BoundaryLabel,
    ) -> Result<()> {
        let dim = self.dim;
        for face in self.faces.iter_mut().filter(|f| f.is_boundary()) {
            let l = label(face, face.center(dim));
            if l == BoundaryLabel::Interior {
                return Err(Error::InvalidArgument(
                    "boundary faces must be labeled Dirichlet or Neumann".into(),
                ));
            }
            face.label = l;
        }
        Ok(())
    }

    /// Cell/face table as CSV text.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,id,x,y,extent_x,extent_y,cell_lower,cell_upper,label\n");
        for (id, c) in self.cells.iter().enumerate() {
            let _ = writeln!(
                s,
                "cell,{id},{:.15e},{:.15e},{:.15e},{:.15e},,,",
                c.lower[0], c.lower[1], c.extent[0], c.extent[1]
            );
        }
        let fmt = |c: Option<usize>| c.map(|c| c.to_string()).unwrap_or_default();
        for (id, f) in self.faces.iter().enumerate() {
            let ctr = f.center(self.dim);
            let _ = writeln!(
                s,
                "face,{id},{:.15e},{:.15e},,,{},{},{}",
                ctr[0],
                ctr[1],
                fmt(f.cells[0]),
                fmt(f.cells[1]),
                f.label.as_str()
            );
        }
        s
    }
}

/// Uniform grid with `n` cells per axis on the box `bounds` (one `(lo, hi)`
/// pair per axis).
pub fn build_uniform_cartesian(dim: usize, n: usize, bounds: &[(f64, f64)]) -> Result<Mesh> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "cells per axis must be positive".into(),
        ));
    }
    if bounds.len() != dim {
        return Err(Error::InvalidArgument(format!(
            "expected {dim} axis bounds, got {}",
            bounds.len()
        )));
    }
    let axes = bounds
        .iter()
        .map(|&(lo, hi)| {
            if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "degenerate box ({lo}, {hi})"
                )));
            }
            let h = (hi - lo) / n as f64;
            Ok((0..=n)
                .map(|i| if i == n { hi } else { lo + h * i as f64 })
                .collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Mesh::from_breakpoints(&axes)
}

/// Breakpoints of the graded p-i-n grid on `[0, length]`.
///
/// The device is split into six equal segments. The outer two are split
/// uniformly into `2^(level-1)` cells; each inner segment gets `2^(level+1)`
/// cells whose reference breakpoints `(k / 2^(level+1))^2` cluster at the
/// junction `length/3` or `2 length/3` it touches.
pub fn pin_breakpoints(level: usize, length: f64) -> Result<Vec<f64>> {
    if level == 0 || level > 20 {
        return Err(Error::InvalidArgument(format!(
            "p-i-n grid level must be in 1..=20, got {level}"
        )));
    }
    if !(length > 0.0) || !length.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "device length must be positive, got {length}"
        )));
    }
    let ends = [
        0.0,
        length / 6.0,
        length / 3.0,
        length / 2.0,
        2.0 * length / 3.0,
        5.0 * length / 6.0,
        length,
    ];
    let uniform = 1usize << (level - 1);
    let graded = 1usize << (level + 1);
    let mut x = vec![0.0];
    for seg in 0..6 {
        let (a, b) = (ends[seg], ends[seg + 1]);
        let w = b - a;
        match seg {
            0 | 5 => {
                for k in 1..uniform {
                    x.push(a + w * (k as f64 / uniform as f64));
                }
            }
            // junction at the right end of the segment
            1 | 3 => {
                for k in (1..graded).rev() {
                    let t = (k as f64 / graded as f64).powi(2);
                    x.push(b - w * t);
                }
            }
            // junction at the left end
            _ => {
                for k in 1..graded {
                    let t = (k as f64 / graded as f64).powi(2);
                    x.push(a + w * t);
                }
            }
        }
        x.push(b);
    }
    Ok(x)
}

pub fn build_pin_grid(level: usize, length: f64) -> Result<Mesh> {
    Mesh::from_breakpoints(&[pin_breakpoints(level, length)?])
}

/// Splits every cell of a 1D breakpoint list into `2^times` equal parts.
pub fn refine_breakpoints(x: &[f64], times: usize) -> Vec<f64> {
    let parts = 1usize << times;
    let mut out = Vec::with_capacity((x.len() - 1) * parts + 1);
    for w in x.windows(2) {
        out.push(w[0]);
        let h = w[1] - w[0];
        for k in 1..parts {
            out.push(w[0] + h * (k as f64 / parts as f64));
        }
    }
    out.push(*x.last().unwrap());
    out
}

//! One-dimensional cell-centered finite-volume grid: fields, difference
//! operators, quadrature, and the natural-closure bilaplacian.
//!
//! All operators are built so that summation by parts holds exactly:
//! `sum_k div_flux(F)_k phi_k h = -sum_faces F * grad(phi) * h + boundary`,
//! which is what transfers entropy computations to the discrete level.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("cell count must be at least {min}, got {got}")]
    TooFewCells { min: usize, got: usize },
    #[error("domain length must be positive, got {0}")]
    NonpositiveLength(f64),
}

/// Uniform cell-centered grid on `[0, length]` with `cells` control volumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid1D {
    length: f64,
    cells: usize,
    h: f64,
}

impl Grid1D {
    pub const MIN_CELLS: usize = 4;

    pub fn new(length: f64, cells: usize) -> Result<Self, GridError> {
        if !(length > 0.0) {
            return Err(GridError::NonpositiveLength(length));
        }
        if cells < Self::MIN_CELLS {
            return Err(GridError::TooFewCells {
                min: Self::MIN_CELLS,
                got: cells,
            });
        }
        Ok(Self {
            length,
            cells,
            h: length / cells as f64,
        })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    /// Uniform spacing `h = L / N`.
    pub fn spacing(&self) -> f64 {
        self.h
    }

    /// Number of faces, including the two boundary faces.
    pub fn faces(&self) -> usize {
        self.cells + 1
    }

    /// Coordinate of the k-th cell center.
    pub fn center(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.h
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.cells).map(|k| self.center(k)).collect()
    }
}

/// Nodal (cell-centered) scalar field.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Grid1D,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Grid1D, values: Vec<f64>) -> Self {
        assert_eq!(
            values.len(),
            grid.cells(),
            "field length does not match grid"
        );
        Self { grid, values }
    }

    pub fn constant(grid: Grid1D, value: f64) -> Self {
        Self::new(grid, vec![value; grid.cells()])
    }

    pub fn from_fn(grid: Grid1D, f: impl Fn(f64) -> f64) -> Self {
        let values = (0..grid.cells()).map(|k| f(grid.center(k))).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> Grid1D {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Face-valued quantity (fluxes, gradients); length `cells + 1`, entries 0 and
/// `cells` sit on the boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceField {
    grid: Grid1D,
    values: Vec<f64>,
}

impl FaceField {
    pub fn new(grid: Grid1D, values: Vec<f64>) -> Self {
        assert_eq!(
            values.len(),
            grid.faces(),
            "face field length does not match grid"
        );
        Self { grid, values }
    }

    pub fn zeros(grid: Grid1D) -> Self {
        Self::new(grid, vec![0.0; grid.faces()])
    }

    pub fn grid(&self) -> Grid1D {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Two-point face differences `(f_{k+1} - f_k)/h`; zero on boundary faces
/// (the no-flux convention).
pub fn grad(f: &Field) -> FaceField {
    let grid = f.grid();
    let h = grid.spacing();
    let v = f.values();
    let mut out = vec![0.0; grid.faces()];
    for face in 1..grid.cells() {
        out[face] = (v[face] - v[face - 1]) / h;
    }
    FaceField::new(grid, out)
}

/// Discrete divergence `(F_{k+1/2} - F_{k-1/2})/h`; the adjoint of [`grad`]
/// up to the boundary faces, so summation by parts is exact.
pub fn div_flux(flux: &FaceField) -> Field {
    let grid = flux.grid();
    let h = grid.spacing();
    let v = flux.values();
    let values = (0..grid.cells()).map(|k| (v[k + 1] - v[k]) / h).collect();
    Field::new(grid, values)
}

/// Midpoint quadrature `sum_k f_k h`.
pub fn integrate(f: &Field) -> f64 {
    f.values().iter().sum::<f64>() * f.grid().spacing()
}

/// Quadrature of a face quantity over interior faces, `sum_f g_f h`.
pub fn integrate_faces(g: &FaceField) -> f64 {
    let n = g.grid().cells();
    g.values()[1..n].iter().sum::<f64>() * g.grid().spacing()
}

/// Boundary traces by one-sided linear extrapolation from the two nearest
/// cell centers.
pub fn boundary_values(f: &Field) -> (f64, f64) {
    let v = f.values();
    let n = v.len();
    let left = 1.5 * v[0] - 0.5 * v[1];
    let right = 1.5 * v[n - 1] - 0.5 * v[n - 2];
    (left, right)
}

/// Second difference `(f_{k+1} - 2 f_k + f_{k-1})/h^2` with the natural
/// closure: zero in the two boundary cells.
pub fn second_diff(f: &Field) -> Field {
    let grid = f.grid();
    let h2 = grid.spacing() * grid.spacing();
    let v = f.values();
    let n = grid.cells();
    let mut out = vec![0.0; n];
    for k in 1..n - 1 {
        out[k] = (v[k + 1] - 2.0 * v[k] + v[k - 1]) / h2;
    }
    Field::new(grid, out)
}

/// Adjoint of [`second_diff`]: the same stencil applied to the interior
/// values with the boundary entries treated as zero.
pub fn second_diff_transpose(g: &Field) -> Field {
    let grid = g.grid();
    let h2 = grid.spacing() * grid.spacing();
    let n = grid.cells();
    let v = g.values();
    // interior rows of second_diff only
    let at = |k: isize| -> f64 {
        if k >= 1 && (k as usize) < n - 1 {
            v[k as usize]
        } else {
            0.0
        }
    };
    let values = (0..n as isize)
        .map(|k| (at(k - 1) - 2.0 * at(k) + at(k + 1)) / h2)
        .collect();
    Field::new(grid, values)
}

/// Discrete bilaplacian `D2^T D2` with natural (second-derivative-zero)
/// boundary closure: the `(1, -4, 6, -4, 1)/h^4` stencil away from the
/// boundary, symmetric positive semidefinite as a matrix, annihilates
/// constants and linears.
pub fn discrete_bilaplacian(f: &Field) -> Field {
    assert!(
        f.grid().cells() >= 5,
        "bilaplacian needs at least 5 cells, got {}",
        f.grid().cells()
    );
    second_diff_transpose(&second_diff(f))
}

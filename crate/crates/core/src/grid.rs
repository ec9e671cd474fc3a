//! Uniform cell-centered grid on the box `B = [0, L]^d` and field storage.
//!
//! Scalars (densities, concentrations, pressure, level set) live at cell
//! centers; velocities live on a staggered MAC layout with the component
//! normal to each face stored at face centers. All fields are flat `Vec<f64>`
//! in x-fastest order. The third axis collapses to a single layer in 2D so
//! kernels can loop over `(k, j, i)` uniformly in either dimension.

use crate::error::{Error, Result};

/// Uniform grid: `n` cells per axis of spacing `h = length / n`, `dim` in {2, 3}.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    dim: usize,
    n: usize,
    length: f64,
    h: f64,
}

impl Grid {
    /// Builds a grid, validating `dim in {2, 3}`, `n >= 8` and `length > 0`.
    pub fn new(dim: usize, length: f64, n: usize) -> Result<Grid> {
        if dim != 2 && dim != 3 {
            return Err(Error::Grid(format!("dim must be 2 or 3, got {dim}")));
        }
        if n < 8 {
            return Err(Error::Grid(format!("need at least 8 cells per axis, got {n}")));
        }
        if !(length > 0.0) || !length.is_finite() {
            return Err(Error::Grid(format!("box length must be positive, got {length}")));
        }
        Ok(Grid { dim, n, length, h: length / n as f64 })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Cells per axis.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Box edge length `L`.
    pub fn length(&self) -> f64 {
        self.length
    }

    /// Cell spacing `h = L / n`.
    pub fn h(&self) -> f64 {
        self.h
    }

    /// Cell volume `h^dim`.
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    /// Cell counts per axis, `[n, n, 1]` in 2D and `[n, n, n]` in 3D.
    pub fn cell_dims(&self) -> [usize; 3] {
        [self.n, self.n, if self.dim == 3 { self.n } else { 1 }]
    }

    /// Total number of cells.
    pub fn cell_count(&self) -> usize {
        let d = self.cell_dims();
        d[0] * d[1] * d[2]
    }

    /// Linear index of cell `(i, j, k)` in x-fastest order.
    #[inline]
    pub fn cell_index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.n + j) * self.n + i
    }

    /// Center coordinates of cell `(i, j, k)`; the z entry is 0 in 2D.
    #[inline]
    pub fn cell_center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            (i as f64 + 0.5) * self.h,
            (j as f64 + 0.5) * self.h,
            if self.dim == 3 { (k as f64 + 0.5) * self.h } else { 0.0 },
        ]
    }

    /// Face-array dims for the component along `axis`: `n + 1` entries along
    /// `axis`, `n` along the other in-use axes, 1 along unused axes.
    pub fn face_dims(&self, axis: usize) -> [usize; 3] {
        debug_assert!(axis < self.dim);
        let mut d = self.cell_dims();
        d[axis] += 1;
        d
    }

    /// Total number of `axis`-faces.
    pub fn face_count(&self, axis: usize) -> usize {
        let d = self.face_dims(axis);
        d[0] * d[1] * d[2]
    }

    /// Linear index into the `axis`-face array.
    #[inline]
    pub fn face_index(&self, axis: usize, i: usize, j: usize, k: usize) -> usize {
        let d = self.face_dims(axis);
        (k * d[1] + j) * d[0] + i
    }

    /// Center coordinates of face `(i, j, k)` normal to `axis`.
    #[inline]
    pub fn face_center(&self, axis: usize, i: usize, j: usize, k: usize) -> [f64; 3] {
        let mut x = [
            (i as f64 + 0.5) * self.h,
            (j as f64 + 0.5) * self.h,
            if self.dim == 3 { (k as f64 + 0.5) * self.h } else { 0.0 },
        ];
        x[axis] = [i, j, k][axis] as f64 * self.h;
        x
    }

    fn check_same(&self, other: &Grid, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::Grid(format!(
                "grid mismatch in {what}: {}^{} (L={}) vs {}^{} (L={})",
                self.n, self.dim, self.length, other.n, other.dim, other.length
            )));
        }
        Ok(())
    }
}

/// Cell-centered scalar field.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: Grid) -> ScalarField {
        ScalarField { grid, data: vec![0.0; grid.cell_count()] }
    }

    pub fn constant(grid: Grid, value: f64) -> ScalarField {
        ScalarField { grid, data: vec![value; grid.cell_count()] }
    }

    /// Samples `f` at every cell center.
    pub fn from_fn(grid: Grid, mut f: impl FnMut([f64; 3]) -> f64) -> ScalarField {
        let [nx, ny, nz] = grid.cell_dims();
        let mut data = Vec::with_capacity(grid.cell_count());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(grid.cell_center(i, j, k)));
                }
            }
        }
        ScalarField { grid, data }
    }

    /// Wraps raw data in x-fastest cell order.
    pub fn from_vec(grid: Grid, data: Vec<f64>) -> Result<ScalarField> {
        if data.len() != grid.cell_count() {
            return Err(Error::Grid(format!(
                "field length {} does not match cell count {}",
                data.len(),
                grid.cell_count()
            )));
        }
        Ok(ScalarField { grid, data })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.cell_index(i, j, k)]
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Checks that both fields live on the same grid.
    pub fn check_compatible(&self, other: &ScalarField, what: &str) -> Result<()> {
        self.grid.check_same(&other.grid, what)
    }
}

/// Staggered (MAC) vector field: component `a` stored on `a`-faces.
/// Unused components in 2D are empty.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceField {
    grid: Grid,
    comp: [Vec<f64>; 3],
}

impl FaceField {
    pub fn zeros(grid: Grid) -> FaceField {
        let mut comp: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for (axis, c) in comp.iter_mut().enumerate().take(grid.dim()) {
            *c = vec![0.0; grid.face_count(axis)];
        }
        FaceField { grid, comp }
    }

    /// Samples component `axis` of `f` at every `axis`-face center.
    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, [f64; 3]) -> f64) -> FaceField {
        let mut field = FaceField::zeros(grid);
        for axis in 0..grid.dim() {
            let [nx, ny, nz] = grid.face_dims(axis);
            let comp = &mut field.comp[axis];
            let mut idx = 0;
            for k in 0..nz {
                for j in 0..ny {
                    for i in 0..nx {
                        comp[idx] = f(axis, grid.face_center(axis, i, j, k));
                        idx += 1;
                    }
                }
            }
        }
        field
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        &self.comp[axis]
    }

    pub fn component_mut(&mut self, axis: usize) -> &mut [f64] {
        &mut self.comp[axis]
    }

    #[inline]
    pub fn at(&self, axis: usize, i: usize, j: usize, k: usize) -> f64 {
        self.comp[axis][self.grid.face_index(axis, i, j, k)]
    }

    /// Largest absolute component value over all faces.
    pub fn max_abs(&self) -> f64 {
        self.comp
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.comp.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }

    /// Linear interpolation of the full vector to a cell center.
    pub fn at_cell(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let mut v = [0.0; 3];
        for axis in 0..self.grid.dim() {
            let (mut i1, mut j1, mut k1) = (i, j, k);
            match axis {
                0 => i1 += 1,
                1 => j1 += 1,
                _ => k1 += 1,
            }
            v[axis] = 0.5 * (self.at(axis, i, j, k) + self.at(axis, i1, j1, k1));
        }
        v
    }

    pub fn check_compatible(&self, grid: &Grid, what: &str) -> Result<()> {
        self.grid.check_same(grid, what)
    }
}

/// Midpoint quadrature of `field` (times `mask` when given) over the box:
/// `sum_c field_c * mask_c * h^dim`.
pub fn integrate_scalar(field: &ScalarField, mask: Option<&ScalarField>) -> Result<f64> {
    let mut sum = 0.0;
    match mask {
        Some(m) => {
            field.check_compatible(m, "integrate_scalar")?;
            for (f, w) in field.data().iter().zip(m.data()) {
                sum += f * w;
            }
        }
        None => {
            for f in field.data() {
                sum += f;
            }
        }
    }
    Ok(sum * field.grid().cell_volume())
}

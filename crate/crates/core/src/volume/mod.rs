//! Regular 3D grids and the scalar, label, and vector fields that live on them.
//!
//! All geometry is physical (mm): a voxel with integer coordinates `(i, j, k)`
//! sits at `origin + (i, j, k) ∘ spacing`. Data is stored x-fastest.

mod io;
mod partition;

pub use io::{
    read_labels, read_vector_field, read_volume, write_labels, write_vector_field, write_volume,
    VolumeFormat,
};
pub use partition::{make_partition, Patch, PatchPartition};

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Voxel lattice geometry shared by all fields.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T: Real> {
    pub dims: [usize; 3],
    pub spacing: [T; 3],
    pub origin: [T; 3],
}

impl<T: Real> Grid<T> {
    pub fn new(dims: [usize; 3], spacing: [T; 3], origin: [T; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput(format!("grid dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > T::zero()) || !s.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "grid spacing must be finite and positive, got {:?}",
                spacing.map(|s| s.as_f64())
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidInput("grid origin must be finite".into()));
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Grid with unit spacing and zero origin.
    pub fn unit(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [T::one(); 3], [T::zero(); 3])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Physical position of voxel `(i, j, k)`.
    #[inline]
    pub fn position(&self, i: usize, j: usize, k: usize) -> Vector3<T> {
        Vector3::new(
            self.origin[0] + T::from_count(i) * self.spacing[0],
            self.origin[1] + T::from_count(j) * self.spacing[1],
            self.origin[2] + T::from_count(k) * self.spacing[2],
        )
    }

    #[inline]
    pub fn position_of(&self, idx: usize) -> Vector3<T> {
        let [i, j, k] = self.coords(idx);
        self.position(i, j, k)
    }

    /// Continuous voxel coordinates of a physical point.
    #[inline]
    pub fn to_voxel(&self, p: &Vector3<T>) -> [T; 3] {
        [
            (p.x - self.origin[0]) / self.spacing[0],
            (p.y - self.origin[1]) / self.spacing[1],
            (p.z - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Physical extent covered by voxel centers, per axis (mm).
    pub fn extent(&self) -> [T; 3] {
        [0, 1, 2].map(|a| T::from_count(self.dims[a] - 1) * self.spacing[a])
    }

    /// Geometry equality with a relative tolerance on spacing and origin.
    pub fn matches(&self, other: &Grid<T>) -> bool {
        let tol = T::lit(1e-6);
        self.dims == other.dims
            && (0..3).all(|a| {
                (self.spacing[a] - other.spacing[a]).abs() <= tol * self.spacing[a]
                    && (self.origin[a] - other.origin[a]).abs()
                        <= tol * (T::one() + self.origin[a].abs())
            })
    }

    pub fn ensure_matches(&self, other: &Grid<T>, what: &str) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: dims {:?} vs {:?}",
                self.dims, other.dims
            )))
        }
    }

    pub fn cast<U: Real>(&self) -> Grid<U> {
        Grid {
            dims: self.dims,
            spacing: self.spacing.map(|s| U::lit(s.as_f64())),
            origin: self.origin.map(|s| U::lit(s.as_f64())),
        }
    }

    /// Trilinear cell lookup: lower corner per axis, fractional offsets, and
    /// which axes were clamped at the grid boundary.
    #[inline]
    fn locate(&self, p: &Vector3<T>) -> Cell<T> {
        let u = self.to_voxel(p);
        let mut base = [0usize; 3];
        let mut frac = [T::zero(); 3];
        let mut clamped = [false; 3];
        for a in 0..3 {
            let n = self.dims[a];
            if n == 1 {
                clamped[a] = u[a] != T::zero();
                continue;
            }
            let max = T::from_count(n - 1);
            let mut ua = u[a];
            if ua < T::zero() {
                ua = T::zero();
                clamped[a] = true;
            } else if ua > max {
                ua = max;
                clamped[a] = true;
            }
            let f = ua.floor();
            let i = f.to_usize().unwrap_or(0).min(n - 2);
            base[a] = i;
            frac[a] = ua - T::from_count(i);
        }
        Cell { base, frac, clamped }
    }

    #[inline]
    fn strides(&self) -> [usize; 3] {
        [
            usize::from(self.dims[0] > 1),
            if self.dims[1] > 1 { self.dims[0] } else { 0 },
            if self.dims[2] > 1 { self.dims[0] * self.dims[1] } else { 0 },
        ]
    }
}

struct Cell<T> {
    base: [usize; 3],
    frac: [T; 3],
    clamped: [bool; 3],
}

/// Scalar field on a grid (`I_i`, `θ`, bias fields).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3<T: Real> {
    grid: Grid<T>,
    data: Vec<T>,
}

impl<T: Real> Volume3<T> {
    pub fn new(grid: Grid<T>, data: Vec<T>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidInput(format!(
                "volume data length {} does not match grid {:?}",
                data.len(),
                grid.dims
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite volume value at index {pos}"
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn constant(grid: Grid<T>, value: T) -> Self {
        let n = grid.len();
        Self { grid, data: vec![value; n] }
    }

    pub fn zeros(grid: Grid<T>) -> Self {
        Self::constant(grid, T::zero())
    }

    /// Samples `f` at every voxel position.
    pub fn from_fn(grid: Grid<T>, f: impl Fn(Vector3<T>) -> T) -> Result<Self> {
        let data = (0..grid.len()).map(|idx| f(grid.position_of(idx))).collect();
        Self::new(grid, data)
    }

    #[inline]
    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            grid: self.grid.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Voxelwise combination of two volumes on matching grids.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.grid.ensure_matches(&other.grid, "zip_map")?;
        Ok(Self {
            grid: self.grid.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn cast<U: Real>(&self) -> Volume3<U> {
        Volume3 {
            grid: self.grid.cast(),
            data: crate::scalar::cast_slice(&self.data),
        }
    }

    /// Trilinear interpolation with edge clamping; the point must be finite.
    #[inline]
    pub fn sample(&self, p: &Vector3<T>) -> T {
        let c = self.grid.locate(p);
        trilinear(&self.data, &self.grid, &c)
    }

    /// Gradient of the trilinear interpolant at `p` (intensity per mm).
    ///
    /// Inside a cell this is the exact derivative of [`Volume3::sample`]. On a
    /// node plane the interpolant has a kink and the central difference
    /// (supplied as `central`, from [`gradient_central`]) is used instead.
    /// Clamped axes have zero derivative.
    pub fn sample_gradient(&self, central: &VectorField<T>, p: &Vector3<T>) -> Vector3<T> {
        let c = self.grid.locate(p);
        let s = self.grid.strides();
        let mut g = Vector3::zeros();
        for a in 0..3 {
            if c.clamped[a] || self.grid.dims[a] == 1 {
                continue;
            }
            if c.frac[a] == T::zero() || c.frac[a] == T::one() {
                g[a] = trilinear_component(central, &c, a);
                continue;
            }
            // derivative along axis a: interpolate the cell slope over the other axes
            let (b, d) = match a {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let base = c.base[0] * s[0] + c.base[1] * s[1] + c.base[2] * s[2];
            let mut acc = T::zero();
            for (ob, wb) in [(0usize, T::one() - c.frac[b]), (1, c.frac[b])] {
                for (od, wd) in [(0usize, T::one() - c.frac[d]), (1, c.frac[d])] {
                    let i0 = base + ob * s[b] + od * s[d];
                    let i1 = i0 + s[a];
                    acc += wb * wd * (self.data[i1] - self.data[i0]);
                }
            }
            g[a] = acc / self.grid.spacing[a];
        }
        g
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold(
            (self.data[0], self.data[0]),
            |(lo, hi), &v| (if v < lo { v } else { lo }, if v > hi { v } else { hi }),
        )
    }

    pub fn mean(&self) -> T {
        let s = self.data.iter().fold(T::zero(), |acc, &v| acc + v);
        s / T::from_count(self.data.len())
    }
}

#[inline]
fn trilinear<T: Real>(data: &[T], grid: &Grid<T>, c: &Cell<T>) -> T {
    let s = grid.strides();
    let base = c.base[0] * s[0] + c.base[1] * s[1] + c.base[2] * s[2];
    let [fx, fy, fz] = c.frac;
    let one = T::one();
    let v000 = data[base];
    let v100 = data[base + s[0]];
    let v010 = data[base + s[1]];
    let v110 = data[base + s[0] + s[1]];
    let v001 = data[base + s[2]];
    let v101 = data[base + s[0] + s[2]];
    let v011 = data[base + s[1] + s[2]];
    let v111 = data[base + s[0] + s[1] + s[2]];
    let x00 = v000 * (one - fx) + v100 * fx;
    let x10 = v010 * (one - fx) + v110 * fx;
    let x01 = v001 * (one - fx) + v101 * fx;
    let x11 = v011 * (one - fx) + v111 * fx;
    let y0 = x00 * (one - fy) + x10 * fy;
    let y1 = x01 * (one - fy) + x11 * fy;
    y0 * (one - fz) + y1 * fz
}

#[inline]
fn trilinear_component<T: Real>(field: &VectorField<T>, c: &Cell<T>, a: usize) -> T {
    let grid = &field.grid;
    let s = grid.strides();
    let base = c.base[0] * s[0] + c.base[1] * s[1] + c.base[2] * s[2];
    let [fx, fy, fz] = c.frac;
    let one = T::one();
    let d = &field.data;
    let x00 = d[base][a] * (one - fx) + d[base + s[0]][a] * fx;
    let x10 = d[base + s[1]][a] * (one - fx) + d[base + s[0] + s[1]][a] * fx;
    let x01 = d[base + s[2]][a] * (one - fx) + d[base + s[0] + s[2]][a] * fx;
    let x11 = d[base + s[1] + s[2]][a] * (one - fx) + d[base + s[0] + s[1] + s[2]][a] * fx;
    let y0 = x00 * (one - fy) + x10 * fy;
    let y1 = x01 * (one - fy) + x11 * fy;
    y0 * (one - fz) + y1 * fz
}

/// Non-negative integer labels on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume<T: Real> {
    grid: Grid<T>,
    data: Vec<u16>,
}

impl<T: Real> LabelVolume<T> {
    pub fn new(grid: Grid<T>, data: Vec<u16>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidInput(format!(
                "label data length {} does not match grid {:?}",
                data.len(),
                grid.dims
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    /// Distinct non-zero labels in ascending order.
    pub fn labels(&self) -> Vec<u16> {
        let mut seen: Vec<u16> = self.data.iter().copied().filter(|&l| l > 0).collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }

    /// Boolean mask of `label > 0`.
    pub fn foreground(&self) -> Vec<bool> {
        self.data.iter().map(|&l| l > 0).collect()
    }

    /// Nearest-neighbour resampling through a displacement field.
    pub fn warp(&self, disp: &VectorField<T>) -> Result<Self> {
        self.grid.ensure_matches(&disp.grid, "label warp")?;
        let grid = &self.grid;
        let data = (0..grid.len())
            .into_par_iter()
            .map(|idx| {
                let p = grid.position_of(idx) + disp.data[idx];
                let u = grid.to_voxel(&p);
                let mut ijk = [0usize; 3];
                for a in 0..3 {
                    let max = T::from_count(grid.dims[a] - 1);
                    let ua = if u[a] < T::zero() {
                        T::zero()
                    } else if u[a] > max {
                        max
                    } else {
                        u[a]
                    };
                    ijk[a] = (ua + T::lit(0.5)).floor().to_usize().unwrap_or(0).min(grid.dims[a] - 1);
                }
                self.data[grid.index(ijk[0], ijk[1], ijk[2])]
            })
            .collect();
        Ok(Self { grid: grid.clone(), data })
    }
}

/// Vector field on a grid; used for displacements `φ(x) − x` and velocities.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField<T: Real> {
    grid: Grid<T>,
    data: Vec<Vector3<T>>,
}

/// `φ(x) − x`, in mm.
pub type DisplacementField<T> = VectorField<T>;

impl<T: Real> VectorField<T> {
    pub fn new(grid: Grid<T>, data: Vec<Vector3<T>>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidInput(format!(
                "vector field length {} does not match grid {:?}",
                data.len(),
                grid.dims
            )));
        }
        if data.iter().any(|v| !(v.x.is_finite() && v.y.is_finite() && v.z.is_finite())) {
            return Err(Error::InvalidInput("non-finite vector field component".into()));
        }
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: Grid<T>) -> Self {
        let n = grid.len();
        Self { grid, data: vec![Vector3::zeros(); n] }
    }

    pub fn constant(grid: Grid<T>, v: Vector3<T>) -> Self {
        let n = grid.len();
        Self { grid, data: vec![v; n] }
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn data(&self) -> &[Vector3<T>] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [Vector3<T>] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Vector3<T>> {
        self.data
    }

    /// Trilinear interpolation of all three components with edge clamping.
    #[inline]
    pub fn sample(&self, p: &Vector3<T>) -> Vector3<T> {
        let c = self.grid.locate(p);
        let s = self.grid.strides();
        let base = c.base[0] * s[0] + c.base[1] * s[1] + c.base[2] * s[2];
        let [fx, fy, fz] = c.frac;
        let one = T::one();
        let d = &self.data;
        let x00 = d[base] * (one - fx) + d[base + s[0]] * fx;
        let x10 = d[base + s[1]] * (one - fx) + d[base + s[0] + s[1]] * fx;
        let x01 = d[base + s[2]] * (one - fx) + d[base + s[0] + s[2]] * fx;
        let x11 = d[base + s[1] + s[2]] * (one - fx) + d[base + s[0] + s[1] + s[2]] * fx;
        let y0 = x00 * (one - fy) + x10 * fy;
        let y1 = x01 * (one - fy) + x11 * fy;
        y0 * (one - fz) + y1 * fz
    }

    /// Jacobian of [`VectorField::sample`] at `p`; column `a` is the
    /// derivative along axis `a` (per mm). Clamped axes have zero derivative
    /// and on a node plane the slope of the enclosing cell is used.
    pub fn sample_jacobian(&self, p: &Vector3<T>) -> Matrix3<T> {
        let c = self.grid.locate(p);
        let s = self.grid.strides();
        let base = c.base[0] * s[0] + c.base[1] * s[1] + c.base[2] * s[2];
        let mut jac = Matrix3::zeros();
        for a in 0..3 {
            if c.clamped[a] || self.grid.dims[a] == 1 {
                continue;
            }
            let (b, d) = match a {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let mut acc = Vector3::zeros();
            for (ob, wb) in [(0usize, T::one() - c.frac[b]), (1, c.frac[b])] {
                for (od, wd) in [(0usize, T::one() - c.frac[d]), (1, c.frac[d])] {
                    let i0 = base + ob * s[b] + od * s[d];
                    acc += (self.data[i0 + s[a]] - self.data[i0]) * (wb * wd);
                }
            }
            jac.set_column(a, &(acc / self.grid.spacing[a]));
        }
        jac
    }

    /// Adjoint of [`VectorField::sample`]: adds `value` to `out` at the nodes
    /// around `p` with their interpolation weights.
    pub fn splat_at(grid: &Grid<T>, p: &Vector3<T>, value: &Vector3<T>, out: &mut [Vector3<T>]) {
        let c = grid.locate(p);
        let s = grid.strides();
        let base = c.base[0] * s[0] + c.base[1] * s[1] + c.base[2] * s[2];
        let one = T::one();
        for (oz, wz) in [(0usize, one - c.frac[2]), (1, c.frac[2])] {
            for (oy, wy) in [(0usize, one - c.frac[1]), (1, c.frac[1])] {
                for (ox, wx) in [(0usize, one - c.frac[0]), (1, c.frac[0])] {
                    out[base + ox * s[0] + oy * s[1] + oz * s[2]] += value * (wx * wy * wz);
                }
            }
        }
    }

    /// Largest Euclidean norm over all voxels.
    pub fn max_norm(&self) -> T {
        self.data
            .iter()
            .map(|v| v.norm())
            .fold(T::zero(), |a, b| if b > a { b } else { a })
    }

    /// Single component as a scalar volume.
    pub fn component(&self, axis: usize) -> Volume3<T> {
        Volume3 {
            grid: self.grid.clone(),
            data: self.data.iter().map(|v| v[axis]).collect(),
        }
    }

    pub fn scale(&self, k: T) -> Self {
        Self {
            grid: self.grid.clone(),
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> VectorField<U> {
        VectorField {
            grid: self.grid.cast(),
            data: self
                .data
                .iter()
                .map(|v| Vector3::new(U::lit(v.x.as_f64()), U::lit(v.y.as_f64()), U::lit(v.z.as_f64())))
                .collect(),
        }
    }
}

/// Trilinear interpolation at a physical point; out-of-grid points are
/// clamped to the nearest edge voxel.
pub fn sample_trilinear<T: Real>(vol: &Volume3<T>, point: &Vector3<T>) -> Result<T> {
    if !(point.x.is_finite() && point.y.is_finite() && point.z.is_finite()) {
        return Err(Error::InvalidInput("non-finite sample point".into()));
    }
    Ok(vol.sample(point))
}

/// Central differences in the interior, one-sided at faces, per mm.
pub fn gradient_central<T: Real>(vol: &Volume3<T>) -> Result<VectorField<T>> {
    let grid = vol.grid();
    if grid.dims.iter().any(|&d| d < 2) {
        return Err(Error::InvalidInput(format!(
            "gradient needs at least 2 voxels per axis, got {:?}",
            grid.dims
        )));
    }
    let [nx, ny, nz] = grid.dims;
    let strides = [1, nx, nx * ny];
    let data = vol.data();
    let two = T::lit(2.0);
    let out = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let ijk = grid.coords(idx);
            let mut g = Vector3::zeros();
            for a in 0..3 {
                let n = [nx, ny, nz][a];
                let s = strides[a];
                let h = grid.spacing[a];
                g[a] = if ijk[a] == 0 {
                    (data[idx + s] - data[idx]) / h
                } else if ijk[a] == n - 1 {
                    (data[idx] - data[idx - s]) / h
                } else {
                    (data[idx + s] - data[idx - s]) / (two * h)
                };
            }
            g
        })
        .collect();
    Ok(VectorField { grid: grid.clone(), data: out })
}

/// `output(x) = vol(x + disp(x))`, trilinear with edge clamping.
pub fn warp<T: Real>(vol: &Volume3<T>, disp: &DisplacementField<T>) -> Result<Volume3<T>> {
    vol.grid().ensure_matches(disp.grid(), "warp")?;
    let grid = vol.grid();
    let data = (0..grid.len())
        .into_par_iter()
        .map(|idx| vol.sample(&(grid.position_of(idx) + disp.data[idx])))
        .collect();
    Ok(Volume3 { grid: grid.clone(), data })
}

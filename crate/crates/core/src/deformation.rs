//! Kernel-bundle stationary velocity fields and their exponentials.
//!
//! A bundle has `R` levels, each a control lattice with its own Wendland
//! kernel; the velocity is the sum of all level expansions
//! `v(x) = Σ_m Σ_i K_m(c_i^m, x) w_i^m`. Deformations are `Exp(v)`, obtained
//! by forward Euler integration of `∂φ/∂t = v(φ)` on the voxel grid.

use nalgebra::{DMatrix, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{gram, make_control_grid, ControlGrid, GramMatrix, GramSolver, WendlandKernel};
use crate::scalar::Real;
use crate::volume::{gradient_central, warp, DisplacementField, Grid, VectorField, Volume3};

/// Instantaneous velocity on the voxel grid (mm).
pub type VelocityField<T> = VectorField<T>;

/// One bundle level: lattice, kernel, Gram matrix, and the operators that
/// move coefficients to voxels and back.
pub struct BundleLevel<T: Real> {
    pub grid: ControlGrid<T>,
    pub kernel: WendlandKernel<T>,
    pub gram: GramMatrix<T>,
    solver: GramSolver<T>,
    op: LevelOperator<T>,
}

impl<T: Real> BundleLevel<T> {
    pub fn n_centers(&self) -> usize {
        self.grid.len()
    }

    pub fn solver(&self) -> &GramSolver<T> {
        &self.solver
    }

    /// Voxelwise `Σ_i K(c_i, x) w_i`.
    pub fn splat(&self, coeffs: &[Vector3<T>], out: &mut [Vector3<T>]) {
        self.op.splat(&self.grid, &self.kernel, coeffs, out)
    }

    /// Adjoint of [`BundleLevel::splat`]: `Σ_x K(c_i, x) f(x)` per center.
    pub fn gather(&self, field: &[Vector3<T>]) -> Vec<Vector3<T>> {
        self.op.gather(&self.grid, &self.kernel, field)
    }
}

/// Geometry of a multi-level kernel bundle on a fixed image grid.
pub struct KernelBundle<T: Real> {
    image: Grid<T>,
    levels: Vec<BundleLevel<T>>,
}

impl<T: Real> KernelBundle<T> {
    /// Builds levels for the given control spacings (mm, strictly decreasing);
    /// each kernel support is `support_multiplier × spacing`.
    pub fn new(image: &Grid<T>, spacings: &[T], support_multiplier: T) -> Result<Self> {
        let supports: Vec<T> = spacings.iter().map(|&s| s * support_multiplier).collect();
        Self::with_supports(image, spacings, &supports)
    }

    pub fn with_supports(image: &Grid<T>, spacings: &[T], supports: &[T]) -> Result<Self> {
        if spacings.len() != supports.len() {
            return Err(Error::InvalidInput("one support per bundle level required".into()));
        }
        if spacings.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::InvalidInput(
                "bundle level spacings must be strictly decreasing".into(),
            ));
        }
        let lo = image.position(0, 0, 0);
        let hi = image.position(image.dims[0] - 1, image.dims[1] - 1, image.dims[2] - 1);
        let levels = spacings
            .iter()
            .zip(supports)
            .map(|(&spacing, &support)| {
                let grid = make_control_grid(lo, hi, spacing)?;
                let kernel = WendlandKernel::new(support)?;
                let gram = gram(&kernel, &grid.centers())?;
                let solver = GramSolver::new(&gram)?;
                let op = LevelOperator::new(image, &grid, &kernel);
                Ok(BundleLevel { grid, kernel, gram, solver, op })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { image: image.clone(), levels })
    }

    pub fn image_grid(&self) -> &Grid<T> {
        &self.image
    }

    pub fn levels(&self) -> &[BundleLevel<T>] {
        &self.levels
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    /// Total parameter count `3 Σ N_m`.
    pub fn n_params(&self) -> usize {
        self.levels.iter().map(|l| 3 * l.n_centers()).sum()
    }

    /// Offset of level `m` in the flattened parameter vector.
    pub fn param_offset(&self, level: usize) -> usize {
        self.levels[..level].iter().map(|l| 3 * l.n_centers()).sum()
    }

    pub fn all_levels(&self) -> Vec<usize> {
        (0..self.levels.len()).collect()
    }
}

/// Coefficient triples `w^m` per level (mm).
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBundleParams<T: Real> {
    pub coeffs: Vec<Vec<Vector3<T>>>,
}

impl<T: Real> KernelBundleParams<T> {
    pub fn zeros(bundle: &KernelBundle<T>) -> Self {
        Self {
            coeffs: bundle.levels.iter().map(|l| vec![Vector3::zeros(); l.n_centers()]).collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.coeffs.iter().map(|c| 3 * c.len()).sum()
    }

    /// Flattened as (level, center, axis), axis fastest.
    pub fn to_flat(&self) -> Vec<T> {
        self.coeffs.iter().flatten().flat_map(|v| [v.x, v.y, v.z]).collect()
    }

    pub fn from_flat(bundle: &KernelBundle<T>, flat: &[T]) -> Result<Self> {
        if flat.len() != bundle.n_params() {
            return Err(Error::InvalidInput(format!(
                "expected {} parameters, got {}",
                bundle.n_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        let coeffs = bundle
            .levels
            .iter()
            .map(|l| {
                let c = (0..l.n_centers())
                    .map(|i| Vector3::new(flat[off + 3 * i], flat[off + 3 * i + 1], flat[off + 3 * i + 2]))
                    .collect();
                off += 3 * l.n_centers();
                c
            })
            .collect();
        Ok(Self { coeffs })
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().flatten().all(|v| v.iter().all(|c| c.is_finite()))
    }

    pub fn check(&self, bundle: &KernelBundle<T>) -> Result<()> {
        let shape_ok = self.coeffs.len() == bundle.n_levels()
            && self.coeffs.iter().zip(bundle.levels()).all(|(c, l)| c.len() == l.n_centers());
        if !shape_ok {
            return Err(Error::InvalidInput("parameters do not match the kernel bundle".into()));
        }
        if !self.is_finite() {
            return Err(Error::InvalidInput("non-finite deformation coefficient".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, k: T) -> Self {
        Self {
            coeffs: self.coeffs.iter().map(|c| c.iter().map(|v| v * k).collect()).collect(),
        }
    }
}

/// `v(x) = Σ_{m ∈ levels} Σ_i K_m(c_i^m, x) w_i^m` at every voxel.
pub fn velocity<T: Real>(
    bundle: &KernelBundle<T>,
    params: &KernelBundleParams<T>,
    levels: &[usize],
) -> Result<VelocityField<T>> {
    params.check(bundle)?;
    let mut out = VectorField::zeros(bundle.image.clone());
    for &m in levels {
        let level = bundle.levels.get(m).ok_or_else(|| {
            Error::InvalidInput(format!("level {m} outside bundle of {} levels", bundle.n_levels()))
        })?;
        level.splat(&params.coeffs[m], out.data_mut());
    }
    Ok(out)
}

/// Forward Euler integration of the stationary flow, returning `φ(x) − x`.
pub fn exp_euler<T: Real>(v: &VelocityField<T>, steps: usize) -> Result<DisplacementField<T>> {
    if steps == 0 {
        return Err(Error::InvalidInput("Euler integration needs at least one step".into()));
    }
    let grid = v.grid();
    let dt = T::one() / T::from_count(steps);
    let data = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let x = grid.position_of(idx);
            let mut y = x;
            for _ in 0..steps {
                y += v.sample(&y) * dt;
            }
            y - x
        })
        .collect();
    VectorField::new(grid.clone(), data)
}

/// Reverse pass through [`exp_euler`]. Given `g(x) = ∂L/∂φ(x)` at every
/// voxel, returns `∂L/∂v` at every velocity node. Trajectories are
/// re-integrated per voxel; partial sums are accumulated over a fixed number
/// of voxel blocks so the result does not depend on the thread count.
pub fn exp_euler_adjoint<T: Real>(v: &VelocityField<T>, steps: usize, g: &[Vector3<T>]) -> Result<VelocityField<T>> {
    if steps == 0 {
        return Err(Error::InvalidInput("Euler integration needs at least one step".into()));
    }
    let grid = v.grid();
    if g.len() != grid.len() {
        return Err(Error::InvalidInput(format!("adjoint of length {} for {} voxels", g.len(), grid.len())));
    }
    const BLOCKS: usize = 8;
    let dt = T::one() / T::from_count(steps);
    let block = grid.len().div_ceil(BLOCKS);
    let partial: Vec<Vec<Vector3<T>>> = (0..BLOCKS)
        .into_par_iter()
        .map(|b| {
            let mut out = vec![Vector3::zeros(); grid.len()];
            let mut path = vec![Vector3::zeros(); steps];
            for idx in b * block..((b + 1) * block).min(grid.len()) {
                if g[idx] == Vector3::zeros() {
                    continue;
                }
                let mut y = grid.position_of(idx);
                for p in path.iter_mut() {
                    *p = y;
                    y += v.sample(&y) * dt;
                }
                // y_{k+1} = y_k + dt v(y_k); y_0 does not depend on v
                let mut adj = g[idx];
                for (k, p) in path.iter().enumerate().rev() {
                    VectorField::splat_at(grid, p, &(adj * dt), &mut out);
                    if k > 0 {
                        adj += v.sample_jacobian(p).tr_mul(&adj) * dt;
                    }
                }
            }
            out
        })
        .collect();
    let mut total = vec![Vector3::zeros(); grid.len()];
    for part in partial {
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    VectorField::new(grid.clone(), total)
}

/// `Exp(v(w))` restricted to `levels`.
pub fn exp_forward<T: Real>(
    bundle: &KernelBundle<T>,
    params: &KernelBundleParams<T>,
    levels: &[usize],
    steps: usize,
) -> Result<DisplacementField<T>> {
    exp_euler(&velocity(bundle, params, levels)?, steps)
}

/// `Exp(−v(w))`, the back-warp used for template updates.
pub fn exp_inverse<T: Real>(
    bundle: &KernelBundle<T>,
    params: &KernelBundleParams<T>,
    levels: &[usize],
    steps: usize,
) -> Result<DisplacementField<T>> {
    exp_euler(&velocity(bundle, params, levels)?.scale(-T::one()), steps)
}

/// Displacement of `x ↦ first(second(x))`, i.e. the field whose warp equals
/// warping by `first` and then by `second`: `d(x) = s(x) + f(x + s(x))`.
pub fn compose<T: Real>(
    first: &DisplacementField<T>,
    second: &DisplacementField<T>,
) -> Result<DisplacementField<T>> {
    first.grid().ensure_matches(second.grid(), "compose")?;
    let grid = first.grid();
    let data = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let s = second.data()[idx];
            s + first.sample(&(grid.position_of(idx) + s))
        })
        .collect();
    VectorField::new(grid.clone(), data)
}

/// `∇θ` evaluated at `φ(x)` for every voxel `x`: the spatial factor of the
/// design matrix `Z`.
pub fn design_gradient<T: Real>(
    template: &Volume3<T>,
    disp: &DisplacementField<T>,
) -> Result<VectorField<T>> {
    template.grid().ensure_matches(disp.grid(), "design gradient")?;
    let central = gradient_central(template)?;
    let grid = template.grid();
    let data = (0..grid.len())
        .into_par_iter()
        .map(|idx| template.sample_gradient(&central, &(grid.position_of(idx) + disp.data()[idx])))
        .collect();
    VectorField::new(grid.clone(), data)
}

/// Warped template `θ(Exp(v(w)))` and the design gradient at the same point.
pub fn linearize<T: Real>(
    template: &Volume3<T>,
    bundle: &KernelBundle<T>,
    params: &KernelBundleParams<T>,
    steps: usize,
) -> Result<(Volume3<T>, VectorField<T>, VelocityField<T>)> {
    let v = velocity(bundle, params, &bundle.all_levels())?;
    let disp = exp_euler(&v, steps)?;
    Ok((warp(template, &disp)?, design_gradient(template, &disp)?, v))
}

/// Dense `Z` restricted to `rows` (flat voxel indices) and `levels`:
/// column `(m, i, a)` is `[∇θ(φ(x))]_a · K_m(c_i^m, x)`. Columns follow the
/// global parameter layout; inactive levels give zero columns.
pub fn z_matrix_rows<T: Real>(
    grad: &VectorField<T>,
    bundle: &KernelBundle<T>,
    levels: &[usize],
    rows: &[usize],
) -> DMatrix<T> {
    let grid = bundle.image_grid();
    let mut z = DMatrix::zeros(rows.len(), bundle.n_params());
    for &m in levels {
        let level = &bundle.levels[m];
        let off = bundle.param_offset(m);
        for (r, &idx) in rows.iter().enumerate() {
            let x = grid.position_of(idx);
            let g = grad.data()[idx];
            for i in 0..level.n_centers() {
                let k = level.kernel.eval(&level.grid.center(i), &x);
                if k != T::zero() {
                    for a in 0..3 {
                        z[(r, off + 3 * i + a)] = g[a] * k;
                    }
                }
            }
        }
    }
    z
}

/// Full-image `Z` at linearization point `w0` (dense; intended for small
/// problems and verification).
pub fn z_matrix<T: Real>(
    template: &Volume3<T>,
    bundle: &KernelBundle<T>,
    w0: &KernelBundleParams<T>,
    levels: &[usize],
    steps: usize,
) -> Result<DMatrix<T>> {
    template.grid().ensure_matches(bundle.image_grid(), "z_matrix")?;
    let disp = exp_forward(bundle, w0, &bundle.all_levels(), steps)?;
    let grad = design_gradient(template, &disp)?;
    let rows: Vec<usize> = (0..template.grid().len()).collect();
    Ok(z_matrix_rows(&grad, bundle, levels, &rows))
}

/// `Zᵀ u` without forming `Z`: per level, the gather of `g(x) u(x)`.
pub fn z_transpose_apply<T: Real>(
    grad: &VectorField<T>,
    u: &[T],
    bundle: &KernelBundle<T>,
    levels: &[usize],
) -> Vec<Vec<Vector3<T>>> {
    let weighted: Vec<Vector3<T>> = grad.data().iter().zip(u).map(|(g, &ui)| g * ui).collect();
    (0..bundle.n_levels())
        .map(|m| {
            if levels.contains(&m) {
                bundle.levels[m].gather(&weighted)
            } else {
                vec![Vector3::zeros(); bundle.levels[m].n_centers()]
            }
        })
        .collect()
}

/// Splat/gather operator between one control lattice and the voxel grid.
/// When every center sits on a voxel, kernel weights come from a
/// precomputed stencil of voxel offsets.
enum LevelOperator<T: Real> {
    Stencil {
        dims: [usize; 3],
        /// lattice origin and step, in voxels
        first: [i64; 3],
        step: [i64; 3],
        radius: [i64; 3],
        /// rows of the stencil indexed by (dk, dj): (di_start, weights)
        rows: Vec<(i64, i64, i64, Vec<T>)>,
        /// `rows[by_dk[dk + radius_z]..by_dk[dk + radius_z + 1]]` share `dk`
        by_dk: Vec<usize>,
    },
    Direct {
        image: Grid<T>,
    },
}

fn integer_ratio(x: f64) -> Option<i64> {
    let r = x.round();
    ((x - r).abs() <= 1e-9 * (1.0 + x.abs())).then_some(r as i64)
}

impl<T: Real> LevelOperator<T> {
    fn new(image: &Grid<T>, lattice: &ControlGrid<T>, kernel: &WendlandKernel<T>) -> Self {
        let mut first = [0i64; 3];
        let mut step = [0i64; 3];
        let mut aligned = true;
        for a in 0..3 {
            let h = image.spacing[a].as_f64();
            match (
                integer_ratio((lattice.first[a] - image.origin[a]).as_f64() / h),
                integer_ratio(lattice.spacing.as_f64() / h),
            ) {
                (Some(f), Some(s)) if s > 0 => {
                    first[a] = f;
                    step[a] = s;
                }
                _ => aligned = false,
            }
        }
        if !aligned {
            return Self::Direct { image: image.clone() };
        }
        let support = kernel.support();
        let radius = [0, 1, 2].map(|a| (support / image.spacing[a]).ceil().to_i64().unwrap_or(0));
        let mut rows = Vec::new();
        let mut by_dk = vec![0];
        for dk in -radius[2]..=radius[2] {
            for dj in -radius[1]..=radius[1] {
                let mut start = None;
                let mut weights = Vec::new();
                for di in -radius[0]..=radius[0] {
                    let off = Vector3::new(
                        T::lit(di as f64) * image.spacing[0],
                        T::lit(dj as f64) * image.spacing[1],
                        T::lit(dk as f64) * image.spacing[2],
                    );
                    let w = kernel.eval_dist2(off.norm_squared());
                    if w != T::zero() {
                        if start.is_none() {
                            start = Some(di);
                        }
                        weights.push(w);
                    } else if start.is_some() {
                        break;
                    }
                }
                if let Some(s) = start {
                    rows.push((dk, dj, s, weights));
                }
            }
            by_dk.push(rows.len());
        }
        Self::Stencil { dims: image.dims, first, step, radius, rows, by_dk }
    }

    fn splat(
        &self,
        lattice: &ControlGrid<T>,
        kernel: &WendlandKernel<T>,
        coeffs: &[Vector3<T>],
        out: &mut [Vector3<T>],
    ) {
        match self {
            Self::Stencil { dims, first, step, radius, rows, by_dk } => {
                let [nx, ny, _] = *dims;
                let plane = nx * ny;
                out.par_chunks_mut(plane).enumerate().for_each(|(k, slab)| {
                    let k = k as i64;
                    for (ci, w) in coeffs.iter().enumerate() {
                        if w.x == T::zero() && w.y == T::zero() && w.z == T::zero() {
                            continue;
                        }
                        let [li, lj, lk] = lattice.lattice_coords(ci);
                        let cz = first[2] + lk as i64 * step[2];
                        if (k - cz).abs() > radius[2] {
                            continue;
                        }
                        let cx = first[0] + li as i64 * step[0];
                        let cy = first[1] + lj as i64 * step[1];
                        let b = (k - cz + radius[2]) as usize;
                        for (_, dj, s, weights) in &rows[by_dk[b]..by_dk[b + 1]] {
                            let y = cy + dj;
                            if y < 0 || y >= ny as i64 {
                                continue;
                            }
                            let row = &mut slab[y as usize * nx..(y as usize + 1) * nx];
                            let x0 = cx + s;
                            let lo = (-x0).max(0) as usize;
                            let hi = weights.len().min((nx as i64 - x0).max(0) as usize);
                            for t in lo..hi {
                                row[(x0 + t as i64) as usize] += w * weights[t];
                            }
                        }
                    }
                });
            }
            Self::Direct { image } => {
                let s = kernel.support();
                let data: Vec<Vector3<T>> = (0..image.len())
                    .into_par_iter()
                    .map(|idx| {
                        let x = image.position_of(idx);
                        let mut acc = Vector3::zeros();
                        for (ci, w) in coeffs.iter().enumerate() {
                            let c = lattice.center(ci);
                            let d = c - x;
                            if d.x.abs() >= s || d.y.abs() >= s || d.z.abs() >= s {
                                continue;
                            }
                            let k = kernel.eval_dist2(d.norm_squared());
                            if k != T::zero() {
                                acc += w * k;
                            }
                        }
                        acc
                    })
                    .collect();
                for (o, d) in out.iter_mut().zip(data) {
                    *o += d;
                }
            }
        }
    }

    fn gather(
        &self,
        lattice: &ControlGrid<T>,
        kernel: &WendlandKernel<T>,
        field: &[Vector3<T>],
    ) -> Vec<Vector3<T>> {
        match self {
            Self::Stencil { dims, first, step, rows, .. } => {
                let [nx, ny, nz] = *dims;
                (0..lattice.len())
                    .into_par_iter()
                    .map(|ci| {
                        let [li, lj, lk] = lattice.lattice_coords(ci);
                        let cx = first[0] + li as i64 * step[0];
                        let cy = first[1] + lj as i64 * step[1];
                        let cz = first[2] + lk as i64 * step[2];
                        let mut acc = Vector3::zeros();
                        for (dk, dj, s, weights) in rows.iter() {
                            let z = cz + dk;
                            let y = cy + dj;
                            if z < 0 || z >= nz as i64 || y < 0 || y >= ny as i64 {
                                continue;
                            }
                            let base = (z as usize * ny + y as usize) * nx;
                            let x0 = cx + s;
                            let lo = (-x0).max(0) as usize;
                            let hi = weights.len().min((nx as i64 - x0).max(0) as usize);
                            for t in lo..hi {
                                acc += field[base + (x0 + t as i64) as usize] * weights[t];
                            }
                        }
                        acc
                    })
                    .collect()
            }
            Self::Direct { image } => (0..lattice.len())
                .into_par_iter()
                .map(|ci| {
                    let c = lattice.center(ci);
                    let mut acc = Vector3::zeros();
                    for (idx, f) in field.iter().enumerate() {
                        let k = kernel.eval(&c, &image.position_of(idx));
                        if k != T::zero() {
                            acc += f * k;
                        }
                    }
                    acc
                })
                .collect(),
        }
    }
}

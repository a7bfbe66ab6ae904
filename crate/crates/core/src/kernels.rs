//! Compactly supported Wendland kernels, control lattices, and the Gram and
//! basis matrices built from them.
//!
//! The same kernel family serves two roles: the deformation prior
//! `C = λ² K(c_i, c_j)` over control points, and the bias covariance
//! `S = β K(x_p, x_q)` over voxels.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Vector3};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Wendland C² function `φ(t) = (1 − t)₊⁴ (4t + 1)` with `t = ‖a − b‖ / s`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WendlandKernel<T: Real> {
    support: T,
    inv_support: T,
}

impl<T: Real> WendlandKernel<T> {
    pub fn new(support: T) -> Result<Self> {
        if !(support > T::zero()) || !support.is_finite() {
            return Err(Error::InvalidInput(format!(
                "kernel support must be positive, got {support}"
            )));
        }
        Ok(Self { support, inv_support: T::one() / support })
    }

    #[inline]
    pub fn support(&self) -> T {
        self.support
    }

    /// Radial profile at normalized distance `t`.
    #[inline]
    pub fn profile(t: T) -> T {
        if t >= T::one() {
            return T::zero();
        }
        let r = T::one() - t;
        let r2 = r * r;
        r2 * r2 * (T::lit(4.0) * t + T::one())
    }

    #[inline]
    pub fn eval_dist2(&self, d2: T) -> T {
        if d2 >= self.support * self.support {
            return T::zero();
        }
        Self::profile(d2.sqrt() * self.inv_support)
    }

    #[inline]
    pub fn eval(&self, a: &Vector3<T>, b: &Vector3<T>) -> T {
        self.eval_dist2((a - b).norm_squared())
    }
}

/// Regular lattice of kernel centers with one layer of padding outside the
/// image domain on every face.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlGrid<T: Real> {
    pub first: Vector3<T>,
    pub spacing: T,
    pub counts: [usize; 3],
}

impl<T: Real> ControlGrid<T> {
    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn lattice_coords(&self, idx: usize) -> [usize; 3] {
        let [nx, ny, _] = self.counts;
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    #[inline]
    pub fn center(&self, idx: usize) -> Vector3<T> {
        let [i, j, k] = self.lattice_coords(idx);
        self.first
            + Vector3::new(T::from_count(i), T::from_count(j), T::from_count(k)) * self.spacing
    }

    pub fn centers(&self) -> Vec<Vector3<T>> {
        (0..self.len()).map(|i| self.center(i)).collect()
    }
}

/// Lattice covering `[lo, hi]` per axis: `max(⌈(hi−lo)/spacing⌉, 1) + 1`
/// points starting at `lo`, plus one extra point beyond each face.
pub fn make_control_grid<T: Real>(lo: Vector3<T>, hi: Vector3<T>, spacing: T) -> Result<ControlGrid<T>> {
    if !(spacing > T::zero()) || !spacing.is_finite() {
        return Err(Error::InvalidInput(format!("control spacing must be positive, got {spacing}")));
    }
    let mut counts = [0usize; 3];
    for a in 0..3 {
        let span = (hi[a] - lo[a]).max(T::zero());
        let steps = (span / spacing - T::lit(1e-9)).ceil().to_usize().unwrap_or(0).max(1);
        counts[a] = steps + 3;
    }
    Ok(ControlGrid { first: lo - Vector3::repeat(spacing), spacing, counts })
}

/// Symmetric kernel Gram matrix stored in CSR form (only pairs within the
/// kernel support).
#[derive(Clone, Debug)]
pub struct GramMatrix<T: Real> {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<T>,
}

impl<T: Real> GramMatrix<T> {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.row(i).find(|&(c, _)| c == j).map(|(_, v)| v).unwrap_or_else(T::zero)
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// Dense submatrix on an index subset.
    pub fn submatrix(&self, idx: &[usize]) -> DMatrix<T> {
        let pos: HashMap<usize, usize> = idx.iter().enumerate().map(|(p, &i)| (i, p)).collect();
        let mut m = DMatrix::zeros(idx.len(), idx.len());
        for (p, &i) in idx.iter().enumerate() {
            for (j, v) in self.row(i) {
                if let Some(&q) = pos.get(&j) {
                    m[(p, q)] = v;
                }
            }
        }
        m
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        (0..self.n)
            .map(|i| self.row(i).fold(T::zero(), |acc, (j, v)| acc + v * x[j]))
            .collect()
    }

    /// `y = G x` for vectors of 3-vectors (one coefficient triple per center).
    pub fn mul_vec3(&self, x: &[Vector3<T>]) -> Vec<Vector3<T>> {
        (0..self.n)
            .map(|i| self.row(i).fold(Vector3::zeros(), |acc, (j, v)| acc + x[j] * v))
            .collect()
    }
}

/// Buckets points into cubic cells of edge `cell` for radius queries.
struct CellIndex {
    cell: f64,
    buckets: HashMap<[i64; 3], Vec<usize>>,
}

impl CellIndex {
    fn new<T: Real>(points: &[Vector3<T>], cell: f64) -> Self {
        let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { cell, buckets }
    }

    fn key<T: Real>(p: &Vector3<T>, cell: f64) -> [i64; 3] {
        [0, 1, 2].map(|a| (p[a].as_f64() / cell).floor() as i64)
    }

    fn neighbours<T: Real>(&self, p: &Vector3<T>) -> impl Iterator<Item = usize> + '_ {
        let k = Self::key(p, self.cell);
        (-1..=1).flat_map(move |dz| {
            (-1..=1).flat_map(move |dy| {
                (-1..=1).flat_map(move |dx| {
                    self.buckets
                        .get(&[k[0] + dx, k[1] + dy, k[2] + dz])
                        .into_iter()
                        .flatten()
                        .copied()
                })
            })
        })
    }
}

/// Gram matrix `G_ij = K(c_i, c_j)`, sparse by compact support.
pub fn gram<T: Real>(kernel: &WendlandKernel<T>, centers: &[Vector3<T>]) -> Result<GramMatrix<T>> {
    if centers.is_empty() {
        return Err(Error::InvalidInput("gram matrix needs at least one center".into()));
    }
    let index = CellIndex::new(centers, kernel.support().as_f64());
    let mut row_ptr = Vec::with_capacity(centers.len() + 1);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    row_ptr.push(0);
    for c in centers {
        let mut row: Vec<(usize, T)> = index
            .neighbours(c)
            .filter_map(|j| {
                let v = kernel.eval(c, &centers[j]);
                (v != T::zero()).then_some((j, v))
            })
            .collect();
        row.sort_unstable_by_key(|&(j, _)| j);
        for (j, v) in row {
            cols.push(j);
            vals.push(v);
        }
        row_ptr.push(cols.len());
    }
    Ok(GramMatrix { n: centers.len(), row_ptr, cols, vals })
}

/// Dense evaluation matrix `B_pi = K(x_p, c_i)`.
pub fn basis_matrix<T: Real>(
    kernel: &WendlandKernel<T>,
    centers: &[Vector3<T>],
    points: &[Vector3<T>],
) -> DMatrix<T> {
    DMatrix::from_fn(points.len(), centers.len(), |p, i| kernel.eval(&points[p], &centers[i]))
}

/// Indices of centers whose support reaches at least one of `points`.
pub fn centers_touching<T: Real>(
    kernel: &WendlandKernel<T>,
    centers: &[Vector3<T>],
    points: &[Vector3<T>],
) -> Vec<usize> {
    if points.is_empty() {
        return Vec::new();
    }
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let s = kernel.support();
    centers
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            // distance from the center to the bounding box
            let mut d2 = T::zero();
            for a in 0..3 {
                let d = if c[a] < lo[a] {
                    lo[a] - c[a]
                } else if c[a] > hi[a] {
                    c[a] - hi[a]
                } else {
                    T::zero()
                };
                d2 += d * d;
            }
            d2 < s * s && points.iter().any(|p| kernel.eval(p, c) != T::zero())
        })
        .map(|(i, _)| i)
        .collect()
}

/// Largest system solved through a dense Cholesky factor; bigger Gram
/// matrices use preconditioned conjugate gradients.
const DENSE_GRAM_LIMIT: usize = 4096;

/// Solver for `G x = b` on a Gram matrix.
pub enum GramSolver<T: Real> {
    Dense(Cholesky<T, Dyn>),
    Iterative { gram: GramMatrix<T>, diag: Vec<T> },
}

impl<T: Real> GramSolver<T> {
    pub fn new(gram: &GramMatrix<T>) -> Result<Self> {
        if gram.dim() <= DENSE_GRAM_LIMIT {
            let chol = Cholesky::new(gram.to_dense()).ok_or_else(|| Error::Factorization {
                context: format!("Gram matrix of dimension {}", gram.dim()),
            })?;
            Ok(Self::Dense(chol))
        } else {
            let diag = (0..gram.dim()).map(|i| gram.get(i, i)).collect();
            Ok(Self::Iterative { gram: gram.clone(), diag })
        }
    }

    /// Forces the iterative path; used to cross-check the two solvers.
    pub fn iterative(gram: &GramMatrix<T>) -> Self {
        let diag = (0..gram.dim()).map(|i| gram.get(i, i)).collect();
        Self::Iterative { gram: gram.clone(), diag }
    }

    pub fn solve(&self, rhs: &[T]) -> Result<Vec<T>> {
        match self {
            Self::Dense(chol) => Ok(chol.solve(&DVector::from_column_slice(rhs)).as_slice().to_vec()),
            Self::Iterative { gram, diag } => conjugate_gradient(gram, diag, rhs),
        }
    }

    /// Solves for each spatial component of a coefficient-triple vector.
    pub fn solve_vec3(&self, rhs: &[Vector3<T>]) -> Result<Vec<Vector3<T>>> {
        let mut out = vec![Vector3::zeros(); rhs.len()];
        for a in 0..3 {
            let comp: Vec<T> = rhs.iter().map(|v| v[a]).collect();
            let x = self.solve(&comp)?;
            for (o, xi) in out.iter_mut().zip(x) {
                o[a] = xi;
            }
        }
        Ok(out)
    }
}

fn conjugate_gradient<T: Real>(gram: &GramMatrix<T>, diag: &[T], b: &[T]) -> Result<Vec<T>> {
    let n = b.len();
    let dot = |x: &[T], y: &[T]| x.iter().zip(y).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
    let bnorm = dot(b, b).sqrt();
    let mut x = vec![T::zero(); n];
    if bnorm == T::zero() {
        return Ok(x);
    }
    let tol = T::lit(1e-12) * bnorm;
    let mut r = b.to_vec();
    let mut z: Vec<T> = r.iter().zip(diag).map(|(&ri, &d)| ri / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for _ in 0..(20 * n).max(100) {
        let ap = gram.mul_vec(&p);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if dot(&r, &r).sqrt() <= tol {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::Numerical(format!(
        "conjugate gradients did not converge on a Gram system of dimension {n}"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k(s: f64) -> WendlandKernel<f64> {
        WendlandKernel::new(s).unwrap()
    }

    #[test]
    fn wendland_values() {
        let kern = k(2.0);
        let a = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(kern.eval(&a, &a), 1.0);
        assert_eq!(kern.eval(&a, &(a + Vector3::new(2.0, 0.0, 0.0))), 0.0);
        let half = kern.eval(&a, &(a + Vector3::new(0.0, 1.0, 0.0)));
        assert!((half - 0.1875).abs() < 1e-15);
        assert!(WendlandKernel::new(0.0f64).is_err());
    }

    #[test]
    fn single_and_separated_centers() {
        let kern = k(1.0);
        let g = gram(&kern, &[Vector3::zeros()]).unwrap();
        assert_eq!(g.to_dense(), DMatrix::from_element(1, 1, 1.0));
        let g = gram(&kern, &[Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)]).unwrap();
        assert_eq!(g.to_dense(), DMatrix::identity(2, 2));
        assert_eq!(g.nnz(), 2);
        assert!(gram(&kern, &[]).is_err());
    }

    #[test]
    fn lattice_gram_matches_dense_evaluation() {
        let s = 4.0;
        let grid = ControlGrid { first: Vector3::zeros(), spacing: s / 2.0, counts: [3, 3, 3] };
        let centers = grid.centers();
        let kern = k(s);
        let g = gram(&kern, &centers).unwrap().to_dense();
        for i in 0..centers.len() {
            for j in 0..centers.len() {
                let d = (centers[i] - centers[j]).norm() / s;
                let expect = if d >= 1.0 { 0.0 } else { (1.0 - d).powi(4) * (4.0 * d + 1.0) };
                assert!((g[(i, j)] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn basis_matrix_on_centers_is_gram() {
        let grid = ControlGrid { first: Vector3::new(-1.0, 0.0, 2.0), spacing: 1.5, counts: [3, 2, 2] };
        let centers = grid.centers();
        let kern = k(3.0);
        let b = basis_matrix(&kern, &centers, &centers);
        assert_eq!(b, gram(&kern, &centers).unwrap().to_dense());
        let far = basis_matrix(&kern, &centers, &[Vector3::new(100.0, 0.0, 0.0)]);
        assert!(far.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn control_grid_counts() {
        let g = make_control_grid(Vector3::zeros(), Vector3::repeat(20.0), 20.0).unwrap();
        assert_eq!(g.counts, [4, 4, 4]);
        assert_eq!(g.len(), 64);
        let xs: Vec<f64> = (0..4).map(|i| g.center(i).x).collect();
        assert_eq!(xs, vec![-20.0, 0.0, 20.0, 40.0]);
        let g = make_control_grid(Vector3::zeros(), Vector3::repeat(60.0), 20.0).unwrap();
        assert_eq!(g.counts, [6, 6, 6]);
        let g = make_control_grid(Vector3::zeros(), Vector3::repeat(10.0), 20.0).unwrap();
        assert!(g.counts.iter().all(|&c| c >= 4));
        assert!(make_control_grid(Vector3::zeros(), Vector3::repeat(1.0), 0.0f64).is_err());
    }

    #[test]
    fn dense_and_iterative_solvers_agree() {
        let grid = make_control_grid(Vector3::zeros(), Vector3::repeat(30.0), 10.0).unwrap();
        let g = gram(&k(20.0), &grid.centers()).unwrap();
        let rhs: Vec<f64> = (0..g.dim()).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let a = GramSolver::new(&g).unwrap().solve(&rhs).unwrap();
        let b = GramSolver::iterative(&g).solve(&rhs).unwrap();
        let back = g.mul_vec(&b);
        for i in 0..rhs.len() {
            assert!((a[i] - b[i]).abs() < 1e-6 * (1.0 + a[i].abs()));
            assert!((back[i] - rhs[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn touching_centers_cover_support() {
        let grid = make_control_grid(Vector3::zeros(), Vector3::repeat(40.0), 10.0).unwrap();
        let centers = grid.centers();
        let kern = k(15.0);
        let pts = vec![Vector3::new(5.0, 5.0, 5.0), Vector3::new(6.0, 5.0, 5.0)];
        let touching = centers_touching(&kern, &centers, &pts);
        for (i, c) in centers.iter().enumerate() {
            let hit = pts.iter().any(|p| kern.eval(p, c) != 0.0);
            assert_eq!(hit, touching.contains(&i));
        }
    }
}

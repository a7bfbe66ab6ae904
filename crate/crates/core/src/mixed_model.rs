//! Linearized mixed-effects model: patchwise marginal covariance,
//! likelihood, variance-component estimation and best linear predictors.
//!
//! Covariances are unit-free: for a patch `V = Σ_m λ_m² Z_m Gram_m Z_mᵀ +
//! β K + 𝕀`, and the noise variance `σ²` scales the whole matrix.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::deformation::KernelBundle;
use crate::error::{Error, Result};
use crate::kernels::{basis_matrix, centers_touching, WendlandKernel};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::scalar::Real;
use crate::volume::{make_partition, Grid, PatchPartition, VectorField, Volume3};

/// Smallest nonzero amplitude explored by the variance search; anything at
/// this bound is reported as exactly zero.
pub const AMPLITUDE_FLOOR: f64 = 1e-6;
const AMPLITUDE_CEIL: f64 = 1e8;
/// Returned by [`profile_sigma2`] when every residual vanishes.
pub const SIGMA2_FLOOR: f64 = 1e-12;

/// Variance components `(σ², λ_1..λ_R, β)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceParams<T: Real> {
    pub sigma2: T,
    pub lambda: Vec<T>,
    pub beta: T,
}

impl<T: Real> VarianceParams<T> {
    pub fn new(sigma2: T, lambda: Vec<T>, beta: T) -> Result<Self> {
        let vp = Self { sigma2, lambda, beta };
        vp.validate()?;
        Ok(vp)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.sigma2.is_finite()
            && self.beta.is_finite()
            && self.lambda.iter().all(|l| l.is_finite());
        if !finite || self.sigma2 <= T::zero() {
            return Err(Error::InvalidInput(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        if self.beta < T::zero() || self.lambda.iter().any(|&l| l < T::zero()) {
            return Err(Error::InvalidInput("lambda and beta must be non-negative".into()));
        }
        Ok(())
    }
}

/// Level part of a patch covariance.
#[derive(Clone, Debug)]
pub enum LevelCovariance<T: Real> {
    /// No deformation levels.
    None,
    /// `H_m = Z_m (Gram_m ⊗ I₃) Z_mᵀ` precomputed per level.
    Dense(Vec<DMatrix<T>>),
    /// `H_m = (G Gᵀ) ∘ Q_m` with `G` the `n × 3` design gradient and
    /// `Q_m = B_m Gram_m B_mᵀ` the velocity covariance over the patch.
    Structured { grad: Vec<Vector3<T>>, q: Vec<Arc<DMatrix<T>>> },
}

impl<T: Real> LevelCovariance<T> {
    pub fn n_levels(&self) -> usize {
        match self {
            Self::None => 0,
            Self::Dense(h) => h.len(),
            Self::Structured { q, .. } => q.len(),
        }
    }
}

/// One (image, patch) block of the linearized model.
#[derive(Clone, Debug)]
pub struct PatchSystem<T: Real> {
    /// `I − θ^{w⁰} + Z w⁰` restricted to the patch.
    pub residual: DVector<T>,
    pub levels: LevelCovariance<T>,
    /// Bias kernel Gram over the patch voxels.
    pub bias_gram: Arc<DMatrix<T>>,
}

impl<T: Real> PatchSystem<T> {
    pub fn bias_only(residual: DVector<T>, bias_gram: Arc<DMatrix<T>>) -> Result<Self> {
        let sys = Self { residual, levels: LevelCovariance::None, bias_gram };
        sys.check()?;
        Ok(sys)
    }

    /// Builds the system from an explicit patch design matrix.
    pub fn from_design(
        residual: DVector<T>,
        z: &DMatrix<T>,
        prior: &PriorBlocks<T>,
        bias_gram: Arc<DMatrix<T>>,
    ) -> Result<Self> {
        if z.ncols() != prior.n_params() {
            return Err(Error::InvalidInput(format!(
                "design has {} columns, prior {} parameters",
                z.ncols(),
                prior.n_params()
            )));
        }
        let h = (0..prior.n_levels())
            .map(|m| {
                let (off, len) = prior.columns(m);
                let zm = z.columns(off, len);
                &zm * prior.level_cov(m) * zm.transpose()
            })
            .collect();
        let sys = Self { residual, levels: LevelCovariance::Dense(h), bias_gram };
        sys.check()?;
        Ok(sys)
    }

    pub fn len(&self) -> usize {
        self.residual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residual.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        let ok = self.bias_gram.shape() == (n, n)
            && match &self.levels {
                LevelCovariance::None => true,
                LevelCovariance::Dense(h) => h.iter().all(|m| m.shape() == (n, n)),
                LevelCovariance::Structured { grad, q } => {
                    grad.len() == n && q.iter().all(|m| m.shape() == (n, n))
                }
            };
        if !ok {
            return Err(Error::InvalidInput(format!("inconsistent patch system of size {n}")));
        }
        Ok(())
    }
}

/// Coefficient prior `C = blockdiag(λ_m² Gram_m ⊗ I₃)` with columns laid out
/// as (level, center, axis).
#[derive(Clone, Debug)]
pub struct PriorBlocks<T: Real> {
    grams: Vec<DMatrix<T>>,
}

impl<T: Real> PriorBlocks<T> {
    pub fn new(grams: Vec<DMatrix<T>>) -> Self {
        Self { grams }
    }

    pub fn from_bundle(bundle: &KernelBundle<T>) -> Self {
        Self { grams: bundle.levels().iter().map(|l| l.gram.to_dense()).collect() }
    }

    pub fn n_levels(&self) -> usize {
        self.grams.len()
    }

    pub fn n_params(&self) -> usize {
        self.grams.iter().map(|g| 3 * g.nrows()).sum()
    }

    /// Column offset and width of level `m`.
    pub fn columns(&self, m: usize) -> (usize, usize) {
        let off = self.grams[..m].iter().map(|g| 3 * g.nrows()).sum();
        (off, 3 * self.grams[m].nrows())
    }

    /// `Gram_m ⊗ I₃` in the interleaved layout.
    pub fn level_cov(&self, m: usize) -> DMatrix<T> {
        let g = &self.grams[m];
        let n = g.nrows();
        DMatrix::from_fn(3 * n, 3 * n, |r, c| if r % 3 == c % 3 { g[(r / 3, c / 3)] } else { T::zero() })
    }

    /// The full `C` for amplitudes `lambda`.
    pub fn covariance(&self, lambda: &[T]) -> DMatrix<T> {
        let n = self.n_params();
        let mut c = DMatrix::zeros(n, n);
        for m in 0..self.n_levels() {
            let (off, len) = self.columns(m);
            let l2 = lambda[m] * lambda[m];
            c.view_mut((off, off), (len, len)).copy_from(&(self.level_cov(m) * l2));
        }
        c
    }
}

/// Factors a symmetric positive definite matrix, retrying once with a
/// diagonal jitter of `1e-10 · trace / n`.
pub fn factor_spd<T: Real>(m: DMatrix<T>, context: impl Fn() -> String) -> Result<Cholesky<T, Dyn>> {
    let n = m.nrows();
    let backup = m.clone();
    if let Some(c) = Cholesky::new(m) {
        return Ok(c);
    }
    let jitter = T::lit(1e-10) * backup.trace() / T::from_count(n.max(1));
    log::warn!("adding jitter {} to {}", jitter, context());
    let mut m = backup;
    for i in 0..n {
        m[(i, i)] += jitter;
    }
    Cholesky::new(m).ok_or_else(|| Error::Factorization { context: context() })
}

fn log_det<T: Real>(chol: &Cholesky<T, Dyn>) -> T {
    let two = T::lit(2.0);
    chol.l_dirty().diagonal().iter().fold(T::zero(), |acc, &d| acc + two * d.ln())
}

/// Unit-free `V = Σ_m λ_m² H_m + β K + 𝕀` for one patch.
pub fn marginal_covariance<T: Real>(ps: &PatchSystem<T>, vp: &VarianceParams<T>) -> Result<DMatrix<T>> {
    assemble_covariance(ps, &vp.lambda, vp.beta)
}

fn assemble_covariance<T: Real>(ps: &PatchSystem<T>, lambda: &[T], beta: T) -> Result<DMatrix<T>> {
    let n = ps.len();
    if lambda.len() != ps.levels.n_levels() {
        return Err(Error::InvalidInput(format!(
            "{} amplitudes given for {} levels",
            lambda.len(),
            ps.levels.n_levels()
        )));
    }
    let mut v = &*ps.bias_gram * beta;
    match &ps.levels {
        LevelCovariance::None => {}
        LevelCovariance::Dense(h) => {
            for (hm, &l) in h.iter().zip(lambda) {
                if l != T::zero() {
                    v += hm * (l * l);
                }
            }
        }
        LevelCovariance::Structured { grad, q } => {
            let active: Vec<(&DMatrix<T>, T)> =
                q.iter().zip(lambda).filter(|(_, &l)| l != T::zero()).map(|(q, &l)| (&**q, l * l)).collect();
            if !active.is_empty() {
                for y in 0..n {
                    for x in y..n {
                        let mut s = T::zero();
                        for (qm, l2) in &active {
                            s += qm[(x, y)] * *l2;
                        }
                        let val = s * grad[x].dot(&grad[y]);
                        v[(x, y)] += val;
                        if x != y {
                            v[(y, x)] += val;
                        }
                    }
                }
            }
        }
    }
    for i in 0..n {
        v[(i, i)] += T::one();
    }
    Ok(v)
}

/// `(log det V, rᵀ V⁻¹ r)` for one patch.
fn patch_terms<T: Real>(ps: &PatchSystem<T>, lambda: &[T], beta: T, which: usize) -> Result<(T, T)> {
    let v = assemble_covariance(ps, lambda, beta)?;
    let chol = factor_spd(v, || format!("patch system {which}"))?;
    let z = chol
        .l_dirty()
        .solve_lower_triangular(&ps.residual)
        .ok_or_else(|| Error::Factorization { context: format!("patch system {which}") })?;
    Ok((log_det(&chol), z.norm_squared()))
}

/// Sums of `log det V` and `rᵀV⁻¹r` over all systems, in a fixed order.
fn total_terms<T: Real>(systems: &[PatchSystem<T>], lambda: &[T], beta: T) -> Result<(T, T, usize)> {
    let terms: Vec<(T, T)> = systems
        .par_iter()
        .enumerate()
        .map(|(i, s)| patch_terms(s, lambda, beta, i))
        .collect::<Result<_>>()?;
    let (ld, q) = terms.iter().fold((T::zero(), T::zero()), |(a, b), (x, y)| (a + *x, b + *y));
    Ok((ld, q, systems.iter().map(|s| s.len()).sum()))
}

/// Double negative log-likelihood
/// `nk log σ² + Σ [log det V + σ⁻² rᵀV⁻¹r]`.
pub fn neg_log_likelihood<T: Real>(systems: &[PatchSystem<T>], vp: &VarianceParams<T>) -> Result<T> {
    vp.validate()?;
    let (ld, q, n) = total_terms(systems, &vp.lambda, vp.beta)?;
    Ok(T::from_count(n) * vp.sigma2.ln() + ld + q / vp.sigma2)
}

/// Maximum-likelihood `σ²` for fixed `(λ, β)`.
pub fn profile_sigma2<T: Real>(systems: &[PatchSystem<T>], lambda: &[T], beta: T) -> Result<T> {
    let (_, q, n) = total_terms(systems, lambda, beta)?;
    Ok(profiled(q, n))
}

fn profiled<T: Real>(q: T, n: usize) -> T {
    let s = q / T::from_count(n.max(1));
    if s > T::lit(SIGMA2_FLOOR) {
        s
    } else {
        T::lit(SIGMA2_FLOOR)
    }
}

/// Settings of the variance-component search.
#[derive(Clone, Debug)]
pub struct VarianceOptions {
    pub simplex: NelderMeadOptions,
    /// An amplitude is set to exactly zero when doing so raises `L`
    /// (minus twice the log-likelihood) by at most this much. The default
    /// is the 5% critical value of the ½χ²₀ + ½χ²₁ boundary test.
    pub boundary_tol: f64,
}

impl Default for VarianceOptions {
    fn default() -> Self {
        Self { simplex: NelderMeadOptions::default(), boundary_tol: 2.71 }
    }
}

#[derive(Clone, Debug)]
pub struct VarianceEstimate<T: Real> {
    pub params: VarianceParams<T>,
    /// Likelihood at `params`.
    pub nll: T,
    pub evals: usize,
    /// Best profiled likelihood after each simplex iteration.
    pub history: Vec<f64>,
}

/// Spectral shortcut for systems without deformation levels: with
/// `K = U Λ Uᵀ`, `V = U(βΛ + 1)Uᵀ`, so each evaluation is linear in `n`.
struct SpectralSystems {
    /// per distinct bias Gram: eigenvalues
    eigen: Vec<Vec<f64>>,
    /// per system: (spectrum index, squared projected residual)
    projected: Vec<(usize, Vec<f64>)>,
}

impl SpectralSystems {
    fn new<T: Real>(systems: &[PatchSystem<T>]) -> Self {
        let mut ids: HashMap<*const DMatrix<T>, usize> = HashMap::new();
        let mut distinct: Vec<&DMatrix<T>> = Vec::new();
        let which: Vec<usize> = systems
            .iter()
            .map(|s| {
                *ids.entry(Arc::as_ptr(&s.bias_gram)).or_insert_with(|| {
                    distinct.push(&s.bias_gram);
                    distinct.len() - 1
                })
            })
            .collect();
        let decomp: Vec<SymmetricEigen<T, Dyn>> =
            distinct.par_iter().map(|k| SymmetricEigen::new((*k).clone())).collect();
        let eigen = decomp
            .iter()
            .map(|d| d.eigenvalues.iter().map(|e| e.as_f64().max(0.0)).collect())
            .collect();
        let projected = systems
            .par_iter()
            .zip(which)
            .map(|(s, id)| {
                let p = decomp[id].eigenvectors.tr_mul(&s.residual);
                (id, p.iter().map(|x| x.as_f64() * x.as_f64()).collect())
            })
            .collect();
        Self { eigen, projected }
    }

    fn terms(&self, beta: f64) -> (f64, f64, usize) {
        let per_gram: Vec<(f64, Vec<f64>)> = self
            .eigen
            .iter()
            .map(|ev| {
                let d: Vec<f64> = ev.iter().map(|e| beta * e + 1.0).collect();
                (d.iter().map(|x| x.ln()).sum(), d)
            })
            .collect();
        let mut ld = 0.0;
        let mut q = 0.0;
        let mut n = 0;
        for (id, p) in &self.projected {
            let (l, d) = &per_gram[*id];
            ld += l;
            q += p.iter().zip(d).map(|(a, b)| a / b).sum::<f64>();
            n += p.len();
        }
        (ld, q, n)
    }
}

fn amplitude(p: f64) -> f64 {
    p.clamp(AMPLITUDE_FLOOR.ln(), AMPLITUDE_CEIL.ln()).exp()
}

fn snap(p: f64) -> f64 {
    if p <= AMPLITUDE_FLOOR.ln() * (1.0 - 1e-12) {
        0.0
    } else {
        amplitude(p)
    }
}

/// Profiled likelihood `nk log σ̂² + Σ log det V + nk` with its `σ̂²`.
fn profiled_nll<T: Real>(
    systems: &[PatchSystem<T>],
    spectral: Option<&SpectralSystems>,
    lambda: &[T],
    beta: T,
) -> Result<(f64, f64)> {
    let (ld, q, n) = match spectral {
        Some(s) => s.terms(beta.as_f64()),
        None => {
            let (ld, q, n) = total_terms(systems, lambda, beta)?;
            (ld.as_f64(), q.as_f64(), n)
        }
    };
    let s2 = profiled(q, n);
    let nf = n as f64;
    Ok((nf * s2.ln() + ld + q / s2, s2))
}

/// Minimizes the likelihood over `(log λ, log β)` with `σ²` profiled out,
/// starting from `init`. Amplitudes that reach the search floor are
/// reported as zero.
pub fn estimate_variances<T: Real>(
    systems: &[PatchSystem<T>],
    init: &VarianceParams<T>,
    opts: &VarianceOptions,
) -> Result<VarianceEstimate<T>> {
    init.validate()?;
    if systems.is_empty() {
        return Err(Error::InvalidInput("no patch systems".into()));
    }
    let n_levels = systems[0].levels.n_levels();
    if systems.iter().any(|s| s.levels.n_levels() != n_levels) || init.lambda.len() != n_levels {
        return Err(Error::InvalidInput(format!(
            "initial amplitudes ({}) do not match the systems' levels ({n_levels})",
            init.lambda.len()
        )));
    }
    let spectral = (n_levels == 0).then(|| SpectralSystems::new(systems));

    let to_params = |p: &[f64], map: fn(f64) -> f64| -> (Vec<T>, T) {
        (p[..n_levels].iter().map(|&x| T::lit(map(x))).collect(), T::lit(map(p[n_levels])))
    };
    let start: Vec<f64> = init
        .lambda
        .iter()
        .chain(std::iter::once(&init.beta))
        .map(|v| v.as_f64().max(AMPLITUDE_FLOOR).ln())
        .collect();

    let objective = |p: &[f64]| -> Result<f64> {
        let (lambda, beta) = to_params(p, amplitude);
        Ok(profiled_nll(systems, spectral.as_ref(), &lambda, beta)?.0)
    };
    let res = nelder_mead(objective, &start, &opts.simplex)?;

    // snapped optimum versus the starting point, whichever is lower
    let (mut lambda, mut beta) = to_params(&res.x, snap);
    let (mut nll, mut s2) = profiled_nll(systems, spectral.as_ref(), &lambda, beta)?;
    // keep a component only if the likelihood ratio supports it
    for m in 0..=n_levels {
        let (mut l, mut b) = (lambda.clone(), beta);
        match l.get_mut(m) {
            Some(x) if *x > T::zero() => *x = T::zero(),
            None if b > T::zero() => b = T::zero(),
            _ => continue,
        }
        let (z, zs2) = profiled_nll(systems, spectral.as_ref(), &l, b)?;
        log::debug!("component {m} at zero: L rises by {}", z - nll);
        if z - nll <= opts.boundary_tol {
            (lambda, beta, nll, s2) = (l, b, z, zs2);
        }
    }
    let (nll0, s20) = profiled_nll(systems, spectral.as_ref(), &init.lambda, init.beta)?;
    let (params, nll) = if nll <= nll0 {
        (VarianceParams { sigma2: T::lit(s2), lambda, beta }, nll)
    } else {
        (VarianceParams { sigma2: T::lit(s20), lambda: init.lambda.clone(), beta: init.beta }, nll0)
    };
    log::debug!(
        "variance search: {} evaluations, L = {nll:.6}, sigma2 = {}, beta = {}",
        res.evals,
        params.sigma2,
        params.beta
    );
    Ok(VarianceEstimate { params, nll: T::lit(nll), evals: res.evals, history: res.history })
}

/// Explicit per-patch design block used by [`blup_w`].
#[derive(Clone, Debug)]
pub struct DesignPatch<T: Real> {
    pub z: DMatrix<T>,
    /// `I − θ^{w⁰} + Z w⁰` over the patch.
    pub residual: DVector<T>,
    pub bias_gram: Arc<DMatrix<T>>,
}

/// BLUP of the deformation coefficients,
/// `(C⁻¹ + Zᵀ(𝕀+S)⁻¹Z)⁻¹ Zᵀ(𝕀+S)⁻¹ r`, accumulated patchwise. Levels with
/// `λ_m = 0` are left out of the solve and predicted as zero.
pub fn blup_w<T: Real>(
    patches: &[DesignPatch<T>],
    prior: &PriorBlocks<T>,
    vp: &VarianceParams<T>,
) -> Result<DVector<T>> {
    vp.validate()?;
    let n_w = prior.n_params();
    if vp.lambda.len() != prior.n_levels() {
        return Err(Error::InvalidInput("one amplitude per prior level required".into()));
    }
    let active: Vec<usize> = (0..prior.n_levels())
        .filter(|&m| vp.lambda[m] > T::zero())
        .flat_map(|m| {
            let (off, len) = prior.columns(m);
            off..off + len
        })
        .collect();
    let mut out = DVector::zeros(n_w);
    if active.is_empty() {
        return Ok(out);
    }
    let na = active.len();

    let mut lhs = DMatrix::zeros(na, na);
    let mut rhs = DVector::zeros(na);
    for m in 0..prior.n_levels() {
        if vp.lambda[m] == T::zero() {
            continue;
        }
        let (off, len) = prior.columns(m);
        let pos = active.iter().position(|&c| c == off).unwrap_or(0);
        let chol = factor_spd(prior.level_cov(m), || format!("prior block of level {m}"))?;
        let inv = chol.inverse() / (vp.lambda[m] * vp.lambda[m]);
        lhs.view_mut((pos, pos), (len, len)).copy_from(&inv);
    }

    let contributions: Vec<(DMatrix<T>, DVector<T>)> = patches
        .par_iter()
        .enumerate()
        .map(|(j, p)| {
            if p.z.ncols() != n_w || p.z.nrows() != p.residual.len() {
                return Err(Error::InvalidInput(format!("design patch {j} has inconsistent shape")));
            }
            let za = p.z.select_columns(&active);
            let mut a = &*p.bias_gram * vp.beta;
            for i in 0..a.nrows() {
                a[(i, i)] += T::one();
            }
            let chol = factor_spd(a, || format!("bias covariance of patch {j}"))?;
            let wz = chol.solve(&za);
            let wr = chol.solve(&p.residual);
            Ok((za.tr_mul(&wz), za.tr_mul(&wr)))
        })
        .collect::<Result<_>>()?;
    for (a, b) in contributions {
        lhs += a;
        rhs += b;
    }
    let sol = match Cholesky::new(lhs.clone()) {
        Some(c) => c.solve(&rhs),
        None => lhs
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Singular("deformation BLUP system".into()))?,
    };
    for (k, &c) in active.iter().enumerate() {
        out[c] = sol[k];
    }
    Ok(out)
}

/// Conditional expectation of the bias over one patch, `βK(βK + 𝕀)⁻¹ r`.
pub fn blup_bias<T: Real>(residual: &DVector<T>, bias_gram: &DMatrix<T>, beta: T) -> Result<DVector<T>> {
    if beta == T::zero() {
        return Ok(DVector::zeros(residual.len()));
    }
    let mut a = bias_gram * beta;
    for i in 0..a.nrows() {
        a[(i, i)] += T::one();
    }
    let chol = factor_spd(a, || "bias prediction".to_string())?;
    Ok(bias_gram * chol.solve(residual) * beta)
}

/// Patch tiling of the image grid with the per-patch covariance factors
/// that do not depend on the data: bias kernel Grams (shared by extent)
/// and per-level velocity covariances `Q_m`.
pub struct PatchGeometry<T: Real> {
    grid: Grid<T>,
    partition: PatchPartition,
    indices: Vec<Vec<usize>>,
    bias_grams: Vec<Arc<DMatrix<T>>>,
    bias_id: Vec<usize>,
    level_cov: Vec<Vec<Arc<DMatrix<T>>>>,
}

impl<T: Real> PatchGeometry<T> {
    /// `memory_limit` bounds the bytes held by the `Q_m` matrices; larger
    /// configurations are rejected rather than risk exhausting memory.
    pub fn new(
        grid: &Grid<T>,
        patch_edge: usize,
        bias_kernel: &WendlandKernel<T>,
        bundle: &KernelBundle<T>,
        memory_limit: usize,
    ) -> Result<Self> {
        grid.ensure_matches(bundle.image_grid(), "patch geometry")?;
        let partition = make_partition(grid.dims, patch_edge)?;
        let indices: Vec<Vec<usize>> = partition.patches.iter().map(|p| p.voxel_indices(grid)).collect();

        let mut by_extent: HashMap<[usize; 3], usize> = HashMap::new();
        let mut bias_grams = Vec::new();
        let bias_id = partition
            .patches
            .iter()
            .zip(&indices)
            .map(|(p, idx)| {
                *by_extent.entry(p.extent).or_insert_with(|| {
                    let pts: Vec<_> = idx.iter().map(|&i| grid.position_of(i)).collect();
                    let n = pts.len();
                    bias_grams.push(Arc::new(DMatrix::from_fn(n, n, |a, b| bias_kernel.eval(&pts[a], &pts[b]))));
                    bias_grams.len() - 1
                })
            })
            .collect();

        let level_cov = if bundle.n_levels() == 0 {
            vec![Vec::new(); partition.count()]
        } else {
            let bytes: usize = indices
                .iter()
                .map(|i| i.len() * i.len() * std::mem::size_of::<T>() * bundle.n_levels())
                .sum();
            if bytes > memory_limit {
                return Err(Error::Config(format!(
                    "patch covariances need about {} MiB (limit {} MiB); reduce the patch edge",
                    bytes >> 20,
                    memory_limit >> 20
                )));
            }
            level_covariances(grid, &partition, &indices, bundle)
        };
        Ok(Self { grid: grid.clone(), partition, indices, bias_grams, bias_id, level_cov })
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn partition(&self) -> &PatchPartition {
        &self.partition
    }

    pub fn count(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self, patch: usize) -> &[usize] {
        &self.indices[patch]
    }

    pub fn bias_gram(&self, patch: usize) -> &Arc<DMatrix<T>> {
        &self.bias_grams[self.bias_id[patch]]
    }

    pub fn gather(&self, patch: usize, field: &[T]) -> DVector<T> {
        DVector::from_iterator(self.indices[patch].len(), self.indices[patch].iter().map(|&i| field[i]))
    }

    /// Systems of one image. `residual` is the full-image
    /// `I − θ^{w⁰} + Z w⁰`; `grad` the design gradient (ignored without
    /// deformation levels).
    pub fn systems(&self, residual: &[T], grad: Option<&VectorField<T>>) -> Result<Vec<PatchSystem<T>>> {
        if residual.len() != self.grid.len() {
            return Err(Error::InvalidInput("residual does not cover the grid".into()));
        }
        (0..self.count())
            .map(|j| {
                let levels = if self.level_cov[j].is_empty() {
                    LevelCovariance::None
                } else {
                    let grad = grad.ok_or_else(|| {
                        Error::InvalidInput("design gradient required with deformation levels".into())
                    })?;
                    LevelCovariance::Structured {
                        grad: self.indices[j].iter().map(|&i| grad.data()[i]).collect(),
                        q: self.level_cov[j].clone(),
                    }
                };
                Ok(PatchSystem {
                    residual: self.gather(j, residual),
                    levels,
                    bias_gram: self.bias_gram(j).clone(),
                })
            })
            .collect()
    }
}

/// `Q_m = B Gram_loc Bᵀ` for every patch and level, shared between patches
/// that see the same local lattice configuration.
fn level_covariances<T: Real>(
    grid: &Grid<T>,
    partition: &PatchPartition,
    indices: &[Vec<usize>],
    bundle: &KernelBundle<T>,
) -> Vec<Vec<Arc<DMatrix<T>>>> {
    let mut per_patch: Vec<Vec<Arc<DMatrix<T>>>> = vec![Vec::new(); partition.count()];
    for level in bundle.levels() {
        let centers = level.grid.centers();
        let mut keys: HashMap<(Vec<i64>, [usize; 3]), usize> = HashMap::new();
        let mut jobs: Vec<(usize, Vec<usize>)> = Vec::new();
        let assignment: Vec<usize> = partition
            .patches
            .iter()
            .enumerate()
            .map(|(j, patch)| {
                let pts: Vec<_> = indices[j].iter().map(|&i| grid.position_of(i)).collect();
                let local = centers_touching(&level.kernel, &centers, &pts);
                let anchor = grid.position(patch.start[0], patch.start[1], patch.start[2]);
                let key: Vec<i64> = local
                    .iter()
                    .flat_map(|&c| {
                        let d = centers[c] - anchor;
                        [d.x, d.y, d.z].map(|v| (v.as_f64() * 1e6).round() as i64)
                    })
                    .collect();
                *keys.entry((key, patch.extent)).or_insert_with(|| {
                    jobs.push((j, local));
                    jobs.len() - 1
                })
            })
            .collect();
        let computed: Vec<Arc<DMatrix<T>>> = jobs
            .par_iter()
            .map(|(j, local)| {
                let pts: Vec<_> = indices[*j].iter().map(|&i| grid.position_of(i)).collect();
                let local_centers: Vec<_> = local.iter().map(|&c| centers[c]).collect();
                let b = basis_matrix(&level.kernel, &local_centers, &pts);
                let g = level.gram.submatrix(local);
                let bg = &b * g;
                Arc::new(bg * b.transpose())
            })
            .collect();
        for (j, id) in assignment.into_iter().enumerate() {
            per_patch[j].push(computed[id].clone());
        }
    }
    per_patch
}

/// Cached factors of `βK + 𝕀` per distinct patch extent.
pub struct BiasSolver<T: Real> {
    beta: T,
    factors: Vec<Option<Cholesky<T, Dyn>>>,
}

impl<T: Real> BiasSolver<T> {
    pub fn new(geometry: &PatchGeometry<T>, beta: T) -> Result<Self> {
        let factors = geometry
            .bias_grams
            .par_iter()
            .map(|k| {
                if beta == T::zero() {
                    return Ok(None);
                }
                let mut a = &**k * beta;
                for i in 0..a.nrows() {
                    a[(i, i)] += T::one();
                }
                factor_spd(a, || format!("bias covariance of size {}", k.nrows())).map(Some)
            })
            .collect::<Result<_>>()?;
        Ok(Self { beta, factors })
    }

    pub fn beta(&self) -> T {
        self.beta
    }

    /// `(βK_j + 𝕀)⁻¹ r` for patch `j`.
    pub fn solve(&self, geometry: &PatchGeometry<T>, patch: usize, r: &DVector<T>) -> DVector<T> {
        match &self.factors[geometry.bias_id[patch]] {
            Some(c) => c.solve(r),
            None => r.clone(),
        }
    }

    /// Bias prediction `βK(βK + 𝕀)⁻¹ r` over the whole image.
    pub fn predict(&self, geometry: &PatchGeometry<T>, residual: &[T]) -> Result<Volume3<T>> {
        let mut out = vec![T::zero(); geometry.grid.len()];
        if self.beta != T::zero() {
            let patches: Vec<DVector<T>> = (0..geometry.count())
                .into_par_iter()
                .map(|j| {
                    let u = self.solve(geometry, j, &geometry.gather(j, residual));
                    &**geometry.bias_gram(j) * u * self.beta
                })
                .collect();
            for (j, vals) in patches.iter().enumerate() {
                for (&i, &v) in geometry.indices[j].iter().zip(vals.iter()) {
                    out[i] = v;
                }
            }
        }
        Volume3::new(geometry.grid.clone(), out)
    }
}

//! MAP prediction of the deformation coefficients: minimization of
//! `P(w) = Σ_j r_jᵀ(S_j + 𝕀)⁻¹ r_j + Σ_m λ_m⁻² w_mᵀ Gram_m⁻¹ w_m` with
//! `r = I − θ(Exp(v(w)))`, by preconditioned gradient descent.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::deformation::{exp_euler, exp_euler_adjoint, velocity, KernelBundle, KernelBundleParams, VelocityField};
use crate::error::{Error, Result};
use crate::mixed_model::{BiasSolver, PatchGeometry};
use crate::scalar::Real;
use crate::volume::{gradient_central, DisplacementField, VectorField, Volume3};

#[derive(Clone, Debug)]
pub struct RegistrationOptions {
    pub max_iter: usize,
    /// Relative gradient tolerance: stop at `‖∇P‖∞ < tol · (1 + |P|)`.
    pub grad_tol: f64,
    /// Stop once an accepted step moves no coefficient by more than this (mm).
    pub step_tol: f64,
    pub armijo: f64,
    pub max_halvings: usize,
    pub euler_steps: usize,
}

impl Default for RegistrationOptions {
    fn default() -> Self {
        Self { max_iter: 100, grad_tol: 1e-5, step_tol: 1e-8, armijo: 1e-4, max_halvings: 40, euler_steps: 16 }
    }
}

/// One image's posterior: template, observation, bias solver carrying `β`,
/// and per-level amplitudes. `σ²` cancels from the minimizer and is absent.
pub struct PosteriorProblem<'a, T: Real> {
    template: &'a Volume3<T>,
    image: &'a Volume3<T>,
    bundle: &'a KernelBundle<T>,
    geometry: &'a PatchGeometry<T>,
    bias: &'a BiasSolver<T>,
    lambda: Vec<T>,
    central: VectorField<T>,
    opts: RegistrationOptions,
}

/// Quantities produced while evaluating `P` at one point.
pub struct Evaluation<T: Real> {
    pub value: T,
    pub data: T,
    pub prior: T,
    pub displacement: DisplacementField<T>,
    /// `I − θ(Exp(v(w)))`
    pub residual: Vec<T>,
    /// `(S + 𝕀)⁻¹ r`, patchwise
    weighted: Vec<T>,
}

impl<'a, T: Real> PosteriorProblem<'a, T> {
    pub fn new(
        template: &'a Volume3<T>,
        image: &'a Volume3<T>,
        bundle: &'a KernelBundle<T>,
        geometry: &'a PatchGeometry<T>,
        bias: &'a BiasSolver<T>,
        lambda: &[T],
        opts: RegistrationOptions,
    ) -> Result<Self> {
        template.grid().ensure_matches(image.grid(), "registration image")?;
        template.grid().ensure_matches(bundle.image_grid(), "registration bundle")?;
        template.grid().ensure_matches(geometry.grid(), "registration patches")?;
        if lambda.len() != bundle.n_levels() {
            return Err(Error::InvalidInput(format!(
                "{} amplitudes for {} bundle levels",
                lambda.len(),
                bundle.n_levels()
            )));
        }
        if opts.euler_steps == 0 {
            return Err(Error::InvalidInput("Euler integration needs at least one step".into()));
        }
        Ok(Self {
            template,
            image,
            bundle,
            geometry,
            bias,
            lambda: lambda.to_vec(),
            central: gradient_central(template)?,
            opts,
        })
    }

    pub fn options(&self) -> &RegistrationOptions {
        &self.opts
    }

    fn data_term(&self, v: &VelocityField<T>) -> Result<(T, DisplacementField<T>, Vec<T>, Vec<T>)> {
        let disp = exp_euler(v, self.opts.euler_steps)?;
        let grid = self.template.grid();
        let residual: Vec<T> = (0..grid.len())
            .into_par_iter()
            .map(|i| self.image.data()[i] - self.template.sample(&(grid.position_of(i) + disp.data()[i])))
            .collect();
        let parts: Vec<(T, Vec<T>)> = (0..self.geometry.count())
            .into_par_iter()
            .map(|j| {
                let r = self.geometry.gather(j, &residual);
                let u = self.bias.solve(self.geometry, j, &r);
                (r.dot(&u), u.as_slice().to_vec())
            })
            .collect();
        let mut weighted = vec![T::zero(); grid.len()];
        let mut data = T::zero();
        for (j, (d, u)) in parts.into_iter().enumerate() {
            data += d;
            for (&i, ui) in self.geometry.indices(j).iter().zip(u) {
                weighted[i] = ui;
            }
        }
        Ok((data, disp, residual, weighted))
    }

    /// `Σ_m λ_m⁻² Σ_i w_i·a_i` given `a_m = Gram_m⁻¹ w_m`. Levels with
    /// `λ_m = 0` contribute nothing when their coefficients vanish and make
    /// the prior infinite otherwise.
    fn prior_from(&self, w: &KernelBundleParams<T>, a: &[Vec<Vector3<T>>]) -> T {
        let mut total = T::zero();
        for (m, &l) in self.lambda.iter().enumerate() {
            if l == T::zero() {
                if w.coeffs[m].iter().any(|c| c.iter().any(|x| *x != T::zero())) {
                    return T::lit(f64::INFINITY);
                }
                continue;
            }
            let s = w.coeffs[m].iter().zip(&a[m]).fold(T::zero(), |acc, (wi, ai)| acc + wi.dot(ai));
            total += s / (l * l);
        }
        total
    }

    fn solve_prior(&self, w: &KernelBundleParams<T>) -> Result<Vec<Vec<Vector3<T>>>> {
        self.bundle
            .levels()
            .iter()
            .zip(&w.coeffs)
            .zip(&self.lambda)
            .map(|((level, c), &l)| {
                if l == T::zero() {
                    Ok(vec![Vector3::zeros(); c.len()])
                } else {
                    level.solver().solve_vec3(c)
                }
            })
            .collect()
    }

    fn evaluate_with(
        &self,
        w: &KernelBundleParams<T>,
        a: &[Vec<Vector3<T>>],
        v: &VelocityField<T>,
    ) -> Result<Evaluation<T>> {
        let prior = self.prior_from(w, a);
        if !prior.is_finite() {
            return Ok(Evaluation {
                value: prior,
                data: T::zero(),
                prior,
                displacement: VectorField::zeros(self.template.grid().clone()),
                residual: Vec::new(),
                weighted: Vec::new(),
            });
        }
        let (data, displacement, residual, weighted) = self.data_term(v)?;
        Ok(Evaluation { value: data + prior, data, prior, displacement, residual, weighted })
    }

    fn full_velocity(&self, w: &KernelBundleParams<T>) -> Result<VelocityField<T>> {
        velocity(self.bundle, w, &self.bundle.all_levels())
    }

    pub fn evaluate(&self, w: &KernelBundleParams<T>) -> Result<Evaluation<T>> {
        w.check(self.bundle)?;
        self.evaluate_with(w, &self.solve_prior(w)?, &self.full_velocity(w)?)
    }

    /// `P(w)`.
    pub fn posterior_value(&self, w: &KernelBundleParams<T>) -> Result<T> {
        Ok(self.evaluate(w)?.value)
    }

    /// `∇P = −2 Jᵀ(S + 𝕀)⁻¹ r + 2 C⁻¹ w`, with `J` the derivative of
    /// `θ(Exp(v(w)))` taken through the Euler steps. Levels with `λ_m = 0`
    /// receive a zero gradient.
    pub fn posterior_gradient(&self, w: &KernelBundleParams<T>) -> Result<KernelBundleParams<T>> {
        w.check(self.bundle)?;
        let a = self.solve_prior(w)?;
        let v = self.full_velocity(w)?;
        let eval = self.evaluate_with(w, &a, &v)?;
        let levels: Vec<usize> = (0..self.bundle.n_levels()).collect();
        self.gradient_at(&eval, &a, &v, &levels)
    }

    fn gradient_at(
        &self,
        eval: &Evaluation<T>,
        a: &[Vec<Vector3<T>>],
        v: &VelocityField<T>,
        levels: &[usize],
    ) -> Result<KernelBundleParams<T>> {
        let grid = self.template.grid();
        let two = T::lit(2.0);
        let sensitivity: Vec<Vector3<T>> = (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let p = grid.position_of(i) + eval.displacement.data()[i];
                self.template.sample_gradient(&self.central, &p) * eval.weighted[i]
            })
            .collect();
        let weighted = exp_euler_adjoint(v, self.opts.euler_steps, &sensitivity)?.into_data();
        let coeffs = self
            .bundle
            .levels()
            .iter()
            .enumerate()
            .map(|(m, level)| {
                let l = self.lambda[m];
                if l == T::zero() || !levels.contains(&m) {
                    return vec![Vector3::zeros(); level.n_centers()];
                }
                let inv = two / (l * l);
                level
                    .gather(&weighted)
                    .into_iter()
                    .zip(&a[m])
                    .map(|(g, ai)| ai * inv - g * two)
                    .collect()
            })
            .collect();
        Ok(KernelBundleParams { coeffs })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub value: f64,
    pub grad_norm: f64,
    pub step: f64,
}

#[derive(Clone, Debug)]
pub struct Prediction<T: Real> {
    pub w: KernelBundleParams<T>,
    pub value: T,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the line search exhausted its halvings; `w` is then the best
    /// point found so far.
    pub line_search_failed: bool,
    pub trace: Vec<TraceRow>,
}

fn max_abs<T: Real>(p: &[Vec<Vector3<T>>], levels: &[usize]) -> T {
    levels
        .iter()
        .flat_map(|&m| p[m].iter())
        .fold(T::zero(), |acc, v| acc.max(v.amax()))
}

fn dot<T: Real>(a: &[Vec<Vector3<T>>], b: &[Vec<Vector3<T>>], levels: &[usize]) -> T {
    levels
        .iter()
        .flat_map(|&m| a[m].iter().zip(&b[m]))
        .fold(T::zero(), |acc, (x, y)| acc + x.dot(y))
}

fn axpy<T: Real>(x: &[Vec<Vector3<T>>], t: T, d: &[Vec<Vector3<T>>], levels: &[usize]) -> Vec<Vec<Vector3<T>>> {
    let mut out = x.to_vec();
    for &m in levels {
        for (o, di) in out[m].iter_mut().zip(&d[m]) {
            *o -= di * t;
        }
    }
    out
}

/// Minimizes `P` over the coefficients of `levels` (others held fixed) by
/// gradient descent preconditioned with the Gram matrices, so the step in
/// `w` is `−t Gram ∇P`. Steps follow Armijo backtracking with halving and
/// a Barzilai–Borwein initial guess. `P` never increases.
pub fn predict_w<T: Real>(
    problem: &PosteriorProblem<'_, T>,
    w_init: &KernelBundleParams<T>,
    levels: &[usize],
) -> Result<Prediction<T>> {
    w_init.check(problem.bundle)?;
    if let Some(&m) = levels.iter().find(|&&m| m >= problem.bundle.n_levels()) {
        return Err(Error::InvalidInput(format!("level {m} outside the bundle")));
    }
    let opts = problem.opts.clone();
    let active: Vec<usize> = levels.iter().copied().filter(|&m| problem.lambda[m] > T::zero()).collect();

    let mut w = w_init.clone();
    let mut a = problem.solve_prior(&w)?;
    let mut v = problem.full_velocity(&w)?;
    let mut eval = problem.evaluate_with(&w, &a, &v)?;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut line_search_failed = false;
    let mut iterations = 0;
    if active.is_empty() {
        return Ok(Prediction { w, value: eval.value, iterations, converged: true, line_search_failed, trace });
    }

    let min_spacing = problem.template.grid().spacing.iter().copied().fold(T::lit(f64::MAX), |m, s| m.min(s));
    let first_step = T::lit(0.5) * min_spacing;
    let mut prev: Option<(T, T, Vec<Vec<Vector3<T>>>)> = None; // (step, gᵀd, direction)
    let armijo = T::lit(opts.armijo);
    for it in 0..opts.max_iter {
        let grad = problem.gradient_at(&eval, &a, &v, &active)?.coeffs;
        let gnorm = max_abs(&grad, &active);
        if gnorm < T::lit(opts.grad_tol) * (T::one() + eval.value.abs()) {
            converged = true;
            trace.push(TraceRow { iteration: it, value: eval.value.as_f64(), grad_norm: gnorm.as_f64(), step: 0.0 });
            break;
        }
        let mut dir: Vec<Vec<Vector3<T>>> = grad.iter().map(|g| vec![Vector3::zeros(); g.len()]).collect();
        for &m in &active {
            dir[m] = problem.bundle.levels()[m].gram.mul_vec3(&grad[m]);
        }
        let slope = dot(&grad, &dir, &active);
        let dmax = max_abs(&dir, &active);
        if !(slope > T::zero()) || dmax == T::zero() {
            converged = true;
            break;
        }

        let mut t = match &prev {
            None => first_step / dmax,
            Some((tp, slope_prev, d_prev)) => {
                // metric BB step: sᵀGram⁻¹s / sᵀy with s = −t_prev d_prev
                let sy = -*tp * (dot(d_prev, &grad, &active) - *slope_prev);
                let ss = *tp * *tp * *slope_prev;
                if sy > T::zero() {
                    (ss / sy).min(*tp * T::lit(1e3))
                } else {
                    *tp * T::lit(2.0)
                }
            }
        };

        // the velocity is linear in w, so trial points need no kernel sums
        let v_dir = velocity(problem.bundle, &KernelBundleParams { coeffs: dir.clone() }, &active)?;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial = KernelBundleParams { coeffs: axpy(&w.coeffs, t, &dir, &active) };
            let a_trial = axpy(&a, t, &grad, &active);
            let v_trial = VectorField::new(
                v.grid().clone(),
                v.data().iter().zip(v_dir.data()).map(|(x, d)| x - d * t).collect(),
            )?;
            let e = problem.evaluate_with(&trial, &a_trial, &v_trial)?;
            if e.value <= eval.value - armijo * t * slope {
                accepted = Some((trial, a_trial, v_trial, e));
                break;
            }
            t *= T::lit(0.5);
        }
        iterations = it + 1;
        let Some((trial, a_trial, v_trial, e)) = accepted else {
            log::warn!("line search failed after {} halvings at P = {}", opts.max_halvings, eval.value);
            line_search_failed = true;
            break;
        };
        let step = t * dmax;
        trace.push(TraceRow { iteration: it, value: e.value.as_f64(), grad_norm: gnorm.as_f64(), step: step.as_f64() });
        w = trial;
        a = a_trial;
        v = v_trial;
        eval = e;
        prev = Some((t, slope, dir));
        if step < T::lit(opts.step_tol) {
            converged = true;
            break;
        }
    }
    Ok(Prediction { w, value: eval.value, iterations, converged, line_search_failed, trace })
}

/// Result of a coarse-to-fine schedule: the final coefficients and the
/// prediction of each stage.
pub struct Schedule<T: Real> {
    pub w: KernelBundleParams<T>,
    pub value: T,
    pub stages: Vec<Prediction<T>>,
}

/// Optimizes the levels one at a time in the given (coarse to fine) order,
/// each stage warm-started from the previous one with the other levels held
/// at their current values. Levels with `λ_m = 0` are reset to zero.
pub fn multiscale_schedule<T: Real>(
    problem: &PosteriorProblem<'_, T>,
    w_init: &KernelBundleParams<T>,
    levels: &[usize],
) -> Result<Schedule<T>> {
    let mut w = w_init.clone();
    for (m, &l) in problem.lambda.iter().enumerate() {
        if l == T::zero() {
            w.coeffs[m].iter_mut().for_each(|c| *c = Vector3::zeros());
        }
    }
    let mut value = problem.posterior_value(&w)?;
    let mut stages = Vec::with_capacity(levels.len());
    for &m in levels {
        let pred = predict_w(problem, &w, &[m])?;
        w = pred.w.clone();
        value = pred.value;
        stages.push(pred);
    }
    Ok(Schedule { w, value, stages })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::WendlandKernel;
    use crate::volume::{warp, Grid};

    struct Fixture {
        template: Volume3<f64>,
        bundle: KernelBundle<f64>,
        geometry: PatchGeometry<f64>,
    }

    fn blob(g: &Grid<f64>, c: Vector3<f64>, r: f64) -> Volume3<f64> {
        Volume3::from_fn(g.clone(), |p| (-(p - c).norm_squared() / (2.0 * r * r)).exp()).unwrap()
    }

    fn fixture(n: usize, h: f64, spacings: &[f64]) -> Fixture {
        let g = Grid::new([n; 3], [h; 3], [0.0; 3]).unwrap();
        let mid = (n - 1) as f64 * h / 2.0;
        let template = blob(&g, Vector3::new(mid, mid, mid), 0.25 * n as f64 * h);
        let bundle = KernelBundle::new(&g, spacings, 2.0).unwrap();
        let kernel = WendlandKernel::new(20.0).unwrap();
        let geometry = PatchGeometry::new(&g, 4, &kernel, &bundle, 1 << 30).unwrap();
        Fixture { template, bundle, geometry }
    }

    fn problem<'a>(
        f: &'a Fixture,
        image: &'a Volume3<f64>,
        bias: &'a BiasSolver<f64>,
        lambda: &[f64],
    ) -> PosteriorProblem<'a, f64> {
        PosteriorProblem::new(&f.template, image, &f.bundle, &f.geometry, bias, lambda, RegistrationOptions::default())
            .unwrap()
    }

    #[test]
    fn identical_images_are_stationary() {
        let f = fixture(8, 2.0, &[8.0]);
        let bias = BiasSolver::new(&f.geometry, 0.5).unwrap();
        let p = problem(&f, &f.template, &bias, &[1.0]);
        let zero = KernelBundleParams::zeros(&f.bundle);
        assert_eq!(p.posterior_value(&zero).unwrap(), 0.0);
        assert_eq!(p.posterior_gradient(&zero).unwrap().to_flat().iter().fold(0.0f64, |m, x| m.max(x.abs())), 0.0);
        let pred = predict_w(&p, &zero, &[0]).unwrap();
        assert_eq!(pred.w, zero);
        assert!(pred.converged);
    }

    #[test]
    fn unweighted_ssd_without_bias() {
        let f = fixture(8, 2.0, &[8.0]);
        let bias = BiasSolver::new(&f.geometry, 0.0).unwrap();
        let image = f.template.map(|x| 0.9 * x + 0.05);
        let p = problem(&f, &image, &bias, &[1.0]);
        let ssd: f64 = image.data().iter().zip(f.template.data()).map(|(a, b)| (a - b).powi(2)).sum();
        let v = p.posterior_value(&KernelBundleParams::zeros(&f.bundle)).unwrap();
        assert!((v - ssd).abs() < 1e-10 * ssd);
    }

    #[test]
    fn prior_term_matches_hand_algebra() {
        let f = fixture(6, 2.0, &[6.0]);
        let bias = BiasSolver::new(&f.geometry, 0.0).unwrap();
        let lambda = 2.0;
        let p = problem(&f, &f.template, &bias, &[lambda]);
        let level = &f.bundle.levels()[0];
        let u: Vec<Vector3<f64>> =
            (0..level.n_centers()).map(|i| Vector3::new((i as f64 * 0.7).sin(), 0.1, -0.2) * 1e-3).collect();
        let w = KernelBundleParams { coeffs: vec![level.gram.mul_vec3(&u)] };
        let e = p.evaluate(&w).unwrap();
        let expected: f64 = w.coeffs[0].iter().zip(&u).map(|(a, b)| a.dot(b)).sum::<f64>() / (lambda * lambda);
        assert!((e.prior - expected).abs() < 1e-10 * expected.abs());

        // constant images: the data term has no gradient, leaving 2C⁻¹w = 2λ⁻²u
        let flat = Volume3::constant(f.template.grid().clone(), 0.3);
        let pc = PosteriorProblem::new(&flat, &flat, &f.bundle, &f.geometry, &bias, &[lambda], RegistrationOptions::default())
            .unwrap();
        let g = pc.posterior_gradient(&w).unwrap();
        for (gi, ui) in g.coeffs[0].iter().zip(&u) {
            assert!((gi - ui * (2.0 / (lambda * lambda))).norm() < 1e-10);
        }
    }

    #[test]
    fn descent_recovers_known_shift() {
        let f = fixture(12, 2.0, &[8.0]);
        let bias = BiasSolver::new(&f.geometry, 0.0).unwrap();
        let mut truth = KernelBundleParams::zeros(&f.bundle);
        let level = &f.bundle.levels()[0];
        let mid = 11.0;
        for (i, c) in truth.coeffs[0].iter_mut().enumerate() {
            if (level.grid.center(i) - Vector3::new(mid, mid, mid)).norm() < 14.0 {
                *c = Vector3::new(1.0, -0.5, 0.3);
            }
        }
        let disp = crate::deformation::exp_forward(&f.bundle, &truth, &[0], 16).unwrap();
        let image = warp(&f.template, &disp).unwrap();
        let p = problem(&f, &image, &bias, &[1e3]);
        let zero = KernelBundleParams::zeros(&f.bundle);
        let before = p.posterior_value(&zero).unwrap();
        let pred = predict_w(&p, &zero, &[0]).unwrap();
        assert!(pred.value <= before);
        assert!(pred.trace.windows(2).all(|r| r[1].value <= r[0].value));
        let after = p.evaluate(&pred.w).unwrap().data;
        assert!(after < 0.1 * before, "{after} vs {before}");
    }

    #[test]
    fn zero_amplitude_levels_stay_at_zero() {
        let f = fixture(10, 2.0, &[10.0, 6.0]);
        let bias = BiasSolver::new(&f.geometry, 0.0).unwrap();
        let image = f.template.map(|x| x * 1.1);
        let p = problem(&f, &image, &bias, &[10.0, 0.0]);
        let s = multiscale_schedule(&p, &KernelBundleParams::zeros(&f.bundle), &[0, 1]).unwrap();
        assert!(s.w.coeffs[1].iter().all(|c| c.norm() < 1e-6));
        assert_eq!(s.stages.len(), 2);
        assert!(s.stages[1].value <= s.stages[0].value);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let f = fixture(12, 2.0, &[8.0, 4.0]);
        let bias = BiasSolver::new(&f.geometry, 0.3).unwrap();
        let g = f.template.grid().clone();
        let image = Volume3::from_fn(g.clone(), |p| f.template.sample(&p) + 0.05 * (0.2 * p.x).sin() * (0.15 * p.y).cos())
            .unwrap();
        let p = problem(&f, &image, &bias, &[0.5, 0.2]);
        let n = f.bundle.n_params();
        let flat: Vec<f64> = (0..n).map(|i| 0.01 * ((i as f64 * 1.37).sin())).collect();
        let w = KernelBundleParams::from_flat(&f.bundle, &flat).unwrap();
        let grad = p.posterior_gradient(&w).unwrap().to_flat();
        let eps = 1e-4;
        let mut errs = Vec::new();
        for k in (0..n).step_by(n / 40 + 1) {
            let mut hi = flat.clone();
            hi[k] += eps;
            let mut lo = flat.clone();
            lo[k] -= eps;
            let fd = (p.posterior_value(&KernelBundleParams::from_flat(&f.bundle, &hi).unwrap()).unwrap()
                - p.posterior_value(&KernelBundleParams::from_flat(&f.bundle, &lo).unwrap()).unwrap())
                / (2.0 * eps);
            errs.push((grad[k] - fd).abs() / fd.abs().max(1e-12));
        }
        errs.sort_by(f64::total_cmp);
        let p95 = errs[(errs.len() * 95) / 100 - 1];
        assert!(p95 < 1e-3, "{errs:?}");
    }
}

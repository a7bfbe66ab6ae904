//! Outer estimation loop: template update by back-warp averaging, variance
//! estimation on the linearized model, deformation prediction, and bias
//! prediction, repeated until the patch likelihood settles.

use rayon::prelude::*;

use crate::deformation::{design_gradient, exp_euler, exp_inverse, velocity, KernelBundle, KernelBundleParams};
use crate::error::{Error, Result};
use crate::kernels::WendlandKernel;
use crate::mixed_model::{estimate_variances, BiasSolver, PatchGeometry, VarianceOptions, VarianceParams};
use crate::registration::{multiscale_schedule, PosteriorProblem, RegistrationOptions, TraceRow};
use crate::scalar::Real;
use crate::volume::{warp, DisplacementField, Volume3};

#[derive(Clone, Debug)]
pub struct PipelineConfig<T: Real> {
    /// Control-point spacing per bundle level (mm), coarse to fine.
    pub level_spacings: Vec<T>,
    /// Kernel support as a multiple of the level spacing.
    pub support_multiplier: T,
    /// Bias kernel support (mm).
    pub bias_support: T,
    pub patch_edge: usize,
    pub max_outer: usize,
    /// Relative change of the likelihood below which the loop stops.
    pub outer_tol: f64,
    pub registration: RegistrationOptions,
    pub variance: VarianceOptions,
    /// Starting amplitudes of the first variance search.
    pub init_lambda: T,
    pub init_beta: T,
    /// Subtract the predicted bias before back-warping in the template update.
    pub bias_corrected_template: bool,
    /// Upper bound on memory held by patch velocity covariances (bytes).
    pub covariance_memory_limit: usize,
}

impl<T: Real> Default for PipelineConfig<T> {
    fn default() -> Self {
        Self {
            level_spacings: vec![T::lit(20.0), T::lit(10.0), T::lit(6.0)],
            support_multiplier: T::lit(4.0),
            bias_support: T::lit(40.0),
            patch_edge: 16,
            max_outer: 10,
            outer_tol: 1e-4,
            registration: RegistrationOptions::default(),
            variance: VarianceOptions::default(),
            init_lambda: T::lit(10.0),
            init_beta: T::one(),
            bias_corrected_template: false,
            covariance_memory_limit: 4 << 30,
        }
    }
}

impl<T: Real> PipelineConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.level_spacings.iter().any(|&s| !(s > T::zero())) {
            return bad("level spacings must be positive");
        }
        if self.level_spacings.windows(2).any(|w| !(w[0] > w[1])) {
            return bad("level spacings must be strictly decreasing");
        }
        if !(self.support_multiplier > T::zero()) || !(self.bias_support > T::zero()) {
            return bad("kernel supports must be positive");
        }
        if self.patch_edge == 0 || self.max_outer == 0 || self.registration.euler_steps == 0 {
            return bad("patch edge, outer iterations and Euler steps must be at least 1");
        }
        let r = &self.registration;
        let tolerances = [self.outer_tol, r.grad_tol, r.step_tol, r.armijo, self.variance.simplex.diameter_tol];
        if tolerances.iter().any(|&t| !(t > 0.0)) {
            return bad("tolerances must be positive");
        }
        if !(self.init_lambda > T::zero()) || !(self.init_beta > T::zero()) {
            return bad("initial amplitudes must be positive");
        }
        Ok(())
    }
}

/// Variance components and likelihood recorded at one outer iteration.
#[derive(Clone, Debug)]
pub struct IterationRecord<T: Real> {
    pub iteration: usize,
    pub params: VarianceParams<T>,
    pub nll: T,
}

pub struct EstimationState<T: Real> {
    pub template: Volume3<T>,
    pub w: Vec<KernelBundleParams<T>>,
    pub variance: VarianceParams<T>,
    pub bias: Vec<Volume3<T>>,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<IterationRecord<T>>,
    /// Registration traces of the last outer iteration, per image.
    pub traces: Vec<Vec<TraceRow>>,
    pub bundle: KernelBundle<T>,
    pub euler_steps: usize,
}

impl<T: Real> EstimationState<T> {
    /// `Exp(v(w_i)) − Id`: maps template coordinates onto image `i`.
    pub fn forward_displacement(&self, i: usize) -> Result<DisplacementField<T>> {
        crate::deformation::exp_forward(&self.bundle, &self.w[i], &self.bundle.all_levels(), self.euler_steps)
    }

    /// `Exp(−v(w_i)) − Id`: brings image `i` into template coordinates.
    pub fn inverse_displacement(&self, i: usize) -> Result<DisplacementField<T>> {
        exp_inverse(&self.bundle, &self.w[i], &self.bundle.all_levels(), self.euler_steps)
    }
}

/// `θ = (1/k) Σ_i I_i(Exp(−v(w_i)))`, optionally from bias-corrected images.
pub fn update_template<T: Real>(
    images: &[Volume3<T>],
    w: &[KernelBundleParams<T>],
    bundle: &KernelBundle<T>,
    steps: usize,
    bias: Option<&[Volume3<T>]>,
) -> Result<Volume3<T>> {
    if images.is_empty() || images.len() != w.len() || bias.is_some_and(|b| b.len() != images.len()) {
        return Err(Error::InvalidInput("one deformation (and bias) per image required".into()));
    }
    let grid = images[0].grid().clone();
    let warped: Vec<Volume3<T>> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            img.grid().ensure_matches(&grid, "template update")?;
            let source = match bias {
                Some(b) => img.zip_map(&b[i], |a, x| a - x)?,
                None => img.clone(),
            };
            warp(&source, &exp_inverse(bundle, &w[i], &bundle.all_levels(), steps)?)
        })
        .collect::<Result<_>>()?;
    let k = T::from_count(images.len());
    let data = (0..grid.len())
        .map(|v| warped.iter().fold(T::zero(), |acc, img| acc + img.data()[v]) / k)
        .collect();
    Volume3::new(grid, data)
}

/// Runs the alternating estimation on rigidly pre-aligned images.
pub fn run_pipeline<T: Real>(images: &[Volume3<T>], config: &PipelineConfig<T>) -> Result<EstimationState<T>> {
    config.validate()?;
    if images.len() < 2 {
        return Err(Error::Config("need at least 2 images".into()));
    }
    let grid = images[0].grid().clone();
    for (i, img) in images.iter().enumerate() {
        img.grid().ensure_matches(&grid, &format!("image {i}"))?;
    }
    let steps = config.registration.euler_steps;
    let bundle = KernelBundle::new(&grid, &config.level_spacings, config.support_multiplier)?;
    let bias_kernel = WendlandKernel::new(config.bias_support)?;
    let geometry =
        PatchGeometry::new(&grid, config.patch_edge, &bias_kernel, &bundle, config.covariance_memory_limit)?;
    let all_levels = bundle.all_levels();
    log::info!(
        "{} images, grid {:?}, {} patches, {} deformation parameters per image",
        images.len(),
        grid.dims,
        geometry.count(),
        bundle.n_params()
    );

    let mut w: Vec<KernelBundleParams<T>> = images.iter().map(|_| KernelBundleParams::zeros(&bundle)).collect();
    let mut bias: Vec<Volume3<T>> = images.iter().map(|img| Volume3::zeros(img.grid().clone())).collect();
    let mut variance = VarianceParams::new(
        T::one(),
        vec![config.init_lambda; bundle.n_levels()],
        config.init_beta,
    )?;
    let mut history: Vec<IterationRecord<T>> = Vec::new();
    let mut traces = Vec::new();
    let mut template = Volume3::zeros(grid.clone());
    let mut converged = false;

    for it in 0..config.max_outer {
        template = update_template(
            images,
            &w,
            &bundle,
            steps,
            config.bias_corrected_template.then_some(bias.as_slice()),
        )?;

        let clock = std::time::Instant::now();
        // linearized model at the current w⁰
        let mut systems = Vec::new();
        for (i, img) in images.iter().enumerate() {
            let v = velocity(&bundle, &w[i], &all_levels)?;
            let disp = exp_euler(&v, steps)?;
            let grad = design_gradient(&template, &disp)?;
            let warped = warp(&template, &disp)?;
            let residual: Vec<T> = (0..grid.len())
                .map(|x| img.data()[x] - warped.data()[x] + grad.data()[x].dot(&v.data()[x]))
                .collect();
            systems.extend(geometry.systems(&residual, Some(&grad))?);
        }
        let est = estimate_variances(&systems, &variance, &config.variance)
            .map_err(|e| annotate(e, it, "variance estimation"))?;
        drop(systems);
        log::debug!("variance estimation: {} evaluations in {:.1?}", est.evals, clock.elapsed());
        variance = est.params;
        log::info!(
            "outer iteration {}: L = {:.6}, sigma2 = {}, lambda = {:?}, beta = {}",
            it + 1,
            est.nll,
            variance.sigma2,
            variance.lambda.iter().map(|l| l.as_f64()).collect::<Vec<_>>(),
            variance.beta
        );
        if let Some(prev) = history.last() {
            if est.nll > prev.nll + T::lit(1e-6) * prev.nll.abs() {
                log::warn!("likelihood increased from {} to {} at outer iteration {}", prev.nll, est.nll, it + 1);
            }
        }
        history.push(IterationRecord { iteration: it + 1, params: variance.clone(), nll: est.nll });

        // deformation prediction
        let solver = BiasSolver::new(&geometry, variance.beta)?;
        let results: Vec<(KernelBundleParams<T>, Vec<TraceRow>)> = images
            .par_iter()
            .zip(&w)
            .map(|(img, wi)| {
                let problem = PosteriorProblem::new(
                    &template,
                    img,
                    &bundle,
                    &geometry,
                    &solver,
                    &variance.lambda,
                    config.registration.clone(),
                )?;
                let s = multiscale_schedule(&problem, wi, &all_levels)?;
                Ok((s.w, s.stages.into_iter().flat_map(|p| p.trace).collect()))
            })
            .collect::<Result<_>>()
            .map_err(|e| annotate(e, it, "deformation prediction"))?;
        (w, traces) = results.into_iter().unzip();
        log::debug!(
            "deformation prediction: {} descent iterations in {:.1?}",
            traces.iter().map(Vec::len).sum::<usize>(),
            clock.elapsed()
        );

        // bias prediction at the new linearization points
        bias = images
            .par_iter()
            .zip(&w)
            .map(|(img, wi)| {
                let disp = exp_euler(&velocity(&bundle, wi, &all_levels)?, steps)?;
                let residual = img.zip_map(&warp(&template, &disp)?, |a, b| a - b)?;
                solver.predict(&geometry, residual.data())
            })
            .collect::<Result<_>>()
            .map_err(|e| annotate(e, it, "bias prediction"))?;

        if history.len() >= 2 {
            let (a, b) = (history[history.len() - 2].nll, history[history.len() - 1].nll);
            let rel = (b - a).abs() / a.abs().max(T::lit(f64::MIN_POSITIVE));
            if rel.as_f64() < config.outer_tol {
                converged = true;
                break;
            }
        }
    }

    Ok(EstimationState {
        template,
        w,
        variance,
        bias,
        iterations: history.len(),
        converged,
        history,
        traces,
        bundle,
        euler_steps: steps,
    })
}

fn annotate(e: Error, iteration: usize, stage: &str) -> Error {
    let context = format!("{stage} at outer iteration {}", iteration + 1);
    match e {
        Error::Factorization { context: c } => Error::Factorization { context: format!("{c} ({context})") },
        Error::Numerical(m) => Error::Numerical(format!("{m} ({context})")),
        Error::Singular(m) => Error::Singular(format!("{m} ({context})")),
        other => other,
    }
}

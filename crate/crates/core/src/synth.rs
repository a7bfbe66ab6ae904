//! Synthetic cohorts with known ground truth: Gaussian-blob phantoms, prior
//! deformation draws, multiplicative bias and Gaussian noise.

use nalgebra::{DMatrix, DVector, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::deformation::{exp_forward, KernelBundle, KernelBundleParams};
use crate::error::{Error, Result};
use crate::kernels::GramMatrix;
use crate::scalar::Real;
use crate::volume::{warp, DisplacementField, Grid, LabelVolume, Volume3};

/// Gaussian-profiled ellipsoidal structure, `a · exp(−½ Σ ((x−c)_k / r_k)²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Blob<T: Real> {
    pub center: Vector3<T>,
    pub radii: Vector3<T>,
    pub intensity: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec<T: Real> {
    pub grid: Grid<T>,
    pub structures: Vec<Blob<T>>,
}

impl<T: Real> PhantomSpec<T> {
    /// Head-like default: a broad ellipsoid with two inner structures.
    pub fn standard(grid: Grid<T>) -> Self {
        let ext = grid.extent();
        let c = Vector3::new(
            grid.origin[0] + ext[0] / T::lit(2.0),
            grid.origin[1] + ext[1] / T::lit(2.0),
            grid.origin[2] + ext[2] / T::lit(2.0),
        );
        let e = Vector3::new(ext[0], ext[1], ext[2]);
        let off = Vector3::new(e.x * T::lit(0.14), e.y * T::lit(0.06), T::zero());
        let structures = vec![
            Blob { center: c, radii: e * T::lit(0.22), intensity: T::lit(0.4) },
            Blob { center: c - off, radii: e * T::lit(0.07), intensity: T::lit(0.5) },
            Blob { center: c + off, radii: e * T::lit(0.09), intensity: T::lit(0.35) },
        ];
        Self { grid, structures }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.structures.iter().enumerate() {
            if !(b.intensity >= T::zero() && b.intensity <= T::one()) {
                return Err(Error::InvalidInput(format!("structure {i}: intensity outside [0, 1]")));
            }
            if b.radii.iter().any(|r| !(*r > T::zero())) {
                return Err(Error::InvalidInput(format!("structure {i}: radii must be positive")));
            }
        }
        Ok(())
    }
}

fn blob_profile<T: Real>(b: &Blob<T>, p: &Vector3<T>) -> T {
    let d = (p - b.center).component_div(&b.radii);
    (-d.norm_squared() / T::lit(2.0)).exp()
}

/// Superposed blobs and the label map of their half-maximum regions
/// (label `k+1` for structure `k`; the brightest structure wins overlaps).
pub fn make_phantom<T: Real>(spec: &PhantomSpec<T>) -> Result<(Volume3<T>, LabelVolume<T>)> {
    spec.validate()?;
    let grid = &spec.grid;
    let mut data = vec![T::zero(); grid.len()];
    let mut labels = vec![0u16; grid.len()];
    let mut winner = vec![T::lit(-1.0); grid.len()];
    let half = T::lit(0.5);
    for (k, b) in spec.structures.iter().enumerate() {
        for (idx, value) in data.iter_mut().enumerate() {
            let prof = blob_profile(b, &grid.position_of(idx));
            *value += b.intensity * prof;
            if prof >= half && b.intensity > winner[idx] {
                winner[idx] = b.intensity;
                labels[idx] = (k + 1) as u16;
            }
        }
    }
    Ok((Volume3::new(grid.clone(), data)?, LabelVolume::new(grid.clone(), labels)?))
}

/// Multiplicative factor `1 + a · exp(−‖x − c‖² / (2σ_b²))`.
pub fn bias_factor<T: Real>(grid: &Grid<T>, amplitude: T, width: T, center: &Vector3<T>) -> Result<Volume3<T>> {
    if amplitude < T::zero() || !(width > T::zero()) {
        return Err(Error::InvalidInput("bias amplitude must be ≥ 0 and width > 0".into()));
    }
    let two = T::lit(2.0);
    Volume3::from_fn(grid.clone(), |p| T::one() + amplitude * (-(p - center).norm_squared() / (two * width * width)).exp())
}

pub fn inject_bias<T: Real>(vol: &Volume3<T>, amplitude: T, width: T, center: &Vector3<T>) -> Result<Volume3<T>> {
    vol.zip_map(&bias_factor(vol.grid(), amplitude, width, center)?, |v, f| v * f)
}

/// Adds seeded i.i.d. `N(0, σ²)` noise.
pub fn add_noise<T: Real>(vol: &Volume3<T>, sigma: T, seed: u64) -> Result<Volume3<T>> {
    if !(sigma >= T::zero()) {
        return Err(Error::InvalidInput("noise sigma must be non-negative".into()));
    }
    if sigma == T::zero() {
        return Ok(vol.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = vol
        .data()
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + sigma * T::lit(z)
        })
        .collect();
    Volume3::new(vol.grid().clone(), data)
}

/// Largest lattice sampled through a dense eigendecomposition; bigger Gram
/// matrices use a Chebyshev expansion of the square root.
const DENSE_SQRT_LIMIT: usize = 2048;
const CHEBYSHEV_DEGREE: usize = 96;

enum GramRoot<T: Real> {
    Dense(DMatrix<T>),
    Chebyshev { gram: GramMatrix<T>, coeffs: Vec<T>, scale: T },
}

impl<T: Real> GramRoot<T> {
    fn new(gram: &GramMatrix<T>) -> Self {
        if gram.dim() <= DENSE_SQRT_LIMIT {
            let eig = SymmetricEigen::new(gram.to_dense());
            let sqrt = eig.eigenvalues.map(|l| if l > T::zero() { l.sqrt() } else { T::zero() });
            let root = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt) * eig.eigenvectors.transpose();
            return Self::Dense(root);
        }
        // Gershgorin bound on the spectrum
        let lmax = (0..gram.dim())
            .map(|i| gram.row(i).fold(T::zero(), |acc, (_, v)| acc + v.abs()))
            .fold(T::zero(), |m, v| m.max(v));
        let n = CHEBYSHEV_DEGREE;
        let pi = std::f64::consts::PI;
        let coeffs = (0..n)
            .map(|k| {
                let s: f64 = (0..n)
                    .map(|j| {
                        let theta = pi * (j as f64 + 0.5) / n as f64;
                        let x = (theta.cos() + 1.0) / 2.0;
                        x.sqrt() * (k as f64 * theta).cos()
                    })
                    .sum();
                T::lit(2.0 * s / n as f64)
            })
            .collect();
        Self::Chebyshev { gram: gram.clone(), coeffs, scale: lmax.sqrt() }
    }

    fn apply(&self, z: &[T]) -> Vec<T> {
        match self {
            Self::Dense(root) => (root * DVector::from_column_slice(z)).as_slice().to_vec(),
            Self::Chebyshev { gram, coeffs, scale } => {
                // √G = √λmax · √(B) with B = G/λmax ∈ [0,1], t = 2B − 1
                let lmax = *scale * *scale;
                let apply_t = |v: &[T]| -> Vec<T> {
                    gram.mul_vec(v).iter().zip(v).map(|(g, x)| T::lit(2.0) * *g / lmax - *x).collect()
                };
                // Clenshaw recurrence
                let n = z.len();
                let mut b1 = vec![T::zero(); n];
                let mut b2 = vec![T::zero(); n];
                for &c in coeffs.iter().skip(1).rev() {
                    let tb = apply_t(&b1);
                    let b0: Vec<T> = (0..n).map(|i| T::lit(2.0) * tb[i] - b2[i] + c * z[i]).collect();
                    b2 = b1;
                    b1 = b0;
                }
                let tb = apply_t(&b1);
                (0..n).map(|i| (tb[i] - b2[i] + coeffs[0] * z[i] / T::lit(2.0)) * *scale).collect()
            }
        }
    }
}

/// Draws `w^m = λ_m A_m z` with `A_m` a symmetric square root of `Gram_m`,
/// so that `w^m ∼ N(0, λ_m² Gram_m)` per spatial axis.
pub struct PriorSampler<T: Real> {
    roots: Vec<GramRoot<T>>,
}

impl<T: Real> PriorSampler<T> {
    pub fn new(bundle: &KernelBundle<T>) -> Self {
        Self { roots: bundle.levels().iter().map(|l| GramRoot::new(&l.gram)).collect() }
    }

    pub fn from_grams(grams: &[GramMatrix<T>]) -> Self {
        Self { roots: grams.iter().map(GramRoot::new).collect() }
    }

    pub fn draw<R: Rng>(&self, lambda: &[T], rng: &mut R) -> Result<KernelBundleParams<T>> {
        if lambda.len() != self.roots.len() || lambda.iter().any(|&l| !(l >= T::zero())) {
            return Err(Error::InvalidInput("one non-negative amplitude per level required".into()));
        }
        let coeffs = self
            .roots
            .iter()
            .zip(lambda)
            .map(|(root, &l)| {
                let n = match root {
                    GramRoot::Dense(m) => m.nrows(),
                    GramRoot::Chebyshev { gram, .. } => gram.dim(),
                };
                let mut out = vec![Vector3::zeros(); n];
                for a in 0..3 {
                    let z: Vec<T> = (0..n).map(|_| T::lit(StandardNormal.sample(&mut *rng))).collect();
                    if l == T::zero() {
                        continue;
                    }
                    for (o, v) in out.iter_mut().zip(root.apply(&z)) {
                        o[a] = v * l;
                    }
                }
                out
            })
            .collect();
        Ok(KernelBundleParams { coeffs })
    }
}

/// One seeded draw from the deformation prior.
pub fn draw_deformation<T: Real>(bundle: &KernelBundle<T>, lambda: &[T], seed: u64) -> Result<KernelBundleParams<T>> {
    PriorSampler::new(bundle).draw(lambda, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Bias injected into a subset of the cohort.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasSpec<T: Real> {
    pub amplitude: T,
    pub width: T,
    /// Defaults to the grid center.
    pub center: Option<Vector3<T>>,
    /// Number of images, counted from the first, that receive the bias.
    pub images: usize,
}

#[derive(Clone, Debug)]
pub struct CohortSpec<T: Real> {
    pub phantom: PhantomSpec<T>,
    pub size: usize,
    pub level_spacings: Vec<T>,
    pub support_multiplier: T,
    /// Prior amplitude per level for the deformation draws.
    pub lambda: Vec<T>,
    pub euler_steps: usize,
    pub noise_sigma: T,
    pub bias: Option<BiasSpec<T>>,
    /// Subtract the cohort mean from the deformation draws, so the generating
    /// template sits in the cohort's average frame.
    pub center_deformations: bool,
    pub seed: u64,
}

impl<T: Real> CohortSpec<T> {
    pub fn new(phantom: PhantomSpec<T>, size: usize, seed: u64) -> Self {
        Self {
            phantom,
            size,
            level_spacings: vec![T::lit(20.0), T::lit(10.0), T::lit(6.0)],
            support_multiplier: T::lit(4.0),
            lambda: vec![T::zero(); 3],
            euler_steps: 16,
            noise_sigma: T::zero(),
            bias: None,
            center_deformations: false,
            seed,
        }
    }
}

/// Ground truth and observation of one synthetic subject.
pub struct Subject<T: Real> {
    pub seed: u64,
    pub w: KernelBundleParams<T>,
    /// `Exp(v(w)) − Id`
    pub displacement: DisplacementField<T>,
    /// Template warped into subject space.
    pub clean: Volume3<T>,
    pub labels: LabelVolume<T>,
    /// Additive equivalent of the multiplicative bias, `clean · (factor − 1)`.
    pub bias: Volume3<T>,
    pub observed: Volume3<T>,
}

pub struct Cohort<T: Real> {
    pub template: Volume3<T>,
    pub template_labels: LabelVolume<T>,
    pub subjects: Vec<Subject<T>>,
}

/// Generates `size` subjects: phantom → warp by a prior draw → bias → noise.
pub fn simulate_cohort<T: Real>(spec: &CohortSpec<T>) -> Result<Cohort<T>> {
    let (template, template_labels) = make_phantom(&spec.phantom)?;
    let grid = spec.phantom.grid.clone();
    let bundle = KernelBundle::new(&grid, &spec.level_spacings, spec.support_multiplier)?;
    if spec.lambda.len() != bundle.n_levels() {
        return Err(Error::InvalidInput("one deformation amplitude per level required".into()));
    }
    let deform = spec.lambda.iter().any(|&l| l > T::zero());
    let sampler = deform.then(|| PriorSampler::new(&bundle));
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let ext = grid.extent();
    let mid = Vector3::new(
        grid.origin[0] + ext[0] / T::lit(2.0),
        grid.origin[1] + ext[1] / T::lit(2.0),
        grid.origin[2] + ext[2] / T::lit(2.0),
    );

    let mut draws = (0..spec.size)
        .map(|_| {
            let seed: u64 = master.random();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = match &sampler {
                Some(s) => s.draw(&spec.lambda, &mut rng)?,
                None => KernelBundleParams::zeros(&bundle),
            };
            Ok((seed, rng, w))
        })
        .collect::<Result<Vec<_>>>()?;
    if spec.center_deformations && spec.size > 0 {
        let mut mean = KernelBundleParams::zeros(&bundle);
        let k = T::from_count(spec.size);
        for (_, _, w) in &draws {
            for (m, c) in mean.coeffs.iter_mut().zip(&w.coeffs) {
                for (a, b) in m.iter_mut().zip(c) {
                    *a += b / k;
                }
            }
        }
        for (_, _, w) in draws.iter_mut() {
            for (c, m) in w.coeffs.iter_mut().zip(&mean.coeffs) {
                for (a, b) in c.iter_mut().zip(m) {
                    *a -= b;
                }
            }
        }
    }

    let subjects = draws
        .into_iter()
        .enumerate()
        .map(|(i, (seed, mut rng, w))| {
            let displacement = exp_forward(&bundle, &w, &bundle.all_levels(), spec.euler_steps)?;
            let clean = warp(&template, &displacement)?;
            let labels = template_labels.warp(&displacement)?;
            let biased = match &spec.bias {
                Some(b) if i < b.images => inject_bias(&clean, b.amplitude, b.width, &b.center.unwrap_or(mid))?,
                _ => clean.clone(),
            };
            let bias = biased.zip_map(&clean, |a, c| a - c)?;
            let observed = add_noise(&biased, spec.noise_sigma, rng.random())?;
            Ok(Subject { seed, w, displacement, clean, labels, bias, observed })
        })
        .collect::<Result<_>>()?;
    Ok(Cohort { template, template_labels, subjects })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, h: f64) -> Grid<f64> {
        Grid::new([n; 3], [h; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn empty_phantom_is_zero() {
        let (v, l) = make_phantom(&PhantomSpec { grid: grid(5, 1.0), structures: vec![] }).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
        assert!(l.data().iter().all(|&x| x == 0));
    }

    #[test]
    fn blob_peaks_at_center_and_half_max_volume() {
        let g = grid(33, 1.0);
        let r = 5.0;
        let spec = PhantomSpec {
            grid: g.clone(),
            structures: vec![Blob { center: Vector3::new(16.0, 16.0, 16.0), radii: Vector3::new(r, r, r), intensity: 0.8 }],
        };
        let (v, l) = make_phantom(&spec).unwrap();
        let (imax, _) = v.data().iter().enumerate().fold((0, f64::MIN), |b, (i, &x)| if x > b.1 { (i, x) } else { b });
        assert_eq!(imax, g.index(16, 16, 16));
        let count = l.data().iter().filter(|&&x| x == 1).count() as f64;
        let rh = r * (2.0 * 2f64.ln()).sqrt();
        let expected = 4.0 / 3.0 * std::f64::consts::PI * rh.powi(3);
        assert!((count - expected).abs() / expected < 0.15, "{count} vs {expected}");
    }

    #[test]
    fn overlaps_go_to_brightest_structure() {
        let g = grid(9, 1.0);
        let c = Vector3::new(4.0, 4.0, 4.0);
        let spec = PhantomSpec {
            grid: g.clone(),
            structures: vec![
                Blob { center: c, radii: Vector3::new(3.0, 3.0, 3.0), intensity: 0.3 },
                Blob { center: c, radii: Vector3::new(1.0, 1.0, 1.0), intensity: 0.6 },
            ],
        };
        let (_, l) = make_phantom(&spec).unwrap();
        assert_eq!(l.data()[g.index(4, 4, 4)], 2);
        assert_eq!(l.data()[g.index(6, 4, 4)], 1);
        assert!(make_phantom(&PhantomSpec { grid: g, structures: vec![Blob { center: c, radii: c, intensity: 1.5 }] }).is_err());
    }

    #[test]
    fn bias_factor_values() {
        let g = Grid::<f64>::new([61, 1, 1], [1.0; 3], [-30.0, 0.0, 0.0]).unwrap();
        let f = bias_factor(&g, 0.05, 30.0, &Vector3::zeros()).unwrap();
        assert!((f.get(30, 0, 0) - 1.05).abs() < 1e-15);
        assert!((f.get(0, 0, 0) - (1.0 + 0.05 * (-0.5f64).exp())).abs() < 1e-12);
        assert!((f.get(0, 0, 0) - 1.03033).abs() < 1e-5);
        let far = bias_factor(&g, 0.05, 1.0, &Vector3::new(1000.0, 0.0, 0.0)).unwrap();
        assert!(far.data().iter().all(|&x| x == 1.0));
        let vol = Volume3::constant(g.clone(), 2.0);
        let b = inject_bias(&vol, 0.05, 30.0, &Vector3::zeros()).unwrap();
        assert!((b.get(30, 0, 0) - 2.1).abs() < 1e-12);
    }

    #[test]
    fn noise_statistics_and_determinism() {
        let g = grid(64, 1.0);
        let v = Volume3::zeros(g);
        assert_eq!(add_noise(&v, 0.0, 3).unwrap(), v);
        let a = add_noise(&v, 0.1, 3).unwrap();
        assert_eq!(a, add_noise(&v, 0.1, 3).unwrap());
        let n = a.data().len() as f64;
        let mean = a.data().iter().sum::<f64>() / n;
        let var = a.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 0.01).abs() < 0.0005, "{var}");
    }

    #[test]
    fn prior_draws() {
        let g = grid(4, 4.0);
        let bundle = KernelBundle::new(&g, &[8.0], 2.0).unwrap();
        let zero = draw_deformation(&bundle, &[0.0], 1).unwrap();
        assert!(zero.to_flat().iter().all(|&x| x == 0.0));
        assert_eq!(draw_deformation(&bundle, &[1.5], 9).unwrap(), draw_deformation(&bundle, &[1.5], 9).unwrap());

        // 2×2×2 lattice
        let centers: Vec<_> = (0..8)
            .map(|i| Vector3::new((i % 2) as f64 * 10.0, ((i / 2) % 2) as f64 * 10.0, (i / 4) as f64 * 10.0))
            .collect();
        let gram = crate::kernels::gram(&crate::kernels::WendlandKernel::new(30.0).unwrap(), &centers).unwrap();
        let sampler = PriorSampler::from_grams(&[gram.clone()]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lambda = 1.5;
        let draws = 10_000;
        let n = 8;
        let mut cov = DMatrix::<f64>::zeros(n, n);
        for _ in 0..draws {
            let w = sampler.draw(&[lambda], &mut rng).unwrap();
            let x = DVector::from_iterator(n, w.coeffs[0].iter().map(|c| c.x));
            cov += &x * x.transpose();
        }
        cov /= draws as f64;
        let gram = gram.to_dense() * (lambda * lambda);
        for i in 0..n {
            assert!((cov[(i, i)] - gram[(i, i)]).abs() / gram[(i, i)] < 0.05);
        }
    }

    #[test]
    fn chebyshev_root_matches_dense() {
        let g = grid(6, 2.0);
        let bundle = KernelBundle::new(&g, &[4.0], 3.0).unwrap();
        let gram = &bundle.levels()[0].gram;
        let dense = GramRoot::new(gram);
        let lmax = (0..gram.dim()).map(|i| gram.row(i).map(|(_, v)| v.abs()).sum::<f64>()).fold(0.0, f64::max);
        let n = CHEBYSHEV_DEGREE;
        let coeffs = (0..n)
            .map(|k| {
                (0..n)
                    .map(|j| {
                        let th = std::f64::consts::PI * (j as f64 + 0.5) / n as f64;
                        ((th.cos() + 1.0) / 2.0).sqrt() * (k as f64 * th).cos()
                    })
                    .sum::<f64>()
                    * 2.0
                    / n as f64
            })
            .collect();
        let cheb = GramRoot::Chebyshev { gram: gram.clone(), coeffs, scale: lmax.sqrt() };
        let z: Vec<f64> = (0..gram.dim()).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = dense.apply(&z);
        let b = cheb.apply(&z);
        let err = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(err / norm < 2e-2, "{}", err / norm);
    }

    #[test]
    fn degenerate_cohort_is_clean() {
        let g = grid(12, 2.0);
        let mut spec = CohortSpec::new(PhantomSpec::standard(g), 2, 7);
        spec.level_spacings = vec![8.0];
        spec.lambda = vec![0.0];
        let c = simulate_cohort(&spec).unwrap();
        for s in &c.subjects {
            assert_eq!(s.observed, c.template);
            assert!(s.bias.data().iter().all(|&x| x == 0.0));
        }
    }
}

use nalgebra::Vector3;
use templar::deformation::{design_gradient, exp_euler, velocity, KernelBundle};
use templar::kernels::WendlandKernel;
use templar::mixed_model::{estimate_variances, PatchGeometry, VarianceOptions, VarianceParams};
use templar::synth::{simulate_cohort, Blob, CohortSpec, PhantomSpec};
use templar::volume::{warp, Grid};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let edge: usize = args[1].parse().unwrap();
    let lam: Vec<f64> = args[2].split(',').map(|s| s.parse().unwrap()).collect();
    let (n, r, step) = (32usize, 2.5, 9.0);
    let grid = Grid::new([n; 3], [1.0; 3], [0.0; 3]).unwrap();
    let ext = (n - 1) as f64;
    let mid = ext / 2.0;
    let mut structures = vec![Blob { center: Vector3::new(mid, mid, mid), radii: Vector3::repeat(ext / 3.0), intensity: 0.2 }];
    let count = ((ext - 5.0 * r) / step).floor() as usize;
    let off = (ext - count as f64 * step) / 2.0;
    for i in 0..=count { for j in 0..=count { for k in 0..=count {
        structures.push(Blob { center: Vector3::new(off + step * i as f64, off + step * j as f64, off + step * k as f64), radii: Vector3::repeat(r), intensity: 1.0 });
    }}}
    let mut spec = CohortSpec::new(PhantomSpec { grid: grid.clone(), structures }, 8, 81);
    spec.lambda = lam;
    spec.noise_sigma = 0.02;
    spec.center_deformations = true;
    let cohort = simulate_cohort(&spec).unwrap();
    let bundle = KernelBundle::new(&grid, &[20.0, 10.0, 6.0], 4.0).unwrap();
    let geometry = PatchGeometry::new(&grid, edge, &WendlandKernel::new(40.0).unwrap(), &bundle, 8 << 30).unwrap();
    let mut systems = Vec::new();
    for s in &cohort.subjects {
        let v = velocity(&bundle, &s.w, &bundle.all_levels()).unwrap();
        let disp = exp_euler(&v, 16).unwrap();
        let grad = design_gradient(&cohort.template, &disp).unwrap();
        let warped = warp(&cohort.template, &disp).unwrap();
        let res: Vec<f64> = (0..grid.len()).map(|x| s.observed.data()[x] - warped.data()[x] + grad.data()[x].dot(&v.data()[x])).collect();
        systems.extend(geometry.systems(&res, Some(&grad)).unwrap());
    }
    let init = VarianceParams::new(1.0, vec![10.0; 3], 1.0).unwrap();
    let t = std::time::Instant::now();
    let est = estimate_variances(&systems, &init, &VarianceOptions::default()).unwrap();
    println!("edge {edge}: sigma2 {:.3e} lambda {:?} beta {:.3} nll {:.1} evals {} [{:.0?}]", est.params.sigma2, est.params.lambda, est.params.beta, est.nll, est.evals, t.elapsed());
}

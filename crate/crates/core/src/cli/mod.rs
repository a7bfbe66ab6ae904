//! Command-line front end: `simulate`, `estimate`, `recover-bias`, `evaluate`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical
//! failure.

mod config;
mod manifest;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::Config;
pub use manifest::{Manifest, ManifestImage};

use crate::deformation::{KernelBundle, KernelBundleParams};
use crate::error::{Error, Result};
use crate::eval::{bias_rmse, pairwise_overlaps, pearson, rmse, sharpness};
use crate::synth::{simulate_cohort, BiasSpec, CohortSpec, PhantomSpec};
use crate::template::{run_pipeline, update_template, EstimationState};
use crate::volume::{read_labels, read_vector_field, read_volume, write_labels, write_vector_field, write_volume};
use crate::volume::{Grid, LabelVolume, Volume3};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub const MANIFEST: &str = "manifest.txt";
pub const RESOLVED_CONFIG: &str = "config.resolved";

#[derive(Parser, Debug)]
#[command(name = "templar", version, about = "Joint template, deformation and bias-field estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a seeded phantom cohort and its manifest.
    Simulate,
    /// Estimate template, deformations, bias fields and variances.
    Estimate {
        /// Input volumes (overrides `images` and `manifest`).
        images: Vec<PathBuf>,
    },
    /// Same as `estimate`, writing only the bias fields.
    RecoverBias { images: Vec<PathBuf> },
    /// Compare estimation outputs with a simulated cohort's ground truth.
    Evaluate,
}

#[derive(Args, Debug, Default)]
pub struct Overrides {
    /// key = value configuration file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for simulated cohorts.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0: one per core).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Control-point spacings (mm), coarse to fine, e.g. `20,10,6`.
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub levels: Option<String>,
    /// Patch edge length in voxels.
    #[arg(long, global = true)]
    pub patch_edge: Option<usize>,
    /// Euler steps for the velocity exponential.
    #[arg(long, global = true)]
    pub euler_steps: Option<usize>,
    /// Maximum outer iterations.
    #[arg(long, global = true)]
    pub max_outer: Option<usize>,
    /// Scalar output format: `nii` or `af3d`.
    #[arg(long, global = true)]
    pub format: Option<String>,
    /// Simulation manifest (input images and ground truth).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Directory holding `estimate` outputs, for `evaluate`.
    #[arg(long, global = true)]
    pub estimate_dir: Option<PathBuf>,
    /// Log progress and write per-iteration registration traces.
    #[arg(long, global = true)]
    pub verbose: bool,
}

impl Overrides {
    fn apply(&self, c: &mut Config) -> Result<()> {
        if let Some(v) = &self.out {
            c.out = v.clone();
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.workers {
            c.workers = v;
        }
        if let Some(v) = &self.levels {
            c.set("levels", v)?;
        }
        if let Some(v) = self.patch_edge {
            c.patch_edge = v;
        }
        if let Some(v) = self.euler_steps {
            c.euler_steps = v;
        }
        if let Some(v) = self.max_outer {
            c.max_outer = v;
        }
        if let Some(v) = &self.format {
            c.set("format", v)?;
        }
        if let Some(v) = &self.manifest {
            c.manifest = Some(v.clone());
        }
        if let Some(v) = &self.estimate_dir {
            c.estimate_dir = Some(v.clone());
        }
        if self.verbose {
            c.verbose = true;
        }
        Ok(())
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) | Error::GridMismatch(_) => EXIT_CONFIG,
        e if e.is_io() => EXIT_IO,
        _ => EXIT_NUMERICAL,
    }
}

/// A failure tagged with the stage it happened in.
#[derive(Debug)]
pub struct Failure {
    pub stage: &'static str,
    pub error: Error,
}

impl Failure {
    pub fn code(&self) -> i32 {
        exit_code(&self.error)
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.stage, self.error)
    }
}

trait Stage<V> {
    fn stage(self, stage: &'static str) -> std::result::Result<V, Failure>;
}

impl<V> Stage<V> for Result<V> {
    fn stage(self, stage: &'static str) -> std::result::Result<V, Failure> {
        self.map_err(|error| Failure { stage, error })
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Parses arguments, runs the command, and returns the process exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {f}");
            f.code()
        }
    }
}

/// Resolves the configuration (file, then flags) and runs the command.
pub fn execute(cli: &Cli) -> Outcome {
    let mut config = match &cli.overrides.config {
        Some(p) => Config::from_file(p).stage("reading configuration")?,
        None => Config::default(),
    };
    cli.overrides.apply(&mut config).stage("reading configuration")?;
    match &cli.command {
        Command::Estimate { images } | Command::RecoverBias { images } if !images.is_empty() => {
            config.images = images.clone();
            config.manifest = None;
        }
        _ => {}
    }
    config.validate().stage("validating configuration")?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
        .stage("starting workers")?;
    pool.install(|| match &cli.command {
        Command::Simulate => cmd_simulate(&config),
        Command::Estimate { .. } => cmd_estimate(&config, false),
        Command::RecoverBias { .. } => cmd_estimate(&config, true),
        Command::Evaluate => cmd_evaluate(&config),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes rows as RFC-4180 CSV.
fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    };
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_snapshot(config: &Config) -> Result<()> {
    create_dir(&config.out)?;
    write_text(&config.out.join(RESOLVED_CONFIG), &config.to_text())
}

fn subject_file(role: &str, i: usize, ext: &str) -> String {
    format!("{role}_{i:03}.{ext}")
}

pub fn cmd_simulate(config: &Config) -> Outcome {
    let grid = Grid::new(config.dims, config.spacing, [0.0; 3]).stage("simulation setup")?;
    let mut spec = CohortSpec::new(PhantomSpec::standard(grid), config.cohort_size, config.seed);
    spec.level_spacings = config.sim_levels.clone();
    spec.support_multiplier = config.support_multiplier;
    spec.lambda = config.sim_lambda.clone();
    spec.euler_steps = config.euler_steps;
    spec.noise_sigma = config.noise_sigma;
    spec.bias = (config.bias_amplitude != 0.0).then(|| BiasSpec {
        amplitude: config.bias_amplitude,
        width: config.bias_width,
        center: None,
        images: config.bias_images,
    });
    let cohort = simulate_cohort(&spec).stage("simulation")?;

    write_snapshot(config).stage("writing outputs")?;
    let out = &config.out;
    let ext = config.format.extension();
    let mut manifest = Manifest {
        template: format!("template.{ext}").into(),
        template_labels: "template_labels.nii".into(),
        images: Vec::new(),
    };
    (|| {
        write_volume(&cohort.template, out.join(&manifest.template))?;
        write_labels(&cohort.template_labels, out.join(&manifest.template_labels))?;
        for (i, s) in cohort.subjects.iter().enumerate() {
            let m = ManifestImage {
                index: i,
                seed: s.seed,
                clean: subject_file("clean", i, ext).into(),
                deformation: subject_file("displacement", i, "af3d").into(),
                bias: subject_file("bias", i, ext).into(),
                observed: subject_file("observed", i, ext).into(),
                labels: subject_file("labels", i, "nii").into(),
            };
            write_volume(&s.observed, out.join(&m.observed))?;
            write_volume(&s.clean, out.join(&m.clean))?;
            write_labels(&s.labels, out.join(&m.labels))?;
            write_volume(&s.bias, out.join(&m.bias))?;
            write_vector_field(&s.displacement, out.join(&m.deformation))?;
            manifest.images.push(m);
        }
        write_text(&out.join(MANIFEST), &manifest.to_text())
    })()
    .stage("writing outputs")?;
    log::info!("simulated {} subjects into {}", cohort.subjects.len(), out.display());
    Ok(())
}

/// Reads the inputs and checks that they share one grid.
fn read_inputs(config: &Config) -> Result<(Vec<PathBuf>, Vec<Volume3<f64>>)> {
    let paths = if !config.images.is_empty() {
        config.images.clone()
    } else if let Some(m) = &config.manifest {
        Manifest::read(m)?.images.into_iter().map(|m| m.observed).collect()
    } else {
        return Err(Error::Config("no input images (give paths, `images`, or `manifest`)".into()));
    };
    if paths.len() < 2 {
        return Err(Error::Config("need at least 2 images".into()));
    }
    let images: Vec<Volume3<f64>> = paths.iter().map(read_volume).collect::<Result<_>>()?;
    for (p, img) in paths.iter().zip(&images).skip(1) {
        if !img.grid().matches(images[0].grid()) {
            return Err(Error::GridMismatch(format!(
                "{} and {} are on different grids",
                paths[0].display(),
                p.display()
            )));
        }
    }
    Ok((paths, images))
}

pub fn cmd_estimate(config: &Config, bias_only: bool) -> Outcome {
    let (_, images) = read_inputs(config).stage("reading inputs")?;
    write_snapshot(config).stage("writing outputs")?;
    let state = run_pipeline(&images, &config.pipeline()).stage("estimation")?;
    write_estimate(config, &state, bias_only).stage("writing outputs")
}

fn fmt(x: f64) -> String {
    x.to_string()
}

fn write_estimate(config: &Config, state: &EstimationState<f64>, bias_only: bool) -> Result<()> {
    let out = &config.out;
    let ext = config.format.extension();
    for (i, b) in state.bias.iter().enumerate() {
        write_volume(b, out.join(subject_file("bias", i, ext)))?;
    }
    if bias_only {
        return Ok(());
    }
    write_volume(&state.template, out.join(format!("template.{ext}")))?;
    for i in 0..state.w.len() {
        write_vector_field(&state.forward_displacement(i)?, out.join(subject_file("displacement", i, "af3d")))?;
        write_vector_field(&state.inverse_displacement(i)?, out.join(subject_file("inverse", i, "af3d")))?;
    }

    let n_levels = state.variance.lambda.len();
    let mut header = vec!["iteration".to_string(), "nll".into(), "sigma2".into(), "beta".into()];
    header.extend((1..=n_levels).map(|m| format!("lambda_{m}")));
    let rows: Vec<Vec<String>> = state
        .history
        .iter()
        .map(|r| {
            let mut row = vec![r.iteration.to_string(), fmt(r.nll), fmt(r.params.sigma2), fmt(r.params.beta)];
            row.extend(r.params.lambda.iter().map(|&l| fmt(l)));
            row
        })
        .collect();
    write_csv(&out.join("iterations.csv"), &header.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?;

    let v = &state.variance;
    let mut rows = vec![
        vec!["sigma2".to_string(), fmt(v.sigma2)],
        vec!["beta".to_string(), fmt(v.beta)],
    ];
    rows.extend(v.lambda.iter().enumerate().map(|(m, &l)| vec![format!("lambda_{}", m + 1), fmt(l)]));
    if let Some(last) = state.history.last() {
        rows.push(vec!["nll".into(), fmt(last.nll)]);
    }
    rows.push(vec!["outer_iterations".into(), state.iterations.to_string()]);
    rows.push(vec!["converged".into(), state.converged.to_string()]);
    write_csv(&out.join("variance.csv"), &["parameter", "value"], &rows)?;

    if config.verbose {
        let rows: Vec<Vec<String>> = state
            .traces
            .iter()
            .enumerate()
            .flat_map(|(i, t)| {
                t.iter().map(move |r| {
                    vec![i.to_string(), r.iteration.to_string(), fmt(r.value), fmt(r.grad_norm), fmt(r.step)]
                })
            })
            .collect();
        write_csv(&out.join("trace.csv"), &["image", "iteration", "posterior", "grad_norm", "step"], &rows)?;
    }
    Ok(())
}

pub fn cmd_evaluate(config: &Config) -> Outcome {
    let manifest = config
        .manifest
        .clone()
        .ok_or_else(|| Error::Config("evaluate needs `manifest`".into()))
        .stage("reading configuration")?;
    let est = config
        .estimate_dir
        .clone()
        .ok_or_else(|| Error::Config("evaluate needs `estimate_dir`".into()))
        .stage("reading configuration")?;
    let entries = Manifest::read(&manifest).stage("reading manifest")?;
    let truth = (|| {
        let template: Volume3<f64> = read_volume(&entries.template)?;
        let observed: Vec<Volume3<f64>> = entries.images.iter().map(|m| read_volume(&m.observed)).collect::<Result<_>>()?;
        let labels: Vec<LabelVolume<f64>> = entries.images.iter().map(|m| read_labels(&m.labels)).collect::<Result<_>>()?;
        let bias: Vec<Volume3<f64>> = entries.images.iter().map(|m| read_volume(&m.bias)).collect::<Result<_>>()?;
        Ok((template, observed, labels, bias))
    })();
    let (template, observed, labels, bias) = truth.stage("reading ground truth")?;
    let k = observed.len();

    let estimated = (|| {
        let ext = config.format.extension();
        let template: Volume3<f64> = read_volume(est.join(format!("template.{ext}")))?;
        let inverse = (0..k)
            .map(|i| read_vector_field::<f64>(est.join(subject_file("inverse", i, "af3d"))))
            .collect::<Result<Vec<_>>>()?;
        let bias = (0..k).map(|i| read_volume(est.join(subject_file("bias", i, ext)))).collect::<Result<Vec<_>>>()?;
        Ok((template, inverse, bias))
    })();
    let (est_template, inverse, est_bias) = estimated.stage("reading estimates")?;

    let report = (|| {
        create_dir(&config.out)?;
        write_text(&config.out.join(RESOLVED_CONFIG), &config.to_text())?;
        let ids: Vec<u16> = labels.iter().flat_map(|l| l.labels()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let mapped: Vec<LabelVolume<f64>> = labels.iter().zip(&inverse).map(|(l, d)| l.warp(d)).collect::<Result<_>>()?;
        let mut rows = Vec::new();
        for (stage, maps) in [("pre", &labels), ("post", &mapped)] {
            let r = pairwise_overlaps(maps, &ids)?;
            rows.extend(r.rows.iter().map(|o| {
                vec![
                    stage.to_string(),
                    o.source.to_string(),
                    o.target.to_string(),
                    o.label.to_string(),
                    fmt(o.dice),
                    fmt(o.target_overlap),
                ]
            }));
        }
        write_csv(
            &config.out.join("overlap.csv"),
            &["stage", "source", "target", "label", "dice", "target_overlap"],
            &rows,
        )?;

        let mut rows = Vec::new();
        for i in 0..k {
            let mask = labels[i].foreground();
            let zero = Volume3::zeros(bias[i].grid().clone());
            let rec = bias_rmse(&est_bias[i], &bias[i], &mask)?;
            let base = bias_rmse(&zero, &bias[i], &mask)?;
            let r = pearson(&est_bias[i], &bias[i], &mask).map(fmt).unwrap_or_default();
            rows.push(vec![i.to_string(), fmt(rec), fmt(base), r]);
        }
        write_csv(&config.out.join("bias.csv"), &["subject", "bias_rmse", "baseline_rmse", "pearson"], &rows)?;

        let grid = template.grid().clone();
        let bundle = KernelBundle::new(&grid, &[], 1.0)?;
        let zeros: Vec<KernelBundleParams<f64>> = (0..k).map(|_| KernelBundleParams::zeros(&bundle)).collect();
        let mean = update_template(&observed, &zeros, &bundle, 1, None)?;
        let rows = vec![
            vec!["template".to_string(), fmt(sharpness(&est_template)?), fmt(rmse(&est_template, &template)?)],
            vec!["unaligned_mean".to_string(), fmt(sharpness(&mean)?), fmt(rmse(&mean, &template)?)],
            vec!["truth".to_string(), fmt(sharpness(&template)?), fmt(0.0)],
        ];
        write_csv(&config.out.join("sharpness.csv"), &["volume", "sharpness", "rmse_to_truth"], &rows)
    })();
    report.stage("evaluation")?;
    Ok(())
}

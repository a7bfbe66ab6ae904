//! Plain-text `key = value` configuration with command-line overrides.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mixed_model::VarianceOptions;
use crate::optim::NelderMeadOptions;
use crate::registration::RegistrationOptions;
use crate::template::PipelineConfig;
use crate::volume::VolumeFormat;

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub images: Vec<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub out: PathBuf,
    /// Directory holding `estimate` outputs, read by `evaluate`.
    pub estimate_dir: Option<PathBuf>,
    pub seed: u64,
    /// Worker threads; 0 means all available cores.
    pub workers: usize,
    pub verbose: bool,
    /// File format of written scalar volumes; vector fields are always AF3D.
    pub format: VolumeFormat,

    pub levels: Vec<f64>,
    pub support_multiplier: f64,
    pub bias_support: f64,
    pub patch_edge: usize,
    pub euler_steps: usize,
    pub max_outer: usize,
    pub outer_tol: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
    pub simplex_tol: f64,
    pub simplex_max_evals: usize,
    pub init_lambda: f64,
    pub init_beta: f64,
    pub bias_corrected_template: bool,
    pub memory_limit_mb: usize,

    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub cohort_size: usize,
    pub noise_sigma: f64,
    /// Bundle used to draw ground-truth deformations in `simulate`.
    pub sim_levels: Vec<f64>,
    pub sim_lambda: Vec<f64>,
    pub bias_amplitude: f64,
    pub bias_width: f64,
    /// Number of subjects (the first ones) receiving the multiplicative bias.
    pub bias_images: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            images: Vec::new(),
            manifest: None,
            out: PathBuf::from("out"),
            estimate_dir: None,
            seed: 0,
            workers: 0,
            verbose: false,
            format: VolumeFormat::Nifti,
            levels: vec![20.0, 10.0, 6.0],
            support_multiplier: 4.0,
            bias_support: 40.0,
            patch_edge: 16,
            euler_steps: 16,
            max_outer: 10,
            outer_tol: 1e-4,
            max_iter: 100,
            grad_tol: 1e-5,
            step_tol: 1e-8,
            simplex_tol: 1e-3,
            simplex_max_evals: 200,
            init_lambda: 10.0,
            init_beta: 1.0,
            bias_corrected_template: false,
            memory_limit_mb: 4096,
            dims: [64; 3],
            spacing: [2.0; 3],
            cohort_size: 5,
            noise_sigma: 0.01,
            sim_levels: vec![20.0, 10.0, 6.0],
            sim_lambda: vec![0.0; 3],
            bias_amplitude: 0.05,
            bias_width: 30.0,
            bias_images: 1,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    let value = value.trim();
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn optional_path(value: &str) -> Option<PathBuf> {
    Some(value.trim()).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected true or false, got '{other}'"))),
    }
}

/// Accepts either one value for all axes or three comma-separated values.
fn parse_triple<V: FromStr + Copy>(key: &str, value: &str) -> Result<[V; 3]> {
    let v: Vec<V> = parse_list(key, value)?;
    match v.as_slice() {
        [a] => Ok([*a; 3]),
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(Error::Config(format!("{key}: expected 1 or 3 values"))),
    }
}

fn join<V: ToString>(v: &[V]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "images" => {
                self.images = value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect()
            }
            "manifest" => self.manifest = optional_path(value),
            "out" => self.out = PathBuf::from(value.trim()),
            "estimate_dir" => self.estimate_dir = optional_path(value),
            "seed" => self.seed = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "verbose" => self.verbose = parse_bool(key, value)?,
            "format" => {
                self.format = match value.trim() {
                    "nii" => VolumeFormat::Nifti,
                    "af3d" => VolumeFormat::Raw,
                    other => return Err(Error::Config(format!("{key}: expected nii or af3d, got '{other}'"))),
                }
            }
            "levels" => self.levels = parse_list(key, value)?,
            "support_multiplier" => self.support_multiplier = parse(key, value)?,
            "bias_support" => self.bias_support = parse(key, value)?,
            "patch_edge" => self.patch_edge = parse(key, value)?,
            "euler_steps" => self.euler_steps = parse(key, value)?,
            "max_outer" => self.max_outer = parse(key, value)?,
            "outer_tol" => self.outer_tol = parse(key, value)?,
            "max_iter" => self.max_iter = parse(key, value)?,
            "grad_tol" => self.grad_tol = parse(key, value)?,
            "step_tol" => self.step_tol = parse(key, value)?,
            "simplex_tol" => self.simplex_tol = parse(key, value)?,
            "simplex_max_evals" => self.simplex_max_evals = parse(key, value)?,
            "init_lambda" => self.init_lambda = parse(key, value)?,
            "init_beta" => self.init_beta = parse(key, value)?,
            "bias_corrected_template" => self.bias_corrected_template = parse_bool(key, value)?,
            "memory_limit_mb" => self.memory_limit_mb = parse(key, value)?,
            "dims" => self.dims = parse_triple(key, value)?,
            "spacing" => self.spacing = parse_triple(key, value)?,
            "cohort_size" => self.cohort_size = parse(key, value)?,
            "noise_sigma" => self.noise_sigma = parse(key, value)?,
            "sim_levels" => self.sim_levels = parse_list(key, value)?,
            "sim_lambda" => self.sim_lambda = parse_list(key, value)?,
            "bias_amplitude" => self.bias_amplitude = parse(key, value)?,
            "bias_width" => self.bias_width = parse(key, value)?,
            "bias_images" => self.bias_images = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key '{key}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key = value", n + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("{origin}:{}: {}", n + 1, strip(&e))))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::default();
        c.apply_text(&text, &path.display().to_string())?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.levels.windows(2).any(|w| !(w[0] > w[1])) || self.sim_levels.windows(2).any(|w| !(w[0] > w[1])) {
            return bad("level spacings must be strictly decreasing");
        }
        if self.levels.iter().chain(&self.sim_levels).any(|&s| !(s > 0.0)) {
            return bad("level spacings must be positive");
        }
        let tolerances = [self.outer_tol, self.grad_tol, self.step_tol, self.simplex_tol];
        if tolerances.iter().any(|&t| !(t > 0.0)) {
            return bad("all tolerances must be positive");
        }
        if self.sim_lambda.len() != self.sim_levels.len() {
            return bad("sim_lambda needs one amplitude per sim_levels entry");
        }
        if self.sim_lambda.iter().any(|&l| !(l >= 0.0)) || !(self.noise_sigma >= 0.0) {
            return bad("simulation amplitudes and noise must be non-negative");
        }
        if self.dims.contains(&0) || self.spacing.iter().any(|&s| !(s > 0.0)) {
            return bad("dims and spacing must be positive");
        }
        self.pipeline().validate()
    }

    pub fn pipeline(&self) -> PipelineConfig<f64> {
        PipelineConfig {
            level_spacings: self.levels.clone(),
            support_multiplier: self.support_multiplier,
            bias_support: self.bias_support,
            patch_edge: self.patch_edge,
            max_outer: self.max_outer,
            outer_tol: self.outer_tol,
            registration: RegistrationOptions {
                max_iter: self.max_iter,
                grad_tol: self.grad_tol,
                step_tol: self.step_tol,
                euler_steps: self.euler_steps,
                ..RegistrationOptions::default()
            },
            variance: VarianceOptions {
                simplex: NelderMeadOptions {
                    diameter_tol: self.simplex_tol,
                    max_evals: self.simplex_max_evals,
                    ..NelderMeadOptions::default()
                },
                ..VarianceOptions::default()
            },
            init_lambda: self.init_lambda,
            init_beta: self.init_beta,
            bias_corrected_template: self.bias_corrected_template,
            covariance_memory_limit: self.memory_limit_mb.saturating_mul(1 << 20),
        }
    }

    /// Every key with its resolved value, in a form `apply_text` reads back.
    pub fn to_text(&self) -> String {
        let paths = |v: &[PathBuf]| v.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",");
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("images", paths(&self.images));
        kv("manifest", opt(&self.manifest));
        kv("out", self.out.display().to_string());
        kv("estimate_dir", opt(&self.estimate_dir));
        kv("seed", self.seed.to_string());
        kv("workers", self.workers.to_string());
        kv("verbose", self.verbose.to_string());
        kv("format", self.format.extension().to_string());
        kv("levels", join(&self.levels));
        kv("support_multiplier", self.support_multiplier.to_string());
        kv("bias_support", self.bias_support.to_string());
        kv("patch_edge", self.patch_edge.to_string());
        kv("euler_steps", self.euler_steps.to_string());
        kv("max_outer", self.max_outer.to_string());
        kv("outer_tol", self.outer_tol.to_string());
        kv("max_iter", self.max_iter.to_string());
        kv("grad_tol", self.grad_tol.to_string());
        kv("step_tol", self.step_tol.to_string());
        kv("simplex_tol", self.simplex_tol.to_string());
        kv("simplex_max_evals", self.simplex_max_evals.to_string());
        kv("init_lambda", self.init_lambda.to_string());
        kv("init_beta", self.init_beta.to_string());
        kv("bias_corrected_template", self.bias_corrected_template.to_string());
        kv("memory_limit_mb", self.memory_limit_mb.to_string());
        kv("dims", join(&self.dims));
        kv("spacing", join(&self.spacing));
        kv("cohort_size", self.cohort_size.to_string());
        kv("noise_sigma", self.noise_sigma.to_string());
        kv("sim_levels", join(&self.sim_levels));
        kv("sim_lambda", join(&self.sim_lambda));
        kv("bias_amplitude", self.bias_amplitude.to_string());
        kv("bias_width", self.bias_width.to_string());
        kv("bias_images", self.bias_images.to_string());
        s
    }
}

fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

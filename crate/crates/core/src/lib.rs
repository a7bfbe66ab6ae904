//! Joint estimation of an atlas template, per-image diffeomorphic deformations
//! and smooth bias fields, using a patchwise linearized mixed-effects model.
//!
//! Every numeric type is generic over [`Real`] (`f32` or `f64`). The aliases
//! below fix the scalar to `f64`; the `*32` variants use `f32`.

pub mod cli;
pub mod deformation;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod mixed_model;
pub mod optim;
pub mod registration;
pub mod scalar;
pub mod synth;
pub mod template;
pub mod volume;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Grid = volume::Grid<f64>;
pub type Volume = volume::Volume3<f64>;
pub type Labels = volume::LabelVolume<f64>;
pub type VectorField = volume::VectorField<f64>;
pub type KernelBundle = deformation::KernelBundle<f64>;
pub type KernelBundleParams = deformation::KernelBundleParams<f64>;
pub type VarianceParams = mixed_model::VarianceParams<f64>;
pub type PipelineConfig = template::PipelineConfig<f64>;
pub type EstimationState = template::EstimationState<f64>;

pub type Grid32 = volume::Grid<f32>;
pub type Volume32 = volume::Volume3<f32>;
pub type Labels32 = volume::LabelVolume<f32>;
pub type VectorField32 = volume::VectorField<f32>;
pub type KernelBundle32 = deformation::KernelBundle<f32>;
pub type KernelBundleParams32 = deformation::KernelBundleParams<f32>;
pub type VarianceParams32 = mixed_model::VarianceParams<f32>;
pub type PipelineConfig32 = template::PipelineConfig<f32>;
pub type EstimationState32 = template::EstimationState<f32>;

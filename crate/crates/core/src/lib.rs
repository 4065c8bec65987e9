//! Architecture-level feasibility analysis and patch attacks for
//! semantic-segmentation networks.
//!
//! The crate has two halves. The analytic half ([`archspec`], [`regions`],
//! [`rfield`]) bounds how many distinct output maps a patch of a given size
//! can reach, and from that the largest output area over which a patch could
//! produce arbitrary class maps. The empirical half ([`segnet`], [`attack`],
//! [`geometry`]) trains a small U-Net on procedurally generated shapes and
//! runs momentum-iterative patch attacks against it, so the measured area of
//! effect can be compared with the bound ([`report`]).
//!
//! Numeric code in the engine is generic over [`Scalar`]; the aliases below
//! fix the two precisions the rest of the tooling uses.

pub mod archspec;
pub mod attack;
pub mod geometry;
pub mod regions;
pub mod report;
pub mod rfield;
mod scalar;
pub mod segnet;

pub use scalar::Scalar;

/// Engine tensor at the default training precision.
pub type Tensor32 = segnet::Tensor<f32>;
/// Engine tensor used for gradient checks.
pub type Tensor64 = segnet::Tensor<f64>;
pub type ModelParams32 = segnet::ModelParams<f32>;
pub type ModelParams64 = segnet::ModelParams<f64>;
pub type Network32 = segnet::Network<f32>;
pub type Network64 = segnet::Network<f64>;
/// Exact rational used for receptive-field bookkeeping.
pub type Rational = num_rational::Ratio<i64>;

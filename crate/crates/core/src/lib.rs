//! Compare transformer attention with human eye-movement data.
//!
//! The pipelines are generic over the scalar type ([`Real`], implemented for
//! `f32` and `f64`); the `*64` aliases below fix it to `f64`, which is what
//! the command-line tool uses.

pub mod align;
pub mod corpus_io;
pub mod divergence;
pub mod error;
pub mod matrix;
pub mod num;
pub mod regression;
pub mod resemblance;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use num::Real;

pub type Matrix64 = matrix::Matrix<f64>;
pub type DesignMatrix64 = regression::DesignMatrix<f64>;
pub type FitResult64 = regression::FitResult<f64>;
pub type LeastSquares64 = regression::LeastSquares<f64>;
pub type DivergenceReport64 = divergence::DivergenceReport<f64>;
pub type SensitivityReport64 = divergence::SensitivityReport<f64>;
pub type SubjectVector64 = resemblance::SubjectVector<f64>;
pub type ResemblanceScore64 = resemblance::ResemblanceScore<f64>;
pub type Ceiling64 = resemblance::Ceiling<f64>;
pub type CorrelationResult64 = stats::CorrelationResult<f64>;
pub type TTestResult64 = stats::TTestResult<f64>;
pub type ScalingFit64 = stats::ScalingFit<f64>;

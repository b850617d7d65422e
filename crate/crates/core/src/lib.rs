//! Optimal-transport matching loss for polygon segmentation masks.
//!
//! Predicted and reference masks are ordered vertex lists in normalized
//! image coordinates. The [`pml`] module scores them as vertex *sets*: an
//! entropy-regularized transport problem between the two point clouds,
//! solved with log-domain Sinkhorn iterations in [`transport`]. Cyclically
//! shifted or otherwise reordered predictions of the same polygon cost
//! nothing, unlike the ordered L1 baseline.
//!
//! Supporting pieces:
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`polygon`] | vertex lists, shoelace area, arc-length resampling, reordering |
//! | [`raster`] | even-odd scanline rasterization, pixel IoU, RLE masks |
//! | [`transport`] | cost matrices, Sinkhorn, exact assignment oracles |
//! | [`pml`] | matching loss, envelope gradient, L1 baseline, loss schedule |
//! | [`attention`] | single-head cross-attention kernel |
//! | [`fit`] | Adam-style vertex fitting and a synthetic convex-polygon suite |
//! | [`evalkit`] | JSONL datasets, mIoU and precision-at-k |
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` / `*32` aliases below name the common instantiations.

// `!(x > 0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod error;
pub mod evalkit;
pub mod fit;
pub mod matrix;
pub mod pml;
pub mod polygon;
pub mod raster;
pub mod scalar;
pub mod transport;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use polygon::{Polygon, VertexPermutation};
pub use raster::PixelMask;
pub use scalar::Scalar;

pub type Polygon64 = polygon::Polygon<f64>;
pub type Polygon32 = polygon::Polygon<f32>;
pub type Matrix64 = matrix::Matrix<f64>;
pub type Matrix32 = matrix::Matrix<f32>;
pub type CostMatrix64 = transport::CostMatrix<f64>;
pub type CostMatrix32 = transport::CostMatrix<f32>;
pub type Marginals64 = transport::Marginals<f64>;
pub type TransportPlan64 = transport::TransportPlan<f64>;
pub type TransportPlan32 = transport::TransportPlan<f32>;
pub type SinkhornConfig64 = transport::SinkhornConfig<f64>;
pub type SinkhornConfig32 = transport::SinkhornConfig<f32>;
pub type LossValue64 = pml::LossValue<f64>;
pub type LossGradient64 = pml::LossGradient<f64>;
pub type AttentionWeights64 = attention::AttentionWeights<f64>;
pub type FitConfig64 = fit::FitConfig<f64>;
pub type FitTrace64 = fit::FitTrace<f64>;

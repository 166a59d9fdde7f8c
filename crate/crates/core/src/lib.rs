//! Intent-guided fine-tuning of text-to-image models.
//!
//! The pipeline turns a user's annotated request into an
//! [`IntentSpecification`](intent::IntentSpecification), reshapes the training
//! images and captions around it, and scores checkpoints with intent-aligned
//! stability and controllability metrics while a run is in progress.

pub mod augment;
pub mod caption;
pub mod dataset;
pub mod geometry;
pub mod imaging;
pub mod intent;
pub mod metrics;
pub mod fixtures;
pub mod mock;
pub mod orchestrator;
pub mod transformer;

/// Floating-point scalar the metrics are generic over.
pub trait Scalar: num_traits::Float + num_traits::NumCast + std::fmt::Debug + Send + Sync + 'static {}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub type MetricSeries64 = metrics::MetricSeries<f64>;
pub type MetricSeries32 = metrics::MetricSeries<f32>;

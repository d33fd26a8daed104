//! Toolkit for long-term action anticipation over discrete verb–noun
//! sequences.

pub mod dataset;
pub mod distill;
pub mod error;
pub mod llm;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod postprocess;
pub mod scalar;
pub mod seed;
pub mod taxonomy;

pub use error::{Error, ErrorClass, Result};
pub use scalar::Scalar;
pub use taxonomy::{ActionLabel, LabelRendering, RenderingMode, Taxonomy};

pub type SeqModelF32 = models::SeqModel<f32>;
pub type SeqModelF64 = models::SeqModel<f64>;
pub type MapReportF32 = metrics::MapReport<f32>;
pub type MapReportF64 = metrics::MapReport<f64>;

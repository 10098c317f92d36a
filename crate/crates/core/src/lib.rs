//! Imputation of heterogeneous, multi-rate AIS vessel records.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::should_implement_trait
)]

pub mod checkpoint;
pub mod config;
pub mod corrupt;
pub mod decoders;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod geo;
pub mod graph;
pub mod ingest;
pub mod model;
pub mod numeric;
pub mod params;
pub mod reservoir;
pub mod synth;
pub mod train;
pub mod types;

pub use error::{Error, Result};

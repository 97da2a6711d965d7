//! Image-text matching with dual semantic relations graph attention over
//! precomputed two-level visual features and tokenized captions.
//!
//! The crate covers the whole pipeline below the feature extractors: dataset
//! files ([`featurestore`]), a small reverse-mode differentiation layer
//! ([`diff`]), graph attention ([`relgraph`]), the image and text encoders
//! ([`visual`], [`text`]), the triplet ranking objective ([`matcher`]),
//! training ([`train`]) and retrieval evaluation ([`evalkit`]).

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diff;
pub mod error;
pub mod evalkit;
pub mod featurestore;
pub mod matcher;
pub mod model;
pub mod params;
pub mod relgraph;
pub mod text;
pub mod train;
pub mod visual;

pub use error::{Error, Result};

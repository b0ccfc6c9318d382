//! Two-stage retail shelf product detection and recognition.

pub mod archive;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod embedder;
pub mod error;
pub mod evaluation;
pub mod font;
pub mod gallery;
pub mod geometry;
pub mod gradcheck;
pub mod imageio;
pub mod localizer;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod pyramid;
pub mod render;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};

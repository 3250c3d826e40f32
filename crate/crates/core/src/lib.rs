//! Refractive environment mattes.
//!
//! An environment matte describes a transparent object by an object mask, a
//! scalar attenuation, and a refractive flow field pointing from each
//! foreground pixel to the background point it shows. This crate provides
//! the compositing model, Gray-code ground-truth extraction, training-loss
//! formulas, evaluation metrics, matte editing, data generation, a direct
//! gradient-based matte fitter, and file I/O.

pub mod cli;
pub mod datagen;
pub mod editor;
pub mod error;
pub mod fitter;
pub mod flow;
pub mod graycode;
pub mod image;
pub mod io;
pub mod losses;
pub mod matte;
pub mod metrics;

pub use error::{MatteError, Result, TracePoint};
pub use fitter::{fit_matte, FitConfig, FitOutput};
pub use flow::{flow_to_color, upsample_flow, FlowField};
pub use image::Image;
pub use matte::{compose, compose_colored, EnvironmentMatte, Trimap};

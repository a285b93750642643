//! Color restoration and range estimation for single underwater images.
//!
//! Water attenuates red, green, and blue light at different rates, so raw
//! underwater photographs lose color with distance and carry a strong blue
//! or green cast. This crate restores scene colors and recovers a per-pixel
//! transmission map from one image, with no calibration target in the frame:
//!
//! 1. estimate the veiling light (the color of object-free water) from the
//!    largest smooth region of the image,
//! 2. for each candidate water type, exponentiate the channels so all three
//!    share the blue attenuation coefficient, cluster the resulting vectors
//!    into haze lines, and read an initial transmission off each line,
//! 3. regularize the map with a distance-aware blend and a guided filter,
//! 4. invert the image formation model and keep the candidate restoration
//!    that best satisfies the gray-world assumption.
//!
//! The water-type candidates are ratios of diffuse attenuation coefficients
//! of the standard oceanographic water classes ([`water::builtin_library`]).
//! A forward simulator ([`forward`]) synthesizes scenes with known ground
//! truth, and [`metrics`] scores restorations the same way the evaluation
//! harness does.

pub mod config;
pub mod error;
pub mod forward;
pub mod hazelines;
pub mod image;
pub mod metrics;
pub mod restore;
pub mod transmission;
pub mod veiling;
pub mod water;

pub use error::{Error, Result};

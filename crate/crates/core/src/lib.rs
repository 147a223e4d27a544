//! Implicit occupancy and texture fields fitted to posed images through a
//! differentiable surface renderer.
//!
//! The crate learns a joint occupancy/color network from posed images and
//! masks. Surface depth along each pixel ray is found by dense sampling plus
//! secant refinement, and its gradient with respect to the network weights is
//! obtained analytically from the implicit relation `f(r(d)) = tau` instead of
//! by differentiating through the root search.

pub mod autodiff;
pub mod camera;
pub mod error;
pub mod field;
pub mod gradcheck;
pub mod losses;
pub mod mesh;
pub mod raycast;
pub mod registry;
pub mod rng;
pub mod scene;
pub mod trainer;

pub use error::{Error, Result};

//! Unsupervised learning of monocular depth and ego-motion from video
//! triplets, with explicit per-object 3D motion, an object-size
//! constraint and online test-time refinement.

pub mod dataset;
pub mod diff;
pub mod error;
pub mod evaluator;
pub mod geometry;
pub mod losses;
pub mod motionmodel;
pub mod networks;
pub mod synthscenes;
pub mod trainer;
pub mod visualize;
pub mod warping;

pub use diff::{Adam, Tape, Tensor, Var};
pub use error::{Error, Result};

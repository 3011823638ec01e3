//! Shared inputs for the benchmarks.

use depthmotion::dataset::FrameTriplet;
use depthmotion::synthscenes::{generate_rigid, SceneConfig, SceneSample};

/// A rigid scene at the given size, fixed seed.
pub fn rigid_scene(height: usize, width: usize) -> SceneSample {
    generate_rigid(7, &SceneConfig::default().with_size(height, width)).expect("default scene config is valid")
}

pub fn rigid_triplet(height: usize, width: usize) -> FrameTriplet {
    FrameTriplet::from(&rigid_scene(height, width))
}

//! Toy triplane 3D generator finetuned against pluggable diffusion priors,
//! with volume rendering, loss assembly, training loops, and a mesh texture
//! refinement pipeline. Everything runs on the CPU in f64 and is
//! deterministic for a fixed seed.

pub mod checkpoint;
pub mod gan3d;
pub mod image;
pub mod numgrad;
pub mod render;

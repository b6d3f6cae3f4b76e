#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod encoder;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod inference;
pub mod losses;
pub mod math;
pub mod mesh;
pub mod metrics;
pub mod occlusion;
pub mod optim;
pub mod params;
pub mod renderer;
pub mod scenes;
pub mod tensor;
pub mod training;
pub mod trigrid;

pub use autodiff::{Gradients, Tape, TriDims, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;

//! Lift-and-refine novel view synthesis at desk scale.

pub mod camera;
pub mod checks;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod lifting;
pub mod model;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod renderer;
pub mod scene;
pub mod tensor;
pub mod triplane;

pub use camera::{CameraPose, Intrinsics, Ray};
pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};

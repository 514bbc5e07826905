pub mod actions;
pub mod cascade;
pub mod demo;
pub mod error;
pub mod exec;
pub mod gaussian;
pub mod io;
pub mod manifold;
pub mod mixture;
pub mod pipeline;
pub mod quat;
pub mod segmentation;
pub mod selection;
pub mod synth;
pub mod tpgmm;

pub use error::{Error, Result};
pub use exec::Execution;
pub use manifold::{Factor, FramePolicy, ManifoldDescriptor};

//! Tensor arithmetic: flat row-major buffers, a reverse-mode tape, and the
//! optimizer that consumes the gradients it produces.

pub mod adam;
pub mod linalg;
pub mod params;
pub mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use params::{Param, ParamGroup, ParamId, ParamStore};
pub use tape::{NodeId, Tape};

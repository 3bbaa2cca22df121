//! Gradient checks shared by the gradient test targets and the acceptance run.

pub mod model;
pub mod ops;

//! Differentiable computation core and optimization primitives.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
mod scalar;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, Stencil};
pub use graph::{Gradients, Graph, NodeId};
pub use optim::{clip_global_norm, cosine_lr, mean_gradients, AdamW, GradMap, LrSchedule, ParamGroup};
pub use params::{Param, ParamId, ParamStore};
pub use scalar::Scalar;

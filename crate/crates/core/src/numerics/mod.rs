//! Dense linear algebra, a small reverse-mode engine, Adam, and a
//! finite-difference gradient oracle. All arithmetic is `f64`.

mod adam;
mod matrix;
mod ops;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use matrix::{cosine, dot, norm, sq_dist, Matrix};
pub use ops::{attention, linear, softmax, AttentionOutput};
pub use params::{finite_diff, grad, max_relative_error, Gradients, ParamVars, Params};
pub use tape::{Adjoints, MatVar, Tape, Var};

//! Dense `f64` tensors, reverse-mode differentiation, optimizers and
//! learning-rate schedules.

mod gradcheck;
mod optim;
mod schedule;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many};
pub use optim::{OptimizerKind, OptimizerState};
pub use schedule::{bn_momentum, LrSchedule};
pub use tape::{BatchStats, Gradients, Tape, Var, BN_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;

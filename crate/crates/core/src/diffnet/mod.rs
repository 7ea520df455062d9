//! Policy network, reverse-mode tape and optimizer.

mod adam;
mod network;
pub mod tape;

pub use adam::{AdamConfig, OptimizerState};
pub use network::{Activation, Checkpoint, PolicyNetwork};
pub use tape::{CustomOp, Eval, Graph, Op, ParamGrads, Tape, TapeVar};

//! Reverse-mode autodiff, optimizer, recurrent cell and probability
//! kernels behind the neural forecasters.

pub mod adam;
pub mod checkpoint;
pub mod dist;
pub mod graph;
pub mod lstm;
pub mod nn;

pub use adam::AdamState;
pub use graph::{Gradients, Graph, ParamId, ParamStore, Tensor, Var};
pub use lstm::{lstm_step, LstmParams, LstmState};

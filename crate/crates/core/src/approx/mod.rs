//! Function approximation: dense networks, Adam, target-network updates.

mod adam;
mod linalg;
mod net;

pub use adam::Adam;
pub use linalg::{matmul, matmul_a_bt, matmul_at_b};
pub use net::{param_distance, Activation, DenseNet, FinalInit, Head, InputGradTape, Tape};

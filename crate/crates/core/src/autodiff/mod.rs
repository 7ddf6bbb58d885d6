//! Dense reverse-mode automatic differentiation with the handful of
//! operations the model needs, plus initialization and the optimizer.

mod array;
mod init;
mod optim;
mod params;
mod tape;

pub use array::Array;
pub use init::{fans, xavier_init};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{sigmoid, Mode, Tape, Var, LAYER_NORM_EPS, ZERO_NORM};

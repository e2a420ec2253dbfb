//! Dense `f64` tensors with a reverse-mode gradient tape, plus the
//! optimizers used to train the model.

mod kernels;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use optim::{Adam, Optimizer, Sgd};
pub use params::{Bound, ParamStore};
pub use rng::StreamRng;
pub use tape::{Gradients, Mode, NormMode, RunningStats, Tape, Var};
pub use tensor::Tensor;

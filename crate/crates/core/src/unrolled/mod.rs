//! Unrolled deep structured low-rank networks: a small real-valued CNN
//! stack, a reverse-mode tape over the ops they need, and training.

pub mod gradcheck;
pub mod model;
pub mod real;
pub mod tape;
pub mod train;

pub use model::{
    cnn_forward, hdslr_forward, kdslr_forward, record_unrolled, unrolled_forward, xavier_init, CnnParams, CnnSpec,
    UnrolledModel,
};
pub use real::{pack, unpack, RealTensor};
pub use tape::{dc_solve, Tape, Value, Var};
pub use train::{load_checkpoint, save_checkpoint, train, Adam, TrainConfig, TrainOutcome};

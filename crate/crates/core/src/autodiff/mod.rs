//! Differentiable numerical core: dense arrays, a reverse-mode tape, LSTM and
//! attention building blocks, Adam, and checkpointing.

mod adam;
mod array;
mod checkpoint;
pub mod gradcheck;
pub mod nn;
mod params;
mod tape;

pub use adam::Adam;
pub use array::{sigmoid, softmax, Array};
pub use checkpoint::{Checkpoint, Record, CHECKPOINT_MAGIC};
pub use nn::{
    attend_projected, attention, bilstm, cross_entropy, lstm_sequence, lstm_step, mlp, Attended,
    LstmParams, LstmState, MlpParams, ScorerParams,
};
pub use params::{Param, ParamId, ParameterSet, INIT_SCALE};
pub use tape::{Gradients, Tape, Var};

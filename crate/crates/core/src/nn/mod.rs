//! Neural-network plumbing shared by every model: parameters, layers,
//! optimizers and finite-difference checking.

pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod optim;
pub mod params;

pub use layers::{
    attention, causal_mask, Activation, BiLstm, DecoderLayer, Embedding, EncoderLayer,
    FeedForward, GruCell, LayerNorm, Linear, LstmCell, MultiHeadAttention,
};
pub use optim::{Adam, LrSchedule, Sgd};
pub use params::{ParamGrads, ParamId, ParamStore};

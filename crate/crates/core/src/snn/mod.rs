//! Spiking neuron dynamics, per-timestep normalisation and the BPTT engine.

mod batchnorm;
mod encode;
mod lif;
mod network;

pub use batchnorm::{batchnorm_t, BatchNorm, BnCache, BnStats, BN_EPS};
pub use encode::direct_encode;
pub use lif::{lif_step, surrogate_grad, Gate, LIFParams, LIFState, SurrogateKind, SurrogateSpec};
pub use network::{
    argmax_rows, backprop_unrolled, cross_entropy, forward_unrolled, Block, ConvOp, ForwardTrain, Linear, Network,
    Tape, Unit,
};

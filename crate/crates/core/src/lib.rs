// Negated float comparisons are how validators reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accelsim;
pub mod error;
pub mod metrics;
pub mod scalar;
pub mod snn;
pub mod tensor;
pub mod train;
pub mod ttlayers;
pub mod vbmf;

pub use error::{Error, Result};
pub use scalar::Real;

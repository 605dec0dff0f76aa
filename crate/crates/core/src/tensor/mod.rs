//! Dense tensor algebra, convolution, SVD and the four-core TT factorisation.

mod conv;
mod dense;
pub mod io;
mod ops;
mod svd;
mod tt;

pub use conv::{conv2d, conv2d_backward, ConvGeometry};
pub use dense::DenseTensor;
pub use ops::{circular_permute_first, circular_permute_last, contract_mode1};
pub use svd::{singular_values, svd, SvdTriple};
pub use tt::{merge_ptt, stt_dense_kernel, tt_reconstruct, tt_svd, TTConvCores, TtDecomposition};

pub(crate) use tt::layout;

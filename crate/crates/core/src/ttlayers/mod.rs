//! TT convolution layers in sequential, parallel and hybrid form.

mod layer;
mod schedule;

pub use layer::{htt_forward, merged_geometry, ptt_forward, stt_forward, DenseConvLayer, TTConvLayer, TtCache, TtMode};
pub use schedule::{build_htt_schedule, BranchStep, HalfBranch, HttConfig, HttSchedule, Placement};

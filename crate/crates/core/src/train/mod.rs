//! Model specs, initialisation with rank assignment, the training loop, evaluation,
//! merge-back and checkpoints.

mod data;
mod fit;
mod model;
mod spec;

pub use data::{load_cifar10_bin, load_mnist_idx, synthetic_blobs, Dataset, DatasetSource, Split};
pub use fit::{
    clip_global_norm, evaluate, predict, train, EpochHook, EpochLog, JsonLinesLog, LrSchedule, Sgd, TrainConfig,
};
pub use model::{
    compare_on_probe, finalize_merge, init_ttsnn, load_checkpoint, max_uniform_rank, save_checkpoint, Manifest,
    ProbeComparison, RankRecord, TensorEntry, TtSnn, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use spec::{ConvDesc, ConvRole, LayerSpec, ModelMode, ModelSpec, Resolved};

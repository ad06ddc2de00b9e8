//! Multi-frame motion regressor and its training machinery.

mod checkpoint;
mod gradcheck;
mod loss;
mod model;
mod tape;
mod tensor;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointHeader,
    ParamEntry,
};
pub use gradcheck::{grad_check, Batch, GradCheck, FD_SAMPLES, FD_STEP, REL_FLOOR};
pub use loss::{
    loss_case_correlation, loss_mse, loss_mse_weighted, total_loss, LossValue, LossWeights,
    TotalLoss, SIGMA_FLOOR,
};
pub use model::{init_model, window_tensor, AttentionMap, BlockConfig, Model, ModelConfig};
pub use tape::{ConvSpec, Tape, Var};
pub use tensor::Tensor;
pub use train::{
    history_csv, read_history, train, write_history, CaseWindows, EpochRecord, TrainConfig,
};

//! Mask-unit masked image modeling at desk scale: mask planning over
//! 1×32×32-pixel units, dense mask-token substitution at stage 1,
//! normalized per-unit reconstruction targets, a linear head on stage-4
//! tokens (whose 32-pixel stride matches the unit side exactly), masked
//! MSE, AdamW with warmup+cosine, and a deterministic toy training loop.

mod mask;
mod optim;
mod temporal;
mod train;

pub use mask::{
    apply_mask, apply_mask_backward, mim_loss, mim_loss_with_grad, reconstruction_target,
    sample_mask_plan, ApplyMaskCache, MaskPlan, UNIT_TOKENS,
};
pub use optim::{AdamWConfig, OptimizerState};
pub use temporal::{sample_temporal_subset, TemporalSampling};
pub use train::{
    loss_and_grads, pretrain_toy, train_step, write_training_report, MimBatch, PretrainModel,
    ToyRunConfig, ToyRunReport, TrainRow, TARGET_NORM_EPS,
};

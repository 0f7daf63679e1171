//! Exact-likelihood training: dequantization, the NLL objective, Adam,
//! checkpoints and the iteration loop.

pub mod adam;
pub mod checkpoint;
pub mod dequantize;
pub mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use dequantize::dequantize;
pub use train::{decile_means, nll_and_grads, nll_loss, train_loop, RunPaths, TrainConfig, Trainer};

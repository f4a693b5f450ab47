//! Model state, forward pass, total loss, training loop and checkpoints.

mod adam;
mod checkpoint;
mod model;
mod train;


pub use adam::Adam;
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint, FORMAT_VERSION,
};
pub use model::{perturb, total_loss, ForwardOutput, LossBreakdown, Model, ModelState, DECODER_DEPTH, GLOBAL_TOKEN};
pub use train::{
    checkpoint_path, encode_all, epoch_rng, fit, log_csv, EpochRecord, FitOutcome, FINAL_CHECKPOINT,
    LAST_GOOD_CHECKPOINT, LOG_FILE, TIMING_FILE,
};

//! User-level checkpoints: the MFCK file format and retention policy.

pub mod format;
pub mod policy;

pub use format::{load, restore, save};
pub use policy::{build_saver, checkpoint_path, list_checkpoints, parse_step, CheckpointPolicy, Saver};

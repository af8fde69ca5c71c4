//! Dense ReLU networks with hand-written reverse-mode gradients, Adam, and a
//! versioned binary checkpoint container.

mod adam;
mod checkpoint;
mod net;

pub use adam::{AdamConfig, OptimState};
pub use checkpoint::{Checkpoint, Tensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use net::{polyak_update, BatchCache, Gradients, Net};

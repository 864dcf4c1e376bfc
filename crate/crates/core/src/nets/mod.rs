//! Coordinate-network building blocks: positional encoding, MLPs with
//! hand-written reverse mode, Adam, finite-difference checking and the
//! binary checkpoint format.

mod adam;
mod checkpoint;
mod encoding;
mod gradcheck;
mod mlp;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, NamedNet, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use encoding::EncodingConfig;
pub use gradcheck::{gradient_check, GradTarget, MlpProbe};
pub use mlp::{Activation, Head, Layer, Mlp, MlpCache, MlpGrads, MlpSpec};

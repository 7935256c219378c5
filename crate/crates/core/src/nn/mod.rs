//! Automatic differentiation and the NeuVec networks.

pub mod checkpoint;
pub mod mlp;
pub mod model;
pub mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use mlp::{dropout_apply, Activation, MlpConfig};
pub use model::{
    augment, Augmentation, Group, LossAndGrad, Mode, ModelConfig, NeuVecModel, Preset, Rho1Input,
    SIGMA_FLOOR,
};
pub use tape::{Tape, Var};

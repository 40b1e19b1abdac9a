//! Dense tensors, reverse-mode autodiff, and the optimizers used by every
//! training stage.

pub mod ops;
pub mod optim;
pub mod params;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use ops::{cross_entropy_from_logits, gelu, layer_norm, log_softmax_rows, matmul, softmax};
pub use optim::{adam_step, clip_global_norm, AdamConfig, AdamState, ParamGroup};
pub use params::{Bound, ParamSet};
pub use schedule::{cosine_lr, layer_lr_multiplier, layer_lr_multipliers, LayerGroup, LrSchedule};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DType, Element, Tensor};

//! Persistence: checkpoints and run configuration documents.

pub mod checkpoint;
pub mod config;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_backbone, load_checkpoint, load_tokenizer, save_backbone,
    save_checkpoint, save_tokenizer, Checkpoint, CheckpointKind, MAGIC,
};
pub use config::{
    apply_override, load_config, parse_config, AblateConfig, AttendConfig, DataConfig, ElboConfig, InputPaths,
    RunConfig, Split,
};

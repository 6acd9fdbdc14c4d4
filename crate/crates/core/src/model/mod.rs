//! Multi-exit networks: a shared backbone of blocks with a classifier head
//! after selected blocks.

pub mod checkpoint;
mod network;

pub use network::{
    build_cnn, build_mlp, Architecture, Block, CnnConfig, ExitHead, ExitOutputs, MlpConfig,
    MultiExitNetwork,
};

//! Dataset ingestion: IDX files, the synthetic mode-mix family, stratified
//! splits and run configuration.

pub mod config;
mod dataset;
pub mod idx;
pub mod synth;

pub use config::{load_config, RunConfig};
pub use dataset::{split, ChannelNorm, ImageDataset, Split, Splits};
pub use idx::{load_idx, parse_idx};
pub use synth::{generate_modemix, SyntheticSpec};

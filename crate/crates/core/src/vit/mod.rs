//! A small pre-norm Vision Transformer for inference and feature extraction.
//!
//! Tokens are `[CLS, registers.., patches..]`. Learned positional embeddings
//! are added to patch tokens only. Each block is
//! `x += attn(LN(x)); x += mlp(LN(x))`, with every attention head using the
//! configured normalizer.

mod config;
pub mod container;
mod features;
mod model;

pub use config::VitConfig;
pub use container::{Container, StoredTensor, TensorEntry};
pub use features::{
    extract_layer_set, features_from_container, features_to_container, four_evenly_spaced, load_features,
    save_features, LayerFeatures, LayerSet, TokenLayout,
};
pub use model::{load_model, save_model, Block, VitModel};

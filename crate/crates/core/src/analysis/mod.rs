//! Measurement tools over frozen ViT features: point-in-box, CLS–patch
//! similarity maps, PCA-RGB renderings, and linear probes.

mod pca;
mod pib;
pub mod probe;
mod sweep;

pub use pca::{pca_rgb, principal_components, Principal};
pub use pib::{cls_patch_similarity, pib, BoxAnnotation, LayerPib, PibReport};
pub use probe::{
    mean_iou, rmse, top1, train_linear_probe, GridMember, MetricKind, ProbeHyper, ProbeReport, ProbeTargets,
    ProbeTask,
};
pub use sweep::{forward_batch, layer_sweep, layer_sweep_features, DenseSample, LayerSweepEntry};

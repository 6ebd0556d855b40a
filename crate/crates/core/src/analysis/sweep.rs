use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::probe::{train_linear_probe, ProbeHyper, ProbeReport, ProbeTargets, ProbeTask};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;
use crate::vit::{extract_layer_set, LayerFeatures, LayerSet, VitModel};

/// One image with a class id per patch (row-major grid order).
#[derive(Debug, Clone)]
pub struct DenseSample<S> {
    pub image: Tensor<S>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSweepEntry {
    pub layer: usize,
    pub concat_cls: bool,
    pub report: ProbeReport,
}

/// Forward passes over many images; images are processed in parallel and
/// results come back in input order.
pub fn forward_batch<S: Scalar>(model: &VitModel<S>, images: &[Tensor<S>]) -> Result<Vec<LayerFeatures<S>>> {
    images.par_iter().map(|img| model.forward_features(img)).collect()
}

fn stack<S: Scalar>(
    feats: &[LayerFeatures<S>],
    labels: &[&[usize]],
    layer: usize,
    concat_cls: bool,
) -> Result<(Tensor<S>, Vec<usize>)> {
    let mut parts = Vec::with_capacity(feats.len());
    let mut all = Vec::new();
    for (f, l) in feats.iter().zip(labels) {
        let x = extract_layer_set(f, LayerSet::Single(layer), concat_cls)?;
        if x.dim(0) != l.len() {
            return Err(Error::dim("layer_sweep labels", x.shape(), &[l.len()]));
        }
        all.extend_from_slice(l);
        parts.push(x);
    }
    let refs: Vec<&Tensor<S>> = parts.iter().collect();
    Ok((Tensor::concat(&refs, 0)?, all))
}

/// Dense segmentation probe on every block output of precomputed features.
pub fn layer_sweep_features<S: Scalar>(
    train: &[LayerFeatures<S>],
    train_labels: &[&[usize]],
    eval: &[LayerFeatures<S>],
    eval_labels: &[&[usize]],
    n_classes: usize,
    concat_cls: bool,
    hyper: &ProbeHyper,
) -> Result<Vec<LayerSweepEntry>> {
    let n_layers = train
        .first()
        .ok_or_else(|| Error::InvalidArgument("layer sweep needs training images".into()))?
        .n_layers();
    if train.len() != train_labels.len() || eval.len() != eval_labels.len() {
        return Err(Error::InvalidArgument("one label vector per image is required".into()));
    }
    (1..=n_layers)
        .map(|layer| {
            let (x, y) = stack(train, train_labels, layer, concat_cls)?;
            let yt = ProbeTargets::Classes { labels: y, n_classes };
            let report = if eval.is_empty() {
                train_linear_probe(ProbeTask::DenseSeg, &x, &yt, None, hyper)?
            } else {
                let (ex, ey) = stack(eval, eval_labels, layer, concat_cls)?;
                let et = ProbeTargets::Classes { labels: ey, n_classes };
                train_linear_probe(ProbeTask::DenseSeg, &x, &yt, Some((&ex, &et)), hyper)?
            };
            Ok(LayerSweepEntry {
                layer,
                concat_cls,
                report,
            })
        })
        .collect()
}

/// Runs the model over both splits, then probes every layer.
pub fn layer_sweep<S: Scalar>(
    model: &VitModel<S>,
    train: &[DenseSample<S>],
    eval: &[DenseSample<S>],
    n_classes: usize,
    concat_cls: bool,
    hyper: &ProbeHyper,
) -> Result<Vec<LayerSweepEntry>> {
    let images = |s: &[DenseSample<S>]| s.iter().map(|d| d.image.clone()).collect::<Vec<_>>();
    let labels = |s: &[DenseSample<S>]| s.iter().map(|d| d.labels.clone()).collect::<Vec<_>>();
    let (tf, ef) = (forward_batch(model, &images(train))?, forward_batch(model, &images(eval))?);
    let (tl, el) = (labels(train), labels(eval));
    let tl: Vec<&[usize]> = tl.iter().map(Vec::as_slice).collect();
    let el: Vec<&[usize]> = el.iter().map(Vec::as_slice).collect();
    layer_sweep_features(&tf, &tl, &ef, &el, n_classes, concat_cls, hyper)
}

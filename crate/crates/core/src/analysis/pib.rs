use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, Tensor};
use crate::scalar::Scalar;
use crate::vit::{LayerFeatures, TokenLayout};

/// Foreground box in pixels, half-open: `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub image_id: String,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoxAnnotation {
    pub fn validate(&self, image_size: usize) -> Result<()> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 || self.x1 > image_size || self.y1 > image_size {
            return Err(Error::Validation(format!(
                "box for `{}` is empty or outside the {image_size}px image: ({}, {}, {}, {})",
                self.image_id, self.x0, self.y0, self.x1, self.y1
            )));
        }
        Ok(())
    }

    /// Whether the centre of a half-open pixel rectangle lies in the box.
    pub fn contains_center_of(&self, rect: (usize, usize, usize, usize)) -> bool {
        let (x0, y0, x1, y1) = rect;
        // Doubled coordinates keep odd patch sizes exact.
        let (cx, cy) = (x0 + x1, y0 + y1);
        2 * self.x0 <= cx && cx < 2 * self.x1 && 2 * self.y0 <= cy && cy < 2 * self.y1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPib {
    pub layer: usize,
    pub hits: usize,
    pub fraction: f64,
    /// Grid (row, col) of the patch most similar to CLS, per image.
    pub argmax: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PibReport {
    pub n_images: usize,
    pub layers: Vec<LayerPib>,
}

/// Cosine similarity of the CLS token to every patch of one layer, as a
/// `[grid × grid]` map.
pub fn cls_patch_similarity<S: Scalar>(features: &LayerFeatures<S>, layer: usize) -> Result<Tensor<S>> {
    let tokens = features.layer(layer)?;
    let patches = features.patches(layer)?;
    let cls = Tensor::new(vec![1, tokens.row_len()], tokens.row(TokenLayout::CLS).to_vec())?;
    let g = features.layout().grid;
    cosine_similarity(&cls, &patches)?.reshape(&[g, g])
}

/// Index of the largest value; ties go to the lowest index.
fn first_argmax<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Point-in-box: per layer, the fraction of images whose most
/// CLS-similar patch has its centre inside the foreground box.
pub fn pib<S: Scalar>(features: &[(String, LayerFeatures<S>)], boxes: &[BoxAnnotation]) -> Result<PibReport> {
    let first = features
        .first()
        .ok_or_else(|| Error::InvalidArgument("pib needs at least one image".into()))?;
    let n_layers = first.1.n_layers();
    let layout = first.1.layout();
    let image_size = layout.grid * layout.patch_size;

    let mut per_image = Vec::with_capacity(features.len());
    for (id, f) in features {
        if f.n_layers() != n_layers || f.layout() != layout {
            return Err(Error::InvalidArgument(format!("features for `{id}` have a different layout")));
        }
        let b = boxes
            .iter()
            .find(|b| &b.image_id == id)
            .ok_or_else(|| Error::MissingAnnotation { image_id: id.clone() })?;
        b.validate(image_size)?;
        per_image.push((f, b));
    }

    let mut layers = Vec::with_capacity(n_layers);
    for layer in 1..=n_layers {
        let mut hits = 0;
        let mut argmax = Vec::with_capacity(per_image.len());
        for (f, b) in &per_image {
            let sim = cls_patch_similarity(f, layer)?;
            let best = first_argmax(sim.data());
            if b.contains_center_of(layout.patch_rect(best)) {
                hits += 1;
            }
            argmax.push(layout.patch_coords(best));
        }
        layers.push(LayerPib {
            layer,
            hits,
            fraction: hits as f64 / per_image.len() as f64,
            argmax,
        });
    }
    Ok(PibReport {
        n_images: per_image.len(),
        layers,
    })
}

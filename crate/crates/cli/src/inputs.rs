//! Reading images, boxes and features; writing reports.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use savt::analysis::BoxAnnotation;
use savt::data::scene;
use savt::image::decode_ppm;
use savt::numerics::{Rng, Tensor};
use savt::vit::{LayerFeatures, VitModel};
use serde::Serialize;

use crate::settings::usage;

/// `zero`, `scene` (a seeded synthetic scene) or a path to a binary PPM.
pub fn load_image(spec: &str, size: usize, seed: u64) -> Result<Tensor<f64>> {
    let img = match spec {
        "zero" => Tensor::zeros(&[size, size, 3]),
        "scene" => scene("scene", size, 3, &mut Rng::new(seed)).image,
        path => {
            let bytes = std::fs::read(path).with_context(|| format!("reading image {path}"))?;
            decode_ppm(&bytes).with_context(|| format!("decoding image {path}"))?
        }
    };
    if img.shape() != [size, size, 3] {
        return usage(format!(
            "image `{spec}` is {}x{}, the model expects {size}x{size}",
            img.dim(1),
            img.dim(0)
        ));
    }
    Ok(img)
}

pub fn image_id(spec: &str) -> String {
    Path::new(spec)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| spec.to_string())
}

pub fn load_model(path: &Path) -> Result<VitModel<f64>> {
    VitModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

pub fn load_features(path: &Path) -> Result<Vec<(String, LayerFeatures<f64>)>> {
    savt::vit::load_features(path).with_context(|| format!("loading features {}", path.display()))
}

pub fn find_features<'a>(
    items: &'a [(String, LayerFeatures<f64>)],
    id: Option<&str>,
) -> Result<&'a (String, LayerFeatures<f64>)> {
    match id {
        None => items.first().context("feature file holds no images"),
        Some(id) => match items.iter().find(|(i, _)| i == id) {
            Some(item) => Ok(item),
            None => usage(format!("no image `{id}` in feature file")),
        },
    }
}

pub fn load_boxes(path: &Path) -> Result<Vec<BoxAnnotation>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading boxes {}", path.display()))?;
    serde_json::from_str(&text).or_else(|e| usage(format!("{}: {e}", path.display())))
}

/// Pretty JSON to `out`, or to stdout.
pub fn emit<T: Serialize>(value: &T, out: Option<&PathBuf>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

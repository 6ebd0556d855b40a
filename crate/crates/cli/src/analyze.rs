use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Subcommand;
use savt::analysis::{cls_patch_similarity, pca_rgb, pib};
use savt::image::{encode_ppm, upscale};
use savt::normalizers::support_stats;
use savt::numerics::Tensor;
use serde_json::json;

use crate::inputs::{emit, find_features, load_boxes, load_features, load_image, load_model};
use crate::settings::{usage, Settings};

#[derive(Subcommand, Debug)]
pub enum AnalyzeCommand {
    /// Fraction of images whose CLS-nearest patch lies in the box, per layer.
    Pib {
        #[arg(long)]
        features: PathBuf,
        /// JSON array of {image_id, x0, y0, x1, y1}.
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// CLS-to-patch cosine similarity map of one image and layer.
    Sim {
        #[arg(long)]
        features: PathBuf,
        /// Defaults to the first image in the file.
        #[arg(long)]
        image_id: Option<String>,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Grey-scale rendering, (s + 1) / 2.
        #[arg(long)]
        ppm: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        scale: usize,
    },
    /// First three principal components of the patch features as RGB.
    Pca {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        image_id: Option<String>,
        /// Block output to use; the final layer-normed tokens when omitted.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        ppm: PathBuf,
        #[arg(long, default_value_t = 1)]
        scale: usize,
    },
    /// Attention support statistics per layer for one image.
    Support {
        #[arg(long)]
        weights: PathBuf,
        /// PPM path, `zero` or `scene`.
        #[arg(long, default_value = "scene")]
        image: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write_ppm(path: &PathBuf, img: &Tensor<f64>, scale: usize) -> Result<()> {
    if scale == 0 {
        return usage("--scale must be at least 1");
    }
    let bytes = encode_ppm(&upscale(img, scale)?)?;
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn run(settings: &Settings, cmd: AnalyzeCommand) -> Result<()> {
    match cmd {
        AnalyzeCommand::Pib { features, boxes, out } => {
            let items = load_features(&features)?;
            let boxes = load_boxes(&boxes)?;
            emit(&pib(&items, &boxes)?, out.as_ref())
        }
        AnalyzeCommand::Sim {
            features,
            image_id,
            layer,
            out,
            ppm,
            scale,
        } => {
            let items = load_features(&features)?;
            let (id, f) = find_features(&items, image_id.as_deref())?;
            if layer == 0 || layer > f.n_layers() {
                return usage(format!("--layer must be in 1..={}", f.n_layers()));
            }
            let sim = cls_patch_similarity(f, layer)?;
            if let Some(p) = &ppm {
                let g = sim.dim(0);
                let grey = Tensor::from_fn(&[g, g, 3], |i| (sim.data()[i / 3] + 1.0) / 2.0);
                write_ppm(p, &grey, scale)?;
            }
            let rows: Vec<Vec<f64>> = sim.rows().map(<[f64]>::to_vec).collect();
            emit(&json!({ "image_id": id, "layer": layer, "similarity": rows }), out.as_ref())
        }
        AnalyzeCommand::Pca {
            features,
            image_id,
            layer,
            ppm,
            scale,
        } => {
            let items = load_features(&features)?;
            let (id, f) = find_features(&items, image_id.as_deref())?;
            let patches = match layer {
                None => f.final_patches(),
                Some(l) if l == 0 || l > f.n_layers() => {
                    return usage(format!("--layer must be in 1..={}", f.n_layers()))
                }
                Some(l) => f.patches(l)?,
            };
            let g = f.layout().grid;
            let img = pca_rgb(&patches, (g, g))?;
            write_ppm(&ppm, &img, scale)?;
            emit(
                &json!({
                    "image_id": id,
                    "layer": layer,
                    "grid": [g, g],
                    "ppm": ppm.display().to_string(),
                    "size": [g * scale, g * scale],
                }),
                None,
            )
        }
        AnalyzeCommand::Support { weights, image, out } => {
            let m = load_model(&weights)?;
            let img = load_image(&image, m.config.image_size, settings.seed)?;
            let (_, maps) = m.forward_with_attention(&img)?;
            let t = m.config.n_tokens();
            let layers = maps
                .iter()
                .enumerate()
                .map(|(l, a)| {
                    let rows = a.reshape(&[a.numel() / t, t])?;
                    let s = support_stats(&rows)?;
                    Ok(json!({ "layer": l + 1, "mean": s.mean, "min": s.min, "max": s.max, "rows": s.rows }))
                })
                .collect::<Result<Vec<_>>>()?;
            emit(
                &json!({ "normalizer": m.config.normalizer, "tokens": t, "layers": layers }),
                out.as_ref(),
            )
        }
    }
}

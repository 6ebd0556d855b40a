use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Subcommand;
use savt::analysis::forward_batch;
use savt::data::scenes;
use savt::numerics::Rng;
use savt::vit::{save_features, VitModel};
use serde_json::json;

use crate::inputs::{emit, image_id, load_image, load_model};
use crate::settings::{usage, ModelFlags, Settings, StoreType};

#[derive(Subcommand, Debug)]
pub enum ModelCommand {
    /// Initialise a model from the seed and save it.
    Init {
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long, value_enum, default_value = "f32")]
        dtype: StoreType,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one image through a model and save its layer features.
    Forward {
        #[arg(long)]
        weights: PathBuf,
        /// PPM path, `zero` or `scene`.
        #[arg(long)]
        image: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "f64")]
        dtype: StoreType,
    },
    /// Save layer features for many images, or for seeded synthetic scenes.
    DumpFeatures {
        #[arg(long)]
        weights: PathBuf,
        /// PPM paths, `zero` or `scene`.
        #[arg(long, num_args = 1.., conflicts_with = "synthetic")]
        images: Vec<String>,
        /// Number of seeded synthetic scenes to use instead of images.
        #[arg(long)]
        synthetic: Option<usize>,
        /// Foreground classes of the synthetic scenes.
        #[arg(long, default_value_t = 3)]
        n_classes: usize,
        /// Where to write the scenes' boxes (JSON), for `analyze pib`.
        #[arg(long, requires = "synthetic")]
        boxes_out: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "f64")]
        dtype: StoreType,
    },
}

fn summary(model: &VitModel<f64>, n_images: usize, out: &std::path::Path) -> serde_json::Value {
    let c = &model.config;
    json!({
        "out": out.display().to_string(),
        "images": n_images,
        "n_layers": c.n_layers,
        "tokens_per_layer": c.n_tokens(),
        "d_model": c.d_model,
        "normalizer": c.normalizer,
    })
}

pub fn run(settings: &Settings, cmd: ModelCommand) -> Result<()> {
    match cmd {
        ModelCommand::Init { model, dtype, out } => {
            let cfg = settings.vit_config(&model)?;
            let m = VitModel::<f64>::init(cfg, &mut Rng::new(settings.seed))?;
            m.save(&out, dtype.into()).with_context(|| format!("writing {}", out.display()))?;
            emit(
                &json!({
                    "out": out.display().to_string(),
                    "config": cfg,
                    "parameters": m.parameter_count(),
                    "tokens": cfg.n_tokens(),
                }),
                None,
            )
        }
        ModelCommand::Forward {
            weights,
            image,
            out,
            dtype,
        } => {
            let m = load_model(&weights)?;
            let img = load_image(&image, m.config.image_size, settings.seed)?;
            let f = m.forward_features(&img)?;
            save_features(&[(image_id(&image), f)], &out, dtype.into())?;
            emit(&summary(&m, 1, &out), None)
        }
        ModelCommand::DumpFeatures {
            weights,
            images,
            synthetic,
            n_classes,
            boxes_out,
            out,
            dtype,
        } => {
            let m = load_model(&weights)?;
            let size = m.config.image_size;
            let (ids, imgs) = match synthetic {
                Some(n) => {
                    let s = scenes(n, size, n_classes, settings.seed);
                    if let Some(p) = &boxes_out {
                        let boxes: Vec<_> = s.iter().map(|sc| sc.annotation()).collect();
                        emit(&boxes, Some(p))?;
                    }
                    (s.iter().map(|sc| sc.id.clone()).collect(), s.into_iter().map(|sc| sc.image).collect())
                }
                None if images.is_empty() => return usage("pass --images or --synthetic"),
                None => {
                    let imgs = images
                        .iter()
                        .map(|spec| load_image(spec, size, settings.seed))
                        .collect::<Result<Vec<_>>>()?;
                    (images.iter().map(|s| image_id(s)).collect::<Vec<_>>(), imgs)
                }
            };
            let feats = forward_batch(&m, &imgs)?;
            let items: Vec<_> = ids.into_iter().zip(feats).collect();
            save_features(&items, &out, dtype.into())?;
            emit(&summary(&m, items.len(), &out), None)
        }
    }
}

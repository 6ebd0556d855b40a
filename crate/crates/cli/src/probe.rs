use std::path::PathBuf;
use std::str::FromStr;

use anyhow::Result;
use clap::{Subcommand, ValueEnum};
use savt::analysis::probe::{
    CLASSIFICATION_ITERS, CLASSIFICATION_LR_GRID, DENSE_LR, DEPTH_ITERS, SEGMENTATION_ITERS,
};
use savt::analysis::{
    forward_batch, layer_sweep, train_linear_probe, DenseSample, LayerSweepEntry, ProbeHyper, ProbeTargets,
    ProbeTask,
};
use savt::data::{global_bit_sample, scenes, Scene};
use savt::numerics::{Rng, Tensor};
use savt::vit::{extract_layer_set, LayerFeatures, LayerSet, VitModel};
use serde_json::json;

use crate::inputs::{emit, load_model};
use crate::settings::{usage, ModelFlags, Settings};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerChoice {
    Final,
    Four,
    Single(usize),
}

impl FromStr for LayerChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "final" => Ok(LayerChoice::Final),
            "four" => Ok(LayerChoice::Four),
            n => n
                .parse()
                .ok()
                .filter(|&l| l > 0)
                .map(LayerChoice::Single)
                .ok_or_else(|| format!("expected `final`, `four` or a layer number, got `{n}`")),
        }
    }
}

impl From<LayerChoice> for LayerSet {
    fn from(c: LayerChoice) -> Self {
        match c {
            LayerChoice::Final => LayerSet::Final,
            LayerChoice::Four => LayerSet::FourEvenlySpaced,
            LayerChoice::Single(l) => LayerSet::Single(l),
        }
    }
}

#[derive(clap::Args, Debug, Clone)]
pub struct CommonArgs {
    /// Model file; a fresh model from the seed when omitted.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    /// Training images.
    #[arg(long, default_value_t = 64)]
    train: usize,
    /// Evaluation images; 0 evaluates on the training set.
    #[arg(long, default_value_t = 32)]
    eval: usize,
    /// Foreground classes of the synthetic scenes.
    #[arg(long, default_value_t = 3)]
    n_classes: usize,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    /// Use the full-benchmark iteration count and learning rate (or lr grid) of the task.
    #[arg(long, conflicts_with = "iters")]
    full_schedule: bool,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 50)]
    log_every: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args, Debug, Clone)]
pub struct DenseArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// `final`, `four` (evenly spaced) or a layer number.
    #[arg(long, default_value = "final")]
    layers: LayerChoice,
    #[arg(long)]
    concat_cls: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepTask {
    /// Labels are a bit carried by one beacon patch; only CLS can know it everywhere.
    GlobalBit,
    /// Foreground segmentation of synthetic scenes.
    Scenes,
}

#[derive(Subcommand, Debug)]
pub enum ProbeCommand {
    /// Scene-class classification from the final CLS token.
    Cls {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated rates, or `default` for the standard grid.
        #[arg(long)]
        lr_grid: Option<String>,
    },
    /// Per-patch segmentation with a trained batch norm before the linear head.
    Dense {
        #[command(flatten)]
        args: DenseArgs,
        /// Probe every layer instead (same as `probe layer-sweep --task scenes`).
        #[arg(long)]
        layer_sweep: bool,
    },
    /// Per-patch depth regression.
    Depth {
        #[command(flatten)]
        args: DenseArgs,
    },
    /// Dense probe on every layer, patch-only and with CLS concatenated.
    LayerSweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum, default_value = "global-bit")]
        task: SweepTask,
    },
}

fn model(settings: &Settings, c: &CommonArgs) -> Result<VitModel<f64>> {
    match &c.weights {
        Some(p) => load_model(p),
        None => Ok(VitModel::init(settings.vit_config(&c.model)?, &mut Rng::new(settings.seed))?),
    }
}

fn hyper(
    settings: &Settings,
    c: &CommonArgs,
    default: (usize, f64),
    full: (usize, f64),
) -> Result<ProbeHyper> {
    if c.batch == 0 || c.log_every == 0 || c.train == 0 {
        return usage("--batch, --log-every and --train must be positive");
    }
    let iters = match (c.iters, c.full_schedule) {
        (Some(0), _) => return usage("--iters must be positive"),
        (Some(n), _) => n,
        (None, true) => full.0,
        (None, false) => default.0,
    };
    let lr = c.lr.unwrap_or(if c.full_schedule { full.1 } else { default.1 });
    if !(lr > 0.0 && lr.is_finite()) {
        return usage("--lr must be positive");
    }
    Ok(ProbeHyper {
        lr,
        iters,
        batch: c.batch,
        seed: settings.seed,
        lr_grid: None,
        log_every: c.log_every,
    })
}

struct Split {
    scenes: Vec<Scene>,
    features: Vec<LayerFeatures<f64>>,
}

fn split(m: &VitModel<f64>, n: usize, n_classes: usize, seed: u64) -> Result<Split> {
    let scenes = scenes(n, m.config.image_size, n_classes, seed);
    let images: Vec<Tensor<f64>> = scenes.iter().map(|s| s.image.clone()).collect();
    let features = forward_batch(m, &images)?;
    Ok(Split { scenes, features })
}

fn splits(settings: &Settings, m: &VitModel<f64>, c: &CommonArgs) -> Result<(Split, Option<Split>)> {
    let train = split(m, c.train, c.n_classes, settings.seed)?;
    let eval = if c.eval > 0 {
        Some(split(m, c.eval, c.n_classes, settings.seed.wrapping_add(1))?)
    } else {
        None
    };
    Ok((train, eval))
}

fn stack(parts: Vec<Tensor<f64>>) -> Result<Tensor<f64>> {
    let refs: Vec<&Tensor<f64>> = parts.iter().collect();
    Ok(Tensor::concat(&refs, 0)?)
}

fn dense_inputs(s: &Split, set: LayerSet, concat: bool, patch: usize, n_classes: Option<usize>) -> Result<(Tensor<f64>, ProbeTargets)> {
    let x = stack(
        s.features
            .iter()
            .map(|f| extract_layer_set(f, set, concat))
            .collect::<savt::Result<Vec<_>>>()?,
    )?;
    let targets = match n_classes {
        None => ProbeTargets::Depth(s.scenes.iter().flat_map(|sc| sc.patch_depths(patch)).collect()),
        Some(n_classes) => {
            let labels: Vec<usize> = s.scenes.iter().flat_map(|sc| sc.patch_labels(patch)).collect();
            ProbeTargets::Classes { labels, n_classes }
        }
    };
    Ok((x, targets))
}

fn run_dense(settings: &Settings, a: &DenseArgs, depth: bool) -> Result<()> {
    let c = &a.common;
    let m = model(settings, c)?;
    let set: LayerSet = a.layers.into();
    let full = if depth { DEPTH_ITERS } else { SEGMENTATION_ITERS };
    let h = hyper(settings, c, (500, 0.05), (full, DENSE_LR))?;
    if let LayerChoice::Single(l) = a.layers {
        if l > m.config.n_layers {
            return usage(format!("--layers {l} exceeds the model's {} layers", m.config.n_layers));
        }
    }
    if a.layers == LayerChoice::Four && m.config.n_layers < 4 {
        return usage(format!("--layers four needs at least 4 layers, model has {}", m.config.n_layers));
    }
    let (train, eval) = splits(settings, &m, c)?;
    let patch = m.config.patch_size;
    // background plus one label per foreground class
    let n_labels = (!depth).then_some(c.n_classes + 1);
    let (x, t) = dense_inputs(&train, set, a.concat_cls, patch, n_labels)?;
    let task = if depth { ProbeTask::DenseDepth } else { ProbeTask::DenseSeg };
    let report = match &eval {
        Some(e) => {
            let (ex, et) = dense_inputs(e, set, a.concat_cls, patch, n_labels)?;
            train_linear_probe(task, &x, &t, Some((&ex, &et)), &h)?
        }
        None => train_linear_probe(task, &x, &t, None, &h)?,
    };
    emit(&report, c.out.as_ref())
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    if s == "default" {
        return Ok(CLASSIFICATION_LR_GRID.to_vec());
    }
    let grid = s
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .or_else(|_| usage(format!("invalid --lr-grid `{s}`")))?;
    if grid.is_empty() || grid.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return usage("--lr-grid rates must be positive");
    }
    Ok(grid)
}

fn run_cls(settings: &Settings, c: &CommonArgs, grid: Option<&str>) -> Result<()> {
    let mut h = hyper(settings, c, (500, 0.05), (CLASSIFICATION_ITERS, 0.05))?;
    h.lr_grid = match grid {
        Some(g) => Some(parse_grid(g)?),
        None if c.full_schedule && c.lr.is_none() => Some(CLASSIFICATION_LR_GRID.to_vec()),
        None => None,
    };
    if h.lr_grid.is_some() && c.eval == 0 {
        return usage("--lr-grid needs an eval split (--eval > 0)");
    }
    let m = model(settings, c)?;
    let (train, eval) = splits(settings, &m, c)?;
    let inputs = |s: &Split| -> Result<(Tensor<f64>, ProbeTargets)> {
        let rows: Vec<Vec<f64>> = s.features.iter().map(|f| f.final_ln().row(0).to_vec()).collect();
        let labels = s.scenes.iter().map(|sc| sc.class).collect();
        Ok((Tensor::from_rows(&rows)?, ProbeTargets::Classes { labels, n_classes: c.n_classes }))
    };
    let (x, t) = inputs(&train)?;
    let report = match &eval {
        Some(e) => {
            let (ex, et) = inputs(e)?;
            train_linear_probe(ProbeTask::Classification, &x, &t, Some((&ex, &et)), &h)?
        }
        None => train_linear_probe(ProbeTask::Classification, &x, &t, None, &h)?,
    };
    emit(&report, c.out.as_ref())
}

fn curve(entries: &[LayerSweepEntry]) -> Vec<serde_json::Value> {
    entries
        .iter()
        .map(|e| json!({ "layer": e.layer, "metric": e.report.metric, "input_dim": e.report.input_dim, "loss_curve": e.report.loss_curve }))
        .collect()
}

fn run_sweep(settings: &Settings, c: &CommonArgs, task: SweepTask) -> Result<()> {
    let m = model(settings, c)?;
    let h = hyper(settings, c, (1500, 0.05), (SEGMENTATION_ITERS, DENSE_LR))?;
    let patch = m.config.patch_size;
    let size = m.config.image_size;
    let mut rng = Rng::new(settings.seed);
    let make = |n: usize, rng: &mut Rng, seed: u64| -> Vec<DenseSample<f64>> {
        match task {
            SweepTask::GlobalBit => (0..n)
                .map(|_| {
                    let s = global_bit_sample(size, patch, rng);
                    DenseSample { image: s.image, labels: s.labels }
                })
                .collect(),
            SweepTask::Scenes => scenes(n, size, c.n_classes, seed)
                .into_iter()
                .map(|s| DenseSample { labels: s.patch_labels(patch), image: s.image })
                .collect(),
        }
    };
    let train = make(c.train, &mut rng, settings.seed);
    let eval = make(c.eval, &mut rng, settings.seed.wrapping_add(1));
    let n_labels = match task {
        SweepTask::GlobalBit => 2,
        SweepTask::Scenes => c.n_classes + 1,
    };
    let plain = layer_sweep(&m, &train, &eval, n_labels, false, &h)?;
    let concat = layer_sweep(&m, &train, &eval, n_labels, true, &h)?;
    let cls_wins = plain.iter().zip(&concat).all(|(p, q)| q.report.metric > p.report.metric);
    emit(
        &json!({
            "task": match task { SweepTask::GlobalBit => "global-bit", SweepTask::Scenes => "scenes" },
            "normalizer": m.config.normalizer,
            "n_layers": m.config.n_layers,
            "metric": plain.first().map(|e| e.report.metric_kind),
            "hyper": h,
            "patch_only": curve(&plain),
            "cls_concat": curve(&concat),
            "cls_concat_wins_every_layer": cls_wins,
        }),
        c.out.as_ref(),
    )
}

pub fn run(settings: &Settings, cmd: ProbeCommand) -> Result<()> {
    match cmd {
        ProbeCommand::Cls { common, lr_grid } => run_cls(settings, &common, lr_grid.as_deref()),
        ProbeCommand::Dense { args, layer_sweep } => {
            if layer_sweep {
                run_sweep(settings, &args.common, SweepTask::Scenes)
            } else {
                run_dense(settings, &args, false)
            }
        }
        ProbeCommand::Depth { args } => run_dense(settings, &args, true),
        ProbeCommand::LayerSweep { common, task } => run_sweep(settings, &common, task),
    }
}

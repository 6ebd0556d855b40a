//! Global settings: command-line flags over a key=value config file over
//! built-in defaults.

use std::collections::BTreeMap;
use std::fmt;

use anyhow::Result;
use clap::ValueEnum;
use savt::normalizers::Normalizer;
use savt::vit::VitConfig;
use savt::DType;

use crate::GlobalArgs;

/// Bad flags, bad config or unparseable input; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Tiny,
    #[value(name = "vit-s")]
    VitS,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StoreType {
    F32,
    F64,
}

impl From<StoreType> for DType {
    fn from(s: StoreType) -> Self {
        match s {
            StoreType::F32 => DType::F32,
            StoreType::F64 => DType::F64,
        }
    }
}

const MODEL_KEYS: [&str; 10] = [
    "preset",
    "image_size",
    "patch_size",
    "d_model",
    "n_heads",
    "n_layers",
    "mlp_ratio",
    "n_registers",
    "normalizer",
    "ln_eps",
];

#[derive(Debug, Clone, Default)]
pub struct Settings {
    pub seed: u64,
    pub threads: Option<usize>,
    model: BTreeMap<String, String>,
}

/// Model flags shared by subcommands that build a model.
#[derive(clap::Args, Debug, Clone, Default)]
pub struct ModelFlags {
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Shorthand for `--preset tiny`.
    #[arg(long, conflicts_with = "preset")]
    pub tiny: bool,
    #[arg(long)]
    pub normalizer: Option<Normalizer>,
    #[arg(long)]
    pub n_registers: Option<usize>,
}

fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return usage(format!("config file line {}: expected key=value", i + 1));
        };
        let (k, v) = (k.trim().replace('-', "_"), v.trim().to_string());
        if k != "seed" && k != "threads" && !MODEL_KEYS.contains(&k.as_str()) {
            return usage(format!("config file line {}: unknown key `{k}`", i + 1));
        }
        out.insert(k, v);
    }
    Ok(out)
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .or_else(|_| usage(format!("invalid value `{v}` for `{key}`")))
}

impl Settings {
    pub fn resolve(g: &GlobalArgs) -> Result<Self> {
        let mut file = match &g.config_file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .or_else(|e| usage(format!("cannot read config file {}: {e}", p.display())))?;
                parse_config(&text)?
            }
            None => BTreeMap::new(),
        };
        let seed = match (g.seed, file.remove("seed")) {
            (Some(s), _) => s,
            (None, Some(v)) => parse_value("seed", &v)?,
            (None, None) => 0,
        };
        let threads = match (g.threads, file.remove("threads")) {
            (Some(t), _) => Some(t),
            (None, Some(v)) => Some(parse_value("threads", &v)?),
            (None, None) => None,
        };
        if threads == Some(0) {
            return usage("--threads must be at least 1");
        }
        Ok(Self {
            seed,
            threads,
            model: file,
        })
    }

    /// Model configuration: flags, then config file, then the preset.
    pub fn vit_config(&self, flags: &ModelFlags) -> Result<VitConfig> {
        let flag_preset = if flags.tiny { Some(Preset::Tiny) } else { flags.preset };
        let preset = match (flag_preset, self.model.get("preset")) {
            (Some(p), _) => p,
            (None, Some(v)) => Preset::from_str(v, true).or_else(|_| usage(format!("unknown preset `{v}`")))?,
            (None, None) => Preset::Tiny,
        };
        let mut cfg = match preset {
            Preset::Tiny => VitConfig::tiny(),
            Preset::VitS => VitConfig::vit_small(),
        };
        for (k, v) in &self.model {
            match k.as_str() {
                "image_size" => cfg.image_size = parse_value(k, v)?,
                "patch_size" => cfg.patch_size = parse_value(k, v)?,
                "d_model" => cfg.d_model = parse_value(k, v)?,
                "n_heads" => cfg.n_heads = parse_value(k, v)?,
                "n_layers" => cfg.n_layers = parse_value(k, v)?,
                "mlp_ratio" => cfg.mlp_ratio = parse_value(k, v)?,
                "n_registers" => cfg.n_registers = parse_value(k, v)?,
                "normalizer" => cfg.normalizer = parse_value(k, v)?,
                "ln_eps" => cfg.ln_eps = parse_value(k, v)?,
                _ => {}
            }
        }
        if let Some(n) = flags.normalizer {
            cfg.normalizer = n;
        }
        if let Some(r) = flags.n_registers {
            cfg.n_registers = r;
        }
        cfg.validate().or_else(|e| usage(e.to_string()))?;
        Ok(cfg)
    }
}

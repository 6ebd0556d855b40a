use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::VitConfig;
use super::container::Container;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::{DType, Scalar};

const FEATURES_KIND: &str = "layer-features";

/// Where each token lives: index 0 is CLS, then registers, then patches in
/// row-major grid order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub n_registers: usize,
    pub grid: usize,
    pub patch_size: usize,
}

impl TokenLayout {
    pub fn from_config(c: &VitConfig) -> Self {
        Self {
            n_registers: c.n_registers,
            grid: c.grid(),
            patch_size: c.patch_size,
        }
    }

    pub const CLS: usize = 0;

    pub fn n_patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn n_tokens(&self) -> usize {
        1 + self.n_registers + self.n_patches()
    }

    pub fn register_tokens(&self) -> std::ops::Range<usize> {
        1..1 + self.n_registers
    }

    pub fn patch_tokens(&self) -> std::ops::Range<usize> {
        1 + self.n_registers..self.n_tokens()
    }

    /// Grid (row, col) of the `i`-th patch.
    pub fn patch_coords(&self, i: usize) -> (usize, usize) {
        (i / self.grid, i % self.grid)
    }

    /// Pixel rectangle `(x0, y0, x1, y1)` of the `i`-th patch, half-open.
    pub fn patch_rect(&self, i: usize) -> (usize, usize, usize, usize) {
        let (r, c) = self.patch_coords(i);
        let p = self.patch_size;
        (c * p, r * p, (c + 1) * p, (r + 1) * p)
    }
}

/// Token features from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFeatures<S> {
    layers: Vec<Tensor<S>>,
    final_ln: Tensor<S>,
    layout: TokenLayout,
}

/// Which layers feed a probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSet {
    /// Patches after the final layer norm.
    Final,
    /// Four layers at `⌈L·k/4⌉`, k = 1..4, before the final layer norm.
    FourEvenlySpaced,
    /// One block output (1-based), before the final layer norm.
    Single(usize),
}

/// Layer indices (1-based) chosen by [`LayerSet::FourEvenlySpaced`].
pub fn four_evenly_spaced(n_layers: usize) -> Result<[usize; 4]> {
    if n_layers < 4 {
        return Err(Error::Config(format!(
            "four evenly spaced layers need at least 4 layers, model has {n_layers}"
        )));
    }
    Ok([1, 2, 3, 4].map(|k| (n_layers * k).div_ceil(4)))
}

impl<S: Scalar> LayerFeatures<S> {
    pub fn new(layers: Vec<Tensor<S>>, final_ln: Tensor<S>, layout: TokenLayout) -> Result<Self> {
        let t = layout.n_tokens();
        for x in layers.iter().chain(std::iter::once(&final_ln)) {
            if x.ndim() != 2 || x.dim(0) != t || x.dim(1) != final_ln.row_len() {
                return Err(Error::dim("LayerFeatures", x.shape(), &[t, final_ln.row_len()]));
            }
        }
        if layers.is_empty() {
            return Err(Error::InvalidArgument("LayerFeatures needs at least one layer".into()));
        }
        Ok(Self {
            layers,
            final_ln,
            layout,
        })
    }

    pub fn layout(&self) -> TokenLayout {
        self.layout
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn d_model(&self) -> usize {
        self.final_ln.row_len()
    }

    /// Block output `layer` (1-based), all tokens.
    pub fn layer(&self, layer: usize) -> Result<&Tensor<S>> {
        if layer == 0 || layer > self.layers.len() {
            return Err(Error::LayerOutOfRange {
                layer,
                n_layers: self.layers.len(),
            });
        }
        Ok(&self.layers[layer - 1])
    }

    pub fn final_ln(&self) -> &Tensor<S> {
        &self.final_ln
    }

    fn select(&self, tokens: &Tensor<S>, range: std::ops::Range<usize>) -> Tensor<S> {
        let idx: Vec<usize> = range.collect();
        tokens.gather_rows(&idx).expect("layout ranges are in bounds")
    }

    pub fn patches(&self, layer: usize) -> Result<Tensor<S>> {
        Ok(self.select(self.layer(layer)?, self.layout.patch_tokens()))
    }

    pub fn cls(&self, layer: usize) -> Result<&[S]> {
        Ok(self.layer(layer)?.row(TokenLayout::CLS))
    }

    pub fn final_patches(&self) -> Tensor<S> {
        self.select(&self.final_ln, self.layout.patch_tokens())
    }

    pub fn registers(&self, layer: usize) -> Result<Tensor<S>> {
        Ok(self.select(self.layer(layer)?, self.layout.register_tokens()))
    }
}

fn with_cls<S: Scalar>(patches: &Tensor<S>, cls: &[S]) -> Result<Tensor<S>> {
    let n = patches.dim(0);
    let tiled = Tensor::from_fn(&[n, cls.len()], |i| cls[i % cls.len()]);
    Tensor::concat(&[patches, &tiled], 1)
}

/// Probe input: one row per patch (registers are never included).
///
/// With `concat_cls`, the CLS token of the same layer(s) is appended to
/// every patch row.
pub fn extract_layer_set<S: Scalar>(features: &LayerFeatures<S>, mode: LayerSet, concat_cls: bool) -> Result<Tensor<S>> {
    match mode {
        LayerSet::Final => {
            let patches = features.final_patches();
            if concat_cls {
                with_cls(&patches, features.final_ln.row(TokenLayout::CLS))
            } else {
                Ok(patches)
            }
        }
        LayerSet::Single(layer) => {
            let patches = features.patches(layer)?;
            if concat_cls {
                with_cls(&patches, features.cls(layer)?)
            } else {
                Ok(patches)
            }
        }
        LayerSet::FourEvenlySpaced => {
            let picked = four_evenly_spaced(features.n_layers())?;
            let mut parts = Vec::with_capacity(8);
            for &l in &picked {
                parts.push(features.patches(l)?);
            }
            if concat_cls {
                for &l in &picked {
                    let cls = features.cls(l)?;
                    parts.push(Tensor::from_fn(&[features.layout.n_patches(), cls.len()], |i| {
                        cls[i % cls.len()]
                    }));
                }
            }
            let refs: Vec<&Tensor<S>> = parts.iter().collect();
            Tensor::concat(&refs, 1)
        }
    }
}

/// Writes features of several images into one SAVT container.
pub fn features_to_container<S: Scalar>(items: &[(String, LayerFeatures<S>)], dtype: DType) -> Result<Container> {
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidArgument("no features to store".into()))?;
    let layout = first.1.layout;
    let n_layers = first.1.n_layers();
    let ids: Vec<&str> = items.iter().map(|(id, _)| id.as_str()).collect();
    let mut c = Container::new(json!({
        "kind": FEATURES_KIND,
        "layout": layout,
        "n_layers": n_layers,
        "image_ids": ids,
    }));
    for (id, f) in items {
        if f.layout != layout || f.n_layers() != n_layers {
            return Err(Error::InvalidArgument(format!("features for `{id}` have a different layout")));
        }
        for (l, x) in f.layers.iter().enumerate() {
            c.push(format!("{id}/layer.{}", l + 1), x, dtype);
        }
        c.push(format!("{id}/final_ln"), &f.final_ln, dtype);
    }
    Ok(c)
}

pub fn features_from_container<S: Scalar>(c: &Container) -> Result<Vec<(String, LayerFeatures<S>)>> {
    let meta = &c.meta;
    if meta.get("kind").and_then(|k| k.as_str()) != Some(FEATURES_KIND) {
        return Err(Error::Manifest(format!("expected kind `{FEATURES_KIND}`")));
    }
    let layout: TokenLayout = serde_json::from_value(meta["layout"].clone())
        .map_err(|e| Error::Manifest(format!("bad layout: {e}")))?;
    let n_layers = meta["n_layers"]
        .as_u64()
        .ok_or_else(|| Error::Manifest("missing n_layers".into()))? as usize;
    let ids: Vec<String> = serde_json::from_value(meta["image_ids"].clone())
        .map_err(|e| Error::Manifest(format!("bad image_ids: {e}")))?;
    let fetch = |name: String| -> Result<Tensor<S>> {
        c.get(&name)
            .map(|t| t.tensor.cast::<S>())
            .ok_or_else(|| Error::Manifest(format!("missing tensor `{name}`")))
    };
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let layers = (1..=n_layers)
            .map(|l| fetch(format!("{id}/layer.{l}")))
            .collect::<Result<Vec<_>>>()?;
        let final_ln = fetch(format!("{id}/final_ln"))?;
        let f = LayerFeatures::new(layers, final_ln, layout).map_err(|e| Error::Manifest(e.to_string()))?;
        out.push((id, f));
    }
    Ok(out)
}

pub fn save_features<S: Scalar>(items: &[(String, LayerFeatures<S>)], path: impl AsRef<Path>, dtype: DType) -> Result<()> {
    features_to_container(items, dtype)?.write(path)
}

pub fn load_features<S: Scalar>(path: impl AsRef<Path>) -> Result<Vec<(String, LayerFeatures<S>)>> {
    features_from_container(&Container::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_layer_rule() {
        assert_eq!(four_evenly_spaced(12).unwrap(), [3, 6, 9, 12]);
        assert_eq!(four_evenly_spaced(4).unwrap(), [1, 2, 3, 4]);
        assert_eq!(four_evenly_spaced(6).unwrap(), [2, 3, 5, 6]);
        assert!(four_evenly_spaced(3).is_err());
    }

    #[test]
    fn four_layer_rule_matches_enumeration() {
        // Smallest layer index reaching each quarter of the depth.
        for n in 4..=40usize {
            let expect: Vec<usize> = (1..=4)
                .map(|k| (1..=n).find(|&l| 4 * l >= k * n).unwrap())
                .collect();
            assert_eq!(four_evenly_spaced(n).unwrap().to_vec(), expect);
        }
    }

    #[test]
    fn layout_ranges() {
        let l = TokenLayout {
            n_registers: 4,
            grid: 3,
            patch_size: 16,
        };
        assert_eq!(l.n_tokens(), 14);
        assert_eq!(l.register_tokens(), 1..5);
        assert_eq!(l.patch_tokens(), 5..14);
        assert_eq!(l.patch_rect(5), (32, 16, 48, 32));
    }
}

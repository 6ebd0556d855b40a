use std::collections::HashMap;
use std::path::Path;

use serde_json::json;

use super::config::VitConfig;
use super::container::Container;
use super::features::{LayerFeatures, TokenLayout};
use crate::attention::{affine, multi_head_attend, AttentionWeights};
use crate::error::{Error, Result};
use crate::numerics::{gelu, layer_norm, Rng, Tensor};
use crate::scalar::{DType, Scalar};

const INIT_STD: f64 = 0.02;
const MODEL_KIND: &str = "vit-model";

#[derive(Debug, Clone, PartialEq)]
pub struct Block<S> {
    pub norm1_weight: Vec<S>,
    pub norm1_bias: Vec<S>,
    pub attn: AttentionWeights<S>,
    pub norm2_weight: Vec<S>,
    pub norm2_bias: Vec<S>,
    /// `[d_model × hidden]`
    pub fc1_weight: Tensor<S>,
    pub fc1_bias: Vec<S>,
    /// `[hidden × d_model]`
    pub fc2_weight: Tensor<S>,
    pub fc2_bias: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitModel<S> {
    pub config: VitConfig,
    /// `[patch_dim × d_model]`, patch pixels flattened as (row, col, channel).
    pub patch_weight: Tensor<S>,
    pub patch_bias: Vec<S>,
    /// `[n_patches × d_model]`; only patch tokens get positions.
    pub pos_embed: Tensor<S>,
    pub cls_token: Vec<S>,
    /// `[n_registers × d_model]`
    pub registers: Tensor<S>,
    pub blocks: Vec<Block<S>>,
    pub norm_weight: Vec<S>,
    pub norm_bias: Vec<S>,
}

impl<S: Scalar> VitModel<S> {
    /// Truncated-normal (σ = 0.02) weights, zero biases, unit layer-norm gains.
    pub fn init(config: VitConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.d_model, config.mlp_hidden());
        let mut tn = |shape: &[usize]| Tensor::from_fn(shape, |_| S::of(rng.trunc_normal(INIT_STD)));
        let patch_weight = tn(&[config.patch_dim(), d]);
        let pos_embed = tn(&[config.n_patches(), d]);
        let cls_token = tn(&[d]).into_data();
        let registers = tn(&[config.n_registers, d]);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let attn = AttentionWeights::init(d, INIT_STD, rng);
            let fc1_weight = Tensor::from_fn(&[d, h], |_| S::of(rng.trunc_normal(INIT_STD)));
            let fc2_weight = Tensor::from_fn(&[h, d], |_| S::of(rng.trunc_normal(INIT_STD)));
            blocks.push(Block {
                norm1_weight: vec![S::one(); d],
                norm1_bias: vec![S::zero(); d],
                attn,
                norm2_weight: vec![S::one(); d],
                norm2_bias: vec![S::zero(); d],
                fc1_weight,
                fc1_bias: vec![S::zero(); h],
                fc2_weight,
                fc2_bias: vec![S::zero(); d],
            });
        }
        Ok(Self {
            config,
            patch_weight,
            patch_bias: vec![S::zero(); d],
            pos_embed,
            cls_token,
            registers,
            blocks,
            norm_weight: vec![S::one(); d],
            norm_bias: vec![S::zero(); d],
        })
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout::from_config(&self.config)
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Splits an `[H × W × 3]` image into `[n_patches × patch_dim]`.
    pub fn patchify(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        let c = &self.config;
        let size = c.image_size;
        if image.shape() != [size, size, 3] {
            return Err(Error::dim("patchify", image.shape(), &[size, size, 3]));
        }
        let (g, p) = (c.grid(), c.patch_size);
        let mut data = Vec::with_capacity(c.n_patches() * c.patch_dim());
        for gy in 0..g {
            for gx in 0..g {
                for py in 0..p {
                    let start = ((gy * p + py) * size + gx * p) * 3;
                    data.extend_from_slice(&image.data()[start..start + p * 3]);
                }
            }
        }
        Tensor::new(vec![c.n_patches(), c.patch_dim()], data)
    }

    /// Token matrix entering the first block: CLS, registers, then patches
    /// plus their positional embeddings.
    pub fn embed(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        let patches = affine(&self.patchify(image)?, &self.patch_weight, Some(&self.patch_bias))?;
        let patches = patches.add(&self.pos_embed)?;
        let cls = Tensor::new(vec![1, self.config.d_model], self.cls_token.clone())?;
        Tensor::concat(&[&cls, &self.registers, &patches], 0)
    }

    fn block_forward(&self, block: &Block<S>, x: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let eps = S::of(self.config.ln_eps);
        let h = layer_norm(x, &block.norm1_weight, &block.norm1_bias, eps)?;
        let (attn_out, maps) = multi_head_attend(&self.config.attention(), &block.attn, &h)?;
        let x = x.add(&attn_out)?;
        let h = layer_norm(&x, &block.norm2_weight, &block.norm2_bias, eps)?;
        let h = gelu(&affine(&h, &block.fc1_weight, Some(&block.fc1_bias))?);
        let h = affine(&h, &block.fc2_weight, Some(&block.fc2_bias))?;
        Ok((x.add(&h)?, maps))
    }

    fn run(&self, image: &Tensor<S>, keep_attention: bool) -> Result<(LayerFeatures<S>, Vec<Tensor<S>>)> {
        if !image.is_finite() {
            return Err(Error::InvalidArgument("image contains non-finite pixels".into()));
        }
        let mut x = self.embed(image)?;
        let mut layers = Vec::with_capacity(self.blocks.len());
        let mut maps = Vec::new();
        for block in &self.blocks {
            let (next, a) = self.block_forward(block, &x)?;
            if keep_attention {
                maps.push(a);
            }
            layers.push(next.clone());
            x = next;
        }
        let final_ln = layer_norm(&x, &self.norm_weight, &self.norm_bias, S::of(self.config.ln_eps))?;
        Ok((LayerFeatures::new(layers, final_ln, self.layout())?, maps))
    }

    /// Per-layer token features plus the final layer-normed tokens.
    pub fn forward_features(&self, image: &Tensor<S>) -> Result<LayerFeatures<S>> {
        Ok(self.run(image, false)?.0)
    }

    /// As [`forward_features`](Self::forward_features), also returning each
    /// layer's attention maps, `[heads × T × T]`.
    pub fn forward_with_attention(&self, image: &Tensor<S>) -> Result<(LayerFeatures<S>, Vec<Tensor<S>>)> {
        self.run(image, true)
    }

    /// Parameters in canonical (file) order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<S>)> {
        let v = |x: &Vec<S>| Tensor::from_vec(x.clone());
        let mut out = vec![
            ("patch_embed.weight".to_string(), self.patch_weight.clone()),
            ("patch_embed.bias".to_string(), v(&self.patch_bias)),
            ("pos_embed".to_string(), self.pos_embed.clone()),
            ("cls_token".to_string(), v(&self.cls_token)),
            ("register_tokens".to_string(), self.registers.clone()),
        ];
        let d = self.config.d_model;
        for (i, b) in self.blocks.iter().enumerate() {
            let bias = |x: &Option<Vec<S>>| Tensor::from_vec(x.clone().unwrap_or_else(|| vec![S::zero(); d]));
            let p = |s: &str| format!("blocks.{i}.{s}");
            out.extend([
                (p("norm1.weight"), v(&b.norm1_weight)),
                (p("norm1.bias"), v(&b.norm1_bias)),
                (p("attn.q.weight"), b.attn.w_q.clone()),
                (p("attn.q.bias"), bias(&b.attn.b_q)),
                (p("attn.k.weight"), b.attn.w_k.clone()),
                (p("attn.k.bias"), bias(&b.attn.b_k)),
                (p("attn.v.weight"), b.attn.w_v.clone()),
                (p("attn.v.bias"), bias(&b.attn.b_v)),
                (p("attn.proj.weight"), b.attn.w_o.clone()),
                (p("attn.proj.bias"), bias(&b.attn.b_o)),
                (p("norm2.weight"), v(&b.norm2_weight)),
                (p("norm2.bias"), v(&b.norm2_bias)),
                (p("mlp.fc1.weight"), b.fc1_weight.clone()),
                (p("mlp.fc1.bias"), v(&b.fc1_bias)),
                (p("mlp.fc2.weight"), b.fc2_weight.clone()),
                (p("mlp.fc2.bias"), v(&b.fc2_bias)),
            ]);
        }
        out.push(("norm.weight".to_string(), v(&self.norm_weight)));
        out.push(("norm.bias".to_string(), v(&self.norm_bias)));
        out
    }

    /// Expected (name, shape) list for a config, in file order.
    pub fn expected_manifest(config: &VitConfig) -> Vec<(String, Vec<usize>)> {
        let (d, h) = (config.d_model, config.mlp_hidden());
        let mut out = vec![
            ("patch_embed.weight".to_string(), vec![config.patch_dim(), d]),
            ("patch_embed.bias".to_string(), vec![d]),
            ("pos_embed".to_string(), vec![config.n_patches(), d]),
            ("cls_token".to_string(), vec![d]),
            ("register_tokens".to_string(), vec![config.n_registers, d]),
        ];
        for i in 0..config.n_layers {
            let p = |s: &str| format!("blocks.{i}.{s}");
            out.extend([
                (p("norm1.weight"), vec![d]),
                (p("norm1.bias"), vec![d]),
                (p("attn.q.weight"), vec![d, d]),
                (p("attn.q.bias"), vec![d]),
                (p("attn.k.weight"), vec![d, d]),
                (p("attn.k.bias"), vec![d]),
                (p("attn.v.weight"), vec![d, d]),
                (p("attn.v.bias"), vec![d]),
                (p("attn.proj.weight"), vec![d, d]),
                (p("attn.proj.bias"), vec![d]),
                (p("norm2.weight"), vec![d]),
                (p("norm2.bias"), vec![d]),
                (p("mlp.fc1.weight"), vec![d, h]),
                (p("mlp.fc1.bias"), vec![h]),
                (p("mlp.fc2.weight"), vec![h, d]),
                (p("mlp.fc2.bias"), vec![d]),
            ]);
        }
        out.push(("norm.weight".to_string(), vec![d]));
        out.push(("norm.bias".to_string(), vec![d]));
        out
    }

    pub fn to_container(&self, dtype: DType) -> Container {
        let mut c = Container::new(json!({ "kind": MODEL_KIND, "config": self.config }));
        for (name, t) in self.named_tensors() {
            c.push(name, &t, dtype);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let kind = c.meta.get("kind").and_then(|k| k.as_str());
        if kind != Some(MODEL_KIND) {
            return Err(Error::Manifest(format!("expected kind `{MODEL_KIND}`, found {kind:?}")));
        }
        let config: VitConfig = serde_json::from_value(c.meta.get("config").cloned().unwrap_or_default())
            .map_err(|e| Error::Manifest(format!("bad config: {e}")))?;
        config
            .validate()
            .map_err(|e| Error::Manifest(format!("stored config is invalid: {e}")))?;

        let expected = Self::expected_manifest(&config);
        let found: Vec<(String, Vec<usize>)> = c
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.tensor.shape().to_vec()))
            .collect();
        if found != expected {
            let first_diff = expected
                .iter()
                .zip(&found)
                .find(|(e, f)| e != f)
                .map(|(e, f)| format!("expected {} {:?}, found {} {:?}", e.0, e.1, f.0, f.1))
                .unwrap_or_else(|| format!("expected {} tensors, found {}", expected.len(), found.len()));
            return Err(Error::Manifest(format!("shape manifest mismatch: {first_diff}")));
        }

        let mut map: HashMap<&str, Tensor<S>> =
            c.tensors.iter().map(|(n, t)| (n.as_str(), t.tensor.cast::<S>())).collect();
        let mut take = |name: &str| map.remove(name).expect("presence checked against manifest");
        let patch_weight = take("patch_embed.weight");
        let patch_bias = take("patch_embed.bias").into_data();
        let pos_embed = take("pos_embed");
        let cls_token = take("cls_token").into_data();
        let registers = take("register_tokens");
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let mut t = |s: &str| take(&format!("blocks.{i}.{s}"));
            let norm1_weight = t("norm1.weight").into_data();
            let norm1_bias = t("norm1.bias").into_data();
            let w_q = t("attn.q.weight");
            let b_q = Some(t("attn.q.bias").into_data());
            let w_k = t("attn.k.weight");
            let b_k = Some(t("attn.k.bias").into_data());
            let w_v = t("attn.v.weight");
            let b_v = Some(t("attn.v.bias").into_data());
            let w_o = t("attn.proj.weight");
            let b_o = Some(t("attn.proj.bias").into_data());
            blocks.push(Block {
                norm1_weight,
                norm1_bias,
                attn: AttentionWeights {
                    w_q,
                    w_k,
                    w_v,
                    w_o,
                    b_q,
                    b_k,
                    b_v,
                    b_o,
                },
                norm2_weight: t("norm2.weight").into_data(),
                norm2_bias: t("norm2.bias").into_data(),
                fc1_weight: t("mlp.fc1.weight"),
                fc1_bias: t("mlp.fc1.bias").into_data(),
                fc2_weight: t("mlp.fc2.weight"),
                fc2_bias: t("mlp.fc2.bias").into_data(),
            });
        }
        Ok(Self {
            config,
            patch_weight,
            patch_bias,
            pos_embed,
            cls_token,
            registers,
            blocks,
            norm_weight: take("norm.weight").into_data(),
            norm_bias: take("norm.bias").into_data(),
        })
    }

    /// Rounds every parameter to `dtype`, as a save/load round trip would.
    pub fn rounded_to(&self, dtype: DType) -> Result<Self> {
        Self::from_container(&self.to_container(dtype))
    }

    pub fn save(&self, path: impl AsRef<Path>, dtype: DType) -> Result<()> {
        self.to_container(dtype).write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

pub fn save_model<S: Scalar>(model: &VitModel<S>, path: impl AsRef<Path>, dtype: DType) -> Result<()> {
    model.save(path, dtype)
}

pub fn load_model<S: Scalar>(path: impl AsRef<Path>) -> Result<VitModel<S>> {
    VitModel::load(path)
}

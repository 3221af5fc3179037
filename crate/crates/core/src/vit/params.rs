use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Missing JSON fields take their [`ViTConfig::toy`] values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViTConfig {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    /// Patch side in pixels.
    pub p: usize,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    /// Number of classes.
    pub k: usize,
    pub use_class_token: bool,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ViTConfig {
    /// 16x16 RGB, 4x4 patches, d=32, 4 heads, 2 layers, 4 classes.
    pub fn toy() -> Self {
        Self {
            h: 16,
            w: 16,
            c: 3,
            p: 4,
            d: 32,
            heads: 4,
            layers: 2,
            k: 4,
            use_class_token: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.h == 0 || self.w == 0 || !self.h.is_multiple_of(self.p) || !self.w.is_multiple_of(self.p)
        {
            return Err(Error::param(format!(
                "patch size {} must divide the image size {}x{}",
                self.p, self.h, self.w
            )));
        }
        if self.c != 1 && self.c != 3 {
            return Err(Error::param(format!("channel count {} must be 1 or 3", self.c)));
        }
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::param(format!(
                "embedding dim {} must be divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.k < 2 {
            return Err(Error::param(format!("need at least 2 classes, got {}", self.k)));
        }
        if self.layers == 0 {
            return Err(Error::param("need at least one encoder layer"));
        }
        Ok(())
    }

    pub fn grid_rows(&self) -> usize {
        self.h / self.p
    }

    pub fn grid_cols(&self) -> usize {
        self.w / self.p
    }

    pub fn grid_tokens(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    /// Flattened patch length `p * p * c`.
    pub fn patch_dim(&self) -> usize {
        self.p * self.p * self.c
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// All trainable tensors. Linear weights are stored `in x out`.
///
/// The class-token embedding and its positional vector are always present;
/// they receive zero gradient when the class token is disabled.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub pos: Tensor,
    pub cls: Tensor,
    pub cls_pos: Tensor,
    pub layers: Vec<LayerParams>,
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Name and shape of one serialized tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ModelParams {
    pub fn zeros(cfg: &ViTConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let z = |shape: Vec<usize>| Tensor::zeros(shape);
        let one = |n: usize| Tensor::filled(vec![n], 1.0);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                ln1_gamma: one(d),
                ln1_beta: z(vec![d]),
                wq: z(vec![d, d]),
                bq: z(vec![d]),
                wk: z(vec![d, d]),
                bk: z(vec![d]),
                wv: z(vec![d, d]),
                bv: z(vec![d]),
                wo: z(vec![d, d]),
                bo: z(vec![d]),
                ln2_gamma: one(d),
                ln2_beta: z(vec![d]),
                w1: z(vec![d, cfg.mlp_dim()]),
                b1: z(vec![cfg.mlp_dim()]),
                w2: z(vec![cfg.mlp_dim(), d]),
                b2: z(vec![d]),
            })
            .collect();
        Ok(Self {
            patch_w: z(vec![cfg.patch_dim(), d]),
            patch_b: z(vec![d]),
            pos: z(vec![cfg.grid_tokens(), d]),
            cls: z(vec![d]),
            cls_pos: z(vec![d]),
            layers,
            norm_gamma: one(d),
            norm_beta: z(vec![d]),
            head_w: z(vec![d, cfg.k]),
            head_b: z(vec![cfg.k]),
        })
    }

    /// Training initialization: Xavier-uniform linear weights, N(0, 0.02)
    /// embeddings, unit layer-norm scales, zero biases.
    pub fn init(cfg: &ViTConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = Normal::new(0.0f32, 0.02).expect("valid std");
        for (name, t) in params.tensors_mut() {
            let shape = t.shape().to_vec();
            if name.ends_with("gamma") || name.ends_with("beta") || shape.len() == 1 && !name.starts_with("cls") {
                continue;
            }
            if shape.len() == 2 && name != "pos_embed" {
                let limit = (6.0 / (shape[0] + shape[1]) as f32).sqrt();
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(-limit..limit));
            } else {
                t.data_mut().iter_mut().for_each(|v| *v = embed.sample(&mut rng));
            }
        }
        Ok(params)
    }

    /// Every tensor, including layer-norm and bias terms, drawn from N(0, std).
    /// Layer-norm scales are drawn around 1.
    pub fn random(cfg: &ViTConfig, seed: u64, std: f32) -> Result<Self> {
        let mut params = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0f32, std).map_err(|e| Error::param(e.to_string()))?;
        for (name, t) in params.tensors_mut() {
            let base = if name.ends_with("gamma") { 1.0 } else { 0.0 };
            t.data_mut().iter_mut().for_each(|v| *v = base + dist.sample(&mut rng));
        }
        Ok(params)
    }

    /// Tensors in serialization order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch_embed.weight".into(), &self.patch_w),
            ("patch_embed.bias".into(), &self.patch_b),
            ("pos_embed".into(), &self.pos),
            ("cls_token".into(), &self.cls),
            ("cls_pos".into(), &self.cls_pos),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let fields: [(&str, &Tensor); 16] = [
                ("ln1.gamma", &l.ln1_gamma),
                ("ln1.beta", &l.ln1_beta),
                ("attn.q.weight", &l.wq),
                ("attn.q.bias", &l.bq),
                ("attn.k.weight", &l.wk),
                ("attn.k.bias", &l.bk),
                ("attn.v.weight", &l.wv),
                ("attn.v.bias", &l.bv),
                ("attn.out.weight", &l.wo),
                ("attn.out.bias", &l.bo),
                ("ln2.gamma", &l.ln2_gamma),
                ("ln2.beta", &l.ln2_beta),
                ("mlp.fc1.weight", &l.w1),
                ("mlp.fc1.bias", &l.b1),
                ("mlp.fc2.weight", &l.w2),
                ("mlp.fc2.bias", &l.b2),
            ];
            out.extend(fields.into_iter().map(|(n, t)| (format!("blocks.{i}.{n}"), t)));
        }
        out.push(("norm.gamma".into(), &self.norm_gamma));
        out.push(("norm.beta".into(), &self.norm_beta));
        out.push(("head.weight".into(), &self.head_w));
        out.push(("head.bias".into(), &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("patch_embed.weight".into(), &mut self.patch_w),
            ("patch_embed.bias".into(), &mut self.patch_b),
            ("pos_embed".into(), &mut self.pos),
            ("cls_token".into(), &mut self.cls),
            ("cls_pos".into(), &mut self.cls_pos),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let fields: [(&str, &mut Tensor); 16] = [
                ("ln1.gamma", &mut l.ln1_gamma),
                ("ln1.beta", &mut l.ln1_beta),
                ("attn.q.weight", &mut l.wq),
                ("attn.q.bias", &mut l.bq),
                ("attn.k.weight", &mut l.wk),
                ("attn.k.bias", &mut l.bk),
                ("attn.v.weight", &mut l.wv),
                ("attn.v.bias", &mut l.bv),
                ("attn.out.weight", &mut l.wo),
                ("attn.out.bias", &mut l.bo),
                ("ln2.gamma", &mut l.ln2_gamma),
                ("ln2.beta", &mut l.ln2_beta),
                ("mlp.fc1.weight", &mut l.w1),
                ("mlp.fc1.bias", &mut l.b1),
                ("mlp.fc2.weight", &mut l.w2),
                ("mlp.fc2.bias", &mut l.b2),
            ];
            out.extend(fields.into_iter().map(|(n, t)| (format!("blocks.{i}.{n}"), t)));
        }
        out.push(("norm.gamma".into(), &mut self.norm_gamma));
        out.push(("norm.beta".into(), &mut self.norm_beta));
        out.push(("head.weight".into(), &mut self.head_w));
        out.push(("head.bias".into(), &mut self.head_b));
        out
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.tensors()
            .into_iter()
            .map(|(name, t)| ManifestEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Same structure, all zeros (used as a gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        out
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f32) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (a, &b) in dst.data_mut().iter_mut().zip(src.data()) {
                *a += scale * b;
            }
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().map(|(_, t)| t.squared_norm()).sum()
    }

    pub fn check_config(&self, cfg: &ViTConfig) -> Result<()> {
        let expected = ModelParams::zeros(cfg)?.manifest();
        if expected != self.manifest() {
            return Err(Error::param("parameter shapes do not match the model configuration"));
        }
        Ok(())
    }
}

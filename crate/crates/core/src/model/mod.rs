//! The trainable stack: projection stem (linear + LayerNorm), offline-CLS
//! merge, pre-norm transformer encoder, and classification head.
//!
//! Everything runs in `f64`. Cached `f32`/`f16` features are widened on read.

mod checkpoint;
mod layers;
mod network;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader};
pub use layers::{gelu, gelu_grad, layer_norm, merge_cls, project, softmax, LN_EPS};
pub use network::{
    backward, cross_entropy, forward, forward_record, record_tokens, ForwardTrace, Logits,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Mat;

/// Classifier hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    /// Desk-scale classifier used for the synthetic caches.
    fn default() -> Self {
        Self {
            embed_dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    /// DeiT-S width, depth and head count.
    pub fn deit_small() -> Self {
        Self {
            embed_dim: 384,
            depth: 12,
            heads: 6,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::InvalidParameter(format!(
                "model config has a zero size: {self:?}"
            )));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidParameter(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

/// Input and output sizes fixed by the cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Feature channels.
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub classes: usize,
}

impl ModelDims {
    /// Sequence length: one CLS position plus the grid tokens.
    pub fn seq_len(&self) -> usize {
        self.h * self.w + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams {
    /// `d x m`
    pub weight: Mat,
    pub bias: Mat,
    pub ln_gain: Mat,
    pub ln_bias: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Mat,
    pub ln1_bias: Mat,
    /// `m x 3m`, columns ordered `[q | k | v]`, heads contiguous within each.
    pub qkv_weight: Mat,
    pub qkv_bias: Mat,
    pub attn_out_weight: Mat,
    pub attn_out_bias: Mat,
    pub ln2_gain: Mat,
    pub ln2_bias: Mat,
    pub fc1_weight: Mat,
    pub fc1_bias: Mat,
    pub fc2_weight: Mat,
    pub fc2_bias: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub learned_cls: Mat,
    /// `(h*w + 1) x m`
    pub pos_embed: Mat,
    pub blocks: Vec<BlockParams>,
    pub norm_gain: Mat,
    pub norm_bias: Mat,
    /// `m x C`
    pub head_weight: Mat,
    pub head_bias: Mat,
}

/// All trainable tensors. Gradients and optimizer moments use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub proj: ProjectionParams,
    pub classifier: ClassifierParams,
}

const WEIGHT_STD: f64 = 0.02;

impl Params {
    /// All-zero parameters of the right shapes.
    pub fn zeros(config: ModelConfig, dims: ModelDims) -> Result<Self> {
        config.validate()?;
        if dims.d == 0 || dims.h == 0 || dims.w == 0 || dims.classes == 0 {
            return Err(Error::InvalidParameter(format!("model dims have a zero size: {dims:?}")));
        }
        let m = config.embed_dim;
        let hid = config.hidden_dim();
        let row = |n| Mat::zeros(1, n);
        let blocks = (0..config.depth)
            .map(|_| BlockParams {
                ln1_gain: row(m),
                ln1_bias: row(m),
                qkv_weight: Mat::zeros(m, 3 * m),
                qkv_bias: row(3 * m),
                attn_out_weight: Mat::zeros(m, m),
                attn_out_bias: row(m),
                ln2_gain: row(m),
                ln2_bias: row(m),
                fc1_weight: Mat::zeros(m, hid),
                fc1_bias: row(hid),
                fc2_weight: Mat::zeros(hid, m),
                fc2_bias: row(m),
            })
            .collect();
        Ok(Self {
            config,
            dims,
            proj: ProjectionParams {
                weight: Mat::zeros(dims.d, m),
                bias: row(m),
                ln_gain: row(m),
                ln_bias: row(m),
            },
            classifier: ClassifierParams {
                learned_cls: row(m),
                pos_embed: Mat::zeros(dims.seq_len(), m),
                blocks,
                norm_gain: row(m),
                norm_bias: row(m),
                head_weight: Mat::zeros(m, dims.classes),
                head_bias: row(dims.classes),
            },
        })
    }

    /// Truncated-normal(0.02) weights, learned CLS and positional embeddings;
    /// zero biases; unit LayerNorm gains.
    pub fn init(config: ModelConfig, dims: ModelDims, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config, dims)?;
        let mut rng = RngStream::derive(seed, &[0x1417]);
        for (name, t) in p.named_mut() {
            let kind = ParamKind::of(&name);
            match kind {
                ParamKind::Weight | ParamKind::Embedding => t
                    .as_mut_slice()
                    .iter_mut()
                    .for_each(|v| *v = rng.trunc_normal(WEIGHT_STD)),
                ParamKind::Gain => t.fill(1.0),
                ParamKind::Bias => t.fill(0.0),
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config, self.dims).expect("shapes already validated")
    }

    /// Tensors in canonical order with their names. This order is the
    /// checkpoint blob layout and the optimizer state layout.
    pub fn named(&self) -> Vec<(String, &Mat)> {
        let p = &self.proj;
        let c = &self.classifier;
        let mut out: Vec<(String, &Mat)> = vec![
            ("proj.weight".into(), &p.weight),
            ("proj.bias".into(), &p.bias),
            ("proj.ln.gain".into(), &p.ln_gain),
            ("proj.ln.bias".into(), &p.ln_bias),
            ("cls_token".into(), &c.learned_cls),
            ("pos_embed".into(), &c.pos_embed),
        ];
        for (i, b) in c.blocks.iter().enumerate() {
            let pre = format!("blocks.{i}");
            out.extend([
                (format!("{pre}.ln1.gain"), &b.ln1_gain),
                (format!("{pre}.ln1.bias"), &b.ln1_bias),
                (format!("{pre}.attn.qkv.weight"), &b.qkv_weight),
                (format!("{pre}.attn.qkv.bias"), &b.qkv_bias),
                (format!("{pre}.attn.out.weight"), &b.attn_out_weight),
                (format!("{pre}.attn.out.bias"), &b.attn_out_bias),
                (format!("{pre}.ln2.gain"), &b.ln2_gain),
                (format!("{pre}.ln2.bias"), &b.ln2_bias),
                (format!("{pre}.mlp.fc1.weight"), &b.fc1_weight),
                (format!("{pre}.mlp.fc1.bias"), &b.fc1_bias),
                (format!("{pre}.mlp.fc2.weight"), &b.fc2_weight),
                (format!("{pre}.mlp.fc2.bias"), &b.fc2_bias),
            ]);
        }
        out.extend([
            ("norm.gain".into(), &c.norm_gain),
            ("norm.bias".into(), &c.norm_bias),
            ("head.weight".into(), &c.head_weight),
            ("head.bias".into(), &c.head_bias),
        ]);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let p = &mut self.proj;
        let c = &mut self.classifier;
        let mut out: Vec<(String, &mut Mat)> = vec![
            ("proj.weight".into(), &mut p.weight),
            ("proj.bias".into(), &mut p.bias),
            ("proj.ln.gain".into(), &mut p.ln_gain),
            ("proj.ln.bias".into(), &mut p.ln_bias),
            ("cls_token".into(), &mut c.learned_cls),
            ("pos_embed".into(), &mut c.pos_embed),
        ];
        for (i, b) in c.blocks.iter_mut().enumerate() {
            let pre = format!("blocks.{i}");
            out.extend([
                (format!("{pre}.ln1.gain"), &mut b.ln1_gain),
                (format!("{pre}.ln1.bias"), &mut b.ln1_bias),
                (format!("{pre}.attn.qkv.weight"), &mut b.qkv_weight),
                (format!("{pre}.attn.qkv.bias"), &mut b.qkv_bias),
                (format!("{pre}.attn.out.weight"), &mut b.attn_out_weight),
                (format!("{pre}.attn.out.bias"), &mut b.attn_out_bias),
                (format!("{pre}.ln2.gain"), &mut b.ln2_gain),
                (format!("{pre}.ln2.bias"), &mut b.ln2_bias),
                (format!("{pre}.mlp.fc1.weight"), &mut b.fc1_weight),
                (format!("{pre}.mlp.fc1.bias"), &mut b.fc1_bias),
                (format!("{pre}.mlp.fc2.weight"), &mut b.fc2_weight),
                (format!("{pre}.mlp.fc2.bias"), &mut b.fc2_bias),
            ]);
        }
        out.extend([
            ("norm.gain".into(), &mut c.norm_gain),
            ("norm.bias".into(), &mut c.norm_bias),
            ("head.weight".into(), &mut c.head_weight),
            ("head.bias".into(), &mut c.head_bias),
        ]);
        out
    }

    pub fn tensors(&self) -> Vec<&Mat> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        self.named_mut().into_iter().map(|(_, t)| t).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn bits_eq(&self, other: &Params) -> bool {
        self.config == other.config
            && self.dims == other.dims
            && self
                .tensors()
                .iter()
                .zip(other.tensors())
                .all(|(a, b)| a.bits_eq(b))
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.as_slice().iter().all(|v| v.is_finite()))
    }

    /// Check that these parameters accept records of shape `(h, w, d)`.
    pub fn check_input(&self, shape: (usize, usize, usize)) -> Result<()> {
        let dims = self.dims;
        if shape != (dims.h, dims.w, dims.d) {
            return Err(Error::ShapeMismatch(format!(
                "record shape (h={}, w={}, d={}) does not match model (h={}, w={}, d={})",
                shape.0, shape.1, shape.2, dims.h, dims.w, dims.d
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gain,
    Embedding,
}

impl ParamKind {
    pub fn of(name: &str) -> Self {
        if name.ends_with(".weight") {
            ParamKind::Weight
        } else if name.ends_with(".gain") {
            ParamKind::Gain
        } else if name == "cls_token" || name == "pos_embed" {
            ParamKind::Embedding
        } else {
            ParamKind::Bias
        }
    }

    /// Only linear-layer weights are decayed.
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

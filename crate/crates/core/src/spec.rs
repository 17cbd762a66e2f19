//! Declarative description of the toy vision transformer.
//!
//! A [`NetworkConfig`] carries the dimensions; [`NetworkSpec`] expands it into
//! the ordered layer list. Every block is laid out as
//! `LN → QKV → MatMul1 → Softmax → MatMul2 → Proj → Residual → LN → FC1 → FC2 → Residual`,
//! preceded by the patch embedding and followed by mean-pooling and the head.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Layers per transformer block in the expanded layer list.
pub const LAYERS_PER_BLOCK: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub blocks: usize,
    pub image_channels: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub classes: usize,
}

impl Default for NetworkConfig {
    /// 4 blocks, 16 tokens of width 64, 4 heads, MLP width 256, 10 classes.
    fn default() -> Self {
        Self {
            blocks: 4,
            image_channels: 3,
            image_size: 16,
            patch_size: 4,
            embed_dim: 64,
            heads: 4,
            mlp_dim: 256,
            classes: 10,
        }
    }
}

impl NetworkConfig {
    pub fn tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.image_channels * self.patch_size * self.patch_size
    }

    pub fn image_shape(&self) -> Vec<usize> {
        vec![self.image_channels, self.image_size, self.image_size]
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("blocks", self.blocks),
            ("image_channels", self.image_channels),
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("mlp_dim", self.mlp_dim),
            ("classes", self.classes),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Parse(format!("{name} must be positive")));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Parse(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Parse(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerKind {
    PatchEmbed,
    #[serde(rename = "QKV")]
    Qkv,
    MatMul1,
    Softmax,
    MatMul2,
    Proj,
    #[serde(rename = "FC1")]
    Fc1,
    #[serde(rename = "FC2")]
    Fc2,
    Head,
    LayerNorm,
    Residual,
}

impl LayerKind {
    /// Kinds that carry a quantizer (weights and/or activations).
    pub fn is_quantizable_kind(self) -> bool {
        matches!(
            self,
            LayerKind::PatchEmbed
                | LayerKind::Qkv
                | LayerKind::Proj
                | LayerKind::Fc1
                | LayerKind::Fc2
                | LayerKind::Head
                | LayerKind::MatMul1
                | LayerKind::MatMul2
        )
    }

    pub fn has_weights(self) -> bool {
        matches!(
            self,
            LayerKind::PatchEmbed
                | LayerKind::Qkv
                | LayerKind::Proj
                | LayerKind::Fc1
                | LayerKind::Fc2
                | LayerKind::Head
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerDims {
    Linear { tokens: usize, in_features: usize, out_features: usize },
    Attention { heads: usize, tokens: usize, head_dim: usize },
    Norm { tokens: usize, features: usize },
    Elementwise { tokens: usize, features: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: usize,
    pub name: String,
    pub kind: LayerKind,
    pub block: Option<usize>,
    pub dims: LayerDims,
    pub quantizable: bool,
}

/// Layer ids of one transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayerIds {
    pub ln1: usize,
    pub qkv: usize,
    pub matmul1: usize,
    pub softmax: usize,
    pub matmul2: usize,
    pub proj: usize,
    pub residual1: usize,
    pub ln2: usize,
    pub fc1: usize,
    pub fc2: usize,
    pub residual2: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub config: NetworkConfig,
    pub layers: Vec<LayerSpec>,
}

/// On-disk form of a spec: the config plus a format version.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecFile {
    pub format_version: u32,
    #[serde(flatten)]
    pub config: NetworkConfig,
}

pub const SPEC_FORMAT_VERSION: u32 = 1;

impl NetworkSpec {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let n = config.tokens();
        let d = config.embed_dim;
        let mut layers = Vec::with_capacity(2 + LAYERS_PER_BLOCK * config.blocks);
        let mut push = |name: String, kind, block, dims| {
            let id = layers.len();
            layers.push(LayerSpec {
                id,
                name,
                kind,
                block,
                dims,
                quantizable: kind.is_quantizable_kind(),
            });
        };
        push(
            "patch_embed".into(),
            LayerKind::PatchEmbed,
            None,
            LayerDims::Linear { tokens: n, in_features: config.patch_dim(), out_features: d },
        );
        for b in 0..config.blocks {
            let lin = |i, o| LayerDims::Linear { tokens: n, in_features: i, out_features: o };
            let attn = LayerDims::Attention { heads: config.heads, tokens: n, head_dim: config.head_dim() };
            let norm = LayerDims::Norm { tokens: n, features: d };
            let ew = |f| LayerDims::Elementwise { tokens: n, features: f };
            let p = |s: &str| format!("blocks.{b}.{s}");
            push(p("ln1"), LayerKind::LayerNorm, Some(b), norm);
            push(p("qkv"), LayerKind::Qkv, Some(b), lin(d, 3 * d));
            push(p("matmul1"), LayerKind::MatMul1, Some(b), attn);
            push(p("softmax"), LayerKind::Softmax, Some(b), ew(config.heads * n));
            push(p("matmul2"), LayerKind::MatMul2, Some(b), attn);
            push(p("proj"), LayerKind::Proj, Some(b), lin(d, d));
            push(p("residual1"), LayerKind::Residual, Some(b), ew(d));
            push(p("ln2"), LayerKind::LayerNorm, Some(b), norm);
            push(p("fc1"), LayerKind::Fc1, Some(b), lin(d, config.mlp_dim));
            push(p("fc2"), LayerKind::Fc2, Some(b), lin(config.mlp_dim, d));
            push(p("residual2"), LayerKind::Residual, Some(b), ew(d));
        }
        // The head sees one mean-pooled token.
        push(
            "head".into(),
            LayerKind::Head,
            None,
            LayerDims::Linear { tokens: 1, in_features: d, out_features: config.classes },
        );
        // First and last layers stay at full precision.
        layers[0].quantizable = false;
        let last = layers.len() - 1;
        layers[last].quantizable = false;
        Ok(Self { config, layers })
    }

    pub fn toy() -> Self {
        Self::new(NetworkConfig::default()).expect("default config is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SpecFile =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("network spec: {e}")))?;
        if file.format_version != SPEC_FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported spec format_version {}",
                file.format_version
            )));
        }
        Self::new(file.config)
    }

    pub fn to_json(&self) -> String {
        let file = SpecFile { format_version: SPEC_FORMAT_VERSION, config: self.config };
        serde_json::to_string_pretty(&file).expect("spec serializes")
    }

    /// SHA-256 of the canonical JSON encoding of the expanded spec.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn layer(&self, id: usize) -> Result<&LayerSpec> {
        self.layers.get(id).ok_or(Error::UnknownLayer(id))
    }

    pub fn block_layer_ids(&self, block: usize) -> BlockLayerIds {
        let base = 1 + LAYERS_PER_BLOCK * block;
        BlockLayerIds {
            ln1: base,
            qkv: base + 1,
            matmul1: base + 2,
            softmax: base + 3,
            matmul2: base + 4,
            proj: base + 5,
            residual1: base + 6,
            ln2: base + 7,
            fc1: base + 8,
            fc2: base + 9,
            residual2: base + 10,
        }
    }

    pub fn head_id(&self) -> usize {
        self.layers.len() - 1
    }

    /// Quantizable layer ids in network order.
    pub fn quantizable_ids(&self) -> Vec<usize> {
        self.layers.iter().filter(|l| l.quantizable).map(|l| l.id).collect()
    }
}

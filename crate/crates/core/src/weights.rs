//! Parameters of the toy transformer and their seeded initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::spec::{LayerKind, NetworkSpec};
use crate::tensor::Tensor;

/// Stream of the seeded generator reserved for weight initialization.
pub const WEIGHT_STREAM: u64 = 1;

/// Weight `[out, in]` (rows are output channels) and bias `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self { weight: Tensor::zeros(vec![d_out, d_in]), bias: vec![0.0; d_out] }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Norm {
    pub fn identity(d: usize) -> Self {
        Self { gamma: vec![1.0; d], beta: vec![0.0; d] }
    }
}

/// QKV weight rows are laid out as `[Q; K; V]`, each `D` rows; head `i` owns
/// columns `i·D_h .. (i+1)·D_h` of each projection's output.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub patch_embed: Linear,
    pub blocks: Vec<BlockWeights>,
    pub head: Linear,
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    // Round through f32 so weights survive the f32 tensor file unchanged.
    (rng.sample::<f64, _>(StandardNormal) * std) as f32 as f64
}

fn random_linear(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, gain: f64) -> Linear {
    let std = gain / (d_in as f64).sqrt();
    let weight = (0..d_in * d_out).map(|_| normal(rng, std)).collect();
    let bias = (0..d_out).map(|_| normal(rng, 0.02)).collect();
    Linear { weight: Tensor::new(vec![d_out, d_in], weight).expect("sized"), bias }
}

fn random_norm(rng: &mut ChaCha8Rng, d: usize) -> Norm {
    Norm {
        gamma: (0..d).map(|_| (1.0 + normal(rng, 0.1)) as f32 as f64).collect(),
        beta: (0..d).map(|_| normal(rng, 0.05)).collect(),
    }
}

/// Per-layer output gain, log-uniform in `[0.3, 2]`; gives the toy model
/// layers of visibly different influence on the output.
fn layer_gain(rng: &mut ChaCha8Rng) -> f64 {
    let (lo, hi) = (0.3f64.ln(), 2.0f64.ln());
    (lo + (hi - lo) * rng.random::<f64>()).exp() as f32 as f64
}

impl Weights {
    /// Seeded initialization with ChaCha8 (stream [`WEIGHT_STREAM`]).
    pub fn random(spec: &NetworkSpec, seed: u64) -> Self {
        let cfg = spec.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(WEIGHT_STREAM);
        let d = cfg.embed_dim;
        let patch_embed = random_linear(&mut rng, cfg.patch_dim(), d, 1.0);
        let blocks = (0..cfg.blocks)
            .map(|_| {
                let ln1 = random_norm(&mut rng, d);
                let g = layer_gain(&mut rng);
                let qkv = random_linear(&mut rng, d, 3 * d, g);
                let g = layer_gain(&mut rng);
                let proj = random_linear(&mut rng, d, d, g);
                let ln2 = random_norm(&mut rng, d);
                let g = layer_gain(&mut rng);
                let fc1 = random_linear(&mut rng, d, cfg.mlp_dim, g);
                let g = layer_gain(&mut rng);
                let fc2 = random_linear(&mut rng, cfg.mlp_dim, d, g);
                BlockWeights { ln1, qkv, proj, ln2, fc1, fc2 }
            })
            .collect();
        let head = random_linear(&mut rng, d, cfg.classes, 3.0);
        Self { patch_embed, blocks, head }
    }

    /// Every parameter tensor in file order: patch embedding, then per block
    /// `ln1.γ, ln1.β, qkv.W, qkv.b, proj.W, proj.b, ln2.γ, ln2.β, fc1.W, fc1.b, fc2.W, fc2.b`,
    /// then the head.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        let v = |x: &[f64]| Tensor::vector(x.to_vec()).expect("non-empty");
        let mut out = vec![self.patch_embed.weight.clone(), v(&self.patch_embed.bias)];
        for b in &self.blocks {
            out.extend([
                v(&b.ln1.gamma),
                v(&b.ln1.beta),
                b.qkv.weight.clone(),
                v(&b.qkv.bias),
                b.proj.weight.clone(),
                v(&b.proj.bias),
                v(&b.ln2.gamma),
                v(&b.ln2.beta),
                b.fc1.weight.clone(),
                v(&b.fc1.bias),
                b.fc2.weight.clone(),
                v(&b.fc2.bias),
            ]);
        }
        out.push(self.head.weight.clone());
        out.push(v(&self.head.bias));
        out
    }

    /// Inverse of [`Weights::to_tensors`], checking every shape against `spec`.
    pub fn from_tensors(spec: &NetworkSpec, tensors: Vec<Tensor>) -> Result<Self> {
        let cfg = spec.config;
        let expected = 4 + 12 * cfg.blocks;
        if tensors.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "weight file holds {} tensors, spec needs {expected}",
                tensors.len()
            )));
        }
        let mut cursor = TensorCursor { it: tensors.into_iter() };
        let d = cfg.embed_dim;
        let patch_embed = cursor.linear(cfg.patch_dim(), d, "patch_embed")?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let name = |s: &str| format!("blocks.{b}.{s}");
            let ln1 = cursor.norm(d, &name("ln1"))?;
            let qkv = cursor.linear(d, 3 * d, &name("qkv"))?;
            let proj = cursor.linear(d, d, &name("proj"))?;
            let ln2 = cursor.norm(d, &name("ln2"))?;
            let fc1 = cursor.linear(d, cfg.mlp_dim, &name("fc1"))?;
            let fc2 = cursor.linear(cfg.mlp_dim, d, &name("fc2"))?;
            blocks.push(BlockWeights { ln1, qkv, proj, ln2, fc1, fc2 });
        }
        let head = cursor.linear(d, cfg.classes, "head")?;
        Ok(Self { patch_embed, blocks, head })
    }

    /// The linear layer behind a weighted layer id, if any.
    pub fn linear(&self, spec: &NetworkSpec, layer_id: usize) -> Result<&Linear> {
        let layer = spec.layer(layer_id)?;
        match (layer.kind, layer.block) {
            (LayerKind::PatchEmbed, _) => Ok(&self.patch_embed),
            (LayerKind::Head, _) => Ok(&self.head),
            (LayerKind::Qkv, Some(b)) => Ok(&self.blocks[b].qkv),
            (LayerKind::Proj, Some(b)) => Ok(&self.blocks[b].proj),
            (LayerKind::Fc1, Some(b)) => Ok(&self.blocks[b].fc1),
            (LayerKind::Fc2, Some(b)) => Ok(&self.blocks[b].fc2),
            _ => Err(Error::InvalidParameter(format!("layer {layer_id} has no weights"))),
        }
    }

    pub fn linear_mut(&mut self, spec: &NetworkSpec, layer_id: usize) -> Result<&mut Linear> {
        let layer = spec.layer(layer_id)?;
        match (layer.kind, layer.block) {
            (LayerKind::PatchEmbed, _) => Ok(&mut self.patch_embed),
            (LayerKind::Head, _) => Ok(&mut self.head),
            (LayerKind::Qkv, Some(b)) => Ok(&mut self.blocks[b].qkv),
            (LayerKind::Proj, Some(b)) => Ok(&mut self.blocks[b].proj),
            (LayerKind::Fc1, Some(b)) => Ok(&mut self.blocks[b].fc1),
            (LayerKind::Fc2, Some(b)) => Ok(&mut self.blocks[b].fc2),
            _ => Err(Error::InvalidParameter(format!("layer {layer_id} has no weights"))),
        }
    }
}

struct TensorCursor {
    it: std::vec::IntoIter<Tensor>,
}

impl TensorCursor {
    fn take(&mut self, shape: &[usize], what: &str) -> Result<Tensor> {
        let t = self
            .it
            .next()
            .ok_or_else(|| Error::ShapeMismatch(format!("missing tensor for {what}")))?;
        if t.shape() != shape {
            return Err(Error::ShapeMismatch(format!(
                "{what}: expected {shape:?}, found {:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    fn linear(&mut self, d_in: usize, d_out: usize, what: &str) -> Result<Linear> {
        let weight = self.take(&[d_out, d_in], what)?;
        let bias = self.take(&[d_out], what)?.into_data();
        Ok(Linear { weight, bias })
    }

    fn norm(&mut self, d: usize, what: &str) -> Result<Norm> {
        let gamma = self.take(&[d], what)?.into_data();
        let beta = self.take(&[d], what)?.into_data();
        Ok(Norm { gamma, beta })
    }
}

//! Forward-only inference for the toy transformer.
//!
//! Supports three things the planner needs on top of a plain forward pass:
//! per-layer output taps, zeroing of selected layer outputs, and fake
//! quantization of activations at fixed sites. Zeroing replaces a layer's
//! output before anything downstream consumes it; residual skip paths are
//! left intact.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{fake_quant_slice, QuantScheme};
use crate::spec::{BlockLayerIds, LayerKind, NetworkSpec};
use crate::tensor::{dot, gelu, layer_norm, linear, softmax_in_place, Tensor};
use crate::weights::{BlockWeights, Linear, Weights};

pub const LN_EPS: f64 = 1e-5;

/// Floor added to output probabilities before any KL divergence.
pub const PROB_FLOOR: f64 = 1e-12;

/// Activation quantization points inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// LN output entering QKV.
    QkvInput,
    /// MatMul1 operands.
    Query,
    Key,
    /// MatMul1 output (scaled attention logits).
    Scores,
    /// Post-softmax probabilities entering MatMul2 (logarithmic quantizer).
    Probs,
    /// MatMul2 value operand.
    Value,
    ProjInput,
    Fc1Input,
    /// GELU output entering FC2.
    Fc2Input,
}

impl Site {
    pub const ALL: [Site; 9] = [
        Site::QkvInput,
        Site::Query,
        Site::Key,
        Site::Scores,
        Site::Probs,
        Site::Value,
        Site::ProjInput,
        Site::Fc1Input,
        Site::Fc2Input,
    ];

    fn index(self) -> usize {
        self as usize
    }

    /// The quantizable layer whose bit-width governs this site.
    pub fn owner(self) -> LayerKind {
        match self {
            Site::QkvInput => LayerKind::Qkv,
            Site::Query | Site::Key | Site::Scores => LayerKind::MatMul1,
            Site::Probs | Site::Value => LayerKind::MatMul2,
            Site::ProjInput => LayerKind::Proj,
            Site::Fc1Input => LayerKind::Fc1,
            Site::Fc2Input => LayerKind::Fc2,
        }
    }
}

/// Per-site activation quantizers for one block.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlockQuant {
    sites: [Option<QuantScheme>; 9],
}

impl BlockQuant {
    pub fn get(&self, site: Site) -> Option<&QuantScheme> {
        self.sites[site.index()].as_ref()
    }

    pub fn set(&mut self, site: Site, scheme: QuantScheme) {
        self.sites[site.index()] = Some(scheme);
    }
}

/// Activation quantizers for every block of a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivationQuant {
    pub blocks: Vec<BlockQuant>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    pub logits: Tensor,
    /// Output of every quantizable layer, recorded before any zeroing.
    pub taps: BTreeMap<usize, Tensor>,
    /// Multiplies executed per layer id.
    pub macs: BTreeMap<usize, u64>,
}

/// Sees every activation site's values before they are quantized.
pub trait Observer {
    fn observe(&mut self, block: usize, site: Site, values: &[f64]);
}

pub struct NoObserver;

impl Observer for NoObserver {
    #[inline]
    fn observe(&mut self, _: usize, _: Site, _: &[f64]) {}
}

struct Ctx<'a, O: Observer> {
    block: usize,
    ids: Option<BlockLayerIds>,
    quant: Option<&'a BlockQuant>,
    zero: &'a BTreeSet<usize>,
    taps: Option<&'a mut BTreeMap<usize, Tensor>>,
    macs: Option<&'a mut BTreeMap<usize, u64>>,
    observer: &'a mut O,
}

impl<O: Observer> Ctx<'_, O> {
    fn site(&mut self, site: Site, values: &mut [f64]) -> Result<()> {
        self.observer.observe(self.block, site, values);
        if let Some(scheme) = self.quant.and_then(|q| q.get(site)) {
            fake_quant_slice(values, scheme)?;
        }
        Ok(())
    }

    fn output(&mut self, pick: fn(&BlockLayerIds) -> usize, t: &mut Tensor) {
        let Some(ids) = self.ids else { return };
        let id = pick(&ids);
        if let Some(taps) = self.taps.as_deref_mut() {
            taps.insert(id, t.clone());
        }
        if self.zero.contains(&id) {
            t.fill(0.0);
        }
    }

    fn count(&mut self, pick: fn(&BlockLayerIds) -> usize, n: u64) {
        if let (Some(ids), Some(macs)) = (self.ids, self.macs.as_deref_mut()) {
            *macs.entry(pick(&ids)).or_default() += n;
        }
    }
}

fn check_linear(l: &Linear, d_in: usize, d_out: usize, what: &str) -> Result<()> {
    if l.in_features() != d_in || l.out_features() != d_out || l.bias.len() != d_out {
        return Err(Error::ShapeMismatch(format!(
            "{what}: expected {d_in}→{d_out}, weight is {}→{}",
            l.in_features(),
            l.out_features()
        )));
    }
    Ok(())
}

fn attention<O: Observer>(
    ctx: &mut Ctx<'_, O>,
    x: &Tensor,
    qkv_w: &Linear,
    proj_w: &Linear,
    heads: usize,
) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::ShapeMismatch(format!("width {d} not divisible into {heads} heads")));
    }
    check_linear(qkv_w, d, 3 * d, "qkv")?;
    check_linear(proj_w, d, d, "proj")?;
    let dh = d / heads;

    let mut xin = x.clone();
    ctx.site(Site::QkvInput, xin.data_mut())?;
    let (mut qkv, m) = linear(&xin, &qkv_w.weight, Some(&qkv_w.bias))?;
    ctx.count(|i| i.qkv, m);
    ctx.output(|i| i.qkv, &mut qkv);

    let split = |offset: usize| -> Vec<f64> {
        (0..n).flat_map(|t| qkv.row(t)[offset..offset + d].iter().copied()).collect()
    };
    let mut q = split(0);
    let mut k = split(d);
    let mut v = split(2 * d);
    ctx.site(Site::Query, &mut q)?;
    ctx.site(Site::Key, &mut k)?;
    ctx.site(Site::Value, &mut v)?;

    // Scores laid out [head, query, key].
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut scores = vec![0.0; heads * n * n];
    for h in 0..heads {
        for i in 0..n {
            let qi = &q[i * d + h * dh..i * d + (h + 1) * dh];
            for j in 0..n {
                let kj = &k[j * d + h * dh..j * d + (h + 1) * dh];
                scores[(h * n + i) * n + j] = dot(qi, kj) * inv_sqrt;
            }
        }
    }
    ctx.count(|i| i.matmul1, (heads * n * n * dh) as u64);
    ctx.site(Site::Scores, &mut scores)?;
    let mut scores = Tensor::new(vec![heads, n, n], scores)?;
    ctx.output(|i| i.matmul1, &mut scores);

    let mut probs = scores.into_data();
    for row in probs.chunks_mut(n) {
        softmax_in_place(row);
    }
    ctx.site(Site::Probs, &mut probs)?;

    let mut concat = vec![0.0; n * d];
    for h in 0..heads {
        for i in 0..n {
            let p = &probs[(h * n + i) * n..(h * n + i + 1) * n];
            let out = &mut concat[i * d + h * dh..i * d + (h + 1) * dh];
            for (j, &pij) in p.iter().enumerate() {
                let vj = &v[j * d + h * dh..j * d + (h + 1) * dh];
                for (o, &vv) in out.iter_mut().zip(vj) {
                    *o += pij * vv;
                }
            }
        }
    }
    ctx.count(|i| i.matmul2, (heads * n * n * dh) as u64);
    let mut concat = Tensor::new(vec![n, d], concat)?;
    ctx.output(|i| i.matmul2, &mut concat);

    ctx.site(Site::ProjInput, concat.data_mut())?;
    let (mut out, m) = linear(&concat, &proj_w.weight, Some(&proj_w.bias))?;
    ctx.count(|i| i.proj, m);
    ctx.output(|i| i.proj, &mut out);
    Ok(out)
}

fn mlp<O: Observer>(ctx: &mut Ctx<'_, O>, y: &Tensor, fc1: &Linear, fc2: &Linear) -> Result<Tensor> {
    let (_, d) = y.dims2()?;
    let d_f = fc1.out_features();
    check_linear(fc1, d, d_f, "fc1")?;
    check_linear(fc2, d_f, d, "fc2")?;

    let mut yin = y.clone();
    ctx.site(Site::Fc1Input, yin.data_mut())?;
    let (mut h, m) = linear(&yin, &fc1.weight, Some(&fc1.bias))?;
    ctx.count(|i| i.fc1, m);
    ctx.output(|i| i.fc1, &mut h);
    h.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    ctx.site(Site::Fc2Input, h.data_mut())?;
    let (mut out, m) = linear(&h, &fc2.weight, Some(&fc2.bias))?;
    ctx.count(|i| i.fc2, m);
    ctx.output(|i| i.fc2, &mut out);
    Ok(out)
}

fn block<O: Observer>(ctx: &mut Ctx<'_, O>, x: &Tensor, w: &BlockWeights, heads: usize) -> Result<Tensor> {
    let mut y = x.clone();
    let a = attention(ctx, &layer_norm(x, &w.ln1.gamma, &w.ln1.beta, LN_EPS)?, &w.qkv, &w.proj, heads)?;
    y.add_assign(&a)?;
    let mut out = y.clone();
    let m = mlp(ctx, &layer_norm(&y, &w.ln2.gamma, &w.ln2.beta, LN_EPS)?, &w.fc1, &w.fc2)?;
    out.add_assign(&m)?;
    Ok(out)
}

fn standalone<R>(quant: Option<&BlockQuant>, f: impl FnOnce(&mut Ctx<'_, NoObserver>) -> R) -> R {
    let zero = BTreeSet::new();
    let mut obs = NoObserver;
    let mut ctx = Ctx { block: 0, ids: None, quant, zero: &zero, taps: None, macs: None, observer: &mut obs };
    f(&mut ctx)
}

/// `concat_i(Softmax(Q_i K_iᵀ / √D_h) V_i) · W_o` over `heads` heads, for `x: [N, D]`.
pub fn mhsa_forward(
    x: &Tensor,
    qkv: &Linear,
    proj: &Linear,
    heads: usize,
    quant: Option<&BlockQuant>,
) -> Result<Tensor> {
    standalone(quant, |ctx| attention(ctx, x, qkv, proj, heads))
}

/// `GELU(y W₁ + b₁) W₂ + b₂`.
pub fn mlp_forward(y: &Tensor, fc1: &Linear, fc2: &Linear, quant: Option<&BlockQuant>) -> Result<Tensor> {
    standalone(quant, |ctx| mlp(ctx, y, fc1, fc2))
}

/// `Y = X + MHSA(LN(X))`, then `Y + MLP(LN(Y))`.
pub fn block_forward(x: &Tensor, w: &BlockWeights, heads: usize, quant: Option<&BlockQuant>) -> Result<Tensor> {
    standalone(quant, |ctx| block(ctx, x, w, heads))
}

/// Splits a `[C, H, W]` image into `[N, C·p·p]` patch rows (channel-major within a patch).
pub fn unfold_patches(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::ShapeMismatch(format!("expected [C, H, W] image, got {s:?}"))),
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::ShapeMismatch(format!("{h}×{w} image not divisible into {patch}-patches")));
    }
    let (ph, pw) = (h / patch, w / patch);
    let data = image.data();
    let mut out = Vec::with_capacity(c * h * w);
    for py in 0..ph {
        for px in 0..pw {
            for ch in 0..c {
                for dy in 0..patch {
                    let row = (ch * h + py * patch + dy) * w + px * patch;
                    out.extend_from_slice(&data[row..row + patch]);
                }
            }
        }
    }
    Tensor::new(vec![ph * pw, c * patch * patch], out)
}

fn check_zero_mask(spec: &NetworkSpec, zero_mask: &BTreeSet<usize>) -> Result<()> {
    for &id in zero_mask {
        if !spec.layer(id)?.quantizable {
            return Err(Error::NotQuantizable(id));
        }
    }
    Ok(())
}

/// Full forward pass with taps and MAC counts.
///
/// `input` is either a `[C, H, W]` image or pre-unfolded `[N, C·p·p]` patches.
/// Weight quantization is carried by `weights` itself (pass fake-quantized
/// weights); `quant` covers activations.
pub fn model_forward(
    spec: &NetworkSpec,
    weights: &Weights,
    input: &Tensor,
    quant: Option<&ActivationQuant>,
    zero_mask: &BTreeSet<usize>,
) -> Result<ForwardResult> {
    model_forward_observed(spec, weights, input, quant, zero_mask, &mut NoObserver)
}

pub(crate) fn model_forward_observed<O: Observer>(
    spec: &NetworkSpec,
    weights: &Weights,
    input: &Tensor,
    quant: Option<&ActivationQuant>,
    zero_mask: &BTreeSet<usize>,
    observer: &mut O,
) -> Result<ForwardResult> {
    check_zero_mask(spec, zero_mask)?;
    let cfg = spec.config;
    if weights.blocks.len() != cfg.blocks {
        return Err(Error::ShapeMismatch(format!(
            "{} weight blocks for a {}-block spec",
            weights.blocks.len(),
            cfg.blocks
        )));
    }
    if let Some(q) = quant {
        if q.blocks.len() != cfg.blocks {
            return Err(Error::ShapeMismatch("activation quantizers per block".into()));
        }
    }
    if !input.is_finite() {
        return Err(Error::NonFinite("model input"));
    }
    let patches = match input.rank() {
        3 => unfold_patches(input, cfg.patch_size)?,
        2 => input.clone(),
        _ => return Err(Error::ShapeMismatch(format!("unsupported input shape {:?}", input.shape()))),
    };
    let (n, pd) = patches.dims2()?;
    if n != cfg.tokens() || pd != cfg.patch_dim() {
        return Err(Error::ShapeMismatch(format!(
            "input gives {n}×{pd} patches, spec expects {}×{}",
            cfg.tokens(),
            cfg.patch_dim()
        )));
    }
    check_linear(&weights.patch_embed, cfg.patch_dim(), cfg.embed_dim, "patch_embed")?;
    check_linear(&weights.head, cfg.embed_dim, cfg.classes, "head")?;

    let mut taps = BTreeMap::new();
    let mut macs = BTreeMap::new();
    let (mut x, m) = linear(&patches, &weights.patch_embed.weight, Some(&weights.patch_embed.bias))?;
    macs.insert(0, m);

    for (b, w) in weights.blocks.iter().enumerate() {
        let mut ctx = Ctx {
            block: b,
            ids: Some(spec.block_layer_ids(b)),
            quant: quant.map(|q| &q.blocks[b]),
            zero: zero_mask,
            taps: Some(&mut taps),
            macs: Some(&mut macs),
            observer: &mut *observer,
        };
        x = block(&mut ctx, &x, w, cfg.heads)?;
    }

    let (tokens, d) = x.dims2()?;
    let mut pooled = vec![0.0; d];
    for t in 0..tokens {
        pooled.iter_mut().zip(x.row(t)).for_each(|(p, v)| *p += v);
    }
    pooled.iter_mut().for_each(|p| *p /= tokens as f64);
    let pooled = Tensor::new(vec![1, d], pooled)?;
    let (logits, m) = linear(&pooled, &weights.head.weight, Some(&weights.head.bias))?;
    macs.insert(spec.head_id(), m);
    let logits = Tensor::vector(logits.into_data())?;
    if !logits.is_finite() {
        return Err(Error::NonFinite("logits"));
    }
    Ok(ForwardResult { logits, taps, macs })
}

/// Softmax over logits, smoothed as `(P + ε) / (1 + C·ε)` with `ε = PROB_FLOOR`.
pub fn output_distribution(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("logits"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    let denom = 1.0 + p.len() as f64 * PROB_FLOOR;
    p.iter_mut().for_each(|v| *v = (*v + PROB_FLOOR) / denom);
    Ok(p)
}

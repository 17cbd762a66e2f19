//! A network bundled with its weights, activation calibration, and
//! construction of fake-quantized variants from a per-layer bit vector.
//!
//! One bit-width per quantizable layer drives both its weights (per-channel
//! along output rows) and the activations it consumes or produces
//! (per-tensor). Post-softmax probabilities use the logarithmic quantizer, with the base
//! searched over [`log_bases_for_bits`].

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::nn::{model_forward, model_forward_observed, ActivationQuant, BlockQuant, ForwardResult, Observer, Site};
use crate::par::{self, Execution};
use crate::quant::{affine_from_range, fake_quant, log_bases_for_bits, search_log_base, AffineParams, Granularity, QuantScheme};
use crate::spec::{LayerKind, NetworkSpec};
use crate::tensor::Tensor;
use crate::weights::{Linear, Weights};

/// Calibration set size for activation ranges.
pub const CALIBRATION_IMAGES: usize = 32;

/// A spec and its weights, counting every forward pass it runs.
#[derive(Debug)]
pub struct Model {
    spec: NetworkSpec,
    weights: Weights,
    forwards: AtomicUsize,
}

impl Model {
    pub fn new(spec: NetworkSpec, weights: Weights) -> Result<Self> {
        // Round-trip through the canonical tensor list to check every shape.
        let weights = Weights::from_tensors(&spec, weights.to_tensors())?;
        Ok(Self { spec, weights, forwards: AtomicUsize::new(0) })
    }

    pub fn random(spec: NetworkSpec, seed: u64) -> Self {
        let weights = Weights::random(&spec, seed);
        Self { spec, weights, forwards: AtomicUsize::new(0) }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn forward(
        &self,
        input: &Tensor,
        quant: Option<&ActivationQuant>,
        zero_mask: &BTreeSet<usize>,
    ) -> Result<ForwardResult> {
        self.forwards.fetch_add(1, Ordering::Relaxed);
        model_forward(&self.spec, &self.weights, input, quant, zero_mask)
    }

    /// Forward passes run since construction or the last reset.
    pub fn forward_count(&self) -> usize {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forwards.store(0, Ordering::Relaxed);
    }
}

/// Observed range of one activation site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteStats {
    pub min: f64,
    pub max: f64,
    /// Raw values, kept only for the logarithmically quantized site.
    pub samples: Vec<f64>,
}

impl Default for SiteStats {
    fn default() -> Self {
        Self { min: f64::INFINITY, max: f64::NEG_INFINITY, samples: Vec::new() }
    }
}

impl SiteStats {
    fn merge(&mut self, other: SiteStats) {
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.samples.extend(other.samples);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStats {
    pub blocks: Vec<[SiteStats; 9]>,
}

impl ActivationStats {
    pub fn site(&self, block: usize, site: Site) -> &SiteStats {
        &self.blocks[block][site as usize]
    }
}

struct StatsObserver {
    blocks: Vec<[SiteStats; 9]>,
}

impl Observer for StatsObserver {
    fn observe(&mut self, block: usize, site: Site, values: &[f64]) {
        let s = &mut self.blocks[block][site as usize];
        for &v in values {
            s.min = s.min.min(v);
            s.max = s.max.max(v);
        }
        if site == Site::Probs {
            s.samples.extend_from_slice(values);
        }
    }
}

/// Min-max ranges of every activation site over full-precision forwards.
pub fn calibrate_activations(model: &Model, images: &[Tensor], exec: Execution) -> Result<ActivationStats> {
    if images.is_empty() {
        return Err(Error::EmptyInput("calibration images"));
    }
    let blocks = model.spec.config.blocks;
    let per_image = par::map(exec, images, |_, img| {
        let mut obs = StatsObserver { blocks: vec![Default::default(); blocks] };
        model.forwards.fetch_add(1, Ordering::Relaxed);
        model_forward_observed(&model.spec, &model.weights, img, None, &BTreeSet::new(), &mut obs)?;
        Ok(obs.blocks)
    });
    let mut merged: Vec<[SiteStats; 9]> = vec![Default::default(); blocks];
    for r in per_image {
        let r: Result<Vec<[SiteStats; 9]>> = r;
        for (acc, img) in merged.iter_mut().zip(r?) {
            for (a, s) in acc.iter_mut().zip(img) {
                a.merge(s);
            }
        }
    }
    Ok(ActivationStats { blocks: merged })
}

/// Fake-quantized weights plus activation quantizers for one bit vector.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub weights: Weights,
    pub activations: ActivationQuant,
}

fn quantize_linear(l: &mut Linear, bits: u32) -> Result<()> {
    let p = crate::quant::calibrate_uniform(&l.weight, bits, Granularity::PerChannel { axis: 0 })?;
    l.weight = fake_quant(&l.weight, &QuantScheme::Uniform(p))?;
    Ok(())
}

/// Builds the quantized variant of `weights` with `bits[i]` applied to the
/// `i`-th quantizable layer in network order.
pub fn quantize_model(
    spec: &NetworkSpec,
    weights: &Weights,
    stats: &ActivationStats,
    bits: &[u32],
) -> Result<QuantizedModel> {
    let ids = spec.quantizable_ids();
    if bits.len() != ids.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} bit-widths for {} quantizable layers",
            bits.len(),
            ids.len()
        )));
    }
    if stats.blocks.len() != spec.config.blocks {
        return Err(Error::ShapeMismatch("activation stats per block".into()));
    }
    let bit_of = |id: usize| bits[ids.binary_search(&id).expect("quantizable id")];

    let mut qw = weights.clone();
    let mut blocks = Vec::with_capacity(spec.config.blocks);
    for b in 0..spec.config.blocks {
        let lid = spec.block_layer_ids(b);
        for id in [lid.qkv, lid.proj, lid.fc1, lid.fc2] {
            quantize_linear(qw.linear_mut(spec, id)?, bit_of(id))?;
        }
        let mut bq = BlockQuant::default();
        for site in Site::ALL {
            let owner = match site.owner() {
                LayerKind::Qkv => lid.qkv,
                LayerKind::MatMul1 => lid.matmul1,
                LayerKind::MatMul2 => lid.matmul2,
                LayerKind::Proj => lid.proj,
                LayerKind::Fc1 => lid.fc1,
                _ => lid.fc2,
            };
            let nbits = bit_of(owner);
            let s = stats.site(b, site);
            let scheme = if site == Site::Probs {
                QuantScheme::Logarithmic(search_log_base(&s.samples, nbits, &log_bases_for_bits(nbits))?)
            } else {
                if !(s.min <= s.max) {
                    return Err(Error::EmptyInput("activation range"));
                }
                let (scale, z) = affine_from_range(s.min, s.max, nbits)?;
                QuantScheme::Uniform(AffineParams::per_tensor(scale, z, nbits)?)
            };
            bq.set(site, scheme);
        }
        blocks.push(bq);
    }
    Ok(QuantizedModel { weights: qw, activations: ActivationQuant { blocks } })
}

impl QuantizedModel {
    pub fn forward(&self, spec: &NetworkSpec, input: &Tensor) -> Result<ForwardResult> {
        model_forward(spec, &self.weights, input, Some(&self.activations), &BTreeSet::new())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::importance::kl_divergence;
    use crate::nn::output_distribution;

    fn setup(seed: u64) -> (Model, ActivationStats, Vec<Tensor>) {
        let spec = NetworkSpec::toy();
        let shape = spec.config.image_shape();
        let model = Model::random(spec, seed);
        let calib = generate_synthetic(seed, CALIBRATION_IMAGES, &shape).unwrap();
        let stats = calibrate_activations(&model, &calib, Execution::Parallel).unwrap();
        let eval = generate_synthetic(seed + 1000, 8, &shape).unwrap();
        (model, stats, eval)
    }

    #[test]
    fn calibration_covers_every_site() {
        let (model, stats, _) = setup(1);
        assert_eq!(model.forward_count(), CALIBRATION_IMAGES);
        for b in 0..4 {
            for site in Site::ALL {
                let s = stats.site(b, site);
                assert!(s.min < s.max, "{b} {site:?}");
            }
            let p = stats.site(b, Site::Probs);
            assert_eq!(p.samples.len(), CALIBRATION_IMAGES * 4 * 16 * 16);
            assert!(p.min >= 0.0 && p.max <= 1.0);
        }
    }

    #[test]
    fn sixteen_bit_forward_tracks_full_precision() {
        for seed in 0..3 {
            let (model, _, eval) = setup(seed);
            // Calibrate over the evaluated inputs too so nothing is clipped.
            let mut calib = generate_synthetic(seed, CALIBRATION_IMAGES, &[3, 16, 16]).unwrap();
            calib.extend(eval.iter().cloned());
            let stats = calibrate_activations(&model, &calib, Execution::Parallel).unwrap();
            let q = quantize_model(model.spec(), model.weights(), &stats, &vec![16; 24]).unwrap();
            for x in &eval {
                let fp = model.forward(x, None, &BTreeSet::new()).unwrap();
                let qf = q.forward(model.spec(), x).unwrap();
                let d = fp.logits.max_abs_diff(&qf.logits);
                assert!(d < 1e-2, "seed {seed}: logit gap {d}");
                let kl = kl_divergence(
                    &output_distribution(fp.logits.data()).unwrap(),
                    &output_distribution(qf.logits.data()).unwrap(),
                )
                .unwrap();
                assert!(kl < 1e-3, "seed {seed}: kl {kl}");
            }
        }
    }

    #[test]
    fn fewer_bits_means_more_error() {
        let (model, stats, eval) = setup(4);
        let err = |b: u32| {
            let q = quantize_model(model.spec(), model.weights(), &stats, &vec![b; 24]).unwrap();
            eval.iter()
                .map(|x| {
                    let fp = model.forward(x, None, &BTreeSet::new()).unwrap().logits;
                    let ql = q.forward(model.spec(), x).unwrap().logits;
                    fp.data().iter().zip(ql.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                })
                .sum::<f64>()
        };
        let (e4, e6, e8) = (err(4), err(6), err(8));
        assert!(e4 > e6 && e6 > e8, "{e4} {e6} {e8}");
    }

    #[test]
    fn rejects_wrong_bit_count() {
        let (model, stats, _) = setup(5);
        assert!(quantize_model(model.spec(), model.weights(), &stats, &[6; 23]).is_err());
    }
}

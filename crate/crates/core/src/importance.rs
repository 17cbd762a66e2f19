//! Causal layer importance.
//!
//! A layer's score on one image is the KL divergence from the full model's
//! output distribution to the distribution obtained with that layer's output
//! zeroed. Scores are normalized per image and averaged into `omega`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::output_distribution;
use crate::par::{self, Execution};
use crate::tensor::Tensor;

/// Default calibration set size for profiling.
pub const DEFAULT_IMAGES: usize = 64;

const SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceProfile {
    /// Quantizable layer ids in network order; columns of the matrices below.
    pub layer_ids: Vec<usize>,
    /// `T × L` normalized scores; each row sums to 1.
    pub per_image: Vec<Vec<f64>>,
    /// `T × L` raw KL scores in nats.
    pub raw_cmi: Vec<Vec<f64>>,
    pub omega: Vec<f64>,
    pub t: usize,
}

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidDistribution(format!("{name} has negative or non-finite entries")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::InvalidDistribution(format!("{name} sums to {s}")));
    }
    Ok(())
}

/// `Σ p·ln(p/q)` in nats.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::InvalidDistribution(format!("lengths {} and {} differ", p.len(), q.len())));
    }
    if p.is_empty() {
        return Err(Error::EmptyInput("distribution"));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::InvalidDistribution("q is zero where p is not".into()));
        }
        kl += pi * (pi / qi).ln();
    }
    // Gibbs: any negative residue is rounding.
    Ok(kl.max(0.0))
}

/// KL(full model ‖ model with `layer_id` zeroed) on one image.
pub fn cmi_layer(model: &Model, image: &Tensor, layer_id: usize) -> Result<f64> {
    let base = model.forward(image, None, &BTreeSet::new())?;
    let zeroed = model.forward(image, None, &BTreeSet::from([layer_id]))?;
    kl_divergence(
        &output_distribution(base.logits.data())?,
        &output_distribution(zeroed.logits.data())?,
    )
}

/// `raw / Σ raw`, or uniform when every entry is zero.
pub fn normalize_scores(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::EmptyInput("scores"));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("scores"));
    }
    if let Some(v) = raw.iter().find(|v| **v < 0.0) {
        return Err(Error::InvalidParameter(format!("negative score {v}")));
    }
    let total: f64 = raw.iter().sum();
    if total == 0.0 {
        return Ok(vec![1.0 / raw.len() as f64; raw.len()]);
    }
    Ok(raw.iter().map(|v| v / total).collect())
}

fn image_scores(model: &Model, image: &Tensor, layer_ids: &[usize]) -> Result<Vec<f64>> {
    let base = output_distribution(model.forward(image, None, &BTreeSet::new())?.logits.data())?;
    layer_ids
        .iter()
        .map(|&id| {
            let z = model.forward(image, None, &BTreeSet::from([id]))?;
            kl_divergence(&base, &output_distribution(z.logits.data())?)
        })
        .collect()
}

/// Importance over a calibration set: `T·(L+1)` forwards, images processed
/// independently under `exec`.
pub fn importance_profile(model: &Model, images: &[Tensor], exec: Execution) -> Result<ImportanceProfile> {
    if images.is_empty() {
        return Err(Error::EmptyInput("importance images"));
    }
    let layer_ids = model.spec().quantizable_ids();
    if layer_ids.is_empty() {
        return Err(Error::EmptyInput("quantizable layers"));
    }
    let raw_cmi = par::map(exec, images, |_, img| image_scores(model, img, &layer_ids))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let per_image = raw_cmi.iter().map(|r| normalize_scores(r)).collect::<Result<Vec<_>>>()?;
    let t = images.len();
    let mut omega = vec![0.0; layer_ids.len()];
    for row in &per_image {
        omega.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    omega.iter_mut().for_each(|o| *o /= t as f64);
    Ok(ImportanceProfile { layer_ids, per_image, raw_cmi, omega, t })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::nn::model_forward;
    use crate::spec::{NetworkConfig, NetworkSpec};
    use crate::weights::{Linear, Weights};
    use proptest::prelude::*;

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        let p = output_distribution(&[1000.0, 0.0]).unwrap();
        assert!((kl_divergence(&p, &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-9);
        let want = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        let got = kl_divergence(&[0.75, 0.25], &[0.5, 0.5]).unwrap();
        assert!((got - want).abs() < 1e-15);
        assert!((got - 0.1308).abs() < 1e-4);
    }

    #[test]
    fn kl_rejects_bad_inputs() {
        assert!(kl_divergence(&[0.5, 0.5], &[1.0]).is_err());
        assert!(kl_divergence(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(kl_divergence(&[1.5, -0.5], &[0.5, 0.5]).is_err());
        assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_scores(&[2.0, 1.0, 1.0]).unwrap(), vec![0.5, 0.25, 0.25]);
        assert_eq!(normalize_scores(&[0.0; 3]).unwrap(), vec![1.0 / 3.0; 3]);
        assert!(normalize_scores(&[1.0, -1.0]).is_err());
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(a in proptest::collection::vec(-5.0f64..5.0, 2..12), seed in 0u64..1000) {
            let p = output_distribution(&a).unwrap();
            let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v * ((seed + i as u64) % 7) as f64 - 1.0).collect();
            let q = output_distribution(&b).unwrap();
            prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
            prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        }

        #[test]
        fn normalized_rows_sum_to_one(raw in proptest::collection::vec(0.0f64..10.0, 1..30)) {
            let n = normalize_scores(&raw).unwrap();
            prop_assert!((n.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    fn one_block_spec() -> NetworkSpec {
        NetworkSpec::new(NetworkConfig { blocks: 1, ..NetworkConfig::default() }).unwrap()
    }

    #[test]
    fn zero_weight_layer_scores_zero() {
        let spec = NetworkSpec::toy();
        let mut w = Weights::random(&spec, 3);
        let proj = spec.block_layer_ids(2).proj;
        *w.linear_mut(&spec, proj).unwrap() = Linear::zeros(64, 64);
        let model = Model::new(spec, w).unwrap();
        let imgs = generate_synthetic(3, 3, &[3, 16, 16]).unwrap();
        assert_eq!(cmi_layer(&model, &imgs[0], proj).unwrap(), 0.0);
        let prof = importance_profile(&model, &imgs, Execution::Parallel).unwrap();
        let col = prof.layer_ids.iter().position(|&id| id == proj).unwrap();
        assert!(prof.per_image.iter().all(|r| r[col] == 0.0));
    }

    #[test]
    fn equivalent_perturbations_score_equally() {
        // With a bias-free projection, zeroing QKV, MatMul2 or Proj all remove the attention branch.
        let spec = one_block_spec();
        let mut w = Weights::random(&spec, 5);
        w.blocks[0].proj.bias.iter_mut().for_each(|b| *b = 0.0);
        let model = Model::new(spec.clone(), w).unwrap();
        let img = &generate_synthetic(5, 1, &[3, 16, 16]).unwrap()[0];
        let ids = spec.block_layer_ids(0);
        let a = cmi_layer(&model, img, ids.qkv).unwrap();
        let b = cmi_layer(&model, img, ids.matmul2).unwrap();
        let c = cmi_layer(&model, img, ids.proj).unwrap();
        assert!(a > 0.0);
        assert_eq!(a, b);
        assert_eq!(b, c);
    }

    fn oracle_omega(spec: &NetworkSpec, w: &Weights, imgs: &[Tensor]) -> Vec<f64> {
        let ids = spec.quantizable_ids();
        let softmax = |l: &[f64]| {
            let m = l.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let c = l.len() as f64;
            e.iter().map(|v| (v / z + 1e-12) / (1.0 + c * 1e-12)).collect::<Vec<_>>()
        };
        let mut omega = vec![0.0; ids.len()];
        for img in imgs {
            let p = softmax(model_forward(spec, w, img, None, &BTreeSet::new()).unwrap().logits.data());
            let raw: Vec<f64> = ids
                .iter()
                .map(|&id| {
                    let q = softmax(model_forward(spec, w, img, None, &BTreeSet::from([id])).unwrap().logits.data());
                    p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>()
                })
                .collect();
            let s: f64 = raw.iter().sum();
            for (o, r) in omega.iter_mut().zip(&raw) {
                *o += r / s / imgs.len() as f64;
            }
        }
        omega
    }

    #[test]
    fn profile_matches_recomputation() {
        let spec = NetworkSpec::toy();
        let w = Weights::random(&spec, 8);
        let imgs = generate_synthetic(8, 4, &[3, 16, 16]).unwrap();
        let model = Model::new(spec.clone(), w.clone()).unwrap();
        let prof = importance_profile(&model, &imgs, Execution::Parallel).unwrap();
        assert_eq!(model.forward_count(), 4 * (24 + 1));
        let want = oracle_omega(&spec, &w, &imgs);
        for (a, b) in prof.omega.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((prof.omega.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let seq = importance_profile(&model, &imgs, Execution::Sequential).unwrap();
        assert_eq!(seq, prof);
    }

    #[test]
    fn single_and_repeated_images() {
        let spec = one_block_spec();
        let model = Model::random(spec, 2);
        let img = generate_synthetic(2, 1, &[3, 16, 16]).unwrap();
        let one = importance_profile(&model, &img, Execution::Parallel).unwrap();
        assert_eq!(one.t, 1);
        assert_eq!(one.omega, one.per_image[0]);
        let same = vec![img[0].clone(); 5];
        let rep = importance_profile(&model, &same, Execution::Parallel).unwrap();
        for (a, b) in rep.omega.iter().zip(&one.omega) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

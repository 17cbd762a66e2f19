//! Proxy evaluation of quantized variants against the full-precision model.
//!
//! Metrics are the mean output KL divergence and mean logit MSE over an
//! evaluation set, with activation ranges calibrated on a separate set.

use std::collections::BTreeSet;
use std::fmt::Write;

use crate::error::{Error, Result};
use crate::importance::kl_divergence;
use crate::io::EvaluationRow;
use crate::model::{calibrate_activations, quantize_model, Model};
use crate::nn::output_distribution;
use crate::par::{self, Execution};
use crate::profiler::{bitops, model_size_bits, LayerStats, FULL_PRECISION_BITS};
use crate::tensor::Tensor;

pub const METRIC_NOTE: &str =
    "mean output KL (nats) and logit MSE against full precision on synthetic inputs; accuracy proxies only";

/// A labelled per-layer bit vector to evaluate.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub bits: Vec<u32>,
}

impl Variant {
    pub fn uniform(bits: u32, layers: usize) -> Self {
        Self { label: format!("uniform-{bits}"), bits: vec![bits; layers] }
    }
}

fn logit_mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// One row for the full-precision reference followed by one per variant.
pub fn evaluate_variants(
    model: &Model,
    stats: &LayerStats,
    calibration: &[Tensor],
    eval: &[Tensor],
    variants: &[Variant],
    exec: Execution,
) -> Result<Vec<EvaluationRow>> {
    if eval.is_empty() {
        return Err(Error::EmptyInput("evaluation images"));
    }
    let spec = model.spec();
    let act = calibrate_activations(model, calibration, exec)?;
    let reference = par::map(exec, eval, |_, x| {
        let logits = model.forward(x, None, &BTreeSet::new())?.logits.into_data();
        let p = output_distribution(&logits)?;
        Ok::<_, Error>((logits, p))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let l = stats.layer_ids.len();
    let fp_bits = vec![FULL_PRECISION_BITS as u32; l];
    let mut rows = vec![EvaluationRow {
        label: "full-precision".into(),
        bits: None,
        mean_kl: 0.0,
        mean_logit_mse: 0.0,
        size_bits: model_size_bits(stats, &fp_bits)?,
        bitops: bitops(stats, &fp_bits)?,
    }];
    for v in variants {
        let q = quantize_model(spec, model.weights(), &act, &v.bits)?;
        let per = par::map(exec, eval, |i, x| {
            let logits = q.forward(spec, x)?.logits.into_data();
            if logits.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("quantized logits"));
            }
            let (ref_logits, p) = &reference[i];
            Ok((kl_divergence(p, &output_distribution(&logits)?)?, logit_mse(ref_logits, &logits)))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let n = per.len() as f64;
        rows.push(EvaluationRow {
            label: v.label.clone(),
            bits: Some(v.bits.clone()),
            mean_kl: per.iter().map(|r| r.0).sum::<f64>() / n,
            mean_logit_mse: per.iter().map(|r| r.1).sum::<f64>() / n,
            size_bits: model_size_bits(stats, &v.bits)?,
            bitops: bitops(stats, &v.bits)?,
        });
    }
    Ok(rows)
}

/// Fixed-width text rendering of evaluation rows.
pub fn format_table(rows: &[EvaluationRow]) -> String {
    let w = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let mut s = String::new();
    writeln!(s, "{:<w$}  {:>12}  {:>12}  {:>12}  {:>14}  bits", "label", "mean_kl", "logit_mse", "size_bits", "bitops").unwrap();
    for r in rows {
        let bits = r.bits.as_ref().map_or_else(|| "-".to_string(), |b| {
            b.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
        });
        writeln!(
            s,
            "{:<w$}  {:>12.6e}  {:>12.6e}  {:>12}  {:>14}  {bits}",
            r.label, r.mean_kl, r.mean_logit_mse, r.size_bits, r.bitops
        )
        .unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, synthetic_batch, EVAL_STREAM};
    use crate::model::CALIBRATION_IMAGES;
    use crate::profiler::layer_stats;
    use crate::spec::NetworkSpec;

    #[test]
    fn rows_and_ordering() {
        let spec = NetworkSpec::toy();
        let shape = spec.config.image_shape();
        let stats = layer_stats(&spec);
        let model = Model::random(spec, 3);
        let calib = generate_synthetic(3, CALIBRATION_IMAGES, &shape).unwrap();
        let eval = synthetic_batch(3, EVAL_STREAM, 8, &shape).unwrap();
        let variants = [Variant::uniform(4, 24), Variant::uniform(8, 24)];
        let rows = evaluate_variants(&model, &stats, &calib, &eval, &variants, Execution::Parallel).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].mean_kl, 0.0);
        assert!(rows[1].mean_kl > rows[2].mean_kl);
        assert!(rows[1].mean_logit_mse > rows[2].mean_logit_mse);
        assert_eq!(rows[2].size_bits, 2 * rows[1].size_bits);
        assert_eq!(rows[0].size_bits, 4 * rows[2].size_bits);
        let seq = evaluate_variants(&model, &stats, &calib, &eval, &variants, Execution::Sequential).unwrap();
        assert_eq!(rows, seq);

        let table = format_table(&rows);
        assert_eq!(table.lines().count(), 4);
        assert!(table.lines().nth(1).unwrap().starts_with("full-precision"));
    }

    #[test]
    fn empty_eval_set_is_rejected() {
        let spec = NetworkSpec::toy();
        let stats = layer_stats(&spec);
        let model = Model::random(spec, 0);
        let calib = generate_synthetic(0, 2, &[3, 16, 16]).unwrap();
        assert!(evaluate_variants(&model, &stats, &calib, &[], &[], Execution::Sequential).is_err());
    }
}

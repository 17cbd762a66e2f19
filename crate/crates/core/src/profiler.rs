//! Static per-layer cost accounting: parameter counts, MACs, model size and BitOps.
//!
//! One MAC is one multiply plus one accumulate; bias adds are not counted.
//! Layers kept at full precision (patch embedding, head, layer norms) are
//! reported as a separate 32-bit overhead.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spec::{LayerDims, NetworkSpec};

/// Bit-width of parameters that are never quantized.
pub const FULL_PRECISION_BITS: u64 = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerStats {
    /// Quantizable layer ids in network order.
    pub layer_ids: Vec<usize>,
    pub w_count: Vec<u64>,
    pub macs: Vec<u64>,
    /// Parameters of layers outside the optimization.
    pub overhead_params: u64,
}

/// Parameter count of every layer, indexed by layer id.
pub fn count_params(spec: &NetworkSpec) -> Vec<u64> {
    spec.layers
        .iter()
        .map(|l| match l.dims {
            LayerDims::Linear { in_features, out_features, .. } => {
                (in_features * out_features + out_features) as u64
            }
            LayerDims::Norm { features, .. } => 2 * features as u64,
            LayerDims::Attention { .. } | LayerDims::Elementwise { .. } => 0,
        })
        .collect()
}

/// MACs of every layer for one forward pass over `tokens` tokens, indexed by
/// layer id. The head always sees a single pooled token.
pub fn count_macs(spec: &NetworkSpec, tokens: usize) -> Vec<u64> {
    let head = spec.head_id();
    spec.layers
        .iter()
        .map(|l| match l.dims {
            LayerDims::Linear { in_features, out_features, .. } => {
                let n = if l.id == head { 1 } else { tokens };
                (n * in_features * out_features) as u64
            }
            LayerDims::Attention { heads, head_dim, .. } => (heads * tokens * tokens * head_dim) as u64,
            LayerDims::Norm { .. } | LayerDims::Elementwise { .. } => 0,
        })
        .collect()
}

/// Costs of the quantizable layers at the network's token count.
pub fn layer_stats(spec: &NetworkSpec) -> LayerStats {
    let params = count_params(spec);
    let macs = count_macs(spec, spec.config.tokens());
    let layer_ids = spec.quantizable_ids();
    let overhead_params = spec.layers.iter().filter(|l| !l.quantizable).map(|l| params[l.id]).sum();
    LayerStats {
        w_count: layer_ids.iter().map(|&i| params[i]).collect(),
        macs: layer_ids.iter().map(|&i| macs[i]).collect(),
        layer_ids,
        overhead_params,
    }
}

fn check_len(stats: &LayerStats, bits: &[u32]) -> Result<()> {
    if bits.len() != stats.layer_ids.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} bit-widths for {} layers",
            bits.len(),
            stats.layer_ids.len()
        )));
    }
    Ok(())
}

/// `Σ |w_l|·b_l` over the quantizable layers; see [`overhead_bits`] for the rest.
pub fn model_size_bits(stats: &LayerStats, bits: &[u32]) -> Result<u64> {
    check_len(stats, bits)?;
    Ok(stats.w_count.iter().zip(bits).map(|(&w, &b)| w * b as u64).sum())
}

pub fn overhead_bits(stats: &LayerStats) -> u64 {
    stats.overhead_params * FULL_PRECISION_BITS
}

/// `Σ MAC_l·b_l²`.
pub fn bitops(stats: &LayerStats, bits: &[u32]) -> Result<u64> {
    check_len(stats, bits)?;
    Ok(stats.macs.iter().zip(bits).map(|(&m, &b)| m * (b as u64).pow(2)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model_forward;
    use crate::spec::{LayerKind, NetworkConfig};
    use crate::weights::Weights;
    use std::collections::BTreeSet;

    #[test]
    fn param_examples() {
        let spec = NetworkSpec::toy();
        let p = count_params(&spec);
        let ids = spec.block_layer_ids(0);
        assert_eq!(p[ids.fc1], 64 * 256 + 256);
        assert_eq!(p[ids.fc2], 16448);
        assert_eq!(p[ids.matmul1], 0);
        assert_eq!(p[ids.softmax], 0);
    }

    #[test]
    fn toy_totals_match_hand_count() {
        let spec = NetworkSpec::toy();
        let total: u64 = count_params(&spec).iter().sum();
        let per_block = (64 * 192 + 192) + (64 * 64 + 64) + (64 * 256 + 256) + (256 * 64 + 64) + 4 * 64;
        let patch = 48 * 64 + 64;
        let head = 64 * 10 + 10;
        assert_eq!(total, (4 * per_block + patch + head) as u64);
        let stats = layer_stats(&spec);
        assert_eq!(stats.overhead_params, (patch + head + 4 * 4 * 64) as u64);
        assert_eq!(stats.w_count.len(), 24);
        assert_eq!(stats.w_count[..6], [12480, 0, 0, 4160, 16640, 16448]);
    }

    #[test]
    fn mac_examples() {
        let cfg = NetworkConfig { embed_dim: 32, heads: 2, mlp_dim: 32, ..NetworkConfig::default() };
        let spec = NetworkSpec::new(cfg).unwrap();
        let m = count_macs(&spec, 16);
        assert_eq!(m[spec.block_layer_ids(0).proj], 16 * 32 * 32);
        let toy = NetworkSpec::toy();
        assert_eq!(count_macs(&toy, 16)[toy.block_layer_ids(0).matmul1], 16384);
    }

    #[test]
    fn macs_match_runtime_counter() {
        let spec = NetworkSpec::toy();
        let w = Weights::random(&spec, 1);
        let x = crate::data::generate_synthetic(0, 1, &[3, 16, 16]).unwrap();
        let r = model_forward(&spec, &w, &x[0], None, &BTreeSet::new()).unwrap();
        let static_macs = count_macs(&spec, 16);
        for l in &spec.layers {
            let counted = r.macs.get(&l.id).copied().unwrap_or(0);
            assert_eq!(counted, static_macs[l.id], "{} ({:?})", l.name, l.kind);
        }
        assert!(spec.layers.iter().any(|l| l.kind == LayerKind::Softmax && static_macs[l.id] == 0));
    }

    #[test]
    fn size_and_bitops() {
        let stats = LayerStats { layer_ids: vec![1, 2], w_count: vec![100, 100], macs: vec![100, 0], overhead_params: 5 };
        assert_eq!(model_size_bits(&stats, &[6, 6]).unwrap(), 1200);
        assert_eq!(overhead_bits(&stats), 160);
        assert_eq!(bitops(&stats, &[6, 3]).unwrap(), 3600);
        assert_eq!(bitops(&stats, &[12, 6]).unwrap(), 4 * 3600);
        assert!(bitops(&stats, &[6]).is_err());
        let zero = LayerStats { w_count: vec![0, 0], ..stats };
        assert_eq!(model_size_bits(&zero, &[8, 8]).unwrap(), 0);
    }
}

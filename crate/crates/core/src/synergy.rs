//! Cross-layer synergy between consecutive quantizable layers.
//!
//! Per image, synergy is the inverse gap between the two layers' raw scores,
//! `1 / (|I_l - I_m| + ε)`. The per-image values are averaged and
//! stabilized as `ln(1 + mean)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynergyProfile {
    /// Column index pairs `(l, l + 1)` into the importance profile's layers.
    pub pairs: Vec<(usize, usize)>,
    pub s_hat: Vec<f64>,
    pub epsilon: f64,
    pub t: usize,
}

pub fn pair_synergy_per_image(i_l: f64, i_m: f64, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(i_l >= 0.0 && i_m >= 0.0) || !i_l.is_finite() || !i_m.is_finite() {
        return Err(Error::InvalidParameter(format!("scores must be finite and ≥ 0, got {i_l}, {i_m}")));
    }
    Ok(1.0 / ((i_l - i_m).abs() + epsilon))
}

/// Stabilized synergy for each adjacent column pair of a `T × L` raw score matrix.
pub fn synergy_profile(raw_cmi: &[Vec<f64>], epsilon: f64) -> Result<SynergyProfile> {
    let t = raw_cmi.len();
    let l = raw_cmi.first().map(Vec::len).ok_or(Error::EmptyInput("raw scores"))?;
    if l == 0 {
        return Err(Error::EmptyInput("raw scores"));
    }
    if raw_cmi.iter().any(|r| r.len() != l) {
        return Err(Error::ShapeMismatch("ragged raw score matrix".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..l.saturating_sub(1)).map(|i| (i, i + 1)).collect();
    let mut s_hat = Vec::with_capacity(pairs.len());
    for &(a, b) in &pairs {
        let mut sum = 0.0;
        for row in raw_cmi {
            sum += pair_synergy_per_image(row[a], row[b], epsilon)?;
        }
        s_hat.push((sum / t as f64).ln_1p());
    }
    Ok(SynergyProfile { pairs, s_hat, epsilon, t })
}

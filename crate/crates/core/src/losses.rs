//! Training objectives.
//!
//! Every loss returns a [`LossValue`] carrying the number of contributing
//! terms. Terms are accumulated left to right in input order so results are
//! reproducible bit for bit regardless of how the inputs were produced.

use crate::error::{Result, SmecError};
use crate::numerics::{cosine, cosine_clamped01, softplus};

/// Weight of the unsupervised term in the total loss.
pub const DEFAULT_ALPHA: f64 = 1.0;
/// Probability squeeze applied before taking logs in the CE pair loss.
pub const CE_EPS: f64 = 1e-7;

/// Similarity of a query/doc pair in the compressed space, with its gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScore {
    pub query_idx: usize,
    pub doc_idx: usize,
    pub sim: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValue {
    pub value: f64,
    pub n_terms: usize,
}

impl LossValue {
    pub const ZERO: LossValue = LossValue { value: 0.0, n_terms: 0 };

    pub fn new(value: f64, n_terms: usize) -> Self {
        Self { value, n_terms }
    }

    /// Mean per term, 0 for an empty loss.
    pub fn mean(&self) -> f64 {
        if self.n_terms == 0 {
            0.0
        } else {
            self.value / self.n_terms as f64
        }
    }
}

/// Pairwise logistic term `Δy · ln(1 + exp(s_lo − s_hi))` for one ordered pair.
#[inline]
pub fn rank_pair_term(s_hi: f64, s_lo: f64, gain_gap: f64) -> f64 {
    gain_gap * softplus(s_lo - s_hi)
}

/// `Σ_i Σ_{j,k} 𝟙[y_ij > y_ik] (y_ij − y_ik) ln(1 + exp(s_ik − s_ij))`, one
/// group of pairs per query.
pub fn rank_loss(groups: &[Vec<PairScore>]) -> LossValue {
    let mut total = LossValue::ZERO;
    for group in groups {
        for a in group {
            for b in group {
                if a.gain > b.gain {
                    total.value += rank_pair_term(a.sim, b.sim, a.gain - b.gain);
                    total.n_terms += 1;
                }
            }
        }
    }
    total
}

/// `(label − max(0, cos(e1, e2)))²`
pub fn mse_pair_loss(e1: &[f64], e2: &[f64], label: f64) -> LossValue {
    let s = cosine_clamped01(e1, e2);
    LossValue::new((label - s) * (label - s), 1)
}

/// Binary cross-entropy of a probability squeezed into `[ε, 1 − ε]`.
pub fn ce_from_prob(p: f64, label: f64) -> f64 {
    let p = p.clamp(CE_EPS, 1.0 - CE_EPS);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// Binary cross-entropy with the clamped cosine read as a probability.
pub fn ce_pair_loss(e1: &[f64], e2: &[f64], label: f64) -> LossValue {
    LossValue::new(ce_from_prob(cosine_clamped01(e1, e2), label), 1)
}

/// `Σ_i Σ_{j∈N(i)} |cos(high_i, high_j) − cos(low_i, low_j)|`
pub fn unsup_loss(high: &[Vec<f64>], low: &[Vec<f64>], neighbors: &[Vec<usize>]) -> Result<LossValue> {
    if high.len() != low.len() {
        return Err(SmecError::invalid(format!(
            "unsup loss needs matching lists, got {} high and {} low",
            high.len(),
            low.len()
        )));
    }
    if neighbors.len() > high.len() {
        return Err(SmecError::invalid("more neighbor lists than anchors"));
    }
    let mut total = LossValue::ZERO;
    for (i, nbrs) in neighbors.iter().enumerate() {
        for &j in nbrs {
            if j >= high.len() {
                return Err(SmecError::invalid(format!("neighbor index {j} out of range")));
            }
            total.value += (cosine(&high[i], &high[j]) - cosine(&low[i], &low[j])).abs();
            total.n_terms += 1;
        }
    }
    Ok(total)
}

/// Same sum when the teacher similarities are already known.
pub fn unsup_from_sims(pairs: impl IntoIterator<Item = (f64, f64)>) -> LossValue {
    let mut total = LossValue::ZERO;
    for (teacher, student) in pairs {
        total.value += (teacher - student).abs();
        total.n_terms += 1;
    }
    total
}

/// `Σ_m c_m · 𝓛_m`
pub fn mrl_joint_loss(per_dim: &[(f64, LossValue)]) -> Result<LossValue> {
    let mut total = LossValue::ZERO;
    for &(c, loss) in per_dim {
        if !(c >= 0.0) {
            return Err(SmecError::invalid(format!("loss weight must be >= 0, got {c}")));
        }
        total.value += c * loss.value;
        total.n_terms += loss.n_terms;
    }
    Ok(total)
}

/// `rank + α · unsup`
pub fn total_loss(rank: LossValue, unsup: LossValue, alpha: f64) -> Result<LossValue> {
    if !(alpha >= 0.0) {
        return Err(SmecError::invalid(format!("alpha must be >= 0, got {alpha}")));
    }
    Ok(LossValue::new(
        rank.value + alpha * unsup.value,
        rank.n_terms + unsup.n_terms,
    ))
}

//! Server-side aggregation of client adapters.
//!
//! * [`aggregate_flora`] stacks the scaled client adapters. Its delta is the
//!   weighted sum of client deltas, for any mix of ranks.
//! * [`aggregate_fedit`] averages `a` and `b` independently. Its delta picks up
//!   `p_k²` coefficients and the cross terms `p_i p_j B_i A_j`, see [`fedit_noise`].
//! * [`aggregate_zero_padding`] pads every adapter to the largest rank and then
//!   averages like FedIT.
//! * [`oracle_delta`] is the dense weighted sum every strategy is measured against.

use crate::error::{invalid, FloraError, Result};
use crate::lora::{stack_adapters, Dim, LoraAdapter, Matrix};
use crate::rng::permutation;

/// One client's upload together with its aggregation weight `p_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedUpdate {
    pub adapter: LoraAdapter,
    pub weight: f64,
}

impl WeightedUpdate {
    pub fn new(adapter: LoraAdapter, weight: f64) -> Result<Self> {
        if !(weight.is_finite() && (0.0..=1.0).contains(&weight)) {
            return Err(invalid(format!("update weight must lie in [0, 1], got {weight}")));
        }
        Ok(WeightedUpdate { adapter, weight })
    }
}

/// Pairs adapters with weights. Lengths must agree.
pub fn weighted(adapters: Vec<LoraAdapter>, weights: &[f64]) -> Result<Vec<WeightedUpdate>> {
    if adapters.len() != weights.len() {
        return Err(invalid(format!(
            "{} adapters but {} weights",
            adapters.len(),
            weights.len()
        )));
    }
    adapters
        .into_iter()
        .zip(weights)
        .map(|(ad, &w)| WeightedUpdate::new(ad, w))
        .collect()
}

fn shared_dim(updates: &[WeightedUpdate]) -> Result<Dim> {
    let first = updates
        .first()
        .ok_or_else(|| invalid("no updates to aggregate"))?;
    let dim = first.adapter.dim();
    if let Some(bad) = updates.iter().find(|u| u.adapter.dim() != dim) {
        return Err(invalid(format!(
            "updates must share dimensions: {:?} vs {:?}",
            dim,
            bad.adapter.dim()
        )));
    }
    Ok(dim)
}

fn homogeneous_rank(updates: &[WeightedUpdate]) -> Result<usize> {
    shared_dim(updates)?;
    let r = updates[0].adapter.rank();
    if updates.iter().any(|u| u.adapter.rank() != r) {
        return Err(FloraError::UnsupportedHeterogeneousRanks {
            ranks: updates.iter().map(|u| u.adapter.rank()).collect(),
        });
    }
    Ok(r)
}

/// Stacks `p_k·A_k` and `B_k` in list order. Global rank is `Σ r_k`.
pub fn aggregate_flora(updates: &[WeightedUpdate]) -> Result<LoraAdapter> {
    shared_dim(updates)?;
    let scaled = updates
        .iter()
        .map(|u| u.adapter.scale(u.weight))
        .collect::<Result<Vec<_>>>()?;
    stack_adapters(&scaled)
}

// Caller guarantees equal, nonzero ranks and shared dims.
fn average_factors<'a>(pairs: impl Iterator<Item = (&'a LoraAdapter, f64)>, dim: Dim, rank: usize) -> Result<LoraAdapter> {
    let mut a = Matrix::zeros((rank, dim.n));
    let mut b = Matrix::zeros((dim.m, rank));
    for (ad, p) in pairs {
        a.scaled_add(p, ad.a());
        b.scaled_add(p, ad.b());
    }
    LoraAdapter::new(a, b)
}

/// Independent weighted averaging of the `a` and `b` factors.
pub fn aggregate_fedit(updates: &[WeightedUpdate]) -> Result<LoraAdapter> {
    let rank = homogeneous_rank(updates)?;
    let dim = updates[0].adapter.dim();
    average_factors(updates.iter().map(|u| (&u.adapter, u.weight)), dim, rank)
}

/// Pads every adapter with zeros up to the largest rank, then averages.
pub fn aggregate_zero_padding(updates: &[WeightedUpdate]) -> Result<LoraAdapter> {
    let dim = shared_dim(updates)?;
    let r_max = updates.iter().map(|u| u.adapter.rank()).max().unwrap_or(1);
    let padded = pad_all(updates, r_max)?;
    average_factors(padded.iter().map(|u| (&u.adapter, u.weight)), dim, r_max)
}

fn pad_all(updates: &[WeightedUpdate], rank: usize) -> Result<Vec<WeightedUpdate>> {
    updates
        .iter()
        .map(|u| {
            Ok(WeightedUpdate {
                adapter: u.adapter.zero_pad(rank)?,
                weight: u.weight,
            })
        })
        .collect()
}

/// Dense `Σ p_k B_k A_k`.
pub fn oracle_delta(updates: &[WeightedUpdate]) -> Result<Matrix> {
    let dim = shared_dim(updates)?;
    let mut acc = Matrix::zeros((dim.m, dim.n));
    for u in updates {
        acc.scaled_add(u.weight, &u.adapter.delta());
    }
    Ok(acc)
}

/// Split of the FedIT delta into the weighted client products and the
/// cross-client term.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseReport {
    /// `Σ p_k² B_k A_k`
    pub signal: Matrix,
    /// `Σ_{i≠j} p_i p_j B_i A_j`
    pub cross: Matrix,
    /// `‖cross‖_F / ‖oracle_delta‖_F`, with `0/0 = 0`.
    pub relative_noise: f64,
}

impl NoiseReport {
    /// `‖cross‖_F / ‖signal‖_F`, with `0/0 = 0`.
    pub fn noise_to_signal(&self) -> f64 {
        ratio(frobenius(&self.cross), frobenius(&self.signal))
    }
}

pub fn frobenius(m: &Matrix) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

/// Decomposes the FedIT aggregate of homogeneous-rank updates.
///
/// The cross term is taken as the FedIT delta minus the signal, which is
/// linear in `K`. The result is checked to recompose the FedIT delta within
/// `8·K` machine epsilons of the entry magnitudes before it is returned.
pub fn fedit_noise(updates: &[WeightedUpdate]) -> Result<NoiseReport> {
    let fedit = aggregate_fedit(updates)?.delta();
    let dim = updates[0].adapter.dim();
    let mut signal = Matrix::zeros((dim.m, dim.n));
    for u in updates {
        signal.scaled_add(u.weight * u.weight, &u.adapter.delta());
    }
    let cross = &fedit - &signal;

    let tol = 8.0 * updates.len() as f64 * f64::EPSILON;
    for ((s, c), f) in signal.iter().zip(cross.iter()).zip(fedit.iter()) {
        let scale = s.abs().max(c.abs()).max(f.abs());
        if (s + c - f).abs() > tol * scale {
            return Err(FloraError::Internal(format!(
                "signal + cross = {} but FedIT delta = {f}",
                s + c
            )));
        }
    }

    let oracle = oracle_delta(updates)?;
    let relative_noise = ratio(frobenius(&cross), frobenius(&oracle));
    Ok(NoiseReport {
        signal,
        cross,
        relative_noise,
    })
}

/// Noise report for the zero-padding baseline: the padded adapters are
/// homogeneous, so the FedIT decomposition applies to them directly.
pub fn zero_padding_noise(updates: &[WeightedUpdate]) -> Result<NoiseReport> {
    shared_dim(updates)?;
    let r_max = updates.iter().map(|u| u.adapter.rank()).max().unwrap_or(1);
    fedit_noise(&pad_all(updates, r_max)?)
}

/// Scaled rank-1 pieces of every update, concatenated in client order.
pub fn rank1_pieces(updates: &[WeightedUpdate]) -> Result<Vec<LoraAdapter>> {
    shared_dim(updates)?;
    let mut pieces = Vec::new();
    for u in updates {
        pieces.extend(u.adapter.scale(u.weight)?.split_rank1());
    }
    Ok(pieces)
}

/// Stacks the rank-1 pieces in the given order (`order[i]` is the piece placed
/// in slot `i`). `order` must be a permutation of `0..Σ r_k`.
pub fn stack_in_order(updates: &[WeightedUpdate], order: &[usize]) -> Result<LoraAdapter> {
    let pieces = rank1_pieces(updates)?;
    let mut seen = vec![false; pieces.len()];
    if order.len() != pieces.len()
        || order
            .iter()
            .any(|&i| i >= seen.len() || std::mem::replace(&mut seen[i], true))
    {
        return Err(invalid(format!(
            "order is not a permutation of 0..{}",
            pieces.len()
        )));
    }
    let ordered: Vec<_> = order.iter().map(|&i| pieces[i].clone()).collect();
    stack_adapters(&ordered)
}

/// Privacy-preserving FLoRA aggregate: every scaled client adapter is split into
/// rank-1 pieces and the pieces are stacked in a seeded uniform random order
/// (see [`crate::rng::permutation`]). The delta equals that of
/// [`aggregate_flora`]; only per-client contiguity is lost. The multiset of
/// client ranks is still visible to anyone who knows the piece count.
pub fn shuffled_stack(updates: &[WeightedUpdate], seed: u64) -> Result<LoraAdapter> {
    let total: usize = updates.iter().map(|u| u.adapter.rank()).sum();
    stack_in_order(updates, &permutation(total, seed))
}

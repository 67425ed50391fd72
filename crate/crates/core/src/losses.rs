//! Loss values: margin, cross-entropy, small-box (SABR) and cross-input
//! (CITRUS) interval losses.
//!
//! These are plain evaluations. The differentiable versions used during
//! training are assembled on a graph by the objectives in
//! [`crate::objective`], from the same attack centres.

use crate::attack::{pgd_single, AttackConfig};
use crate::data::{DataRange, Sample};
use crate::error::{Error, Result};
use crate::interval::ibp_loss;
use crate::network::Network;
use crate::tensor::Tensor;

/// `max_{i≠y} (o_i - o_y)`. Non-positive exactly when `y` attains the maximum
/// logit; strictly positive when another class is strictly larger.
pub fn margin_loss(net: &Network, x: &Tensor, y: usize) -> Result<f64> {
    let logits = net.forward(x)?;
    margin_of(logits.data(), y)
}

pub(crate) fn margin_of(logits: &[f64], y: usize) -> Result<f64> {
    if y >= logits.len() || logits.len() < 2 {
        return Err(Error::dim(format!(
            "label {y} with {} logits",
            logits.len()
        )));
    }
    let oy = logits[y];
    Ok(logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != y)
        .map(|(_, &o)| o - oy)
        .fold(f64::NEG_INFINITY, f64::max))
}

pub fn cross_entropy(net: &Network, x: &Tensor, y: usize) -> Result<f64> {
    Ok(net.ce_input_gradient(x.data(), y)?.0)
}

pub(crate) fn check_radii(eps: f64, tau: f64) -> Result<()> {
    if !(0.0 <= tau && tau <= eps && eps.is_finite()) {
        return Err(Error::contract(format!(
            "need 0 <= tau <= eps, got tau={tau}, eps={eps}"
        )));
    }
    Ok(())
}

/// Seed used to attack batch element `index`.
pub fn element_seed(atk: &AttackConfig, index: usize) -> u64 {
    atk.seed.wrapping_add(index as u64)
}

/// One PGD perturbation per batch element within `B(0, eps - tau)`.
/// Element `j` is attacked with [`element_seed`]`(atk, j)`.
pub fn adversarial_offsets(
    net: &Network,
    batch: &[Sample],
    eps: f64,
    tau: f64,
    atk: &AttackConfig,
    range: Option<DataRange>,
) -> Result<Vec<Tensor>> {
    check_radii(eps, tau)?;
    let shrunk = atk.with_eps(eps - tau);
    batch
        .iter()
        .enumerate()
        .map(|(j, s)| pgd_single(net, &s.x, s.y, &shrunk.with_seed(element_seed(atk, j)), range))
        .collect()
}

/// `L_IBP(x + v, y, tau)` where `v` is found by PGD in `B(0, eps - tau)`.
pub fn sabr_loss(
    net: &Network,
    x: &Tensor,
    y: usize,
    eps: f64,
    tau: f64,
    atk: &AttackConfig,
    range: Option<DataRange>,
) -> Result<f64> {
    let sample = [Sample { x: x.clone(), y }];
    let v = &adversarial_offsets(net, &sample, eps, tau, atk, range)?[0];
    ibp_loss(net, &x.add(v)?, y, tau, range)
}

/// One `(input i, perturbation j)` interval-loss term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairTerm {
    pub input: usize,
    pub offset: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CitrusLoss {
    /// Plain sum over all terms.
    pub total: f64,
    pub terms: Vec<PairTerm>,
}

impl CitrusLoss {
    fn mean_where(&self, same_input: bool) -> Option<f64> {
        let vals: Vec<f64> = self
            .terms
            .iter()
            .filter(|t| (t.input == t.offset) == same_input)
            .map(|t| t.value)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Mean over cross-input terms (`i ≠ j`).
    pub fn cross_input_mean(&self) -> Option<f64> {
        self.mean_where(false)
    }

    /// Mean over same-input terms (`i = j`).
    pub fn same_input_mean(&self) -> Option<f64> {
        self.mean_where(true)
    }
}

fn pair_terms(
    net: &Network,
    batch: &[Sample],
    offsets: &[Tensor],
    tau: f64,
    include_same: bool,
    range: Option<DataRange>,
) -> Result<CitrusLoss> {
    let mut terms = Vec::new();
    for (i, s) in batch.iter().enumerate() {
        for (j, v) in offsets.iter().enumerate() {
            if i == j && !include_same {
                continue;
            }
            let value = ibp_loss(net, &s.x.add(v)?, s.y, tau, range)?;
            terms.push(PairTerm {
                input: i,
                offset: j,
                value,
            });
        }
    }
    let total = terms.iter().map(|t| t.value).sum();
    Ok(CitrusLoss { total, terms })
}

/// Cross-input loss `Σ_i Σ_{j≠i} L_IBP(x_i + v_j, y_i, tau)`, with the
/// `m(m-1)` individual terms in row-major `(i, j)` order.
pub fn citrus_loss(
    net: &Network,
    batch: &[Sample],
    eps: f64,
    tau: f64,
    atk: &AttackConfig,
    range: Option<DataRange>,
) -> Result<CitrusLoss> {
    if batch.len() < 2 {
        return Err(Error::contract(format!(
            "cross-input loss needs at least 2 inputs, got {}",
            batch.len()
        )));
    }
    let offsets = adversarial_offsets(net, batch, eps, tau, atk, range)?;
    pair_terms(net, batch, &offsets, tau, false, range)
}

/// [`citrus_loss`] plus the `m` same-input terms `j = i`.
pub fn citrus_si_loss(
    net: &Network,
    batch: &[Sample],
    eps: f64,
    tau: f64,
    atk: &AttackConfig,
    range: Option<DataRange>,
) -> Result<CitrusLoss> {
    if batch.is_empty() {
        return Err(Error::contract("loss needs a non-empty batch"));
    }
    let offsets = adversarial_offsets(net, batch, eps, tau, atk, range)?;
    pair_terms(net, batch, &offsets, tau, true, range)
}

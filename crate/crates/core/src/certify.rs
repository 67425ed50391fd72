//! Batch-wise worst-case UAP accuracy: sound lower bounds from individual
//! interval certification, attack-based upper bounds, and exact grid values
//! on oracle-sized inputs.
//!
//! An input that is individually certified at `eps` cannot be flipped by any
//! shared perturbation either, so the certified fraction of a batch lower
//! bounds its worst-case accuracy under one universal perturbation. This is
//! looser than dedicated relational UAP verifiers.

use serde::{Deserialize, Serialize};

use crate::attack::{misclassified_under, pgd_universal, AttackConfig};
use crate::data::{DataRange, Dataset, Sample};
use crate::error::{Error, Result};
use crate::interval::certify_individual;
use crate::network::Network;
use crate::oracle::{build_cp_table, OracleCaps, PerturbationGrid};

/// Label written into reports to name the metric honestly.
pub const METRIC_NAME: &str = "individual-certification lower bound";

fn non_empty(batch: &[Sample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::contract("batch must be non-empty"));
    }
    Ok(())
}

/// `(n - wrong) / n`, so equal counts give bitwise-equal fractions.
pub fn correct_fraction(n: usize, wrong: usize) -> f64 {
    (n - wrong) as f64 / n as f64
}

pub fn certified_count(
    net: &Network,
    batch: &[Sample],
    eps: f64,
    range: Option<DataRange>,
) -> Result<usize> {
    let mut n = 0;
    for s in batch {
        if certify_individual(net, &s.x, s.y, eps, range)? {
            n += 1;
        }
    }
    Ok(n)
}

pub fn certified_uap_lower_bound(
    net: &Network,
    batch: &[Sample],
    eps: f64,
    range: Option<DataRange>,
) -> Result<f64> {
    non_empty(batch)?;
    Ok(certified_count(net, batch, eps, range)? as f64 / batch.len() as f64)
}

/// Batch accuracy under the universal PGD perturbation.
pub fn attacked_uap_upper_bound(
    net: &Network,
    batch: &[Sample],
    eps: f64,
    atk: &AttackConfig,
    range: Option<DataRange>,
) -> Result<f64> {
    non_empty(batch)?;
    let u = pgd_universal(net, batch, &atk.with_eps(eps), range)?;
    let wrong = misclassified_under(net, batch, &u)?;
    Ok(correct_fraction(batch.len(), wrong))
}

/// Exact worst-case batch accuracy over a perturbation grid: `(N - κ)/N`.
pub fn exact_grid_worst_accuracy(
    net: &Network,
    batch: &[Sample],
    grid: &PerturbationGrid,
    caps: &OracleCaps,
) -> Result<f64> {
    let table = build_cp_table(net, batch, grid, caps)?;
    Ok(correct_fraction(batch.len(), table.kappa_star()))
}

/// Mean of per-batch certified lower bounds over consecutive batches of `n`;
/// a trailing short batch counts with its own size.
pub fn certified_average_uap_accuracy(
    net: &Network,
    data: &Dataset,
    eps: f64,
    n: usize,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    let chunks: Vec<&[Sample]> = data.samples().chunks(n).collect();
    let mut total = 0.0;
    for c in &chunks {
        total += certified_uap_lower_bound(net, c, eps, data.range())?;
    }
    Ok(total / chunks.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchCert {
    pub batch: usize,
    pub size: usize,
    pub certified: usize,
    pub lower: f64,
    pub upper: f64,
    pub exact: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertReport {
    pub metric: String,
    pub eps: f64,
    pub batch_size: usize,
    pub clean_acc: f64,
    pub cert_individual_acc: f64,
    /// Certified average UAP accuracy (mean of per-batch lower bounds).
    pub ucert: f64,
    /// Mean of per-batch attack upper bounds.
    pub attack_upper: f64,
    pub exact_mean: Option<f64>,
    pub batches: Vec<BatchCert>,
}

pub const CERT_CSV_HEADER: &str = "batch,size,certified,lower,upper,exact";

impl CertReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CERT_CSV_HEADER);
        out.push('\n');
        for b in &self.batches {
            let exact = b.exact.map(|e| e.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                b.batch, b.size, b.certified, b.lower, b.upper, exact
            ));
        }
        out
    }
}

/// Full evaluation of `net` on `data` in batches of `n`. With `grid`, exact
/// grid values are added per batch (only feasible for tiny input dimension).
pub fn certify_dataset(
    net: &Network,
    data: &Dataset,
    eps: f64,
    n: usize,
    atk: &AttackConfig,
    grid: Option<(&PerturbationGrid, &OracleCaps)>,
) -> Result<CertReport> {
    if n == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    let range = data.range();
    let mut batches = Vec::new();
    let mut clean = 0;
    let mut certified_total = 0;
    for (b, chunk) in data.samples().chunks(n).enumerate() {
        for s in chunk {
            if net.predict(&s.x)? == s.y {
                clean += 1;
            }
        }
        let certified = certified_count(net, chunk, eps, range)?;
        certified_total += certified;
        let batch_atk = atk.with_seed(atk.seed.wrapping_add(b as u64));
        let upper = attacked_uap_upper_bound(net, chunk, eps, &batch_atk, range)?;
        let exact = match grid {
            Some((g, caps)) => Some(exact_grid_worst_accuracy(net, chunk, g, caps)?),
            None => None,
        };
        batches.push(BatchCert {
            batch: b,
            size: chunk.len(),
            certified,
            lower: certified as f64 / chunk.len() as f64,
            upper,
            exact,
        });
    }
    let k = batches.len() as f64;
    let exact_mean = if grid.is_some() {
        Some(batches.iter().filter_map(|b| b.exact).sum::<f64>() / k)
    } else {
        None
    };
    Ok(CertReport {
        metric: METRIC_NAME.to_string(),
        eps,
        batch_size: n,
        clean_acc: clean as f64 / data.len() as f64,
        cert_individual_acc: certified_total as f64 / data.len() as f64,
        ucert: batches.iter().map(|b| b.lower).sum::<f64>() / k,
        attack_upper: batches.iter().map(|b| b.upper).sum::<f64>() / k,
        exact_mean,
        batches,
    })
}

//! Exhaustive ground truth for common-perturbation counting on a finite grid.
//!
//! Every perturbation `u` of a [`PerturbationGrid`] is applied to every
//! input, recording whether `x_i + u` is misclassified and its margin loss.
//! On this finite universe the inequalities relating the UAP objective to
//! k-common-perturbation sets are exact, so the checkers below treat any
//! violation as a bug rather than a tolerance issue.
//!
//! Terminology used throughout:
//! - `psi_hat(u)`: number of inputs `u` misclassifies.
//! - `C(k)`: grid points with `psi_hat(u) >= k` (the k-cp set).
//! - `u*`: grid point maximising the mean margin loss.
//! - `kappa_star`: `max_u psi_hat(u)`, the largest k for which a k-cp exists.
//! - `psi_at_u_star`: `psi_hat(u*)`, which indexes the head of the
//!   expectation chain.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::margin_of;
use crate::network::Network;
use crate::tensor::Tensor;

/// Odd-resolution lattice `{-eps + 2·eps·t/(R-1)}^dim`, which always contains
/// the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationGrid {
    eps: f64,
    resolution: usize,
    dim: usize,
}

impl PerturbationGrid {
    pub fn new(eps: f64, resolution: usize, dim: usize) -> Result<Self> {
        if resolution.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "grid resolution must be odd, got {resolution}"
            )));
        }
        if !(eps >= 0.0 && eps.is_finite()) || dim == 0 {
            return Err(Error::Config(format!("bad grid eps={eps} dim={dim}")));
        }
        Ok(PerturbationGrid {
            eps,
            resolution,
            dim,
        })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of grid points, saturating on overflow.
    pub fn len(&self) -> usize {
        (0..self.dim).fold(1usize, |acc, _| acc.saturating_mul(self.resolution))
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn coord(&self, t: usize) -> f64 {
        if self.resolution == 1 {
            return 0.0;
        }
        let half = (self.resolution - 1) / 2;
        // symmetric construction keeps the middle index exactly zero
        self.eps * (t as f64 - half as f64) / half as f64
    }

    /// Grid point `index`; the first coordinate varies slowest.
    pub fn point(&self, index: usize) -> Tensor {
        let mut coords = vec![0.0; self.dim];
        let mut rest = index;
        for k in (0..self.dim).rev() {
            coords[k] = self.coord(rest % self.resolution);
            rest /= self.resolution;
        }
        Tensor::vector(coords)
    }

    pub fn zero_index(&self) -> usize {
        let mid = (self.resolution - 1) / 2;
        (0..self.dim).fold(0, |acc, _| acc * self.resolution + mid)
    }
}

/// Size limits that stop accidental exhaustive blow-ups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleCaps {
    pub max_dataset: usize,
    pub max_grid_points: usize,
}

impl Default for OracleCaps {
    fn default() -> Self {
        OracleCaps {
            max_dataset: 8,
            max_grid_points: 51 * 51,
        }
    }
}

/// `true` when `x + u` is not classified as `y`.
pub fn adversarial_indicator(net: &Network, x: &Tensor, y: usize, u: &Tensor) -> Result<bool> {
    Ok(net.predict(&x.add(u)?)? != y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpTable {
    grid: PerturbationGrid,
    n: usize,
    /// Row-major `[grid point][input]`.
    mask: Vec<bool>,
    margins: Vec<f64>,
    psi_hat: Vec<usize>,
    kappa_star: usize,
    u_star: usize,
}

pub fn build_cp_table(
    net: &Network,
    samples: &[Sample],
    grid: &PerturbationGrid,
    caps: &OracleCaps,
) -> Result<CpTable> {
    if samples.is_empty() {
        return Err(Error::contract("oracle needs at least one input"));
    }
    if samples.len() > caps.max_dataset {
        return Err(Error::CapExceeded(format!(
            "{} inputs > cap {}",
            samples.len(),
            caps.max_dataset
        )));
    }
    if grid.len() > caps.max_grid_points {
        return Err(Error::CapExceeded(format!(
            "{} grid points > cap {}",
            grid.len(),
            caps.max_grid_points
        )));
    }
    if grid.dim() != net.input_dim() {
        return Err(Error::dim(format!(
            "grid dim {} vs network input {}",
            grid.dim(),
            net.input_dim()
        )));
    }
    let n = samples.len();
    let rows: Vec<Vec<(bool, f64)>> = (0..grid.len())
        .into_par_iter()
        .map(|g| {
            let u = grid.point(g);
            samples
                .iter()
                .map(|s| {
                    let logits = net.forward(&s.x.add(&u)?)?;
                    Ok((logits.argmax() != s.y, margin_of(logits.data(), s.y)?))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut mask = Vec::with_capacity(grid.len() * n);
    let mut margins = Vec::with_capacity(grid.len() * n);
    for row in rows {
        for (m, l) in row {
            mask.push(m);
            margins.push(l);
        }
    }
    let psi_hat: Vec<usize> = mask.chunks(n).map(|r| r.iter().filter(|&&b| b).count()).collect();
    let kappa_star = psi_hat.iter().copied().max().unwrap_or(0);

    let mut table = CpTable {
        grid: grid.clone(),
        n,
        mask,
        margins,
        psi_hat,
        kappa_star,
        u_star: 0,
    };
    table.u_star = u_star(&table);
    Ok(table)
}

impl CpTable {
    pub fn grid(&self) -> &PerturbationGrid {
        &self.grid
    }

    pub fn num_inputs(&self) -> usize {
        self.n
    }

    pub fn num_points(&self) -> usize {
        self.psi_hat.len()
    }

    pub fn mask(&self, u: usize, i: usize) -> bool {
        self.mask[u * self.n + i]
    }

    pub fn margin(&self, u: usize, i: usize) -> f64 {
        self.margins[u * self.n + i]
    }

    pub fn psi_hat(&self, u: usize) -> usize {
        self.psi_hat[u]
    }

    /// `Ψ(u, k)`: whether `u` is a k-common perturbation. `Ψ(u, 0)` is true.
    pub fn psi(&self, u: usize, k: usize) -> bool {
        self.psi_hat[u] >= k
    }

    pub fn kappa_star(&self) -> usize {
        self.kappa_star
    }

    pub fn u_star_index(&self) -> usize {
        self.u_star
    }

    pub fn psi_at_u_star(&self) -> usize {
        self.psi_hat[self.u_star]
    }

    /// Mean margin loss over inputs at grid point `u`, summed in input order.
    pub fn mean_margin(&self, u: usize) -> f64 {
        self.margins[u * self.n..(u + 1) * self.n].iter().sum::<f64>() / self.n as f64
    }

    /// Grid indices of the k-cp set `C(k)`.
    pub fn kcp_set(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_points()).filter(move |&u| self.psi_hat[u] >= k)
    }

    /// Grid indices where input `i` is misclassified (its adversarial set).
    pub fn adversarial_set(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_points()).filter(move |&u| self.mask(u, i))
    }
}

/// Grid point maximising the mean margin loss; ties go to the lowest index.
pub fn u_star(table: &CpTable) -> usize {
    let mut best = 0;
    let mut best_val = table.mean_margin(0);
    for u in 1..table.num_points() {
        let v = table.mean_margin(u);
        if v > best_val {
            best = u;
            best_val = v;
        }
    }
    best
}

/// `E(k) = mean_i max_{u ∈ C(k)} margin(x_i + u)`; `None` when `C(k)` is empty.
pub fn expected_kcp_loss(table: &CpTable, k: usize) -> Option<f64> {
    let mut best = vec![f64::NEG_INFINITY; table.n];
    let mut any = false;
    for u in table.kcp_set(k) {
        any = true;
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.max(table.margin(u, i));
        }
    }
    any.then(|| best.iter().sum::<f64>() / table.n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    /// `psi_hat(u*) = 0`: the chain has no links.
    pub vacuous: bool,
    pub holds: bool,
    pub psi_at_u_star: usize,
    pub kappa_star: usize,
    /// `max_u mean_i margin(x_i + u)`.
    pub lhs: f64,
    /// `E(k)` for `k = 1..=kappa_star`.
    pub chain: Vec<f64>,
}

/// Checks `max_u E[L] <= E(psi_hat(u*))` and that `E(k)` is non-increasing in
/// `k` over every non-empty `C(k)`.
pub fn check_theorem1(table: &CpTable) -> Theorem1Report {
    let lhs = table.mean_margin(table.u_star);
    let head = table.psi_at_u_star();
    let chain: Vec<f64> = (1..=table.kappa_star)
        .map(|k| expected_kcp_loss(table, k).expect("C(k) non-empty for k <= kappa*"))
        .collect();
    let monotone = chain.windows(2).all(|w| w[1] <= w[0]);
    let bounded = head == 0 || lhs <= chain[head - 1];
    Theorem1Report {
        vacuous: head == 0,
        holds: monotone && bounded,
        psi_at_u_star: head,
        kappa_star: table.kappa_star,
        lhs,
        chain,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Case {
    pub input: usize,
    /// `C(2) ∩ S(x_0)` is empty: the input is not part of any 2-cp.
    pub skipped: bool,
    /// Max margin of `x_0` over `C(2) ∩ S(x_0)`.
    pub l2cp: Option<f64>,
    /// Max margin of `x_0` over the union of the other inputs' adversarial sets.
    pub rhs: Option<f64>,
    /// The maximum over all of `C(2)` is attained inside `S(x_0)`.
    pub attained_in_adversarial_set: bool,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Report {
    pub holds: bool,
    pub cases: Vec<Theorem2Case>,
}

impl Theorem2Report {
    pub fn non_vacuous(&self) -> usize {
        self.cases.iter().filter(|c| !c.skipped).count()
    }
}

fn max_over(it: impl Iterator<Item = f64>) -> Option<f64> {
    it.fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
}

/// For every input, the 2-cp loss is bounded by the loss over the other
/// inputs' adversarial sets (cross-input set).
pub fn check_theorem2_table(table: &CpTable) -> Theorem2Report {
    let cases: Vec<Theorem2Case> = (0..table.n)
        .map(|i0| {
            let c2: Vec<usize> = table.kcp_set(2).collect();
            let l2cp = max_over(
                c2.iter()
                    .filter(|&&u| table.mask(u, i0))
                    .map(|&u| table.margin(u, i0)),
            );
            let Some(l2cp) = l2cp else {
                return Theorem2Case {
                    input: i0,
                    skipped: true,
                    l2cp: None,
                    rhs: None,
                    attained_in_adversarial_set: true,
                    holds: true,
                };
            };
            let unrestricted = max_over(c2.iter().map(|&u| table.margin(u, i0)));
            let rhs = max_over(
                (0..table.num_points())
                    .filter(|&u| (0..table.n).any(|j| j != i0 && table.mask(u, j)))
                    .map(|u| table.margin(u, i0)),
            );
            let attained = unrestricted == Some(l2cp);
            let holds = attained && rhs.is_some_and(|r| l2cp <= r);
            Theorem2Case {
                input: i0,
                skipped: false,
                l2cp: Some(l2cp),
                rhs,
                attained_in_adversarial_set: attained,
                holds,
            }
        })
        .collect();
    Theorem2Report {
        holds: cases.iter().all(|c| c.holds),
        cases,
    }
}

pub fn check_theorem2(
    net: &Network,
    batch: &[Sample],
    grid: &PerturbationGrid,
    caps: &OracleCaps,
) -> Result<Theorem2Report> {
    if batch.len() < 2 {
        return Err(Error::contract("theorem 2 needs a batch of at least 2"));
    }
    Ok(check_theorem2_table(&build_cp_table(net, batch, grid, caps)?))
}

/// Fraction of inputs whose prediction changes under `u`: `P[f(x+u) ≠ f(x)]`.
pub fn uap_threshold(net: &Network, samples: &[Sample], u: &Tensor) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("threshold needs at least one input"));
    }
    let mut changed = 0;
    for s in samples {
        if net.predict(&s.x.add(u)?)? != net.predict(&s.x)? {
            changed += 1;
        }
    }
    Ok(changed as f64 / samples.len() as f64)
}

/// Highest threshold over the grid, with the index attaining it.
pub fn gamma_star(net: &Network, samples: &[Sample], grid: &PerturbationGrid) -> Result<(f64, usize)> {
    let mut best = (f64::NEG_INFINITY, 0);
    for g in 0..grid.len() {
        let p = uap_threshold(net, samples, &grid.point(g))?;
        if p > best.0 {
            best = (p, g);
        }
    }
    Ok(best)
}

/// `kappa* / |X|` from the table's counts.
pub fn worst_case_uap_error(table: &CpTable) -> f64 {
    table.kappa_star as f64 / table.n as f64
}

/// `max_u mean_i A(x_i + u)` recomputed directly from the mask.
pub fn max_mean_misclassification(table: &CpTable) -> f64 {
    (0..table.num_points())
        .map(|u| {
            let hits: f64 = (0..table.n).map(|i| if table.mask(u, i) { 1.0 } else { 0.0 }).sum();
            hits / table.n as f64
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchTheoremReport {
    pub batch_size: usize,
    pub dataset_size: usize,
    pub z_batches: Vec<usize>,
    pub z_global: usize,
    /// `(M - Σ Z(X_i)) / M`
    pub batched_accuracy: f64,
    /// `(M - Z(X)) / M`
    pub global_accuracy: f64,
    pub holds: bool,
}

/// `Z` per consecutive batch of `n` and on the whole set, over one grid.
pub fn batch_kappa(
    net: &Network,
    samples: &[Sample],
    n: usize,
    grid: &PerturbationGrid,
    caps: &OracleCaps,
) -> Result<(Vec<usize>, usize)> {
    if n == 0 || samples.is_empty() || !samples.len().is_multiple_of(n) {
        return Err(Error::contract(format!(
            "batch size {n} must divide dataset size {}",
            samples.len()
        )));
    }
    let global = build_cp_table(net, samples, grid, caps)?.kappa_star();
    let per_batch = samples
        .chunks(n)
        .map(|c| build_cp_table(net, c, grid, caps).map(|t| t.kappa_star()))
        .collect::<Result<_>>()?;
    Ok((per_batch, global))
}

/// Batch-averaged worst-case accuracy never exceeds the whole-set value.
pub fn check_batch_theorem(
    net: &Network,
    samples: &[Sample],
    n: usize,
    grid: &PerturbationGrid,
    caps: &OracleCaps,
) -> Result<BatchTheoremReport> {
    let (z_batches, z_global) = batch_kappa(net, samples, n, grid, caps)?;
    let m = samples.len() as f64;
    let sum: usize = z_batches.iter().sum();
    Ok(BatchTheoremReport {
        batch_size: n,
        dataset_size: samples.len(),
        batched_accuracy: (samples.len() - sum) as f64 / m,
        global_accuracy: (samples.len() - z_global) as f64 / m,
        holds: sum >= z_global,
        z_batches,
        z_global,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Layer;

    /// logits = [0, x0 - t]: class 1 iff x0 > t (ties to class 0).
    fn threshold_net(t: f64) -> Network {
        let w = Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        Network::new(vec![Layer::affine(w, Tensor::vector(vec![0.0, -t])).unwrap()]).unwrap()
    }

    #[test]
    fn grid_contains_origin_and_stays_in_ball() {
        let g = PerturbationGrid::new(0.3, 5, 2).unwrap();
        assert_eq!(g.len(), 25);
        assert_eq!(g.point(g.zero_index()).data(), &[0.0, 0.0]);
        assert_eq!(g.point(0).data(), &[-0.3, -0.3]);
        assert_eq!(g.point(24).data(), &[0.3, 0.3]);
        for i in 0..g.len() {
            assert!(g.point(i).max_abs() <= 0.3);
        }
        assert!(PerturbationGrid::new(0.3, 4, 2).is_err());
    }

    #[test]
    fn caps_refuse_blowups() {
        let net = threshold_net(0.0);
        let s = vec![Sample::new(vec![0.0, 0.0], 0); 9];
        let g = PerturbationGrid::new(0.1, 3, 2).unwrap();
        assert!(matches!(
            build_cp_table(&net, &s, &g, &OracleCaps::default()),
            Err(Error::CapExceeded(_))
        ));
        let big = PerturbationGrid::new(0.1, 53, 2).unwrap();
        assert!(build_cp_table(&net, &s[..2], &big, &OracleCaps::default()).is_err());
    }

    #[test]
    fn safe_network_has_no_common_perturbations() {
        let net = threshold_net(10.0);
        let s = vec![Sample::new(vec![0.0, 0.0], 0), Sample::new(vec![0.5, 0.0], 0)];
        let g = PerturbationGrid::new(0.5, 11, 2).unwrap();
        let t = build_cp_table(&net, &s, &g, &OracleCaps::default()).unwrap();
        assert_eq!(t.kappa_star(), 0);
        assert_eq!(t.kcp_set(1).count(), 0);
        assert_eq!(expected_kcp_loss(&t, 1), None);
        assert!(t.mean_margin(t.u_star_index()) <= 0.0);
        assert_eq!(worst_case_uap_error(&t), 0.0);
        let r = check_theorem1(&t);
        assert!(r.vacuous && r.holds);
        let (gamma, _) = gamma_star(&net, &s, &g).unwrap();
        assert_eq!(gamma, 0.0);
    }

    #[test]
    fn half_plane_mask_matches_geometry() {
        let t0 = 0.2;
        let net = threshold_net(t0);
        let s = vec![Sample::new(vec![0.0, 0.0], 0), Sample::new(vec![0.1, 0.3], 0)];
        let g = PerturbationGrid::new(0.5, 21, 2).unwrap();
        let t = build_cp_table(&net, &s, &g, &OracleCaps::default()).unwrap();
        for u in 0..g.len() {
            let p = g.point(u);
            for (i, smp) in s.iter().enumerate() {
                let adversarial = smp.x.data()[0] + p.data()[0] > t0;
                assert_eq!(t.mask(u, i), adversarial);
                assert_eq!(t.mask(u, i), adversarial_indicator(&net, &smp.x, 0, &p).unwrap());
            }
        }
        assert_eq!(t.kappa_star(), 2);
        assert_eq!(worst_case_uap_error(&t), max_mean_misclassification(&t));
    }

    #[test]
    fn single_input_u_star_is_its_worst_point() {
        let net = threshold_net(0.2);
        let s = vec![Sample::new(vec![0.1, 0.0], 0)];
        let g = PerturbationGrid::new(0.3, 7, 2).unwrap();
        let t = build_cp_table(&net, &s, &g, &OracleCaps::default()).unwrap();
        assert!(t.kappa_star() <= 1);
        let worst = (0..g.len()).map(|u| t.margin(u, 0)).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(t.margin(t.u_star_index(), 0), worst);
        assert!(t.psi_at_u_star() <= t.kappa_star());
    }

    #[test]
    fn identical_inputs_make_theorem2_tight() {
        let net = threshold_net(0.2);
        let s = vec![Sample::new(vec![0.1, 0.0], 0), Sample::new(vec![0.1, 0.0], 0)];
        let g = PerturbationGrid::new(0.3, 13, 2).unwrap();
        let r = check_theorem2(&net, &s, &g, &OracleCaps::default()).unwrap();
        assert!(r.holds);
        for c in &r.cases {
            assert!(!c.skipped);
            assert_eq!(c.l2cp, c.rhs);
        }
    }

    #[test]
    fn no_two_cp_means_vacuous_theorem2() {
        // inputs far apart: no shared u flips both
        let net = threshold_net(0.0);
        let s = vec![Sample::new(vec![-0.1, 0.0], 0), Sample::new(vec![-5.0, 0.0], 0)];
        let g = PerturbationGrid::new(0.3, 13, 2).unwrap();
        let r = check_theorem2(&net, &s, &g, &OracleCaps::default()).unwrap();
        assert!(r.holds);
        assert_eq!(r.non_vacuous(), 0);
    }

    #[test]
    fn batch_theorem_strict_fixture() {
        // Inputs 0,2 flip for u0 > 0.2, inputs 1,3 for u0 < -0.2. No single
        // u flips both members of a mixed pair, but one u flips 0 and 2.
        let net = threshold_net(0.0);
        let s = vec![
            Sample::new(vec![-0.2, 0.0], 0),
            Sample::new(vec![0.2, 0.0], 1),
            Sample::new(vec![-0.2, 0.0], 0),
            Sample::new(vec![0.2, 0.0], 1),
        ];
        let g = PerturbationGrid::new(0.3, 13, 2).unwrap();
        let caps = OracleCaps::default();
        let r = check_batch_theorem(&net, &s, 2, &g, &caps).unwrap();
        assert_eq!(r.z_batches, vec![1, 1]);
        assert_eq!(r.z_global, 2);
        assert!(r.holds);
        let s2 = vec![s[0].clone(), s[2].clone(), s[1].clone(), s[3].clone()];
        let r2 = check_batch_theorem(&net, &s2, 1, &g, &caps).unwrap();
        assert_eq!(r2.z_batches, vec![1, 1, 1, 1]);
        assert!(r2.batched_accuracy < r2.global_accuracy);
        let whole = check_batch_theorem(&net, &s, 4, &g, &caps).unwrap();
        assert_eq!(whole.batched_accuracy, whole.global_accuracy);
        assert!(check_batch_theorem(&net, &s, 3, &g, &caps).is_err());
    }

    #[test]
    fn threshold_zero_perturbation() {
        let net = threshold_net(0.0);
        let s = vec![Sample::new(vec![0.5, 0.0], 1)];
        assert_eq!(uap_threshold(&net, &s, &Tensor::vector(vec![0.0, 0.0])).unwrap(), 0.0);
        assert_eq!(uap_threshold(&net, &s, &Tensor::vector(vec![-1.0, 0.0])).unwrap(), 1.0);
    }
}

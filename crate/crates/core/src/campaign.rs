//! Randomised fuzz campaign over tiny 2D instances. Every check here is an
//! exact inequality on the grid universe, so any violation is a bug.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::certify::{attacked_uap_upper_bound, certified_uap_lower_bound, correct_fraction};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::interval::certify_individual;
use crate::network::{init_weights, Arch, Network};
use crate::oracle::{
    build_cp_table, check_batch_theorem, check_theorem1, check_theorem2_table, gamma_star,
    max_mean_misclassification, worst_case_uap_error, CpTable, OracleCaps, PerturbationGrid,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub instances: usize,
    pub seed: u64,
    pub grid_resolution: usize,
    pub inputs: usize,
    /// Inputs per Theorem 2 / sandwich batch; a prefix of the instance.
    pub batch: usize,
    pub partitions: Vec<usize>,
    pub eps_min: f64,
    pub eps_max: f64,
    pub hidden: Vec<usize>,
    pub caps: OracleCaps,
    /// Attempts per instance at drawing one with a non-empty 1-cp set.
    pub redraws: usize,
    pub attack: AttackConfig,
    /// Probability of replacing a label with a uniformly drawn class.
    pub label_noise: f64,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            instances: 20,
            seed: 0,
            grid_resolution: 41,
            inputs: 6,
            batch: 5,
            partitions: vec![1, 2, 3],
            eps_min: 0.1,
            eps_max: 0.6,
            hidden: vec![4, 8, 12],
            caps: OracleCaps::default(),
            redraws: 20,
            attack: AttackConfig::evaluation(),
            label_noise: 0.0,
        }
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inputs == 0 || self.batch == 0 || self.batch > self.inputs {
            return Err(Error::Config(format!(
                "need 0 < batch ({}) <= inputs ({})",
                self.batch, self.inputs
            )));
        }
        if !(self.eps_min > 0.0 && self.eps_min <= self.eps_max) {
            return Err(Error::Config("need 0 < eps_min <= eps_max".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config("label_noise must lie in [0, 1]".into()));
        }
        self.attack.validate()
    }
}

/// One drawn instance: network, inputs labelled by its own predictions
/// (up to label noise), and a radius.
#[derive(Debug, Clone)]
pub struct Instance {
    pub net: Network,
    pub samples: Vec<Sample>,
    pub eps: f64,
}

pub fn random_instance(cfg: &CampaignConfig, seed: u64) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = cfg.hidden[rng.random_range(0..cfg.hidden.len())];
    let depth = rng.random_range(1..=2);
    let classes = rng.random_range(2..=3);
    let mut sizes = vec![2];
    sizes.extend(std::iter::repeat_n(width, depth));
    sizes.push(classes);
    let net = init_weights(&Arch(sizes), rng.random())?;
    let samples = (0..cfg.inputs)
        .map(|_| {
            let x = Tensor::vector(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            let mut y = net.predict(&x)?;
            if rng.random_bool(cfg.label_noise) {
                y = rng.random_range(0..classes);
            }
            Ok(Sample { x, y })
        })
        .collect::<Result<_>>()?;
    let eps = rng.random_range(cfg.eps_min..=cfg.eps_max);
    Ok(Instance { net, samples, eps })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckTally {
    pub checked: usize,
    pub vacuous: usize,
    pub violations: usize,
}

impl CheckTally {
    fn record(&mut self, vacuous: bool, holds: bool) {
        self.checked += 1;
        if vacuous {
            self.vacuous += 1;
        }
        if !holds {
            self.violations += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub seed: u64,
    pub eps: f64,
    pub kappa_star: usize,
    pub psi_at_u_star: usize,
    /// `E(k)` for `k = 1..=kappa_star`.
    pub chain: Vec<f64>,
    pub lhs: f64,
    /// Worst-case error against labels, `kappa*/|X|`.
    pub worst_case_error: f64,
    /// Highest prediction-flip rate over the grid.
    pub gamma_star: f64,
    pub z_batches: Vec<(usize, Vec<usize>)>,
    pub z_global: usize,
    pub sandwich: (f64, f64, f64),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub theorem1: CheckTally,
    pub theorem2: CheckTally,
    pub batch_theorem: CheckTally,
    pub single_batch_equality: CheckTally,
    pub worst_case_identity: CheckTally,
    pub sandwich: CheckTally,
    pub nesting: CheckTally,
    pub u_star_membership: CheckTally,
    pub certification_consistency: CheckTally,
    pub instances: Vec<InstanceSummary>,
}

impl CampaignReport {
    pub fn tallies(&self) -> [(&'static str, &CheckTally); 9] {
        [
            ("theorem1", &self.theorem1),
            ("theorem2", &self.theorem2),
            ("batch_theorem", &self.batch_theorem),
            ("single_batch_equality", &self.single_batch_equality),
            ("worst_case_identity", &self.worst_case_identity),
            ("sandwich", &self.sandwich),
            ("nesting", &self.nesting),
            ("u_star_membership", &self.u_star_membership),
            ("certification_consistency", &self.certification_consistency),
        ]
    }

    pub fn violations(&self) -> usize {
        self.tallies().iter().map(|(_, t)| t.violations).sum()
    }
}

fn nesting_holds(table: &CpTable) -> bool {
    (1..=table.num_inputs()).all(|k| table.kcp_set(k + 1).all(|u| table.psi(u, k)))
}

fn draw(cfg: &CampaignConfig, index: usize) -> Result<(u64, Instance, PerturbationGrid, CpTable)> {
    let base = cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(index as u64 * 1000);
    let mut last = None;
    for attempt in 0..cfg.redraws.max(1) {
        let seed = base + attempt as u64;
        let inst = random_instance(cfg, seed)?;
        let grid = PerturbationGrid::new(inst.eps, cfg.grid_resolution, 2)?;
        let table = build_cp_table(&inst.net, &inst.samples, &grid, &cfg.caps)?;
        let hit = table.kappa_star() >= 1;
        last = Some((seed, inst, grid, table));
        if hit {
            break;
        }
    }
    Ok(last.expect("at least one draw"))
}

pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignReport> {
    cfg.validate()?;
    let mut report = CampaignReport::default();
    for index in 0..cfg.instances {
        let (seed, inst, grid, table) = draw(cfg, index)?;
        let net = &inst.net;

        let t1 = check_theorem1(&table);
        report.theorem1.record(t1.vacuous, t1.holds);

        let batch = &inst.samples[..cfg.batch];
        let batch_table = build_cp_table(net, batch, &grid, &cfg.caps)?;
        if cfg.batch >= 2 {
            let t2 = check_theorem2_table(&batch_table);
            for case in &t2.cases {
                report.theorem2.record(case.skipped, case.holds);
            }
        }

        let mut z_batches = Vec::new();
        let mut z_global = 0;
        for &n in &cfg.partitions {
            if n == 0 || inst.samples.len() % n != 0 {
                continue;
            }
            let r = check_batch_theorem(net, &inst.samples, n, &grid, &cfg.caps)?;
            report.batch_theorem.record(false, r.holds);
            z_global = r.z_global;
            z_batches.push((n, r.z_batches));
        }
        let whole = check_batch_theorem(net, &inst.samples, inst.samples.len(), &grid, &cfg.caps)?;
        report
            .single_batch_equality
            .record(false, whole.batched_accuracy == whole.global_accuracy);

        let wce = worst_case_uap_error(&table);
        report
            .worst_case_identity
            .record(false, wce == max_mean_misclassification(&table));

        let lower = certified_uap_lower_bound(net, batch, inst.eps, None)?;
        let exact = correct_fraction(batch.len(), batch_table.kappa_star());
        let atk = cfg.attack.with_seed(seed);
        let upper = attacked_uap_upper_bound(net, batch, inst.eps, &atk, None)?;
        report
            .sandwich
            .record(false, lower <= exact && exact <= upper);

        report.nesting.record(false, nesting_holds(&table));
        let positive = table.mean_margin(table.u_star_index()) > 0.0;
        report
            .u_star_membership
            .record(!positive, !positive || table.psi_at_u_star() >= 1);

        for (i, s) in inst.samples.iter().enumerate() {
            if certify_individual(net, &s.x, s.y, inst.eps, None)? {
                report
                    .certification_consistency
                    .record(false, table.adversarial_set(i).next().is_none());
            }
        }

        let (gamma, _) = gamma_star(net, &inst.samples, &grid)?;
        report.instances.push(InstanceSummary {
            seed,
            eps: inst.eps,
            kappa_star: table.kappa_star(),
            psi_at_u_star: t1.psi_at_u_star,
            chain: t1.chain,
            lhs: t1.lhs,
            worst_case_error: wce,
            gamma_star: gamma,
            z_batches,
            z_global,
            sandwich: (lower, exact, upper),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_campaign_is_clean() {
        let cfg = CampaignConfig {
            instances: 3,
            grid_resolution: 21,
            ..Default::default()
        };
        let r = run_campaign(&cfg).unwrap();
        assert_eq!(r.instances.len(), 3);
        assert_eq!(r.violations(), 0, "{r:#?}");
        for s in &r.instances {
            // labels are the clean predictions, so flip rate and error agree
            assert_eq!(s.gamma_star, s.worst_case_error);
        }
    }

    #[test]
    fn instances_are_seeded() {
        let cfg = CampaignConfig::default();
        let a = random_instance(&cfg, 7).unwrap();
        let b = random_instance(&cfg, 7).unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.eps, b.eps);
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = CampaignConfig {
            batch: 9,
            ..Default::default()
        };
        assert!(run_campaign(&cfg).is_err());
    }

    #[test]
    fn label_noise_keeps_checks_exact() {
        let cfg = CampaignConfig {
            instances: 4,
            grid_resolution: 21,
            label_noise: 0.5,
            ..Default::default()
        };
        let r = run_campaign(&cfg).unwrap();
        assert_eq!(r.violations(), 0, "{r:#?}");
    }
}

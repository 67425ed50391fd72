//! Mini-batch training loop with epsilon ramping and per-epoch evaluation.
//!
//! For the cross-input objective each step first attacks every batch element
//! inside `B(0, eps - tau)`, then sums the interval losses of input `i` boxed
//! at `x_i + v_j` for all `j ≠ i`, and takes one optimizer step on the
//! normalised sum.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::certify::certify_dataset;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::CompGraph;
use crate::network::{init_weights, Arch, Network};
use crate::objective::{LossKind, Objective, ObjectiveRegistry, StepContext};
use crate::optim::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eps_target: f64,
    /// `tau = tau_ratio * eps` at every step.
    pub tau_ratio: f64,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub ramp_epochs: usize,
    pub seed: u64,
    pub loss_kind: LossKind,
    /// Attack used to pick box centres (or the universal perturbation).
    pub attack: AttackConfig,
    pub grad_clip: f64,
    /// L1 penalty on interval widths; 0 keeps the loss unmodified.
    pub width_penalty: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 5,
            eps_target: 0.1,
            tau_ratio: 0.5,
            lr: 5e-3,
            warmup_epochs: 5,
            ramp_epochs: 20,
            seed: 0,
            loss_kind: LossKind::Citrus,
            attack: AttackConfig::default(),
            grad_clip: 10.0,
            width_penalty: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, objective: &dyn Objective) -> Result<()> {
        if self.batch_size < objective.min_batch() {
            return Err(Error::Config(format!(
                "`{}` needs batch_size >= {}, got {}",
                objective.name(),
                objective.min_batch(),
                self.batch_size
            )));
        }
        if !(self.tau_ratio > 0.0 && self.tau_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "tau_ratio must lie in (0, 1], got {}",
                self.tau_ratio
            )));
        }
        if !(self.eps_target >= 0.0 && self.eps_target.is_finite()) {
            return Err(Error::Config("eps_target must be non-negative".into()));
        }
        if !(self.lr > 0.0 && self.grad_clip > 0.0 && self.width_penalty >= 0.0) {
            return Err(Error::Config(
                "lr and grad_clip must be positive, width_penalty non-negative".into(),
            ));
        }
        self.attack.validate()
    }
}

/// `(eps, tau)` for an epoch: zero during warm-up, then a linear ramp to
/// `eps_target` over `ramp_epochs`, then constant.
pub fn eps_schedule(epoch: usize, cfg: &TrainConfig) -> (f64, f64) {
    let eps = if epoch < cfg.warmup_epochs {
        0.0
    } else if cfg.ramp_epochs == 0 {
        cfg.eps_target
    } else {
        let t = (epoch - cfg.warmup_epochs) as f64 / cfg.ramp_epochs as f64;
        cfg.eps_target * t.min(1.0)
    };
    (eps, cfg.tau_ratio * eps)
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub loss: f64,
    pub clean_acc: f64,
    pub attack_acc: f64,
    pub cert_ind_acc: f64,
    pub ucert_lb: f64,
    pub ci_loss_mean: Option<f64>,
    pub si_loss_mean: Option<f64>,
    pub wall_s: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,loss,clean_acc,attack_acc,cert_ind_acc,ucert_lb,ci_loss_mean,si_loss_mean,wall_s";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.loss,
            self.clean_acc,
            self.attack_acc,
            self.cert_ind_acc,
            self.ucert_lb,
            opt(self.ci_loss_mean),
            opt(self.si_loss_mean),
            self.wall_s
        )
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Where and how per-epoch metrics are measured.
#[derive(Debug, Clone)]
pub struct Evaluation<'a> {
    pub data: &'a Dataset,
    pub eps: f64,
    pub batch_size: usize,
    pub attack: AttackConfig,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub metrics: Vec<MetricsRecord>,
    /// Differentiable loss terms built per optimizer step, in step order.
    pub terms_per_step: Vec<usize>,
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over a simple combination
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains a freshly initialised network with a built-in objective.
pub fn train(
    cfg: &TrainConfig,
    arch: &Arch,
    data: &Dataset,
    eval: Option<&Evaluation>,
) -> Result<TrainOutcome> {
    let objective = ObjectiveRegistry::with_builtins().get(cfg.loss_kind.name())?;
    let net = init_weights(arch, cfg.seed)?;
    train_network(objective.as_ref(), cfg, net, data, eval)
}

pub fn train_network(
    objective: &dyn Objective,
    cfg: &TrainConfig,
    mut net: Network,
    data: &Dataset,
    eval: Option<&Evaluation>,
) -> Result<TrainOutcome> {
    cfg.validate(objective)?;
    if data.dim() != net.input_dim() {
        return Err(Error::dim(format!(
            "dataset has {} features, network expects {}",
            data.dim(),
            net.input_dim()
        )));
    }
    let default_eval;
    let eval = match eval {
        Some(e) => e,
        None => {
            default_eval = Evaluation {
                data,
                eps: cfg.eps_target,
                batch_size: cfg.batch_size,
                attack: AttackConfig::evaluation().with_seed(cfg.seed),
            };
            &default_eval
        }
    };

    let drop_short = objective.min_batch() > 1;
    let mut opt = Adam::new(cfg.lr, cfg.grad_clip);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut terms_per_step = Vec::new();
    let start = Instant::now();

    for epoch in 0..cfg.epochs {
        let (eps, tau) = eps_schedule(epoch, cfg);
        let shuffled = data.shuffled(mix_seed(cfg.seed, epoch as u64, 0));
        let mut losses = Vec::new();
        let (mut ci, mut si) = (Vec::new(), Vec::new());

        for (b, batch) in shuffled.samples().chunks(cfg.batch_size).enumerate() {
            if batch.len() < objective.min_batch() || (drop_short && batch.len() < cfg.batch_size) {
                continue;
            }
            let ctx = StepContext {
                eps,
                tau,
                attack: cfg
                    .attack
                    .with_seed(mix_seed(cfg.seed ^ cfg.attack.seed, epoch as u64, b as u64 + 1)),
                range: data.range(),
                width_penalty: cfg.width_penalty,
            };
            let mut graph = CompGraph::new();
            let bound = net.bind(&mut graph);
            let out = objective.batch_loss(&net, &mut graph, &bound, batch, &ctx)?;
            let value = graph.value(out.loss).item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    detail: format!("`{}` loss = {value} (eps={eps}, tau={tau})", objective.name()),
                });
            }
            let grads = graph.backward(out.loss)?.params(&graph);
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    detail: "non-finite gradient".into(),
                });
            }
            opt.step(&mut net.params_mut(), &grads);
            losses.push(value);
            terms_per_step.push(out.terms);
            ci.extend(out.ci_mean);
            si.extend(out.si_mean);
        }

        let report = certify_dataset(
            &net,
            eval.data,
            eval.eps,
            eval.batch_size,
            &eval.attack,
            None,
        )?;
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        metrics.push(MetricsRecord {
            epoch,
            loss: mean(&losses).unwrap_or(0.0),
            clean_acc: report.clean_acc,
            attack_acc: report.attack_upper,
            cert_ind_acc: report.cert_individual_acc,
            ucert_lb: report.ucert,
            ci_loss_mean: mean(&ci),
            si_loss_mean: mean(&si),
            wall_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutcome {
        network: net,
        metrics,
        terms_per_step,
    })
}

//! L∞ projected-gradient attacks on cross-entropy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataRange, Sample};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub steps: usize,
    /// Step size as a multiple of `eps / steps`.
    pub step_scale: f64,
    /// Ball radius. Training overwrites it with the scheduled value.
    pub eps: f64,
    pub random_init: bool,
    /// Independent runs; the highest-loss result wins. Zero behaves like one.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            steps: 20,
            step_scale: 2.0,
            eps: 0.0,
            random_init: true,
            restarts: 1,
            seed: 0,
        }
    }
}

impl AttackConfig {
    /// Evaluation-time defaults: five restarts for tighter bounds.
    pub fn evaluation() -> Self {
        AttackConfig {
            restarts: 5,
            ..Self::default()
        }
    }

    pub fn with_eps(&self, eps: f64) -> Self {
        AttackConfig { eps, ..self.clone() }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        AttackConfig { seed, ..self.clone() }
    }

    pub fn step_size(&self) -> f64 {
        self.step_scale * self.eps / self.steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("attack steps must be >= 1".into()));
        }
        if !(self.step_scale > 0.0 && self.step_scale.is_finite()) {
            return Err(Error::Config("attack step size must be positive".into()));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::Config("attack eps must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-coordinate feasible interval for a perturbation shared by `inputs`.
fn feasible_bounds(inputs: &[&[f64]], eps: f64, range: Option<DataRange>) -> Vec<(f64, f64)> {
    let dim = inputs[0].len();
    (0..dim)
        .map(|k| {
            let (mut lo, mut hi) = (-eps, eps);
            if let Some(r) = range {
                for x in inputs {
                    lo = lo.max(r.lo - x[k]);
                    hi = hi.min(r.hi - x[k]);
                }
                if lo > hi {
                    // an input already lies outside the range; only u = 0 is safe to keep
                    return (0.0, 0.0);
                }
            }
            (lo, hi)
        })
        .collect()
}

fn project(v: &mut [f64], bounds: &[(f64, f64)]) {
    for (vk, &(lo, hi)) in v.iter_mut().zip(bounds) {
        *vk = vk.clamp(lo, hi);
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean cross-entropy of `x_i + u` over the batch and its gradient in `u`.
fn batch_ce(net: &Network, batch: &[Sample], u: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mut total = 0.0;
    let mut grad = vec![0.0; u.len()];
    let mut shifted = vec![0.0; u.len()];
    for s in batch {
        for ((dst, x), d) in shifted.iter_mut().zip(s.x.data()).zip(u) {
            *dst = x + d;
        }
        let (l, g) = net.ce_input_gradient(&shifted, s.y)?;
        total += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((total / n, grad))
}

/// Signed-gradient ascent on the batch-mean cross-entropy of a shared
/// perturbation; returns the best iterate over all restarts and its loss.
fn ascend(net: &Network, batch: &[Sample], cfg: &AttackConfig, range: Option<DataRange>) -> Result<(Vec<f64>, f64)> {
    cfg.validate()?;
    let dim = net.input_dim();
    if cfg.eps == 0.0 {
        let (loss, _) = batch_ce(net, batch, &vec![0.0; dim])?;
        return Ok((vec![0.0; dim], loss));
    }
    let inputs: Vec<&[f64]> = batch.iter().map(|s| s.x.data()).collect();
    let bounds = feasible_bounds(&inputs, cfg.eps, range);
    let alpha = cfg.step_size();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut best: Option<(Vec<f64>, f64)> = None;
    let consider = |v: &[f64], loss: f64, best: &mut Option<(Vec<f64>, f64)>| {
        if best.as_ref().is_none_or(|(_, b)| loss > *b) {
            *best = Some((v.to_vec(), loss));
        }
    };
    for _ in 0..cfg.restarts.max(1) {
        let mut v: Vec<f64> = if cfg.random_init {
            (0..dim).map(|_| rng.random_range(-cfg.eps..=cfg.eps)).collect()
        } else {
            vec![0.0; dim]
        };
        project(&mut v, &bounds);
        for _ in 0..cfg.steps {
            let (loss, grad) = batch_ce(net, batch, &v)?;
            consider(&v, loss, &mut best);
            for (vk, g) in v.iter_mut().zip(&grad) {
                *vk += alpha * sign(*g);
            }
            project(&mut v, &bounds);
        }
        let (loss, _) = batch_ce(net, batch, &v)?;
        consider(&v, loss, &mut best);
    }
    Ok(best.expect("at least one evaluation"))
}

/// Single-input PGD: a perturbation `v` with `‖v‖∞ ≤ eps` that (heuristically)
/// maximises the cross-entropy of `f(x + v)` against `y`.
pub fn pgd_single(
    net: &Network,
    x: &Tensor,
    y: usize,
    cfg: &AttackConfig,
    range: Option<DataRange>,
) -> Result<Tensor> {
    let batch = [Sample { x: x.clone(), y }];
    Ok(Tensor::vector(ascend(net, &batch, cfg, range)?.0))
}

/// Universal PGD: one perturbation shared across the batch, ascending the
/// batch-mean cross-entropy.
pub fn pgd_universal(
    net: &Network,
    batch: &[Sample],
    cfg: &AttackConfig,
    range: Option<DataRange>,
) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::contract("universal attack needs a non-empty batch"));
    }
    Ok(Tensor::vector(ascend(net, batch, cfg, range)?.0))
}

/// Number of batch inputs whose prediction differs from the label under `u`.
pub fn misclassified_under(net: &Network, batch: &[Sample], u: &Tensor) -> Result<usize> {
    let mut count = 0;
    for s in batch {
        if net.predict(&s.x.add(u)?)? != s.y {
            count += 1;
        }
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_weights, Arch, Layer};

    fn linear_net() -> Network {
        // logits = [w0·x, w1·x]; w1 - w0 = [2, -1]
        let w = Tensor::matrix(2, 2, vec![0.5, 0.5, 2.5, -0.5]).unwrap();
        Network::new(vec![Layer::affine(w, Tensor::zeros(&[2])).unwrap()]).unwrap()
    }

    #[test]
    fn linear_model_closed_form() {
        let net = linear_net();
        let x = Tensor::vector(vec![1.0, 0.0]);
        let cfg = AttackConfig {
            eps: 0.25,
            ..Default::default()
        };
        let v = pgd_single(&net, &x, 1, &cfg, None).unwrap();
        // pushes the label-1 margin down: v = -eps * sign(w_1 - w_0)
        assert_eq!(v.data(), &[-0.25, 0.25]);
        let v0 = pgd_single(&net, &x, 0, &cfg, None).unwrap();
        assert_eq!(v0.data(), &[0.25, -0.25]);
    }

    #[test]
    fn zero_eps_returns_zero() {
        let net = init_weights(&Arch(vec![2, 8, 2]), 1).unwrap();
        let x = Tensor::vector(vec![0.1, 0.2]);
        let cfg = AttackConfig::default();
        assert_eq!(pgd_single(&net, &x, 0, &cfg, None).unwrap().data(), &[0.0, 0.0]);
        let batch = [Sample { x, y: 1 }];
        assert_eq!(pgd_universal(&net, &batch, &cfg, None).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let net = init_weights(&Arch(vec![2, 4, 2]), 1).unwrap();
        assert!(pgd_universal(&net, &[], &AttackConfig::default(), None).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let net = init_weights(&Arch(vec![2, 4, 2]), 1).unwrap();
        let x = Tensor::vector(vec![0.0, 0.0]);
        let bad = AttackConfig {
            steps: 0,
            eps: 0.1,
            ..Default::default()
        };
        assert!(pgd_single(&net, &x, 0, &bad, None).is_err());
    }

    #[test]
    fn range_is_respected() {
        let net = init_weights(&Arch(vec![2, 8, 2]), 3).unwrap();
        let x = Tensor::vector(vec![0.02, 0.97]);
        let cfg = AttackConfig {
            eps: 0.1,
            restarts: 3,
            ..Default::default()
        };
        for y in 0..2 {
            let v = pgd_single(&net, &x, y, &cfg, Some(DataRange::UNIT)).unwrap();
            assert!(v.max_abs() <= 0.1);
            for (a, b) in x.data().iter().zip(v.data()) {
                assert!((-1e-12..=1.0 + 1e-12).contains(&(a + b)));
            }
        }
    }
}

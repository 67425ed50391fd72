//! Training objectives behind a common trait, selectable by name.
//!
//! Each [`Objective`] turns one batch into a differentiable scalar on a
//! [`CompGraph`]. Attack points are computed on the plain network first and
//! enter the graph as constants, so gradients never flow through PGD.
//!
//! ```
//! use citrus_core::objective::ObjectiveRegistry;
//!
//! let registry = ObjectiveRegistry::with_builtins();
//! let citrus = registry.get("citrus").unwrap();
//! assert_eq!(citrus.min_batch(), 2);
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attack::{pgd_universal, AttackConfig};
use crate::data::{DataRange, Sample};
use crate::error::{Error, Result};
use crate::graph::{CompGraph, NodeId};
use crate::interval::{ibp_loss, ibp_term};
use crate::losses::{adversarial_offsets, check_radii};
use crate::network::{BoundNetwork, Network};
use crate::tensor::Tensor;

/// The built-in objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "clean")]
    Clean,
    #[serde(rename = "ibp")]
    Ibp,
    #[serde(rename = "sabr")]
    Sabr,
    #[serde(rename = "citrus")]
    Citrus,
    #[serde(rename = "citrus-si")]
    CitrusSi,
    #[serde(rename = "adv-universal")]
    AdvUniversal,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Clean,
        LossKind::Ibp,
        LossKind::Sabr,
        LossKind::Citrus,
        LossKind::CitrusSi,
        LossKind::AdvUniversal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Clean => "clean",
            LossKind::Ibp => "ibp",
            LossKind::Sabr => "sabr",
            LossKind::Citrus => "citrus",
            LossKind::CitrusSi => "citrus-si",
            LossKind::AdvUniversal => "adv-universal",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownObjective(s.to_string()))
    }
}

/// Per-step radii and attack settings handed to an objective.
#[derive(Debug, Clone)]
pub struct StepContext {
    pub eps: f64,
    pub tau: f64,
    /// Attack template; its `eps` is replaced by whatever radius the
    /// objective searches.
    pub attack: AttackConfig,
    pub range: Option<DataRange>,
    /// Weight of the optional L1 penalty on penultimate interval radii.
    pub width_penalty: f64,
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    /// Normalised scalar to differentiate.
    pub loss: NodeId,
    /// Un-normalised sum of all terms.
    pub total: f64,
    /// Number of differentiable loss terms built for this batch.
    pub terms: usize,
    /// Mean of cross-input interval terms, when the objective has them.
    pub ci_mean: Option<f64>,
    /// Mean of same-input interval terms (computed as a diagnostic for the
    /// cross-input objective).
    pub si_mean: Option<f64>,
}

pub trait Objective: Send + Sync {
    fn name(&self) -> &str;

    /// Smallest batch the objective accepts.
    fn min_batch(&self) -> usize {
        1
    }

    fn batch_loss(
        &self,
        net: &Network,
        graph: &mut CompGraph,
        bound: &BoundNetwork,
        batch: &[Sample],
        ctx: &StepContext,
    ) -> Result<BatchLoss>;
}

fn check_batch(obj: &dyn Objective, batch: &[Sample]) -> Result<()> {
    if batch.len() < obj.min_batch() {
        return Err(Error::contract(format!(
            "`{}` needs batches of at least {}, got {}",
            obj.name(),
            obj.min_batch(),
            batch.len()
        )));
    }
    Ok(())
}

fn mean_node(graph: &mut CompGraph, terms: &[NodeId]) -> Result<(NodeId, f64)> {
    let sum = graph.sum_scalars(terms)?;
    let total = graph.value(sum).item()?;
    Ok((graph.scale(sum, 1.0 / terms.len() as f64), total))
}

/// Accumulates interval terms together with the optional width penalty.
struct IntervalTerms<'a> {
    ctx: &'a StepContext,
    losses: Vec<NodeId>,
    widths: Vec<NodeId>,
}

impl<'a> IntervalTerms<'a> {
    fn new(ctx: &'a StepContext) -> Self {
        IntervalTerms {
            ctx,
            losses: Vec::new(),
            widths: Vec::new(),
        }
    }

    fn push(
        &mut self,
        graph: &mut CompGraph,
        bound: &BoundNetwork,
        center: &Tensor,
        y: usize,
        radius: f64,
    ) -> Result<f64> {
        let term = ibp_term(graph, bound, center, y, radius, self.ctx.range)?;
        self.losses.push(term.loss);
        if self.ctx.width_penalty > 0.0 {
            self.widths.push(graph.sum_elems(term.radius));
        }
        graph.value(term.loss).item()
    }

    fn finish(self, graph: &mut CompGraph) -> Result<(NodeId, f64, usize)> {
        let (mut loss, total) = mean_node(graph, &self.losses)?;
        if !self.widths.is_empty() {
            let (w, _) = mean_node(graph, &self.widths)?;
            let w = graph.scale(w, self.ctx.width_penalty);
            loss = graph.add(loss, w)?;
        }
        Ok((loss, total, self.losses.len()))
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Plain cross-entropy.
pub struct Clean;

impl Objective for Clean {
    fn name(&self) -> &str {
        "clean"
    }

    fn batch_loss(
        &self,
        _net: &Network,
        graph: &mut CompGraph,
        bound: &BoundNetwork,
        batch: &[Sample],
        _ctx: &StepContext,
    ) -> Result<BatchLoss> {
        check_batch(self, batch)?;
        let mut terms = Vec::with_capacity(batch.len());
        for s in batch {
            let x = graph.input(s.x.clone());
            terms.push(bound.cross_entropy(graph, x, s.y)?);
        }
        let (loss, total) = mean_node(graph, &terms)?;
        Ok(BatchLoss {
            loss,
            total,
            terms: terms.len(),
            ci_mean: None,
            si_mean: None,
        })
    }
}

/// Interval loss over the full `eps` box around each input.
pub struct Ibp;

impl Objective for Ibp {
    fn name(&self) -> &str {
        "ibp"
    }

    fn batch_loss(
        &self,
        _net: &Network,
        graph: &mut CompGraph,
        bound: &BoundNetwork,
        batch: &[Sample],
        ctx: &StepContext,
    ) -> Result<BatchLoss> {
        check_batch(self, batch)?;
        let mut acc = IntervalTerms::new(ctx);
        for s in batch {
            acc.push(graph, bound, &s.x, s.y, ctx.eps)?;
        }
        let (loss, total, terms) = acc.finish(graph)?;
        Ok(BatchLoss {
            loss,
            total,
            terms,
            ci_mean: None,
            si_mean: None,
        })
    }
}

/// Interval loss over a `tau` box centred on each input's own adversarial
/// point from `B(x, eps - tau)`.
pub struct Sabr;

impl Objective for Sabr {
    fn name(&self) -> &str {
        "sabr"
    }

    fn batch_loss(
        &self,
        net: &Network,
        graph: &mut CompGraph,
        bound: &BoundNetwork,
        batch: &[Sample],
        ctx: &StepContext,
    ) -> Result<BatchLoss> {
        check_batch(self, batch)?;
        check_radii(ctx.eps, ctx.tau)?;
        let offsets = adversarial_offsets(net, batch, ctx.eps, ctx.tau, &ctx.attack, ctx.range)?;
        let mut acc = IntervalTerms::new(ctx);
        let mut values = Vec::with_capacity(batch.len());
        for (s, v) in batch.iter().zip(&offsets) {
            values.push(acc.push(graph, bound, &s.x.add(v)?, s.y, ctx.tau)?);
        }
        let (loss, total, terms) = acc.finish(graph)?;
        Ok(BatchLoss {
            loss,
            total,
            terms,
            ci_mean: None,
            si_mean: mean(&values),
        })
    }
}

/// Cross-input small boxes: input `i` is boxed around `x_i + v_j` for every
/// other element's adversarial offset `v_j`. With `same_input` the `j = i`
/// boxes are trained on as well.
pub struct Citrus {
    pub same_input: bool,
}

impl Objective for Citrus {
    fn name(&self) -> &str {
        if self.same_input {
            "citrus-si"
        } else {
            "citrus"
        }
    }

    fn min_batch(&self) -> usize {
        if self.same_input {
            1
        } else {
            2
        }
    }

    fn batch_loss(
        &self,
        net: &Network,
        graph: &mut CompGraph,
        bound: &BoundNetwork,
        batch: &[Sample],
        ctx: &StepContext,
    ) -> Result<BatchLoss> {
        check_batch(self, batch)?;
        check_radii(ctx.eps, ctx.tau)?;
        let offsets = adversarial_offsets(net, batch, ctx.eps, ctx.tau, &ctx.attack, ctx.range)?;
        let mut acc = IntervalTerms::new(ctx);
        let (mut ci, mut si) = (Vec::new(), Vec::new());
        for (i, s) in batch.iter().enumerate() {
            for (j, v) in offsets.iter().enumerate() {
                let center = s.x.add(v)?;
                if i != j {
                    ci.push(acc.push(graph, bound, &center, s.y, ctx.tau)?);
                } else if self.same_input {
                    si.push(acc.push(graph, bound, &center, s.y, ctx.tau)?);
                } else {
                    // diagnostic only, not part of the loss
                    si.push(ibp_loss(net, &center, s.y, ctx.tau, ctx.range)?);
                }
            }
        }
        let (loss, total, terms) = acc.finish(graph)?;
        Ok(BatchLoss {
            loss,
            total,
            terms,
            ci_mean: mean(&ci),
            si_mean: mean(&si),
        })
    }
}

/// Adversarial training against one universal PGD perturbation per batch.
pub struct AdvUniversal;

impl Objective for AdvUniversal {
    fn name(&self) -> &str {
        "adv-universal"
    }

    fn batch_loss(
        &self,
        net: &Network,
        graph: &mut CompGraph,
        bound: &BoundNetwork,
        batch: &[Sample],
        ctx: &StepContext,
    ) -> Result<BatchLoss> {
        check_batch(self, batch)?;
        let u = pgd_universal(net, batch, &ctx.attack.with_eps(ctx.eps), ctx.range)?;
        let mut terms = Vec::with_capacity(batch.len());
        for s in batch {
            let x = graph.input(s.x.add(&u)?);
            terms.push(bound.cross_entropy(graph, x, s.y)?);
        }
        let (loss, total) = mean_node(graph, &terms)?;
        Ok(BatchLoss {
            loss,
            total,
            terms: terms.len(),
            ci_mean: None,
            si_mean: None,
        })
    }
}

/// Name → objective lookup.
#[derive(Clone, Default)]
pub struct ObjectiveRegistry {
    entries: BTreeMap<String, Arc<dyn Objective>>,
}

impl ObjectiveRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        r.register(Clean);
        r.register(Ibp);
        r.register(Sabr);
        r.register(Citrus { same_input: false });
        r.register(Citrus { same_input: true });
        r.register(AdvUniversal);
        r
    }

    /// Registers under [`Objective::name`], replacing any previous entry.
    pub fn register(&mut self, objective: impl Objective + 'static) {
        let objective: Arc<dyn Objective> = Arc::new(objective);
        self.entries.insert(objective.name().to_string(), objective);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Objective>> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownObjective(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

impl fmt::Debug for ObjectiveRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.names()).finish()
    }
}

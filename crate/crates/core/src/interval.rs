//! Box (interval) abstract domain.
//!
//! Affine layers map a box in centre/radius form, `c' = Wc + b` and
//! `r' = |W| r`; ReLU clamps both endpoints. Margins `o_i - o_y` are bounded
//! by folding the subtraction into the last affine layer before evaluating it
//! on the penultimate box, which is never looser than subtracting independent
//! logit bounds.

// `!(a <= b)` style checks are deliberate: NaN must fail them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use crate::data::DataRange;
use crate::error::{Error, Result};
use crate::graph::{CompGraph, NodeId};
use crate::network::{BoundLayer, BoundNetwork, Layer, Network};
use crate::tensor::{log_sum_exp, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalTensor {
    lower: Tensor,
    upper: Tensor,
}

impl IntervalTensor {
    pub fn new(lower: Tensor, upper: Tensor) -> Result<Self> {
        if lower.shape() != upper.shape() {
            return Err(Error::dim(format!(
                "interval bounds {:?} vs {:?}",
                lower.shape(),
                upper.shape()
            )));
        }
        if lower.data().iter().zip(upper.data()).any(|(l, u)| !(l <= u)) {
            return Err(Error::contract("interval lower bound exceeds upper bound"));
        }
        Ok(IntervalTensor { lower, upper })
    }

    pub fn from_center_radius(center: &Tensor, radius: &Tensor) -> Result<Self> {
        if radius.data().iter().any(|r| !(*r >= 0.0)) {
            return Err(Error::contract("interval radius must be non-negative"));
        }
        IntervalTensor::new(center.sub(radius)?, center.add(radius)?)
    }

    pub fn point(x: &Tensor) -> Self {
        IntervalTensor {
            lower: x.clone(),
            upper: x.clone(),
        }
    }

    /// The L∞ ball `B(x, eps)`, intersected with `range` when given. A centre
    /// outside `range` is first clamped into it so the box is never empty.
    pub fn ball(x: &Tensor, eps: f64, range: Option<DataRange>) -> Result<Self> {
        if !(eps >= 0.0) {
            return Err(Error::contract(format!("eps must be non-negative, got {eps}")));
        }
        let (lower, upper) = match range {
            None => (x.map(|v| v - eps), x.map(|v| v + eps)),
            Some(r) => (
                x.map(|v| r.clamp(r.clamp(v) - eps)),
                x.map(|v| r.clamp(r.clamp(v) + eps)),
            ),
        };
        Ok(IntervalTensor { lower, upper })
    }

    pub fn lower(&self) -> &Tensor {
        &self.lower
    }

    pub fn upper(&self) -> &Tensor {
        &self.upper
    }

    pub fn center(&self) -> Tensor {
        self.lower.zip_map(&self.upper, |l, u| (l + u) / 2.0).expect("same shape")
    }

    pub fn radius(&self) -> Tensor {
        self.lower.zip_map(&self.upper, |l, u| (u - l) / 2.0).expect("same shape")
    }

    pub fn contains(&self, x: &Tensor) -> bool {
        x.shape() == self.lower.shape()
            && x
                .data()
                .iter()
                .zip(self.lower.data().iter().zip(self.upper.data()))
                .all(|(v, (l, u))| l <= v && v <= u)
    }

    fn relu(&self) -> Self {
        IntervalTensor {
            lower: self.lower.map(|v| v.max(0.0)),
            upper: self.upper.map(|v| v.max(0.0)),
        }
    }

    fn affine(&self, weight: &Tensor, bias: &Tensor) -> Result<Self> {
        let c = weight.matvec(self.center().data())?.add(bias)?;
        let r = weight.abs_matvec(self.radius().data())?;
        Ok(IntervalTensor {
            lower: c.sub(&r)?,
            upper: c.add(&r)?,
        })
    }
}

fn check_box(net: &Network, region: &IntervalTensor) -> Result<()> {
    if region.lower.len() != net.input_dim() {
        return Err(Error::dim(format!(
            "box has {} dims, network expects {}",
            region.lower.len(),
            net.input_dim()
        )));
    }
    Ok(())
}

/// Sound output box of `net` over `region`.
pub fn propagate_box(net: &Network, region: &IntervalTensor) -> Result<IntervalTensor> {
    check_box(net, region)?;
    let mut b = region.clone();
    for layer in net.layers() {
        b = match layer {
            Layer::Affine { weight, bias } => b.affine(weight, bias)?,
            Layer::Relu => b.relu(),
        };
    }
    Ok(b)
}

/// Sound upper bounds on `o_i - o_y` over a box. Entry `y` is exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginBounds {
    pub upper: Tensor,
    pub label: usize,
}

impl MarginBounds {
    /// True when every wrong class is provably below the label.
    pub fn certified(&self) -> bool {
        self.upper
            .data()
            .iter()
            .enumerate()
            .all(|(i, &m)| i == self.label || m < 0.0)
    }

    /// `ln(1 + Σ_{i≠y} exp(m_i))`; the zero entry at `y` supplies the 1.
    pub fn ibp_loss(&self) -> f64 {
        log_sum_exp(self.upper.data())
    }
}

fn split_last_affine(net: &Network) -> Result<(&[Layer], &Tensor, &Tensor)> {
    match net.layers().split_last() {
        Some((Layer::Affine { weight, bias }, body)) => Ok((body, weight, bias)),
        _ => Err(Error::contract("margin bounds need a final affine layer")),
    }
}

/// Margin bounds with last-layer elision.
pub fn margin_bounds(net: &Network, region: &IntervalTensor, y: usize) -> Result<MarginBounds> {
    check_box(net, region)?;
    let (body, weight, bias) = split_last_affine(net)?;
    let (rows, cols) = weight.dims2()?;
    if y >= rows {
        return Err(Error::dim(format!("label {y} out of range for {rows} classes")));
    }
    let mut b = region.clone();
    for layer in body {
        b = match layer {
            Layer::Affine { weight, bias } => b.affine(weight, bias)?,
            Layer::Relu => b.relu(),
        };
    }
    let (c, r) = (b.center(), b.radius());
    let wy = weight.row(y);
    let upper = (0..rows)
        .map(|i| {
            if i == y {
                return 0.0;
            }
            let wi = weight.row(i);
            let mut m = bias.data()[i] - bias.data()[y];
            for k in 0..cols {
                let d = wi[k] - wy[k];
                m += d * c.data()[k] + d.abs() * r.data()[k];
            }
            m
        })
        .collect();
    Ok(MarginBounds {
        upper: Tensor::vector(upper),
        label: y,
    })
}

/// `ō_i - o̲_y` from independent logit bounds (no elision).
pub fn naive_margin_bounds(net: &Network, region: &IntervalTensor, y: usize) -> Result<Tensor> {
    let out = propagate_box(net, region)?;
    if y >= out.upper.len() {
        return Err(Error::dim(format!("label {y} out of range")));
    }
    let lo_y = out.lower.data()[y];
    Ok(Tensor::vector(
        out.upper
            .data()
            .iter()
            .enumerate()
            .map(|(i, &u)| if i == y { 0.0 } else { u - lo_y })
            .collect(),
    ))
}

pub fn ibp_loss(
    net: &Network,
    x: &Tensor,
    y: usize,
    eps: f64,
    range: Option<DataRange>,
) -> Result<f64> {
    Ok(margin_bounds(net, &IntervalTensor::ball(x, eps, range)?, y)?.ibp_loss())
}

/// Sound but incomplete: `true` proves no perturbation in `B(0, eps)` changes
/// the prediction away from `y`.
pub fn certify_individual(
    net: &Network,
    x: &Tensor,
    y: usize,
    eps: f64,
    range: Option<DataRange>,
) -> Result<bool> {
    Ok(margin_bounds(net, &IntervalTensor::ball(x, eps, range)?, y)?.certified())
}

/// Graph nodes of one differentiable interval-loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct IbpTerm {
    pub loss: NodeId,
    /// Upper margin bounds, entry `y` fixed at zero.
    pub margins: NodeId,
    /// Radius of the penultimate box (used by the optional width penalty).
    pub radius: NodeId,
}

/// Differentiable `ln(1 + Σ_{i≠y} exp(m_i))` over `B(center, radius)`.
pub fn ibp_term(
    graph: &mut CompGraph,
    net: &BoundNetwork,
    center: &Tensor,
    y: usize,
    radius: f64,
    range: Option<DataRange>,
) -> Result<IbpTerm> {
    let region = IntervalTensor::ball(center, radius, range)?;
    let (body, last) = match net.layers().split_last() {
        Some((BoundLayer::Affine { weight, bias }, body)) => (body, (*weight, *bias)),
        _ => return Err(Error::contract("margin bounds need a final affine layer")),
    };
    let mut c = graph.input(region.center());
    let mut r = graph.input(region.radius());
    for layer in body {
        match *layer {
            BoundLayer::Affine { weight, bias } => {
                let wc = graph.matvec(weight, c)?;
                c = graph.add(wc, bias)?;
                r = graph.abs_matvec(weight, r)?;
            }
            BoundLayer::Relu => {
                let lo = graph.sub(c, r)?;
                let hi = graph.add(c, r)?;
                let lo = graph.relu(lo);
                let hi = graph.relu(hi);
                let sum = graph.add(hi, lo)?;
                let diff = graph.sub(hi, lo)?;
                c = graph.scale(sum, 0.5);
                r = graph.scale(diff, 0.5);
            }
        }
    }
    let (weight, bias) = last;
    let d = graph.row_diff(weight, y)?;
    let db = graph.elem_diff(bias, y)?;
    let dc = graph.matvec(d, c)?;
    let dr = graph.abs_matvec(d, r)?;
    let m = graph.add(dc, dr)?;
    let margins = graph.add(m, db)?;
    let loss = graph.log_sum_exp(margins);
    Ok(IbpTerm {
        loss,
        margins,
        radius: r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_weights, Arch};

    fn affine(w: Vec<f64>, rows: usize, cols: usize, b: Vec<f64>) -> Layer {
        Layer::affine(Tensor::matrix(rows, cols, w).unwrap(), Tensor::vector(b)).unwrap()
    }

    #[test]
    fn affine_radius_is_abs_weight_times_radius() {
        let net = Network::new(vec![affine(vec![1.0, -1.0], 1, 2, vec![0.0])]).unwrap();
        let b = IntervalTensor::from_center_radius(
            &Tensor::vector(vec![0.0, 0.0]),
            &Tensor::vector(vec![1.0, 1.0]),
        )
        .unwrap();
        let out = propagate_box(&net, &b).unwrap();
        assert_eq!(out.lower().data(), &[-2.0]);
        assert_eq!(out.upper().data(), &[2.0]);
    }

    #[test]
    fn relu_clamps_endpoints() {
        let net = Network::new(vec![affine(vec![1.0], 1, 1, vec![0.0]), Layer::Relu]).unwrap();
        let b = IntervalTensor::new(Tensor::vector(vec![-1.0]), Tensor::vector(vec![2.0])).unwrap();
        let out = propagate_box(&net, &b).unwrap();
        assert_eq!((out.lower().data()[0], out.upper().data()[0]), (0.0, 2.0));
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(IntervalTensor::new(Tensor::vector(vec![1.0]), Tensor::vector(vec![0.0])).is_err());
        assert!(IntervalTensor::from_center_radius(
            &Tensor::vector(vec![0.0]),
            &Tensor::vector(vec![-1.0])
        )
        .is_err());
        assert!(IntervalTensor::ball(&Tensor::vector(vec![0.0]), -0.1, None).is_err());
    }

    #[test]
    fn ball_respects_range_even_for_outside_centres() {
        let b = IntervalTensor::ball(&Tensor::vector(vec![0.05, 1.3]), 0.1, Some(DataRange::UNIT))
            .unwrap();
        assert_eq!(b.lower().data(), &[0.0, 0.9]);
        assert!((b.upper().data()[0] - 0.15).abs() < 1e-15);
        assert_eq!(b.upper().data()[1], 1.0);
    }

    #[test]
    fn point_box_margins_are_exact() {
        let net = init_weights(&Arch(vec![2, 8, 3]), 4).unwrap();
        let x = Tensor::vector(vec![0.3, -0.2]);
        let logits = net.forward(&x).unwrap();
        let y = logits.argmax();
        let m = margin_bounds(&net, &IntervalTensor::point(&x), y).unwrap();
        for i in 0..3 {
            let exact = logits.data()[i] - logits.data()[y];
            assert!((m.upper.data()[i] - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_margin_grows_by_twice_radius() {
        let net = Network::new(vec![affine(vec![1.0, 0.0, 0.0, 1.0], 2, 2, vec![0.0, 0.0])])
            .unwrap();
        let x = Tensor::vector(vec![2.0, 0.5]);
        let r = 0.3;
        let m = margin_bounds(&net, &IntervalTensor::ball(&x, r, None).unwrap(), 0).unwrap();
        assert!((m.upper.data()[1] - ((0.5 - 2.0) + 2.0 * r)).abs() < 1e-12);
        assert_eq!(m.upper.data()[0], 0.0);
    }

    #[test]
    fn ibp_loss_formula_values() {
        let m = MarginBounds {
            upper: Tensor::vector(vec![0.0, -20.0, -20.0]),
            label: 0,
        };
        let expected = (2.0 * (-20f64).exp()).ln_1p();
        assert!((m.ibp_loss() - expected).abs() < 1e-12 * expected);
        let tied = MarginBounds {
            upper: Tensor::vector(vec![0.0, 0.0]),
            label: 1,
        };
        assert!((tied.ibp_loss() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn certify_at_zero_radius_is_classification() {
        let net = init_weights(&Arch(vec![2, 6, 2]), 8).unwrap();
        let x = Tensor::vector(vec![0.7, 0.1]);
        let pred = net.predict(&x).unwrap();
        assert!(certify_individual(&net, &x, pred, 0.0, None).unwrap());
        assert!(!certify_individual(&net, &x, 1 - pred, 0.0, None).unwrap());
    }

    #[test]
    fn margin_bounds_need_final_affine() {
        let net = Network::new(vec![affine(vec![1.0, 0.0, 0.0, 1.0], 2, 2, vec![0.0; 2]), Layer::Relu])
            .unwrap();
        let b = IntervalTensor::point(&Tensor::vector(vec![0.0, 0.0]));
        assert!(matches!(margin_bounds(&net, &b, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn graph_term_matches_direct() {
        let net = init_weights(&Arch(vec![2, 8, 8, 3]), 12).unwrap();
        let x = Tensor::vector(vec![0.2, -0.4]);
        let mut g = CompGraph::new();
        let bound = net.bind(&mut g);
        let term = ibp_term(&mut g, &bound, &x, 1, 0.15, None).unwrap();
        let direct = margin_bounds(&net, &IntervalTensor::ball(&x, 0.15, None).unwrap(), 1).unwrap();
        for (a, b) in g.value(term.margins).data().iter().zip(direct.upper.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let l = g.value(term.loss).item().unwrap();
        assert!((l - ibp_loss(&net, &x, 1, 0.15, None).unwrap()).abs() < 1e-12);
    }
}
